"""Dense rank-3 tensor substrate shared by every other module.

A tensor is a float64 numpy array of shape ``(rows, cols, channels)`` stored
in row-major (C) order, so element ``(i, j, k)`` sits at flat offset
``i*cols*channels + j*channels + k``. The layout is fixed so that binary
dumps of parameter arrays are reproducible byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Guard for the flat size product; beyond this numpy indexing breaks down.
_MAX_ELEMENTS = 2**62


@dataclass(frozen=True)
class Shape:
    """Dimensions of a feature volume: rows x cols x channels."""

    rows: int
    cols: int
    channels: int

    def __post_init__(self):
        for name in ("rows", "cols", "channels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"Shape.{name} must be a positive integer, got {v!r}")
        if self.rows * self.cols * self.channels > _MAX_ELEMENTS:
            raise ValueError("shape size product overflows addressable range")

    @property
    def size(self) -> int:
        return self.rows * self.cols * self.channels

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.rows, self.cols, self.channels)


def tensor_new(shape: Shape, fill: float = 0.0) -> np.ndarray:
    """Allocate a tensor of the given shape with every entry equal to `fill`."""
    return np.full(shape.as_tuple(), float(fill), dtype=np.float64)


def as_tensor(values) -> np.ndarray:
    """Coerce array-like data to a float64 rank-3 tensor, validating rank."""
    t = np.asarray(values, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None]
    if t.ndim != 3:
        raise ValueError(f"tensor must be rank 3 (rows, cols, channels), got rank {t.ndim}")
    if min(t.shape) < 1:
        raise ValueError(f"tensor dimensions must all be >= 1, got {t.shape}")
    return t


def shape_of(t: np.ndarray) -> Shape:
    r, c, k = t.shape
    return Shape(int(r), int(c), int(k))


def window(t: np.ndarray, i: int, j: int, h: int, w: int) -> np.ndarray:
    """View of the h x w x channels sub-volume anchored at (i, j).

    Entry (p, q, k) of the result equals t[i+p, j+q, k]. The window must
    lie fully inside the tensor.
    """
    rows, cols, _ = t.shape
    if h < 1 or w < 1:
        raise IndexError(f"window extent must be positive, got {h}x{w}")
    if i < 0 or j < 0 or i + h > rows or j + w > cols:
        raise IndexError(
            f"window ({i},{j})+{h}x{w} out of bounds for tensor {rows}x{cols}"
        )
    return t[i : i + h, j : j + w, :]


def reduce_mean(t: np.ndarray, per_channel: bool = False):
    """Arithmetic mean of a tensor: per channel map when `per_channel`, else global.

    Matches the pooling step that averages each feature map down to one value.
    """
    if t.size == 0:
        raise ValueError("reduce_mean of an empty tensor")
    if per_channel:
        return t.mean(axis=(0, 1))
    return float(t.mean())
