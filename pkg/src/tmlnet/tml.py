"""Trainable multiplication layer: products of inputs raised to learned exponents.

The layer slides an H x W x K bank of M exponent kernels over a nonnegative
input volume and, at each valid position, multiplies the covered entries
raised to the kernel weights:

    y[i, j, m] = prod_{p,q,k} (x[i+p, j+q, k] + eps) ** w[p, q, k, m]

Products are evaluated in the log domain (sum of w * log(x + eps), then exp)
so long chains of small factors neither underflow nor overflow. With binary
weights this reduces to a local auto-correlation integrand; training the
weights under the clip/rescale projection below learns which positions get
multiplied together.

Weight constraints: every weight stays in [0, C2] and each kernel's weights
sum to C1. They are enforced by alternating projection (clip into the box,
then rescale each kernel to the target sum), applied after every gradient
update rather than solved exactly; the rescale may transiently push a weight
above C2 until the next step's clip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL_MAGIC = b"TMLK"
KERNEL_FORMAT_VERSION = 1


class DegenerateKernelError(RuntimeError):
    """A kernel clipped to all zeros, so rescaling to a fixed sum is undefined.

    Carries the offending kernel indices; callers typically reinitialize those
    kernels uniformly (see `reinit_kernels`) and continue training.
    """

    def __init__(self, kernel_indices):
        self.kernel_indices = tuple(int(m) for m in kernel_indices)
        super().__init__(
            f"kernel(s) {self.kernel_indices} are all-zero after clipping; "
            "rescale to the target sum is undefined"
        )


@dataclass(frozen=True)
class TmlConfig:
    """Kernel-bank geometry plus the constraint constants.

    c1: target sum of each kernel's weights (after projection).
    c2: per-weight upper bound used by the clip step.
    eps: offset added inside the logarithm so zero inputs stay finite.
    """

    kernel_h: int
    kernel_w: int
    in_channels: int
    num_kernels: int
    c1: float = 1.0
    c2: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "num_kernels"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"TmlConfig.{name} must be a positive integer, got {v!r}")
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")
        if self.c2 > self.c1:
            raise ValueError(f"c2 ({self.c2}) must not exceed c1 ({self.c1})")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.c1 / self.c2 > self.weight_count:
            raise ValueError(
                f"constraints infeasible: c1/c2 = {self.c1 / self.c2} exceeds "
                f"kernel cell count {self.weight_count}"
            )

    @property
    def weight_count(self) -> int:
        """Cells per kernel: H * W * K."""
        return self.kernel_h * self.kernel_w * self.in_channels

    def weights_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, self.in_channels, self.num_kernels)


@dataclass
class TmlKernels:
    """Exponent-weight bank: weights[p, q, k, m] is cell (p, q) of kernel m for channel k."""

    config: TmlConfig
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != self.config.weights_shape():
            raise ValueError(
                f"weights shape {self.weights.shape} does not match config "
                f"{self.config.weights_shape()}"
            )

    def copy(self) -> "TmlKernels":
        return TmlKernels(self.config, self.weights.copy())


def init_kernels(config: TmlConfig, rng: np.random.Generator) -> TmlKernels:
    """Draw weights uniformly from [0, c2], then project once so the bank starts feasible."""
    w = rng.uniform(0.0, config.c2, size=config.weights_shape())
    return project_kernels(TmlKernels(config, w))


def uniform_kernels(config: TmlConfig) -> TmlKernels:
    """All-cells-equal bank: every kernel sums to c1 exactly."""
    w = np.full(config.weights_shape(), config.c1 / config.weight_count)
    return TmlKernels(config, w)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _check_input(xb: np.ndarray, config: TmlConfig) -> None:
    if xb.shape[-1] != config.in_channels:
        raise ValueError(
            f"input has {xb.shape[-1]} channels, kernels expect {config.in_channels}"
        )
    if xb.shape[-3] < config.kernel_h or xb.shape[-2] < config.kernel_w:
        raise ValueError(
            f"input {xb.shape[-3]}x{xb.shape[-2]} smaller than kernel "
            f"{config.kernel_h}x{config.kernel_w}"
        )
    if np.min(xb) < 0:
        raise ValueError("multiplication layer requires nonnegative inputs")


def forward_batch(xb: np.ndarray, kernels: TmlKernels) -> np.ndarray:
    """Batched forward: xb (B, N1, N2, K) -> (B, N1-H+1, N2-W+1, M)."""
    cfg = kernels.config
    _check_input(xb, cfg)
    z = np.log(xb + cfg.eps)
    win = sliding_window_view(z, (cfg.kernel_h, cfg.kernel_w), axis=(1, 2))
    # win: (B, N1', N2', K, H, W); weights: (H, W, K, M)
    s = np.einsum("bijkpq,pqkm->bijm", win, kernels.weights, optimize=True)
    return np.exp(s)


def backward_weights_batch(
    xb: np.ndarray, yb: np.ndarray, d_yb: np.ndarray, kernels: TmlKernels
) -> np.ndarray:
    """Gradient w.r.t. weights, summed over batch and output positions."""
    cfg = kernels.config
    if yb.shape != d_yb.shape:
        raise ValueError(f"d_y shape {d_yb.shape} does not match y shape {yb.shape}")
    z = np.log(xb + cfg.eps)
    win = sliding_window_view(z, (cfg.kernel_h, cfg.kernel_w), axis=(1, 2))
    g = d_yb * yb
    return np.einsum("bijkpq,bijm->pqkm", win, g, optimize=True)


def backward_input_batch(
    xb: np.ndarray, yb: np.ndarray, d_yb: np.ndarray, kernels: TmlKernels
) -> np.ndarray:
    """Gradient w.r.t. the input volume (chain rule through the log form)."""
    cfg = kernels.config
    if yb.shape != d_yb.shape:
        raise ValueError(f"d_y shape {d_yb.shape} does not match y shape {yb.shape}")
    g = d_yb * yb  # (B, N1', N2', M)
    d_x = np.zeros_like(xb)
    out_h, out_w = g.shape[1], g.shape[2]
    for p in range(cfg.kernel_h):
        for q in range(cfg.kernel_w):
            # weights[p, q]: (K, M); scatter each kernel cell's share onto the
            # input positions it reads.
            d_x[:, p : p + out_h, q : q + out_w, :] += np.einsum(
                "bijm,km->bijk", g, kernels.weights[p, q], optimize=True
            )
    d_x /= xb + cfg.eps
    return d_x


def tml_forward(x: np.ndarray, kernels: TmlKernels) -> np.ndarray:
    """Forward pass for a single input volume (N1, N2, K) -> (N1', N2', M)."""
    x = np.asarray(x, dtype=np.float64)
    return forward_batch(x[None], kernels)[0]


def tml_backward_weights(
    x: np.ndarray, y: np.ndarray, d_y: np.ndarray, kernels: TmlKernels
) -> np.ndarray:
    """d(loss)/d(weights) for one sample: sum over output positions of d_y * y * log(x + eps)."""
    x = np.asarray(x, dtype=np.float64)
    return backward_weights_batch(x[None], y[None], np.asarray(d_y)[None], kernels)


def tml_backward_input(
    x: np.ndarray, y: np.ndarray, d_y: np.ndarray, kernels: TmlKernels
) -> np.ndarray:
    """d(loss)/d(input) for one sample."""
    x = np.asarray(x, dtype=np.float64)
    return backward_input_batch(x[None], y[None], np.asarray(d_y)[None], kernels)[0]


# ---------------------------------------------------------------------------
# constraint projection
# ---------------------------------------------------------------------------


def clip_step(kernels: TmlKernels) -> TmlKernels:
    """Projection step A: clamp every weight into [0, c2]."""
    if not np.all(np.isfinite(kernels.weights)):
        raise ValueError("kernel weights must be finite before projection")
    return TmlKernels(kernels.config, np.clip(kernels.weights, 0.0, kernels.config.c2))


def rescale_step(kernels: TmlKernels) -> TmlKernels:
    """Projection step B: scale each kernel so its weights sum to c1.

    Raises DegenerateKernelError if any kernel sums to zero.
    """
    sums = kernels.weights.sum(axis=(0, 1, 2))
    dead = np.flatnonzero(sums == 0.0)
    if dead.size:
        raise DegenerateKernelError(dead)
    return TmlKernels(kernels.config, kernels.weights * (kernels.config.c1 / sums))


def project_kernels(kernels: TmlKernels) -> TmlKernels:
    """Clip into [0, c2], then rescale each kernel to sum c1 — in exactly that order.

    The rescale can push individual weights above c2 when the clipped sum falls
    short of c1; that transient excess is deliberate and gets clipped on the
    next call.
    """
    return rescale_step(clip_step(kernels))


def reinit_kernels(kernels: TmlKernels, kernel_indices) -> TmlKernels:
    """Replace the listed kernels with the uniform feasible bank value c1 / (H*W*K)."""
    out = kernels.copy()
    out.weights[..., list(kernel_indices)] = kernels.config.c1 / kernels.config.weight_count
    return out


def kernel_l1(kernels: TmlKernels) -> float:
    """Sum of absolute weights over the whole bank."""
    return float(np.abs(kernels.weights).sum())


# ---------------------------------------------------------------------------
# serialization: flat little-endian binary bank
# ---------------------------------------------------------------------------
# Layout: magic "TMLK", version u32, H, W, K, M u32, c1, c2, eps f64 (all
# little-endian), then H*W*K*M f64 weights in C order of (p, q, k, m).


def save_kernels(kernels: TmlKernels, path) -> None:
    cfg = kernels.config
    header = KERNEL_MAGIC + struct.pack(
        "<5I3d",
        KERNEL_FORMAT_VERSION,
        cfg.kernel_h,
        cfg.kernel_w,
        cfg.in_channels,
        cfg.num_kernels,
        cfg.c1,
        cfg.c2,
        cfg.eps,
    )
    body = np.ascontiguousarray(kernels.weights, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def load_kernels(path) -> TmlKernels:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != KERNEL_MAGIC:
        raise ValueError(f"{path}: not a kernel bank (bad magic {blob[:4]!r})")
    head_len = 4 + struct.calcsize("<5I3d")
    version, h, w, k, m, c1, c2, eps = struct.unpack("<5I3d", blob[4:head_len])
    if version != KERNEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported kernel bank version {version}")
    cfg = TmlConfig(h, w, k, m, c1=c1, c2=c2, eps=eps)
    expected = head_len + 8 * cfg.weight_count * m
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated kernel bank ({len(blob)} of {expected} bytes)")
    weights = np.frombuffer(blob[head_len:], dtype="<f8").reshape(cfg.weights_shape())
    return TmlKernels(cfg, weights.astype(np.float64))
