"""Grayscale renderers for kernels, feature maps, and co-occurrence overlays,
plus a byte-exact binary PGM writer.

Kernel heatmaps normalize weights by the clip bound C2, so black is 0 and
white is a weight at (or above) the bound. Feature maps are rescaled from
[0, 1] to [0, 255] with clamping. All quantization uses round-half-up so the
mapping is reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkSpec, network_forward
from .tml import TmlKernels


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixel array {self.pixels.shape} does not match "
                f"{self.height}x{self.width}"
            )


def _quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> u8 with clamping and round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _gray(values: np.ndarray) -> GrayImage:
    px = _quantize(values)
    return GrayImage(width=px.shape[1], height=px.shape[0], pixels=px)


def render_kernel_heatmap(kernels: TmlKernels, m: int, channel: int = 0) -> GrayImage:
    """One kernel slice as a heatmap: pixel = round(255 * clamp(w / c2, 0, 1))."""
    cfg = kernels.config
    if not 0 <= m < cfg.num_kernels:
        raise IndexError(f"kernel index {m} out of range 0..{cfg.num_kernels - 1}")
    if not 0 <= channel < cfg.in_channels:
        raise IndexError(f"channel {channel} out of range 0..{cfg.in_channels - 1}")
    return _gray(kernels.weights[:, :, channel, m] / cfg.c2)


def render_kernel_heatmaps(kernels: TmlKernels, m: int) -> list[GrayImage]:
    """One heatmap per input channel of kernel m."""
    return [render_kernel_heatmap(kernels, m, k) for k in range(kernels.config.in_channels)]


def render_feature_map(y: np.ndarray, m: int) -> GrayImage:
    """Output map m rescaled from [0, 1] to [0, 255] (values above 1 clamp)."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError("feature volume must be (rows, cols, maps)")
    if not 0 <= m < y.shape[2]:
        raise IndexError(f"feature map {m} out of range 0..{y.shape[2] - 1}")
    return _gray(y[:, :, m])


def upsample_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic nearest-neighbor resize: source index floor(i * in / out)."""
    in_h, in_w = img.shape
    rows = (np.arange(out_h) * in_h) // out_h
    cols = (np.arange(out_w) * in_w) // out_w
    return img[rows[:, None], cols[None, :]]


def _coocc_structure(spec: NetworkSpec):
    """Locate the multiplication layer -> gap -> fc(classes) tail; the tracing
    procedure needs the pooled kernel outputs wired straight into the
    classifier."""
    kinds = [l.kind for l in spec.layers]
    if spec.join_at is not None:
        raise ValueError("co-occurrence tracing needs a single-chain network")
    try:
        t = kinds.index("tml")
    except ValueError:
        raise ValueError("network has no multiplication layer") from None
    if kinds[t + 1 :] != ["gap", "fc", "softmax_xent_head"]:
        raise ValueError(
            "co-occurrence tracing expects ... -> tml -> gap -> fc -> head, "
            f"got {kinds[t:]}"
        )
    return t, t + 2


def cooc_heat(
    spec: NetworkSpec,
    image: np.ndarray,
    target_class: int,
    nonzero_frac: float = 0.05,
):
    """Trace the strongest co-occurrence evidence for a class.

    Runs the forward pass, picks the kernel behind the largest classifier
    weight for the target class, selects the input feature maps under that
    kernel's above-threshold cells (weight > nonzero_frac * c2), and averages
    them upsampled to the input size.

    Returns (heat, kernel_index, channel_indices).
    """
    t_idx, fc_idx = _coocc_structure(spec)
    layer = spec.layers[t_idx]
    if not 0 <= target_class < spec.num_classes:
        raise IndexError(f"class {target_class} out of range")
    _logits, trace = network_forward(spec, np.asarray(image)[None], train_mode=False)
    x_tml, _y_tml = trace.caches[t_idx]
    fc_w = spec.params[fc_idx]["w"]  # (num_kernels, classes)
    m = int(np.argmax(fc_w[:, target_class]))
    bank = spec.params[t_idx]["w"]
    threshold = nonzero_frac * layer.tml.c2
    cell_max = bank[:, :, :, m].max(axis=(0, 1))  # strongest cell per channel
    channels = np.flatnonzero(cell_max > threshold)
    if channels.size == 0:
        channels = np.array([int(np.argmax(cell_max))])
    in_h, in_w, _ = spec.input_shape
    heat = np.zeros((in_h, in_w))
    for k in channels:
        heat += upsample_nearest(x_tml[0, :, :, k], in_h, in_w)
    heat /= channels.size
    return heat, m, channels


def cooc_highlight(
    spec: NetworkSpec,
    image: np.ndarray,
    target_class: int,
    nonzero_frac: float = 0.05,
) -> GrayImage:
    """Alpha-blend the traced co-occurrence heat over the input image:
    out = clamp(0.5 * input + 0.5 * heat)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 1:
        raise ValueError("overlay rendering expects a single-channel input image")
    heat, _m, _channels = cooc_heat(spec, image, target_class, nonzero_frac)
    return _gray(0.5 * image[:, :, 0] + 0.5 * heat)


def count_active_cells(kernels: TmlKernels, nonzero_frac: float = 0.05) -> np.ndarray:
    """Above-threshold cell count per kernel (threshold nonzero_frac * c2)."""
    threshold = nonzero_frac * kernels.config.c2
    return (kernels.weights > threshold).sum(axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# binary PGM ("P5"), maxval 255
# ---------------------------------------------------------------------------
# Exact layout: b"P5\n<width> <height>\n255\n" followed by height*width
# pixel bytes in row-major order. A 1x1 white image is the 12 bytes
# b"P5\n1 1\n255\n\xff".


def write_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.pixels.tobytes())


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # the single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = blob[pos:]
    if len(payload) != width * height:
        raise ValueError(f"{path}: expected {width * height} pixels, found {len(payload)}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(width=width, height=height, pixels=px.copy())
