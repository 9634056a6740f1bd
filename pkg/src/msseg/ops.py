"""Dense float64 array primitives: convolution, resampling, channel softmax.

Conventions used throughout the package:

* feature fields and label fields are channel-first ``(C, H, W)`` float64
  arrays; single images are ``(1, H, W)``;
* convolution kernels are ``(out_channels, in_channels, kH, kW)`` with odd
  spatial extents whenever a "same" padding mode is requested;
* ``conv2d`` computes cross-correlation (no kernel flip), the convention of
  learned convolutions;
* all operations are pure and deterministic: identical inputs give
  bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAME_ZERO = "same-zero"
SAME_REPLICATE = "same-replicate"
VALID = "valid"

_PAD_MODES = {SAME_ZERO: "constant", SAME_REPLICATE: "edge"}


@dataclass
class ConvKernel:
    """Weights ``(O, C, kH, kW)`` plus an optional per-output-channel bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ValueError(f"kernel weights must be 4-d (O,C,kH,kW), got shape {self.weights.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
                )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def as_field(x, name: str = "input") -> np.ndarray:
    """Coerce to a float64 (C, H, W) array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"{name} must be 3-d (C,H,W), got shape {x.shape}")
    return x


def _check_conv_args(x: np.ndarray, kernel: ConvKernel, stride: int, padding: str):
    if kernel.in_channels != x.shape[0]:
        raise ValueError(
            f"kernel expects {kernel.in_channels} input channels, field has {x.shape[0]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding not in (SAME_ZERO, SAME_REPLICATE, VALID):
        raise ValueError(f"unknown padding mode {padding!r}")
    kh, kw = kernel.weights.shape[2:]
    if padding != VALID and (kh % 2 == 0 or kw % 2 == 0):
        raise ValueError(f"same padding requires odd kernel extents, got {kh}x{kw}")


def _padded_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: str) -> np.ndarray:
    """Sliding (C, Ho, Wo, kh, kw) view of the padded field, stride applied."""
    if padding == VALID:
        xp = x
    else:
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), mode=_PAD_MODES[padding])
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernel: ConvKernel, stride: int = 1, padding: str = SAME_ZERO) -> np.ndarray:
    """Cross-correlate a (C, H, W) field with a kernel.

    Same-padding output is ``ceil(H / stride) x ceil(W / stride)``.
    """
    x = as_field(x)
    _check_conv_args(x, kernel, stride, padding)
    kh, kw = kernel.weights.shape[2:]
    win = _padded_windows(x, kh, kw, stride, padding)
    out = np.tensordot(kernel.weights, win, axes=([1, 2, 3], [0, 3, 4]))
    if kernel.bias is not None:
        out = out + kernel.bias[:, None, None]
    return out


def conv2d_kernel_grad(x, grad_out, kshape, stride: int = 1, padding: str = SAME_ZERO) -> np.ndarray:
    """Gradient of ``conv2d`` w.r.t. the kernel weights, given d(loss)/d(output)."""
    x = as_field(x)
    grad_out = as_field(grad_out, "grad_out")
    kh, kw = kshape[2], kshape[3]
    win = _padded_windows(x, kh, kw, stride, padding)
    return np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))


def _fold_padding(zp: np.ndarray, ph: int, pw: int, padding: str) -> np.ndarray:
    """Adjoint of np.pad: crop for zero padding, fold borders for replicate."""
    if ph == 0 and pw == 0:
        return zp
    if padding == SAME_ZERO:
        return zp[:, ph:zp.shape[1] - ph, pw:zp.shape[2] - pw]
    # replicate: pad = pad_cols . pad_rows, so the adjoint folds columns first
    if pw > 0:
        zp = zp.copy()
        zp[:, :, pw] += zp[:, :, :pw].sum(axis=2)
        zp[:, :, -pw - 1] += zp[:, :, -pw:].sum(axis=2)
        zp = zp[:, :, pw:zp.shape[2] - pw]
    if ph > 0:
        zp = zp.copy()
        zp[:, ph, :] += zp[:, :ph, :].sum(axis=1)
        zp[:, -ph - 1, :] += zp[:, -ph:, :].sum(axis=1)
        zp = zp[:, ph:zp.shape[1] - ph, :]
    return zp


def transpose_conv2d(
    y,
    kernel: ConvKernel,
    stride: int = 1,
    padding: str = SAME_ZERO,
    output_shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Exact linear adjoint of ``conv2d`` with the same kernel, stride and padding.

    Maps an (O, Ho, Wo) field back to input space (C, H, W) so that
    ``<conv2d(x), y> == <x, transpose_conv2d(y)>``.  The bias is ignored (the
    adjoint of the linear part).  ``output_shape`` pins (H, W) when the strided
    forward shape is ambiguous; the default doubles the extents for stride 2.
    """
    y = as_field(y, "input")
    if kernel.out_channels != y.shape[0]:
        raise ValueError(
            f"kernel produces {kernel.out_channels} output channels, field has {y.shape[0]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    kh, kw = kernel.weights.shape[2:]
    ho, wo = y.shape[1:]
    if output_shape is None:
        if padding == VALID:
            output_shape = ((ho - 1) * stride + kh, (wo - 1) * stride + kw)
        else:
            output_shape = (stride * ho, stride * wo)
    h, w = output_shape
    if padding != VALID and int(np.ceil(h / stride)) != ho:
        raise ValueError(f"output_shape {output_shape} is inconsistent with input extent {ho}")
    ph, pw = (0, 0) if padding == VALID else ((kh - 1) // 2, (kw - 1) // 2)
    zp = np.zeros((kernel.in_channels, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            # scatter each kernel tap back onto the strided source positions
            contrib = np.tensordot(kernel.weights[:, :, u, v], y, axes=([0], [0]))
            zp[:, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib
    return _fold_padding(zp, ph, pw, padding)


def convolve_channels(x, k2d, padding: str = SAME_REPLICATE) -> np.ndarray:
    """Correlate every channel of a (C, H, W) field with one 2-d kernel."""
    x = as_field(x)
    k2d = np.asarray(k2d, dtype=np.float64)
    if k2d.ndim != 2 or k2d.shape[0] % 2 == 0 or k2d.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-d with odd extents, got shape {k2d.shape}")
    if padding not in (SAME_ZERO, SAME_REPLICATE):
        raise ValueError(f"unknown padding mode {padding!r}")
    win = _padded_windows(x, k2d.shape[0], k2d.shape[1], 1, padding)
    return np.einsum("chwuv,uv->chw", win, k2d)


def convolve_channels_kernel_grad(x, grad_out, kshape, padding: str = SAME_ZERO) -> np.ndarray:
    """Gradient of ``convolve_channels`` w.r.t. its shared 2-d kernel."""
    x = as_field(x)
    grad_out = as_field(grad_out, "grad_out")
    win = _padded_windows(x, kshape[0], kshape[1], 1, padding)
    return np.einsum("chwuv,chw->uv", win, grad_out)


def _lerp_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices/weights for a 2x bilinear upsample, align-corners false."""
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, float(n - 1))
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, src - i0


def upsample_bilinear2x(x) -> np.ndarray:
    """Bilinear 2x upsample of a (C, H, W) field (sample centers at (i+0.5)/2 - 0.5)."""
    x = as_field(x)
    i0, i1, wh = _lerp_indices(x.shape[1])
    j0, j1, ww = _lerp_indices(x.shape[2])
    rows = x[:, i0, :] * (1.0 - wh)[None, :, None] + x[:, i1, :] * wh[None, :, None]
    return rows[:, :, j0] * (1.0 - ww)[None, None, :] + rows[:, :, j1] * ww[None, None, :]


def upsample_to(x, shape: tuple[int, int]) -> np.ndarray:
    """2x bilinear upsample cropped on the bottom/right to an exact fine shape."""
    x = as_field(x)
    h, w = shape
    h2, w2 = 2 * x.shape[1], 2 * x.shape[2]
    if not (h2 - 1 <= h <= h2 and w2 - 1 <= w <= w2):
        raise ValueError(f"cannot prolong {x.shape[1:]} to {shape}: not a ceil-halving pair")
    return upsample_bilinear2x(x)[:, :h, :w]


def restrict_average(x) -> np.ndarray:
    """Non-overlapping 2x2 block means; ragged edge blocks average what exists.

    Output extents are ``ceil(H/2) x ceil(W/2)``; extent-1 axes pass through.
    """
    x = as_field(x)
    _, h, w = x.shape
    ih = np.arange(0, h, 2)
    iw = np.arange(0, w, 2)
    s = np.add.reduceat(np.add.reduceat(x, ih, axis=1), iw, axis=2)
    ch = np.minimum(ih + 2, h) - ih
    cw = np.minimum(iw + 2, w) - iw
    return s / (ch[None, :, None] * cw[None, None, :])


def channel_softmax(logits) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    z = as_field(logits, "logits")
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


# -- elementwise surface ------------------------------------------------------

def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def pointwise_add(a, b) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    _check_same_shape(a, b)
    return a + b


def pointwise_sub(a, b) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    _check_same_shape(a, b)
    return a - b


def pointwise_mul(a, b) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    _check_same_shape(a, b)
    return a * b


def scale(a, c: float) -> np.ndarray:
    return np.asarray(a, np.float64) * float(c)


def inner_product(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    _check_same_shape(a, b)
    return float(np.sum(a * b))


def tensor_sum(a) -> float:
    return float(np.sum(np.asarray(a, np.float64)))
