"""Terms of the relaxed multi-phase segmentation energy.

The energy couples a piecewise-smooth approximation ``u`` (C = I*N channels,
class-major blocks of I feature channels) with a soft label field ``v``
(N channels on the per-pixel probability simplex):

* quadratic data fit ``1/2 <(f - u)^2, v>``,
* smoothness ``lam/2 <v, |L u|^2>`` through a pluggable regularity operator,
* boundary length via a Gaussian-blurred overlap of the label channels
  (threshold dynamics), linearized around an anchor label field,
* an entropy barrier that keeps labels strictly inside the simplex.

Gaussian convolutions here use replicate padding so constant-field identities
hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops

ENTROPY_CLAMP = 1e-12


@dataclass
class EnergyParams:
    """Coefficients of the segmentation energy.

    smooth_weight   weight of the |L u|^2 smoothness term (lambda)
    length_weight   weight of the boundary-length term (alpha)
    entropy_weight  entropy barrier / softmax temperature (epsilon), > 0
    kernel_sigma    std-dev in pixels of the boundary-term Gaussian, > 0
    edge_slope      slope of the gradient-based edge weight (gamma)
    step_size       explicit relaxation step; None means auto-scaled
    """

    smooth_weight: float = 0.1
    length_weight: float = 1.0
    entropy_weight: float = 0.1
    kernel_sigma: float = 2.0
    edge_slope: float = 0.0
    step_size: float | None = None

    def __post_init__(self):
        if self.entropy_weight <= 0:
            raise ValueError("entropy_weight must be positive")
        if self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive when given")


@dataclass
class GaussianKernel:
    """Sampled, renormalized isotropic Gaussian with truncation radius ceil(3*sigma)."""

    sigma: float
    radius: int
    values: np.ndarray


def make_gaussian_kernel(sigma: float) -> GaussianKernel:
    """Sample exp(-|x|^2 / (2 sigma^2)) at integer offsets and normalize to sum 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    grid = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    values = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return GaussianKernel(sigma=float(sigma), radius=radius, values=values / values.sum())


def check_label_field(v, tol: float = 1e-9) -> np.ndarray:
    """Validate a soft label field: values in [0,1], per-pixel channel sum 1."""
    v = ops.as_field(v, "label field")
    if v.min() < -tol or v.max() > 1.0 + tol:
        raise ValueError(
            f"label field values outside [0,1]: min {v.min():.3e}, max {v.max():.3e}"
        )
    sums = v.sum(axis=0)
    dev = np.abs(sums - 1.0).max()
    if dev > tol:
        raise ValueError(f"label field channel sums deviate from 1 by {dev:.3e}")
    return v


def renormalize_labels(v) -> np.ndarray:
    """Clamp to [0,1] and rescale channel sums to 1 (used after grid transfers)."""
    v = np.clip(ops.as_field(v, "label field"), 0.0, 1.0)
    return v / v.sum(axis=0, keepdims=True)


# -- regularity operators -----------------------------------------------------
#
# An operator maps (C, H, W) -> (M, C, H, W) with M stencil components and
# provides the adjoint map back.  apply_system() composes them into the
# positive semi-definite relaxation operator v*u + lam * L'(v * L u).


class ZeroOperator:
    """L = 0: no smoothness coupling (pure data/length/entropy model)."""

    components = 1

    def forward(self, u: np.ndarray) -> np.ndarray:
        return np.zeros((1,) + u.shape, dtype=np.float64)

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        return np.zeros(w.shape[1:], dtype=np.float64)


class GradientOperator:
    """Forward-difference gradient with replicate boundary (last diff is 0).

    ``spacing`` divides the differences so the operator stays a consistent
    discretization of the continuum gradient on coarsened grids.

    The adjoint is the exact transpose of the forward map.
    """

    components = 2

    def __init__(self, spacing: float = 1.0):
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        self.spacing = float(spacing)

    def forward(self, u: np.ndarray) -> np.ndarray:
        gx = np.zeros_like(u)
        gy = np.zeros_like(u)
        gx[:, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
        gy[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
        out = np.stack([gx, gy])
        if self.spacing != 1.0:
            out /= self.spacing
        return out

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        gx, gy = w[0], w[1]
        out = np.zeros_like(gx)
        out[:, 1:, :] += gx[:, :-1, :]
        out[:, :-1, :] -= gx[:, :-1, :]
        out[:, :, 1:] += gy[:, :, :-1]
        out[:, :, :-1] -= gy[:, :, :-1]
        if self.spacing != 1.0:
            out /= self.spacing
        return out

    def coarsened(self) -> "GradientOperator":
        return GradientOperator(spacing=2.0 * self.spacing)


class LearnedOperator:
    """conv -> relu -> conv, with the architecturally transposed backward map.

    The backward map (transpose conv -> relu -> transpose conv, tied weights)
    is *not* the mathematical adjoint of the nonlinear forward map; no adjoint
    identity is asserted for this variant.
    """

    components = 1

    def __init__(self, conv1: ops.ConvKernel, conv2: ops.ConvKernel):
        self.conv1 = conv1
        self.conv2 = conv2

    def forward(self, u: np.ndarray) -> np.ndarray:
        z = ops.relu(ops.conv2d(u, self.conv1, 1, ops.SAME_ZERO))
        return ops.conv2d(z, self.conv2, 1, ops.SAME_ZERO)[None]

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        z = ops.relu(ops.transpose_conv2d(w[0], self.conv2, 1, ops.SAME_ZERO))
        return ops.transpose_conv2d(z, self.conv1, 1, ops.SAME_ZERO)


def coarsen_operator(op):
    """Per-level regularity operator: gradient stencils rescale with spacing."""
    if isinstance(op, GradientOperator):
        return op.coarsened()
    return op


# -- energy terms --------------------------------------------------------------

def blur_labels(v, kernel: GaussianKernel) -> np.ndarray:
    """Replicate-padded Gaussian convolution of every label channel."""
    return ops.convolve_channels(v, kernel.values, ops.SAME_REPLICATE)


def boundary_penalty(v, kernel: GaussianKernel, edge=None, weight: float = 1.0) -> float:
    """Length-like penalty: weight * sum_n <e * v_n, k * (1 - v_n)>.

    ``edge`` is an optional (1, H, W) nonnegative weighting field; None means
    e = 1 everywhere.
    """
    v = ops.as_field(v, "label field")
    blurred = blur_labels(1.0 - v, kernel)
    weighted = v if edge is None else v * ops.as_field(edge, "edge")[0][None]
    return weight * float(np.sum(weighted * blurred))


def boundary_subgradient(v_anchor, kernel: GaussianKernel, weight: float) -> np.ndarray:
    """Linearization slope of the boundary penalty at the anchor: w * k*(1 - 2 v)."""
    v_anchor = ops.as_field(v_anchor, "anchor labels")
    return weight * blur_labels(1.0 - 2.0 * v_anchor, kernel)


def label_entropy(v, weight: float) -> float:
    """weight * sum v ln v, clamped below at 1e-12; nonpositive on the simplex."""
    v = ops.as_field(v, "label field")
    return weight * float(np.sum(v * np.log(np.maximum(v, ENTROPY_CLAMP))))


def edge_weight(f, slope: float) -> np.ndarray:
    """Edge-stopping field 1 / (1 + slope * |grad f|), in (0, 1]."""
    if slope < 0:
        raise ValueError("edge slope must be nonnegative")
    f = ops.as_field(f, "image")
    g = GradientOperator().forward(f)
    mag = np.sqrt((g * g).sum(axis=0))
    return 1.0 / (1.0 + slope * mag)


def replicate_labels(v: np.ndarray, groups: int) -> np.ndarray:
    """Broadcast N label channels to C = groups*N channels (class-major blocks)."""
    return np.repeat(v, groups, axis=0)


def group_reduce(x: np.ndarray, classes: int) -> np.ndarray:
    """Sum C = I*N channels back to N per-class channels (class-major blocks)."""
    c, h, w = x.shape
    if c % classes != 0:
        raise ValueError(f"{c} channels do not split into {classes} class groups")
    return x.reshape(classes, c // classes, h, w).sum(axis=1)


def smoothness_density(u: np.ndarray, op) -> np.ndarray:
    """|L u|^2 summed over stencil components, per channel: (C, H, W)."""
    lu = op.forward(u)
    return (lu * lu).sum(axis=0)


def segmentation_energy(u, labels, features, anchor, op, params: EnergyParams,
                        kernel: GaussianKernel | None = None) -> float:
    """Full linearized energy value.

    u, features: (C, H, W) with C = I*N; labels, anchor: (N, H, W).
    The boundary term enters through its supporting hyperplane at ``anchor``:
    weight * [<k*(1-2a), v-a> + <a, k*(1-a)>], exact when labels == anchor.
    """
    u = ops.as_field(u, "approximation")
    features = ops.as_field(features, "features")
    labels = ops.as_field(labels, "label field")
    anchor = ops.as_field(anchor, "anchor labels")
    if u.shape != features.shape:
        raise ValueError(f"approximation {u.shape} and features {features.shape} differ")
    if labels.shape != anchor.shape:
        raise ValueError(f"labels {labels.shape} and anchor {anchor.shape} differ")
    n = labels.shape[0]
    if u.shape[0] % n != 0:
        raise ValueError(f"{u.shape[0]} channels do not replicate over {n} classes")
    if kernel is None:
        kernel = make_gaussian_kernel(params.kernel_sigma)
    v_rep = replicate_labels(labels, u.shape[0] // n)
    fit = 0.5 * float(np.sum((features - u) ** 2 * v_rep))
    smooth = 0.5 * params.smooth_weight * float(np.sum(smoothness_density(u, op) * v_rep))
    slope = boundary_subgradient(anchor, kernel, params.length_weight)
    hyperplane = float(np.sum(slope * (labels - anchor)))
    const = boundary_penalty(anchor, kernel, None, params.length_weight)
    ent = label_entropy(labels, params.entropy_weight)
    return fit + smooth + hyperplane + ent + const


def perimeter_estimate(labels, sigma: float) -> float:
    """Total interface length from the blurred-overlap penalty.

    For the sampled std-sigma Gaussian the two-phase penalty of a region with
    perimeter P approaches 2 * sigma * P / sqrt(2 pi) as sigma -> 0, each
    interface counted once per adjacent phase; sqrt(2 pi)/(2 sigma) undoes
    both factors.
    """
    kernel = make_gaussian_kernel(sigma)
    return np.sqrt(2.0 * np.pi) / (2.0 * sigma) * boundary_penalty(labels, kernel)


def two_phase_labels(mask) -> np.ndarray:
    """Binary (H, W) mask -> two-channel label field (background, foreground)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    return np.stack([1.0 - mask, mask])
