"""Single-grid alternating minimization of the segmentation energy.

Each outer iteration relaxes the piecewise-smooth approximation one explicit
step against the current labels, then re-labels every pixel with a closed-form
softmax (the exact minimizer of the per-pixel label subproblem).  With exact
relaxation (``exact_u``), the energy trace is provably non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .energy import (
    EnergyParams,
    GaussianKernel,
    boundary_subgradient,
    check_label_field,
    group_reduce,
    make_gaussian_kernel,
    replicate_labels,
    segmentation_energy,
    smoothness_density,
)

#: number of power-iteration sweeps used to bound the relaxation operator norm
POWER_STEPS = 20
#: safety factor applied to 1/|A| when auto-scaling the relaxation step
STEP_SAFETY = 0.9


@dataclass
class SolverConfig:
    params: EnergyParams
    iters: int = 50
    op: object = None                 # regularity operator; defaults to GradientOperator
    classes: int = 2
    record_energy: bool = False
    record_residual: bool = False
    exact_u: bool = False
    exact_tol: float = 1e-10
    exact_max_steps: int = 200_000

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.classes < 1:
            raise ValueError("need at least one class")
        if self.op is None:
            from .energy import GradientOperator
            self.op = GradientOperator()


@dataclass
class SolverState:
    u: np.ndarray                     # (C, H, W) piecewise-smooth approximation
    labels: np.ndarray                # (N, H, W) simplex label field
    features: np.ndarray              # (C, H, W) stacked image features
    step: int = 0
    energy_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        """Per-pixel argmax labels; ties break toward the lowest class index."""
        return np.argmax(self.labels, axis=0)


def apply_system(u, v_rep, op, smooth_weight: float) -> np.ndarray:
    """The relaxation operator: v*u + lam * L'(v * (L u))."""
    u = ops.as_field(u, "approximation")
    v_rep = ops.as_field(v_rep, "labels")
    if u.shape != v_rep.shape:
        raise ValueError(f"approximation {u.shape} and labels {v_rep.shape} differ")
    return v_rep * u + smooth_weight * op.adjoint(v_rep[None] * op.forward(u))


def estimate_step_size(v_rep, op, smooth_weight: float) -> float:
    """STEP_SAFETY / |A| with |A| bounded by deterministic power iteration."""
    x = np.ones_like(v_rep)
    x /= np.linalg.norm(x)
    norm = 1.0
    for _ in range(POWER_STEPS):
        y = apply_system(x, v_rep, op, smooth_weight)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return STEP_SAFETY
        x = y / norm
    return STEP_SAFETY / max(norm, 1e-12)


def relax_step(u, v_rep, rhs, op, smooth_weight: float, dt: float) -> np.ndarray:
    """One explicit step  u <- u + dt (rhs - A u)."""
    return u + dt * (rhs - apply_system(u, v_rep, op, smooth_weight))


def relax_exact(u, v_rep, rhs, op, smooth_weight: float, dt: float,
                tol: float, max_steps: int) -> np.ndarray:
    """Iterate relax_step until the residual max-norm drops below tol."""
    for _ in range(max_steps):
        r = rhs - apply_system(u, v_rep, op, smooth_weight)
        if np.abs(r).max() < tol:
            return u
        u = u + dt * r
    raise RuntimeError(
        f"relaxation did not reach residual {tol:g} within {max_steps} steps"
    )


def label_logits(u, labels_prev, features, kernel: GaussianKernel,
                 params: EnergyParams, op) -> np.ndarray:
    """Pre-softmax logits of the label subproblem, (N, H, W).

    Per class: -(data fit + smoothness + length slope) / entropy weight, with
    the C = I*N data/smoothness channels summed over the I feature copies.
    """
    if params.entropy_weight <= 0:
        raise ValueError("entropy_weight must be positive")
    u = ops.as_field(u, "approximation")
    labels_prev = ops.as_field(labels_prev, "labels")
    features = ops.as_field(features, "features")
    n = labels_prev.shape[0]
    logits = -0.5 * (features - u) ** 2 - 0.5 * params.smooth_weight * smoothness_density(u, op)
    logits = group_reduce(logits, n)
    logits = logits - boundary_subgradient(labels_prev, kernel, params.length_weight)
    return logits / params.entropy_weight


def label_update(u, labels_prev, features, kernel: GaussianKernel,
                 params: EnergyParams, op) -> np.ndarray:
    """Exact per-pixel minimizer of the label subproblem: a channel softmax."""
    return ops.channel_softmax(label_logits(u, labels_prev, features, kernel, params, op))


def class_anchors(features, classes: int) -> np.ndarray:
    """Evenly spaced intensity anchors spanning the feature range.

    A flat image is genuinely ambiguous: every anchor collapses to the
    constant, which keeps the initialization uniform across classes.
    """
    f = ops.as_field(features, "features")
    lo, hi = float(f.min()), float(f.max())
    if hi <= lo:
        return np.full(classes, lo, dtype=np.float64)
    return lo + (np.arange(classes, dtype=np.float64) + 0.5) * (hi - lo) / classes


def anchor_labels(features, classes: int, entropy_weight: float) -> np.ndarray:
    """Initial labels: softmax of per-class quadratic fits to intensity anchors.

    An intensity-driven initial labeling; replicating the raw features per
    class and taking the softmax would start every class identically, which is
    an exact fixed point of the alternating iteration.
    """
    f = ops.as_field(features, "features").mean(axis=0)
    centers = class_anchors(features, classes)
    logits = -((f[None] - centers[:, None, None]) ** 2) / (2.0 * entropy_weight)
    return ops.channel_softmax(logits)


def anchor_approximation(features, classes: int) -> np.ndarray:
    """Initial approximation: each class block starts at its intensity anchor."""
    f = ops.as_field(features, "features")
    centers = class_anchors(features, classes)
    rep = np.repeat(centers, f.shape[0])
    return np.ones((classes * f.shape[0],) + f.shape[1:], dtype=np.float64) * rep[:, None, None]


def initial_state(features, classes: int, params: EnergyParams) -> SolverState:
    features = ops.as_field(features, "features")
    stack = np.tile(features, (classes, 1, 1))
    return SolverState(
        u=anchor_approximation(features, classes),
        labels=anchor_labels(features, classes, params.entropy_weight),
        features=stack,
    )


def admm_segment(features, config: SolverConfig, v0=None, u0=None) -> SolverState:
    """Alternate relaxation and relabeling for ``config.iters`` outer steps.

    ``features`` is the (I, H, W) feature stack of the image (I = 1 for a raw
    grayscale image); internally it is tiled to C = I*N channels so each class
    owns one block of feature channels.
    """
    features = ops.as_field(features, "features")
    params = config.params
    n = config.classes
    state = initial_state(features, n, params)
    if v0 is not None:
        state.labels = check_label_field(v0)
        if state.labels.shape[0] != n:
            raise ValueError(f"v0 has {state.labels.shape[0]} channels, expected {n}")
    if u0 is not None:
        u0 = ops.as_field(u0, "u0")
        if u0.shape != state.u.shape:
            raise ValueError(f"u0 shape {u0.shape}, expected {state.u.shape}")
        state.u = u0.copy()
    kernel = make_gaussian_kernel(params.kernel_sigma)
    groups = features.shape[0]
    if config.record_energy:
        state.energy_trace.append(
            segmentation_energy(state.u, state.labels, state.features, state.labels,
                                config.op, params, kernel)
        )
    for _ in range(config.iters):
        anchor = state.labels
        v_rep = replicate_labels(anchor, groups)
        rhs = state.features * v_rep
        dt = params.step_size
        if dt is None:
            dt = estimate_step_size(v_rep, config.op, params.smooth_weight)
        if config.exact_u:
            state.u = relax_exact(state.u, v_rep, rhs, config.op, params.smooth_weight,
                                  dt, config.exact_tol, config.exact_max_steps)
        else:
            state.u = relax_step(state.u, v_rep, rhs, config.op, params.smooth_weight, dt)
        if config.record_residual:
            r = rhs - apply_system(state.u, v_rep, config.op, params.smooth_weight)
            state.residual_trace.append(float(np.linalg.norm(r)))
        state.labels = check_label_field(
            label_update(state.u, anchor, state.features, kernel, params, config.op)
        )
        state.step += 1
        if config.record_energy:
            state.energy_trace.append(
                segmentation_energy(state.u, state.labels, state.features, anchor,
                                    config.op, params, kernel)
            )
    return state
