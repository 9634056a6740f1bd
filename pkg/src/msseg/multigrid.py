"""Full-approximation-scheme (FAS) V-cycles for the segmentation solve.

The down-sweep relaxes each level against its right-hand side, restricts the
full iterate (not just the error) plus the residual, and rebuilds the coarse
relaxation operator from the restricted labels.  The up-sweep prolongs the
coarse-grid correction, post-smooths and relabels.  The finest-level right
hand side is the label-weighted image feature, so a one-level cycle reduces
exactly to one outer iteration of the single-grid solver per relaxation step.

Gradient-type regularity operators are re-discretized per level (difference
quotients over the doubled spacing), and relaxation steps are re-scaled per
level from a power-iteration bound of the level operator norm; without both,
coarse relaxation sweeps would be no more effective per step than fine ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .admm import (
    SolverState,
    apply_system,
    estimate_step_size,
    initial_state,
    label_update,
    relax_step,
)
from .energy import (
    EnergyParams,
    check_label_field,
    coarsen_operator,
    make_gaussian_kernel,
    renormalize_labels,
    replicate_labels,
    segmentation_energy,
)

AVERAGE_POOL = "average-pool"
LEARNED_CONV = "learned-conv"


@dataclass
class MgConfig:
    params: EnergyParams
    grids: int = 3
    smooth_steps: tuple = (1, 1, 1)    # relaxation sweeps per level, finest first
    classes: int = 2
    op: object = None                  # finest-level regularity operator
    restriction_mode: str = AVERAGE_POOL
    restrict_kernels: list | None = None   # per coarsening step, learned-conv mode
    record_energy: bool = False
    record_residual: bool = False
    freeze_labels: bool = False        # skip all label updates (linear-FAS testing)
    zero_correction: bool = False      # inject a zero coarse correction (ablation)

    def __post_init__(self):
        if self.grids < 1:
            raise ValueError("need at least one grid")
        if np.isscalar(self.smooth_steps):
            self.smooth_steps = (int(self.smooth_steps),) * self.grids
        self.smooth_steps = tuple(int(t) for t in self.smooth_steps)
        if len(self.smooth_steps) != self.grids:
            raise ValueError(
                f"{len(self.smooth_steps)} smoothing counts for {self.grids} grids"
            )
        if any(t < 1 for t in self.smooth_steps):
            raise ValueError("each smoothing count must be >= 1")
        if self.restriction_mode not in (AVERAGE_POOL, LEARNED_CONV):
            raise ValueError(f"unknown restriction mode {self.restriction_mode!r}")
        if self.op is None:
            from .energy import GradientOperator
            self.op = GradientOperator()


@dataclass
class GridLevel:
    index: int                         # 1 = finest
    features: np.ndarray               # (C, h, w) restricted image features
    rhs: np.ndarray                    # (C, h, w) FAS right-hand side
    u: np.ndarray
    labels: np.ndarray
    labels_op: np.ndarray              # label snapshot the level operator is built from
    op: object
    dt: float
    u0: np.ndarray | None = None       # pre-correction iterate stored for the up-sweep

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[1:]


def max_feasible_grids(shape: tuple[int, int]) -> int:
    """Largest grid count: one level per ceil-halving until an extent hits 1."""
    n = 1
    e = min(int(shape[0]), int(shape[1]))
    while e >= 2:
        e = (e + 1) // 2
        n += 1
    return n


def check_grids(shape: tuple[int, int], grids: int):
    feasible = max_feasible_grids(shape)
    if grids > feasible:
        raise ValueError(
            f"image of shape {tuple(shape)} supports at most {feasible} grids, got {grids}"
        )


def restrict(x, mode: str = AVERAGE_POOL, kernel: ops.ConvKernel | None = None) -> np.ndarray:
    """Fine-to-coarse transfer: ragged 2x2 block means or a learned stride-2 conv."""
    x = ops.as_field(x)
    if min(x.shape[1:]) <= 1:
        return x.copy()
    if mode == AVERAGE_POOL:
        return ops.restrict_average(x)
    if mode == LEARNED_CONV:
        if kernel is None:
            raise ValueError("learned-conv restriction needs a kernel")
        return ops.conv2d(x, kernel, stride=2, padding=ops.SAME_ZERO)
    raise ValueError(f"unknown restriction mode {mode!r}")


def prolong(x_coarse, fine_shape: tuple[int, int]) -> np.ndarray:
    """Coarse-to-fine transfer: bilinear 2x upsample cropped to the fine shape."""
    return ops.upsample_to(x_coarse, fine_shape)


def residual(level: GridLevel, smooth_weight: float) -> np.ndarray:
    """rhs - A u with the operator pinned at the level-entry labels."""
    v_rep = replicate_labels(level.labels_op, level.u.shape[0] // level.labels_op.shape[0])
    return level.rhs - apply_system(level.u, v_rep, level.op, smooth_weight)


def coarse_rhs(level_fine: GridLevel, level_coarse: GridLevel, smooth_weight: float,
               mode: str = AVERAGE_POOL, kernel: ops.ConvKernel | None = None) -> np.ndarray:
    """FAS right-hand side: restricted residual + coarse operator at the restricted iterate."""
    r = residual(level_fine, smooth_weight)
    v_rep = replicate_labels(
        level_coarse.labels_op, level_coarse.u.shape[0] // level_coarse.labels_op.shape[0]
    )
    return restrict(r, mode, kernel) + apply_system(
        level_coarse.u, v_rep, level_coarse.op, smooth_weight
    )


def _level_dt(v_rep, op, params: EnergyParams, fine_norm_scale: float | None) -> float:
    auto = estimate_step_size(v_rep, op, params.smooth_weight)
    if params.step_size is None:
        return auto
    if fine_norm_scale is None:
        return params.step_size
    # keep the user's safety margin relative to the level operator norm
    return params.step_size * auto / fine_norm_scale

def smooth(level: GridLevel, steps: int, params: EnergyParams, kernel,
           anchor: np.ndarray | None = None, freeze_labels: bool = False,
           trace: list | None = None, tag: str = "smooth") -> GridLevel:
    """``steps`` relaxation sweeps against the level right-hand side, then one
    label softmax (anchored at ``anchor``, default the current labels)."""
    groups = level.u.shape[0] // level.labels_op.shape[0]
    v_rep = replicate_labels(level.labels_op, groups)
    for _ in range(steps):
        level.u = relax_step(level.u, v_rep, level.rhs, level.op,
                             params.smooth_weight, level.dt)
    if trace is not None:
        trace.append((tag, level.index))
    if not freeze_labels:
        if anchor is None:
            anchor = level.labels
        level.labels = check_label_field(
            label_update(level.u, anchor, level.features, kernel, params, level.op)
        )
        if trace is not None:
            trace.append(("label_update", level.index))
    return level


def v_cycle(features, config: MgConfig, state: SolverState | None = None,
            f_levels: list | None = None, trace: list | None = None) -> SolverState:
    """One V-cycle of the FAS scheme; a fresh state is initialized when needed.

    The finest right-hand side and operator snapshot are rebuilt from the
    current labels at cycle entry, so repeated cycles track the evolving
    label field exactly like repeated single-grid outer iterations.
    """
    features = ops.as_field(features, "features")
    check_grids(features.shape[1:], config.grids)
    params = config.params
    kernel = make_gaussian_kernel(params.kernel_sigma)
    if state is None:
        state = initial_state(features, config.classes, params)
    if f_levels is None:
        f_levels = restricted_features(features, config)
    H = config.grids

    def rkernel(h):
        if config.restriction_mode == LEARNED_CONV:
            return config.restrict_kernels[h - 1]
        return None

    # finest level: rhs = label-weighted features, operator pinned at entry
    groups = features.shape[0]
    v_rep = replicate_labels(state.labels, groups)
    op1 = config.op
    fine_auto = estimate_step_size(v_rep, op1, params.smooth_weight)
    dt1 = params.step_size if params.step_size is not None else fine_auto
    levels = [GridLevel(index=1, features=f_levels[0], rhs=f_levels[0] * v_rep,
                        u=state.u, labels=state.labels, labels_op=state.labels,
                        op=op1, dt=dt1)]
    if trace is not None:
        trace.append(("init", 1))

    # down sweep
    for h in range(1, H + 1):
        level = levels[h - 1]
        smooth(level, config.smooth_steps[h - 1], params, kernel,
               freeze_labels=config.freeze_labels, trace=trace)
        if h == H:
            break
        r = residual(level, params.smooth_weight)
        if trace is not None:
            trace.append(("residual", h))
        uc = restrict(level.u, config.restriction_mode, rkernel(h))
        if trace is not None:
            trace.append(("restrict_u", h + 1))
        vc = renormalize_labels(restrict(level.labels, AVERAGE_POOL))
        if trace is not None:
            trace.append(("restrict_labels", h + 1))
        op_c = coarsen_operator(level.op)
        if trace is not None:
            trace.append(("rebuild_operator", h + 1))
        vc_rep = replicate_labels(vc, uc.shape[0] // vc.shape[0])
        dt_c = _level_dt(vc_rep, op_c, params,
                         fine_norm_scale=fine_auto if params.step_size is not None else None)
        coarse = GridLevel(index=h + 1, features=None, rhs=None, u=uc, labels=vc,
                           labels_op=vc, op=op_c, dt=dt_c, u0=uc.copy())
        coarse.rhs = restrict(r, config.restriction_mode, rkernel(h)) + apply_system(
            uc, vc_rep, op_c, params.smooth_weight
        )
        if trace is not None:
            trace.append(("coarse_rhs", h + 1))
        coarse.features = f_levels[h]
        if trace is not None:
            trace.append(("restrict_features", h + 1))
        levels.append(coarse)

    # up sweep
    for h in range(H, 1, -1):
        coarse, fine = levels[h - 1], levels[h - 2]
        correction = coarse.u - coarse.u0
        if config.zero_correction:
            correction = np.zeros_like(correction)
        fine.u = fine.u + prolong(correction, fine.shape)
        if trace is not None:
            trace.append(("prolong_correct", h - 1))
        anchor = fine.labels  # anchor read before the prolongation overwrite
        if not config.freeze_labels:
            fine.labels = renormalize_labels(prolong(coarse.labels, fine.shape))
        if trace is not None:
            trace.append(("prolong_labels", h - 1))
        smooth(fine, config.smooth_steps[h - 2], params, kernel, anchor=anchor,
               freeze_labels=config.freeze_labels, trace=trace, tag="post_smooth")

    finest = levels[0]
    state.u, state.labels = finest.u, finest.labels
    state.step += 1
    if config.record_residual:
        r = finest.rhs - apply_system(
            finest.u, replicate_labels(finest.labels_op, groups), op1, params.smooth_weight
        )
        state.residual_trace.append(float(np.linalg.norm(r)))
    return state


def restricted_features(features, config: MgConfig) -> list:
    """Per-level feature stacks (restricted once and reused across cycles)."""
    features = ops.as_field(features, "features")
    stack = np.tile(features, (config.classes, 1, 1))
    out = [stack]
    for h in range(1, config.grids):
        kern = None
        if config.restriction_mode == LEARNED_CONV:
            kern = config.restrict_kernels[h - 1]
        out.append(restrict(out[-1], config.restriction_mode, kern))
    return out


def multigrid_segment(features, config: MgConfig, cycles: int) -> SolverState:
    """Run ``cycles`` V-cycles from the anchor initialization."""
    features = ops.as_field(features, "features")
    if cycles < 0:
        raise ValueError("cycle count must be nonnegative")
    params = config.params
    kernel = make_gaussian_kernel(params.kernel_sigma)
    state = initial_state(features, config.classes, params)
    f_levels = restricted_features(features, config)
    if config.record_energy:
        state.energy_trace.append(
            segmentation_energy(state.u, state.labels, state.features, state.labels,
                                config.op, params, kernel)
        )
    for _ in range(cycles):
        anchor = state.labels
        state = v_cycle(features, config, state, f_levels)
        if config.record_energy:
            state.energy_trace.append(
                segmentation_energy(state.u, state.labels, state.features, anchor,
                                    config.op, params, kernel)
            )
    return state


def cycle_work_units(config: MgConfig) -> float:
    """Relaxation work of one V-cycle in finest-grid sweep equivalents.

    A sweep on level h costs 4^-(h-1) of a finest-grid sweep; the down sweep
    visits every level, the up sweep revisits all but the coarsest.
    """
    down = sum(t * 0.25 ** h for h, t in enumerate(config.smooth_steps))
    up = sum(t * 0.25 ** h for h, t in enumerate(config.smooth_steps[:-1]))
    return down + up
