"""Unrolled trainable segmentation network with exact reverse-mode gradients.

The network unrolls the multigrid segmentation solve into a U-shaped stack of
learned iteration blocks.  One block performs a single relaxation step of the
approximation followed by the softmax label update, with every hand-designed
ingredient replaced by a learnable one:

* the regularity operator is conv -> relu -> conv; its backward application
  is the architecturally transposed pair (tied weights);
* the Gaussian of the boundary term becomes one learned 3x3 kernel applied
  channelwise to the anchor labels;
* the energy coefficients and the relaxation step become per-block scalars
  (the softmax temperature is kept positive by learning its logarithm).

A 3x3 head convolution lifts the image to I feature channels, stacked N times
to C = I*N (class-major).  The down path alternates blocks with a learned
stride-2 restriction of the approximation and features (labels are
average-pooled and renormalized); the up path applies the FAS correction
(prolonged coarse increment added to the stored fine iterate, labels replaced
by prolonged labels) before each block.  A two-convolution tail maps the
C-channel label stack to N per-class logits, and a final channel softmax
yields the segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ops
from .multigrid import check_grids
from .ops import ConvKernel

INIT_SMOOTH_WEIGHT = 0.5
INIT_LENGTH_WEIGHT = 0.5
INIT_LOG_INV_TEMP = float(np.log(10.0))
INIT_STEP_SIZE = 0.1


@dataclass
class BlockParams:
    """One unrolled iteration block (relax + relabel)."""

    reg1: ConvKernel
    reg2: ConvKernel
    label_kernel: np.ndarray          # shared 3x3 kernel on the anchor labels
    smooth_weight: np.ndarray         # 0-d scalars, learnable
    length_weight: np.ndarray
    log_inv_temp: np.ndarray
    step_size: np.ndarray


@dataclass
class LevelParams:
    down: BlockParams
    up: BlockParams
    restrict: ConvKernel              # stride-2 3x3, applied to u and features


@dataclass
class NetParams:
    head: ConvKernel                  # in_channels -> I features
    levels: list[LevelParams]
    tail1: ConvKernel                 # C -> C
    tail2: ConvKernel                 # C -> N
    classes: int
    features: int
    grids: int
    in_channels: int = 1
    tail_relu: bool = True            # switch for the nonlinearity between tail convs

    @property
    def channels(self) -> int:
        return self.classes * self.features

    def flatten(self) -> dict[str, np.ndarray]:
        """Canonically ordered name -> array view of every learnable parameter."""
        out: dict[str, np.ndarray] = {}

        def put_conv(prefix: str, k: ConvKernel):
            out[f"{prefix}.w"] = k.weights
            if k.bias is not None:
                out[f"{prefix}.b"] = k.bias

        put_conv("head", self.head)
        for i, level in enumerate(self.levels):
            for tag, block in (("down", level.down), ("up", level.up)):
                p = f"level{i}.{tag}"
                put_conv(f"{p}.reg1", block.reg1)
                put_conv(f"{p}.reg2", block.reg2)
                out[f"{p}.label_kernel"] = block.label_kernel
                out[f"{p}.smooth_weight"] = block.smooth_weight
                out[f"{p}.length_weight"] = block.length_weight
                out[f"{p}.log_inv_temp"] = block.log_inv_temp
                out[f"{p}.step_size"] = block.step_size
            put_conv(f"level{i}.restrict", level.restrict)
        put_conv("tail1", self.tail1)
        put_conv("tail2", self.tail2)
        return out


def parameter_count(params: NetParams) -> int:
    return sum(v.size for v in params.flatten().values())


def parameter_breakdown(params: NetParams) -> dict[str, int]:
    groups: dict[str, int] = {}
    for name, v in params.flatten().items():
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + v.size
    return groups


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    else:
        fan_in = fan_out = int(np.prod(shape))
    half = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-half, half, size=shape)


def _scalar(x: float) -> np.ndarray:
    return np.array(float(x), dtype=np.float64)


def _init_block(rng: np.random.Generator, channels: int) -> BlockParams:
    return BlockParams(
        reg1=ConvKernel(_glorot(rng, (channels, channels, 3, 3)), np.zeros(channels)),
        reg2=ConvKernel(_glorot(rng, (channels, channels, 3, 3)), np.zeros(channels)),
        label_kernel=_glorot(rng, (3, 3)),
        smooth_weight=_scalar(INIT_SMOOTH_WEIGHT),
        length_weight=_scalar(INIT_LENGTH_WEIGHT),
        log_inv_temp=_scalar(INIT_LOG_INV_TEMP),
        step_size=_scalar(INIT_STEP_SIZE),
    )


def init_params(seed: int, features: int = 8, classes: int = 2, grids: int = 3,
                in_channels: int = 1) -> NetParams:
    """Deterministic initialization: Glorot-uniform kernels, zero biases,
    fixed starting scalars."""
    if min(features, classes, grids, in_channels) < 1:
        raise ValueError("features, classes, grids and in_channels must be >= 1")
    rng = np.random.default_rng(seed)
    c = features * classes
    head = ConvKernel(_glorot(rng, (features, in_channels, 3, 3)), np.zeros(features))
    levels = []
    for _ in range(grids):
        levels.append(LevelParams(
            down=_init_block(rng, c),
            up=_init_block(rng, c),
            restrict=ConvKernel(_glorot(rng, (c, c, 3, 3)), np.zeros(c)),
        ))
    tail1 = ConvKernel(_glorot(rng, (c, c, 3, 3)), np.zeros(c))
    tail2 = ConvKernel(_glorot(rng, (classes, c, 3, 3)), np.zeros(classes))
    return NetParams(head=head, levels=levels, tail1=tail1, tail2=tail2,
                     classes=classes, features=features, grids=grids,
                     in_channels=in_channels)


@dataclass
class ForwardTrace:
    """Recorded computation graph of one forward pass."""

    output: np.ndarray                     # (N, H, W) softmax labels
    output_var: ad.Var
    param_vars: dict[str, ad.Var]
    input_shape: tuple[int, ...]

    def replay(self) -> np.ndarray:
        """Re-run the recorded computation; bit-identical to ``output``."""
        return ad.replay(self.output_var)


def _conv_var(x: ad.Var, pv: dict[str, ad.Var], name: str, stride: int = 1) -> ad.Var:
    w = pv[f"{name}.w"]
    b = pv.get(f"{name}.b")
    return ad.conv2d(x, w, b, stride=stride, padding=ops.SAME_ZERO)


def _block_forward(u: ad.Var, v: ad.Var, feats: ad.Var, pv: dict[str, ad.Var],
                   name: str, classes: int, groups: int) -> tuple[ad.Var, ad.Var]:
    """One relax + relabel step with learned ingredients."""
    lam = pv[f"{name}.smooth_weight"]
    alpha = pv[f"{name}.length_weight"]
    dt = pv[f"{name}.step_size"]
    inv_temp = ad.exp(pv[f"{name}.log_inv_temp"])

    def reg_forward(z: ad.Var) -> ad.Var:
        return _conv_var(ad.relu(_conv_var(z, pv, f"{name}.reg1")), pv, f"{name}.reg2")

    def reg_backward(z: ad.Var) -> ad.Var:
        w1, w2 = pv[f"{name}.reg1.w"], pv[f"{name}.reg2.w"]
        return ad.transpose_conv2d(ad.relu(ad.transpose_conv2d(z, w2)), w1)

    v_rep = ad.repeat_labels(v, groups)
    lu = reg_forward(u)
    system = ad.add(ad.mul(v_rep, u), ad.scale(reg_backward(ad.mul(v_rep, lu)), lam))
    drive = ad.sub(ad.mul(feats, v_rep), system)
    u_next = ad.add(u, ad.scale(drive, dt))

    lu_next = reg_forward(u_next)
    resid = ad.sub(feats, u_next)
    data = ad.add(ad.affine(ad.mul(resid, resid), -0.5, 0.0),
                  ad.scale(ad.affine(ad.mul(lu_next, lu_next), -0.5, 0.0), lam))
    logits = ad.group_sum(data, classes)
    anchor = ad.convolve_channels(ad.affine(v, -2.0, 1.0), pv[f"{name}.label_kernel"])
    logits = ad.sub(logits, ad.scale(anchor, alpha))
    v_next = ad.channel_softmax(ad.scale(logits, inv_temp))
    return u_next, v_next


def head_forward(image, params: NetParams) -> np.ndarray:
    """Head convolution then N-fold channel stacking: (in, H, W) -> (C, H, W)."""
    image = ops.as_field(image, "image")
    fhat = ops.conv2d(image, params.head, 1, ops.SAME_ZERO)
    return np.tile(fhat, (params.classes, 1, 1))


def block_forward_arrays(u, v, feats, block: BlockParams, classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array view of one block (no gradients); used by tests and tools."""
    pv = {
        "b.reg1.w": ad.leaf(block.reg1.weights), "b.reg1.b": ad.leaf(block.reg1.bias),
        "b.reg2.w": ad.leaf(block.reg2.weights), "b.reg2.b": ad.leaf(block.reg2.bias),
        "b.label_kernel": ad.leaf(block.label_kernel),
        "b.smooth_weight": ad.leaf(block.smooth_weight),
        "b.length_weight": ad.leaf(block.length_weight),
        "b.log_inv_temp": ad.leaf(block.log_inv_temp),
        "b.step_size": ad.leaf(block.step_size),
    }
    groups = u.shape[0] // classes
    un, vn = _block_forward(ad.leaf(u), ad.leaf(v), ad.leaf(feats), pv, "b", classes, groups)
    return un.value, vn.value


def forward(image, params: NetParams) -> tuple[np.ndarray, ForwardTrace]:
    """Full forward pass: head, U-shaped block stack, tail, channel softmax."""
    image = ops.as_field(image, "image")
    if image.shape[0] != params.in_channels:
        raise ValueError(f"image has {image.shape[0]} channels, head expects {params.in_channels}")
    check_grids(image.shape[1:], params.grids)
    n, groups, H = params.classes, params.features, params.grids

    pv = {name: ad.leaf(arr) for name, arr in params.flatten().items()}

    fhat = _conv_var(ad.leaf(image), pv, "head")
    feats = ad.tile_stack(fhat, n)
    u = feats
    v = ad.leaf(np.full((n,) + image.shape[1:], 1.0 / n))

    down_u: list[ad.Var] = []       # fine iterate entering each restriction
    down_v: list[ad.Var] = []
    down_feats: list[ad.Var] = [feats]
    coarse_u0: list[ad.Var] = []    # restricted iterate stored for the correction

    for h in range(H - 1):
        u, v = _block_forward(u, v, down_feats[h], pv, f"level{h}.down", n, groups)
        down_u.append(u)
        down_v.append(v)
        rw = pv[f"level{h}.restrict.w"]
        rb = pv.get(f"level{h}.restrict.b")
        u = ad.conv2d(u, rw, rb, stride=2, padding=ops.SAME_ZERO)
        coarse_u0.append(u)
        feats_c = ad.conv2d(down_feats[h], rw, rb, stride=2, padding=ops.SAME_ZERO)
        down_feats.append(feats_c)
        v = ad.renormalize_labels(ad.restrict_average(v))

    u, v = _block_forward(u, v, down_feats[H - 1], pv, f"level{H - 1}.down", n, groups)

    for h in range(H - 2, -1, -1):
        fine_shape = down_u[h].value.shape[1:]
        correction = ad.upsample_to(ad.sub(u, coarse_u0[h]), fine_shape)
        u = ad.add(down_u[h], correction)
        v = ad.renormalize_labels(ad.upsample_to(v, fine_shape))
        u, v = _block_forward(u, v, down_feats[h], pv, f"level{h}.up", n, groups)

    stack = ad.repeat_labels(v, groups)
    t = _conv_var(stack, pv, "tail1")
    if params.tail_relu:
        t = ad.relu(t)
    logits = _conv_var(t, pv, "tail2")
    out = ad.channel_softmax(logits)

    trace = ForwardTrace(output=out.value, output_var=out, param_vars=pv,
                         input_shape=image.shape)
    return out.value, trace


def backward(trace: ForwardTrace, loss_grad) -> dict[str, np.ndarray]:
    """Exact gradients of the recorded forward pass for every parameter."""
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != trace.output.shape:
        raise ValueError(
            f"loss gradient shape {loss_grad.shape} != output shape {trace.output.shape}"
        )
    ad.backward(trace.output_var, loss_grad)
    grads: dict[str, np.ndarray] = {}
    for name, var in trace.param_vars.items():
        grads[name] = np.zeros_like(var.value) if var.grad is None else var.grad
    return grads


def save_params(params: NetParams, path) -> None:
    from . import io
    io.write_weights(path, params)


def load_params(path) -> NetParams:
    from . import io
    return io.read_weights(path)


def gradient_check(seed: int, features: int = 2, classes: int = 2, grids: int = 2,
                   size: int = 16, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks every parameter of a small network against (L(p+h) - L(p-h)) / 2h
    for a fixed random linear loss; the relative error denominator is floored
    at 1e-6 so near-zero gradients compare on an absolute scale.
    """
    params = init_params(seed=seed, features=features, classes=classes, grids=grids)
    rng = np.random.default_rng(seed + 1)
    image = rng.uniform(size=(params.in_channels, size, size))
    out, trace = forward(image, params)
    loss_grad = rng.normal(size=out.shape)
    grads = backward(trace, loss_grad)

    def loss() -> float:
        o, _ = forward(image, params)
        return float(np.sum(o * loss_grad))

    worst = 0.0
    for name, arr in params.flatten().items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = arr[idx]
            arr[idx] = saved + step
            up = loss()
            arr[idx] = saved - step
            down = loss()
            arr[idx] = saved
            fd = (up - down) / (2.0 * step)
            an = grads[name][idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    return worst
