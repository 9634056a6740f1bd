"""Minimal reverse-mode tape over numpy arrays.

A ``Var`` wraps one array value and remembers, per parent, a closure that
pulls the output cotangent back to that parent.  Every op also records a
forward closure so a finished graph can be replayed: re-running the recorded
computation reproduces the output bit-identically.

Only the operations the unrolled network needs are provided; their
vector-Jacobian products are the exact adjoints of the forward maps in
:mod:`msseg.ops` (the learned-regularizer backward path is built from the
architecturally transposed convolutions on purpose, mirroring the forward
definition there).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .ops import ConvKernel


class Var:
    __slots__ = ("value", "parents", "fwd", "grad")

    def __init__(self, value, parents=(), fwd=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents      # tuple of (Var, vjp) pairs
        self.fwd = fwd              # closure recomputing value from parents
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={not self.parents})"


def leaf(value) -> Var:
    return Var(value)


def topo_order(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))
    return order


def backward(root: Var, seed) -> None:
    """Accumulate cotangents into ``.grad`` for every node reachable from root."""
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.value.shape:
        raise ValueError(f"seed gradient shape {seed.shape} != output shape {root.value.shape}")
    order = topo_order(root)
    for node in order:
        node.grad = None
    root.grad = seed
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            g = vjp(node.grad)
            parent.grad = g if parent.grad is None else parent.grad + g


def replay(root: Var) -> np.ndarray:
    """Recompute every non-leaf value in topological order; returns the root value."""
    for node in topo_order(root):
        if node.fwd is not None:
            node.value = np.asarray(node.fwd(), dtype=np.float64)
    return root.value


# -- arithmetic ----------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value + b.value,
               parents=((a, lambda g: g), (b, lambda g: g)),
               fwd=lambda: a.value + b.value)


def sub(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value - b.value,
               parents=((a, lambda g: g), (b, lambda g: -g)),
               fwd=lambda: a.value - b.value)


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value * b.value,
               parents=((a, lambda g: g * b.value), (b, lambda g: g * a.value)),
               fwd=lambda: a.value * b.value)


def scale(x: Var, s: Var) -> Var:
    """Multiply a field by a 0-d scalar Var."""
    return Var(x.value * s.value,
               parents=((x, lambda g: g * s.value),
                        (s, lambda g: np.asarray(np.sum(g * x.value)))),
               fwd=lambda: x.value * s.value)


def affine(x: Var, a: float, b: float) -> Var:
    """a*x + b with float constants."""
    return Var(a * x.value + b,
               parents=((x, lambda g: a * g),),
               fwd=lambda: a * x.value + b)


def relu(x: Var) -> Var:
    # subgradient at 0 taken as 0
    return Var(np.maximum(x.value, 0.0),
               parents=((x, lambda g: g * (x.value > 0.0)),),
               fwd=lambda: np.maximum(x.value, 0.0))


def exp(x: Var) -> Var:
    return Var(np.exp(x.value),
               parents=((x, lambda g: g * np.exp(x.value)),),
               fwd=lambda: np.exp(x.value))


# -- convolutions ---------------------------------------------------------------

def conv2d(x: Var, w: Var, b: Var | None, stride: int = 1,
           padding: str = ops.SAME_ZERO) -> Var:
    def run():
        bias = None if b is None else b.value
        return ops.conv2d(x.value, ConvKernel(w.value, bias), stride, padding)

    in_shape = x.value.shape[1:]
    parents = [
        (x, lambda g: ops.transpose_conv2d(g, ConvKernel(w.value), stride, padding,
                                           output_shape=in_shape)),
        (w, lambda g: ops.conv2d_kernel_grad(x.value, g, w.value.shape, stride, padding)),
    ]
    if b is not None:
        parents.append((b, lambda g: g.sum(axis=(1, 2))))
    return Var(run(), parents=tuple(parents), fwd=run)


def transpose_conv2d(y: Var, w: Var, stride: int = 1, padding: str = ops.SAME_ZERO,
                     output_shape: tuple[int, int] | None = None) -> Var:
    def run():
        return ops.transpose_conv2d(y.value, ConvKernel(w.value), stride, padding,
                                    output_shape=output_shape)

    parents = (
        (y, lambda g: ops.conv2d(g, ConvKernel(w.value), stride, padding)),
        (w, lambda g: ops.conv2d_kernel_grad(g, y.value, w.value.shape, stride, padding)),
    )
    return Var(run(), parents=parents, fwd=run)


def convolve_channels(x: Var, k: Var) -> Var:
    """Shared 2-d kernel applied per channel, zero padding (learned kernels)."""
    def run():
        return ops.convolve_channels(x.value, k.value, ops.SAME_ZERO)

    parents = (
        (x, lambda g: ops.convolve_channels(g, k.value[::-1, ::-1], ops.SAME_ZERO)),
        (k, lambda g: ops.convolve_channels_kernel_grad(x.value, g, k.value.shape,
                                                        ops.SAME_ZERO)),
    )
    return Var(run(), parents=parents, fwd=run)


# -- channel bookkeeping ---------------------------------------------------------

def repeat_labels(v: Var, groups: int) -> Var:
    n = v.value.shape[0]

    def run():
        return np.repeat(v.value, groups, axis=0)

    def vjp(g):
        return g.reshape(n, groups, *g.shape[1:]).sum(axis=1)

    return Var(run(), parents=((v, vjp),), fwd=run)


def group_sum(x: Var, classes: int) -> Var:
    c = x.value.shape[0]
    groups = c // classes

    def run():
        return x.value.reshape(classes, groups, *x.value.shape[1:]).sum(axis=1)

    return Var(run(), parents=((x, lambda g: np.repeat(g, groups, axis=0)),), fwd=run)


def tile_stack(f: Var, copies: int) -> Var:
    i = f.value.shape[0]

    def run():
        return np.tile(f.value, (copies, 1, 1))

    def vjp(g):
        return g.reshape(copies, i, *g.shape[1:]).sum(axis=0)

    return Var(run(), parents=((f, vjp),), fwd=run)


def channel_softmax(z: Var) -> Var:
    def run():
        return ops.channel_softmax(z.value)

    s = run()

    def vjp(g):
        cur = ops.channel_softmax(z.value)
        return cur * (g - (g * cur).sum(axis=0, keepdims=True))

    return Var(s, parents=((z, vjp),), fwd=run)


def renormalize_labels(v: Var) -> Var:
    """Clamp to [0,1] and divide by the channel sum (post grid-transfer)."""
    def run():
        c = np.clip(v.value, 0.0, 1.0)
        return c / c.sum(axis=0, keepdims=True)

    def vjp(g):
        c = np.clip(v.value, 0.0, 1.0)
        s = c.sum(axis=0, keepdims=True)
        y = c / s
        inside = (v.value >= 0.0) & (v.value <= 1.0)
        return ((g - (g * y).sum(axis=0, keepdims=True)) / s) * inside

    return Var(run(), parents=((v, vjp),), fwd=run)


# -- grid transfers ---------------------------------------------------------------

def restrict_average(x: Var) -> Var:
    _, h, w = x.value.shape
    ih = np.arange(0, h, 2)
    iw = np.arange(0, w, 2)
    ch = (np.minimum(ih + 2, h) - ih).astype(np.float64)
    cw = (np.minimum(iw + 2, w) - iw).astype(np.float64)

    def run():
        return ops.restrict_average(x.value)

    def vjp(g):
        gc = g / (ch[None, :, None] * cw[None, None, :])
        fine = np.repeat(np.repeat(gc, 2, axis=1), 2, axis=2)
        return fine[:, :h, :w]

    return Var(run(), parents=((x, vjp),), fwd=run)


def upsample_to(x: Var, shape: tuple[int, int]) -> Var:
    hc, wc = x.value.shape[1:]
    i0, i1, wh = ops._lerp_indices(hc)
    j0, j1, ww = ops._lerp_indices(wc)

    def run():
        return ops.upsample_to(x.value, shape)

    def vjp(g):
        gp = np.zeros((g.shape[0], 2 * hc, 2 * wc))
        gp[:, :shape[0], :shape[1]] = g
        # adjoint of the column lerp, then of the row lerp
        gc = np.zeros((g.shape[0], 2 * hc, wc))
        np.add.at(gc, (slice(None), slice(None), j0), gp * (1.0 - ww)[None, None, :])
        np.add.at(gc, (slice(None), slice(None), j1), gp * ww[None, None, :])
        gr = np.zeros((g.shape[0], hc, wc))
        np.add.at(gr, (slice(None), i0), gc * (1.0 - wh)[None, :, None])
        np.add.at(gr, (slice(None), i1), gc * wh[None, :, None])
        return gr

    return Var(run(), parents=((x, vjp),), fwd=run)
