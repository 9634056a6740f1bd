"""Supervised training of the unrolled network on image/mask pairs.

Loss is the soft multi-class Dice loss with its analytic gradient; the
optimizer is Adam with bias correction and a stepwise-decayed learning rate
(multiplied by ``decay`` every ``decay_interval`` optimizer steps).  Batch
gradients are summed in sample order and scaled by 1/batch, so training is
reproducible for a fixed seed; the optional thread pool only parallelizes the
per-sample forward/backward passes and reduces in the same fixed order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network


@dataclass
class Sample:
    image: np.ndarray                 # (1, H, W) in [0, 1]
    label: np.ndarray                 # (N, H, W) one-hot

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.float64)
        sums = self.label.sum(axis=0)
        if not np.allclose(sums, 1.0) or not np.all(np.isin(self.label, (0.0, 1.0))):
            raise ValueError("label must be one-hot per pixel")


def dice_loss(pred, target, eps_small: float = 1e-5) -> tuple[float, np.ndarray]:
    """Soft multi-class Dice loss and its gradient w.r.t. the prediction.

    1 - (1/N) sum_n (2 <p_n, t_n> + eps) / (sum p_n + sum t_n + eps); the
    stabilizer is added to numerator and denominator.
    """
    if eps_small <= 0:
        raise ValueError("eps_small must be positive")
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and target {t.shape} shapes differ")
    n = p.shape[0]
    grad = np.empty_like(p)
    total = 0.0
    for c in range(n):
        inter = 2.0 * float(np.sum(p[c] * t[c])) + eps_small
        denom = float(np.sum(p[c]) + np.sum(t[c])) + eps_small
        total += inter / denom
        grad[c] = -(2.0 * t[c] * denom - inter) / (n * denom * denom)
    return 1.0 - total / n, grad


@dataclass
class AdamState:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    stabilizer: float = 1e-8
    decay: float = 0.8
    decay_interval: int = 200
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self) -> float:
        return self.base_lr * self.decay ** (self.step // self.decay_interval)


def adam_step(params: network.NetParams, grads: dict, state: AdamState) -> None:
    """One in-place Adam update over the flattened parameter set."""
    flat = params.flatten()
    if set(grads) != set(flat):
        missing = set(flat) ^ set(grads)
        raise ValueError(f"gradient keys do not mirror parameters: {sorted(missing)[:4]}")
    lr = state.learning_rate()
    state.step += 1
    t = state.step
    for name, arr in flat.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        arr -= lr * mhat / (np.sqrt(vhat) + state.stabilizer)


def synth_dataset(seed: int, count: int, size: int = 64,
                  noise_std: float = 0.1) -> list[Sample]:
    """Random bright shapes (1-3 disks/rectangles) on a dark background.

    Foreground and background mean intensities are at least 0.4 apart by
    construction; labels are the clean (pre-noise) shape masks.
    """
    if size < 32:
        raise ValueError("size must be at least 32")
    rng = np.random.default_rng(seed)
    samples = []
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(count):
        background = rng.uniform(0.0, 0.25)
        img = np.full((size, size), background)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            intensity = rng.uniform(background + 0.4, 1.0)
            if rng.random() < 0.5:
                r = rng.uniform(size / 8, size / 4)
                cy, cx = rng.uniform(r, size - r, size=2)
                shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            else:
                h = rng.uniform(size / 8, size / 3)
                w = rng.uniform(size / 8, size / 3)
                top = rng.uniform(0, size - h)
                left = rng.uniform(0, size - w)
                shape = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
            img[shape] = intensity
            mask |= shape
        noisy = np.clip(img + rng.normal(0.0, noise_std, img.shape), 0.0, 1.0)
        fg = mask.astype(np.float64)
        samples.append(Sample(image=noisy[None], label=np.stack([1.0 - fg, fg])))
    return samples


def _sample_grad(params: network.NetParams, sample: Sample, eps_small: float):
    pred, trace = network.forward(sample.image, params)
    loss, g = dice_loss(pred, sample.label, eps_small)
    return loss, network.backward(trace, g)


def train(params: network.NetParams, dataset: list[Sample], opt: AdamState,
          *, epochs: int | None = None, max_steps: int | None = None,
          batch_size: int = 4, seed: int = 0, eps_small: float = 1e-5,
          threads: int = 1, on_step=None) -> tuple[network.NetParams, list[float]]:
    """Minibatch training loop; returns the params and the per-step loss curve.

    Stops after ``epochs`` passes over the data or ``max_steps`` optimizer
    steps, whichever comes first (at least one must be given).  Aborts with a
    diagnostic if the loss turns non-finite.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if epochs is None and max_steps is None:
        raise ValueError("need epochs or max_steps")
    rng = np.random.default_rng(seed)
    loss_curve: list[float] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        epoch = 0
        while epochs is None or epoch < epochs:
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), batch_size):
                if max_steps is not None and len(loss_curve) >= max_steps:
                    return params, loss_curve
                batch = [dataset[i] for i in order[start:start + batch_size]]
                if pool is not None:
                    results = list(pool.map(
                        lambda s: _sample_grad(params, s, eps_small), batch))
                else:
                    results = [_sample_grad(params, s, eps_small) for s in batch]
                batch_loss = float(np.mean([loss for loss, _ in results]))
                if not np.isfinite(batch_loss):
                    raise RuntimeError(
                        f"training diverged: loss {batch_loss} at step {len(loss_curve)}"
                    )
                grads = {name: np.zeros_like(arr) for name, arr in params.flatten().items()}
                for _, g in results:          # fixed order: deterministic reduction
                    for name in grads:
                        grads[name] += g[name]
                scale = 1.0 / len(batch)
                for name in grads:
                    grads[name] *= scale
                adam_step(params, grads, opt)
                loss_curve.append(batch_loss)
                if on_step is not None:
                    on_step(len(loss_curve), batch_loss)
            epoch += 1
        return params, loss_curve
    finally:
        if pool is not None:
            pool.shutdown()
