"""Toy training harness: synthetic data, cross-entropy, AdamW, and a train loop."""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autograd as ag
from .model import ModelConfig, build_model, is_buffer, model_forward

BN_MOMENTUM = 0.1

# (shape id, RGB) per class; shapes cycle through five geometric patterns
_PALETTE = np.array(
    [
        (0.9, 0.1, 0.1), (0.1, 0.8, 0.1), (0.1, 0.2, 0.9), (0.9, 0.9, 0.1), (0.8, 0.1, 0.8),
        (0.1, 0.9, 0.9), (1.0, 0.5, 0.0), (0.5, 0.0, 1.0), (0.6, 0.6, 0.6), (0.4, 0.25, 0.1),
    ]
)


def _pattern(shape_id: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape_id == 0:  # filled square
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape_id == 1:  # disc
        return dy * dy + dx * dx <= r * r
    if shape_id == 2:  # horizontal stripes
        return (np.abs(dx) <= 1.5 * r) & (np.abs(dy) <= 1.5 * r) & ((yy // 4) % 2 == 0)
    if shape_id == 3:  # vertical stripes
        return (np.abs(dx) <= 1.5 * r) & (np.abs(dy) <= 1.5 * r) & ((xx // 4) % 2 == 0)
    return ((np.abs(dy) <= r / 3) | (np.abs(dx) <= r / 3)) & (np.abs(dy) <= 1.5 * r) & (np.abs(dx) <= 1.5 * r)


@dataclass(frozen=True)
class SyntheticDataset:
    """Balanced colored-shape images; sample ``i`` depends only on ``(seed, i)``."""

    seed: int = 0
    num_classes: int = 10
    size: int = 200
    image_size: int = 64
    noise: float = 0.1

    def label(self, index: int) -> int:
        return index % self.num_classes

    def sample(self, index: int) -> tuple[np.ndarray, int]:
        if not 0 <= index < self.size:
            raise IndexError(index)
        rng = np.random.default_rng([self.seed, index])
        c = self.label(index)
        n = self.image_size
        r = n * rng.uniform(0.15, 0.22)
        cy, cx = rng.uniform(0.35 * n, 0.65 * n, size=2)
        mask = _pattern(c % 5, n, cy, cx, r)
        color = _PALETTE[c % len(_PALETTE)]
        if c >= len(_PALETTE):  # more classes than colors: shade variation
            color = color * (0.5 + 0.5 * ((c // len(_PALETTE)) % 2))
        img = np.full((n, n, 3), 0.5) + self.noise * rng.standard_normal((n, n, 3))
        img[mask] = color + self.noise * rng.standard_normal((int(mask.sum()), 3))
        return (img - 0.5).astype(np.float32), c

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.sample(i) for i in range(self.size)]
        return np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def cross_entropy_loss(logits, labels):
    """Mean ``-log softmax(logits)[label]`` via log-sum-exp."""
    return ag.cross_entropy(logits, labels)


@dataclass
class OptimizerState:
    lr: float = 6e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    total_steps: int | None = None
    min_lr: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step: int | None = None) -> float:
        """Linear warmup to ``lr`` then cosine decay to ``min_lr`` (1-based step)."""
        t = self.step + 1 if step is None else step
        if self.warmup_steps and t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        if not self.total_steps:
            return self.lr
        span = max(1, self.total_steps - self.warmup_steps)
        frac = min(1.0, (t - self.warmup_steps) / span)
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1 + math.cos(math.pi * frac))


def adamw_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    decay: Callable[[str], bool] | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Returns new parameter arrays; ``state`` is advanced in place and returned.
    ``decay(name)`` selects which parameters get weight decay (default: all).
    """
    lr = state.learning_rate()
    state.step += 1
    b1, b2 = state.betas
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    out = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p
        if state.weight_decay and (decay is None or decay(name)):
            new = new * (1 - lr * state.weight_decay)
        new = new - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = new.astype(p.dtype, copy=False)
    return out, state


def default_decay(name: str) -> bool:
    """Decay conv/linear weights only, not biases, norms or temperatures."""
    return name.endswith(".weight")


def _shard_gradients(config, weights, x, y):
    tape = ag.Tape()
    params = {k: (v if is_buffer(k) else tape.param(k, v)) for k, v in weights.items()}
    stats: dict | None = {} if config.norm == "batch" else None
    logits = model_forward(config, params, x, stats=stats)
    loss = cross_entropy_loss(logits, y)
    return float(loss.value), tape.backward(loss), stats or {}


def batch_gradients(config: ModelConfig, weights, x, y, threads: int | None = None):
    """Loss, gradients and batch-norm moments for one mini-batch.

    With ``threads > 1`` the batch is split into that many shards, each
    differentiated on its own tape, and results are combined in shard order.
    """
    if threads is None:
        threads = max(1, int(os.environ.get("EDGENEXT_THREADS", "1") or 1))
    threads = min(threads, len(x))
    if threads == 1:
        return _shard_gradients(config, weights, x, y)
    bounds = np.linspace(0, len(x), threads + 1).astype(int)
    shards = [(x[a:b], y[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(threads) as pool:
        results = list(pool.map(lambda s: _shard_gradients(config, weights, *s), shards))
    fracs = [len(s[1]) / len(x) for s in shards]
    loss = sum(f * r[0] for f, r in zip(fracs, results))
    grads = {k: sum(f * r[1][k] for f, r in zip(fracs, results)) for k in results[0][1]}
    stats = {
        k: tuple(sum(f * r[2][k][i] for f, r in zip(fracs, results)) for i in range(2))
        for k in results[0][2]
    }
    return loss, grads, stats


def update_running_stats(weights, stats, momentum: float = BN_MOMENTUM):
    out = dict(weights)
    for name, (mean, var) in stats.items():
        rm, rv = out[name + ".running_mean"], out[name + ".running_var"]
        out[name + ".running_mean"] = ((1 - momentum) * rm + momentum * mean).astype(rm.dtype)
        out[name + ".running_var"] = ((1 - momentum) * rv + momentum * var).astype(rv.dtype)
    return out


def evaluate(config: ModelConfig, weights, x, y, batch_size: int = 100) -> tuple[float, float]:
    """Mean loss and accuracy in inference mode."""
    losses, correct = [], 0
    for a in range(0, len(x), batch_size):
        logits = model_forward(config, weights, x[a : a + batch_size])
        loss, _ = ag.cross_entropy_value(logits, y[a : a + batch_size])
        losses.append(float(loss) * len(logits))
        correct += int((logits.argmax(axis=1) == y[a : a + batch_size]).sum())
    return sum(losses) / len(x), correct / len(x)


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    curve: list[tuple[int, float, float]]

    @property
    def final_accuracy(self) -> float:
        return self.curve[-1][2]

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "loss", "accuracy"))
        for step, loss, acc in self.curve:
            w.writerow((step, repr(loss), repr(acc)))
        return buf.getvalue()


def train_loop(
    config: ModelConfig,
    dataset: SyntheticDataset,
    steps: int = 2000,
    seed: int = 0,
    batch_size: int = 50,
    lr: float = 6e-3,
    weight_decay: float = 0.05,
    warmup_steps: int = 50,
    eval_every: int = 100,
    target_accuracy: float | None = None,
    threads: int | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train ``config`` on ``dataset`` with AdamW; deterministic per seed.

    Every ``eval_every`` steps (and at step 0) the whole dataset is evaluated
    and ``(step, loss, accuracy)`` appended to the curve.  Training stops
    early once ``target_accuracy`` is reached.
    """
    if dataset.image_size % 32:
        raise ValueError("dataset image size must be divisible by 32")
    x, y = dataset.arrays()
    weights = build_model(config, seed)
    state = OptimizerState(
        lr=lr, weight_decay=weight_decay, warmup_steps=warmup_steps, total_steps=steps
    )
    rng = np.random.default_rng([seed, 1])
    curve = [(0, *evaluate(config, weights, x, y))]
    order = rng.permutation(len(x))
    cursor = 0
    for step in range(1, steps + 1):
        if cursor + batch_size > len(x):
            order, cursor = rng.permutation(len(x)), 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        _, grads, stats = batch_gradients(config, weights, x[idx], y[idx], threads)
        trainable = {k: v for k, v in weights.items() if not is_buffer(k)}
        new, state = adamw_step(state, trainable, grads, default_decay)
        weights = update_running_stats({**weights, **new}, stats)
        if step % eval_every == 0 or step == steps:
            curve.append((step, *evaluate(config, weights, x, y)))
            if log:
                log(f"step {step}: loss {curve[-1][1]:.4f} acc {curve[-1][2]:.3f}")
            if target_accuracy is not None and curve[-1][2] >= target_accuracy:
                break
    return TrainResult(weights, curve)
