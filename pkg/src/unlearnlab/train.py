"""Adam with a floored cosine schedule, the generic optimization loop, and presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import DatasetBundle, Split, minibatches
from .nn import Checkpoint, CrossEntropy, DivergenceError, accuracy, backward, forward


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 64
    floor_factor: float = 0.1
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 < self.floor_factor <= 1.0:
            raise ValueError("floor_factor must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> "OptimState":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype))


@dataclass(frozen=True)
class MetricsRecord:
    phase: str
    step: int
    test_acc: float
    forget_ho_acc: float
    train_loss: float
    lr: float

    def row(self) -> list:
        return [self.phase, self.step, self.test_acc, self.forget_ho_acc, self.train_loss, self.lr]


METRICS_HEADER = ["phase", "step", "test_acc", "forget_ho_acc", "train_loss", "lr"]


def cosine_lr(step: int, total_steps: int, lr0: float, floor_factor: float = 0.1) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``floor_factor * lr0`` at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    s = min(max(step, 0), total_steps)
    return lr0 * (floor_factor + (1.0 - floor_factor) * 0.5 * (1.0 + math.cos(math.pi * s / total_steps)))


def adam_step(state: OptimState, params: np.ndarray, grad: np.ndarray, lr: float,
              weight_decay: float = 0.0) -> tuple[np.ndarray, OptimState]:
    """Bias-corrected Adam followed by decoupled decay ``p -= lr * wd * p``."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths must agree")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    if weight_decay:
        new = new - lr * weight_decay * params
    new = new.astype(params.dtype, copy=False)
    return new, OptimState(m.astype(params.dtype, copy=False), v.astype(params.dtype, copy=False),
                           t, state.beta1, state.beta2, state.eps)


class Evaluator:
    """Computes (test accuracy, forget-holdout accuracy) for metric records."""

    def __init__(self, test: Split | None, forget_ho: Split | None):
        self.test = test
        self.forget_ho = forget_ho

    @classmethod
    def for_bundle(cls, bundle: DatasetBundle) -> "Evaluator":
        return cls(bundle.test, bundle.holdout)

    def __call__(self, ckpt: Checkpoint) -> tuple[float, float]:
        return split_accuracy(ckpt, self.test), split_accuracy(ckpt, self.forget_ho)


def split_accuracy(ckpt: Checkpoint, split: Split | None) -> float:
    if split is None or len(split) == 0:
        return float("nan")
    split.read("eval")
    return accuracy(ckpt, split.x, split.y)


StepFn = Callable[[int, Checkpoint], tuple[float, np.ndarray, np.ndarray, np.ndarray]]


def optimize(start: Checkpoint, n_steps: int, step_fn: StepFn, *, lr: float,
             weight_decay: float = 0.0, floor_factor: float = 0.1, phase: str = "train",
             evaluator: Evaluator | None = None, eval_every: int = 10,
             state: OptimState | None = None,
             post_step: Callable[[int, Checkpoint], None] | None = None,
             ) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Run ``n_steps`` Adam updates driven by ``step_fn``.

    ``step_fn(t, current)`` returns the loss, the flat gradient and the
    running statistics to carry forward; a ``None`` gradient skips the update. A record is emitted every
    ``eval_every`` steps and after the final step.
    """
    cur = start.copy()
    state = state or OptimState.zeros(start.spec.n_params, start.params.dtype)
    records: list[MetricsRecord] = []
    losses: list[float] = []
    for t in range(n_steps):
        lr_t = cosine_lr(t, n_steps, lr, floor_factor)
        loss, grad, mean, var = step_fn(t, cur)
        if not np.isfinite(loss):
            raise DivergenceError(f"{phase}: non-finite loss at step {t + 1}")
        if grad is None:
            # step skipped by the method (e.g. a capped loss term): no update
            cur = cur.replace(step_count=cur.step_count + 1)
        else:
            params, state = adam_step(state, cur.params, grad, lr_t, weight_decay)
            cur = Checkpoint(cur.spec, params, mean, var, cur.step_count + 1)
        losses.append(float(loss))
        if post_step is not None:
            post_step(t, cur)
        step = t + 1
        if step % eval_every == 0 or step == n_steps:
            test_acc, fho_acc = evaluator(cur) if evaluator else (float("nan"), float("nan"))
            records.append(MetricsRecord(phase, step, test_acc, fho_acc,
                                         float(np.mean(losses)), lr_t))
            losses = []
    return cur, records


def epoch_batches(n: int, batch_size: int, seed: int, epochs: int, stream: int = 0) -> list[np.ndarray]:
    """Seeded per-epoch shuffles of ``range(n)``, concatenated across epochs."""
    out: list[np.ndarray] = []
    dummy = Split(np.empty((n, 0)), np.empty(n), np.empty(n))
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, stream, epoch])
        out.extend(minibatches(dummy, batch_size, rng))
    return out


def ce_step_fn(split: Split, batches: Sequence[np.ndarray]) -> StepFn:
    def step(t: int, cur: Checkpoint):
        idx = batches[t]
        _, trace = forward(cur, split.x[idx], "train")
        loss, grad = backward(trace, CrossEntropy(split.y[idx]))
        return loss, grad, trace.bn_mean, trace.bn_var
    return step


def train(init: Checkpoint, data: Split, cfg: TrainConfig, *, phase: str = "pretrain",
          evaluator: Evaluator | None = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Plain cross-entropy training of ``init`` on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty split")
    if data.x.shape[1:] != tuple(init.spec.input_shape):
        raise ValueError("data does not match the model input shape")
    data.read("train")
    batches = epoch_batches(len(data), cfg.batch_size, cfg.seed, cfg.epochs)
    return optimize(init, len(batches), ce_step_fn(data, batches), lr=cfg.lr,
                    weight_decay=cfg.weight_decay, floor_factor=cfg.floor_factor, phase=phase,
                    evaluator=evaluator, eval_every=cfg.eval_every)


def retrain_from_scratch(init: Checkpoint, bundle: DatasetBundle, cfg: TrainConfig,
                         evaluator: Evaluator | None = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Gold standard: the pretraining recipe from the same initialization, retain set only."""
    return train(init, bundle.retain, cfg, phase="retrain", evaluator=evaluator)


@dataclass(frozen=True)
class Preset:
    """Budget and learning rates of the three phases."""

    name: str
    pretrain: TrainConfig
    unlearn_lr: float
    unlearn_epochs: int
    relearn_lr: float
    relearn_epochs: int
    batch_size: int
    hidden: int = 64
    method_params: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "Preset":
        return replace(self, pretrain=replace(self.pretrain, seed=seed))


PAPER = Preset(
    name="paper",
    pretrain=TrainConfig(lr=1e-4, weight_decay=1e-4, epochs=300, batch_size=128, floor_factor=0.1),
    unlearn_lr=1e-5, unlearn_epochs=100,
    relearn_lr=1e-5, relearn_epochs=10,
    batch_size=128,
)

# Desk scale: the learning rates keep the large-scale ratio of unlearning lr
# to the pretraining floor, and perturbation/regularizer magnitudes are
# rescaled to the small network's weight scale (~0.1 per weight).
DESK = Preset(
    name="desk",
    pretrain=TrainConfig(lr=1e-3, weight_decay=1e-4, epochs=100, batch_size=64, floor_factor=0.1),
    unlearn_lr=1e-4, unlearn_epochs=30,
    relearn_lr=3e-4, relearn_epochs=10,
    batch_size=64,
    hidden=128,
    method_params={
        "weight_distortion": {"magnitude": 0.2},
        "weight_dist_reg": {"lambda_dist": 300.0},
        "catastrophic_forgetting": {"coeff": 0.1},
    },
)

PRESETS = {"paper": PAPER, "desk": DESK}
