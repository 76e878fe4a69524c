"""Attacks on unlearned checkpoints: relearning, weight quantization, membership inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import audit as _audit
from .data import DataError, DatasetBundle, Split, corrupt
from .nn import Checkpoint, cross_entropy_per_example, predict_logits
from .train import Evaluator, MetricsRecord, TrainConfig, split_accuracy, train

REMINDER_SOURCES = ("retain", "heldout-test", "corrupted-test")


@dataclass(frozen=True)
class RelearnConfig:
    n_relearn: int = 0
    source: str = "retain"
    lr: float = 1e-5
    epochs: int = 10
    batch_size: int = 64
    floor_factor: float = 0.1
    seed: int = 0
    eval_every: int = 10
    corruption_sigma: float = 0.5

    def __post_init__(self) -> None:
        if self.source not in REMINDER_SOURCES:
            raise ValueError(f"unknown reminder source {self.source!r}")
        if self.n_relearn < 0:
            raise ValueError("n_relearn must be non-negative")
        if not self.lr > 0 or self.epochs < 1:
            raise ValueError("relearning needs lr > 0 and at least one epoch")

    def to_dict(self) -> dict:
        return asdict(self)


def reminder_set(bundle: DatasetBundle, cfg: RelearnConfig) -> Split:
    if cfg.source == "retain":
        return bundle.retain
    if bundle.pool is None:
        raise DataError(f"reminder source {cfg.source!r} needs a held-out pool")
    if cfg.source == "heldout-test":
        return bundle.pool
    return corrupt(bundle.pool, cfg.corruption_sigma, cfg.seed).with_roles("pool_corrupted")


def relearn(ckpt: Checkpoint, bundle: DatasetBundle, cfg: RelearnConfig, *,
            audit: _audit.AccessAudit | None = None,
            phase: str = "relearn") -> tuple[Checkpoint, list[MetricsRecord], DatasetBundle]:
    """Fine-tune on the reminder set plus ``n_relearn`` forget examples.

    Returns the relearned checkpoint, its metric stream (forget accuracy is
    measured on the holdout part of the forget set), and the bundle split
    used, whose holdout never enters training.
    """
    if cfg.n_relearn != bundle.n_relearn:
        bundle = bundle.with_relearn(cfg.n_relearn)
    data = reminder_set(bundle, cfg).concat(bundle.relearn)
    if len(data) < 2:
        raise DataError("relearning set is empty")
    tcfg = TrainConfig(lr=cfg.lr, weight_decay=0.0, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       floor_factor=cfg.floor_factor, seed=cfg.seed, eval_every=cfg.eval_every)
    with _audit.stage(audit, phase):
        out, records = train(ckpt, data, tcfg, phase=phase, evaluator=Evaluator.for_bundle(bundle))
    return out, records, bundle


# -- quantization -----------------------------------------------------------

def quantize_tensor(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric per-tensor round-to-nearest; an all-zero tensor is returned unchanged."""
    if not 2 <= bits <= 32:
        raise ValueError("bits must lie in [2, 32]")
    w64 = w.astype(np.float64)
    peak = float(np.abs(w64).max()) if w64.size else 0.0
    if peak == 0.0:
        return w.copy()
    levels = 2 ** (bits - 1) - 1
    scale = peak / levels
    return (np.round(w64 / scale) * scale).astype(w.dtype)


def quantize(ckpt: Checkpoint, bits: int, weights_only: bool = False) -> Checkpoint:
    """Quantize every trainable tensor; batch-norm running statistics are left as they are.

    ``weights_only`` keeps biases and batch-norm affine parameters at full precision.
    """
    params = ckpt.params.copy()
    for slot in ckpt.spec.param_slots:
        if weights_only and slot.role != "weight":
            continue
        size = int(np.prod(slot.shape))
        sl = slice(slot.offset, slot.offset + size)
        params[sl] = quantize_tensor(ckpt.params[sl], bits)
    return ckpt.replace(params=params)


@dataclass(frozen=True)
class QuantRow:
    bits: int
    test_acc: float
    forget_acc: float
    top_class_share: float  # fraction of test predictions falling on the most common class


def quantization_sweep(ckpt: Checkpoint, bits_list, bundle: DatasetBundle) -> list[QuantRow]:
    rows = []
    for b in bits_list:
        q = quantize(ckpt, int(b))
        pred = predict_logits(q, bundle.test.x).argmax(axis=1)
        share = float(np.bincount(pred, minlength=q.spec.n_classes).max() / len(pred))
        rows.append(QuantRow(int(b), float((pred == bundle.test.y).mean()),
                             split_accuracy(q, bundle.holdout), share))
    return rows


def recovered_without_collapse(rows: list[QuantRow], base_test: float, base_forget: float,
                               tol: float = 0.05) -> list[int]:
    """Bit widths where forget accuracy rises by more than ``tol`` while test accuracy holds."""
    return [r.bits for r in rows
            if r.forget_acc > base_forget + tol and abs(r.test_acc - base_test) <= tol]


# -- membership inference ------------------------------------------------------

@dataclass(frozen=True)
class MiaReport:
    threshold: float
    direction: str          # "below": loss < threshold predicts member
    accuracy: float         # cross-validated balanced accuracy
    insample_accuracy: float
    n_members: int
    n_nonmembers: int
    degenerate: bool = False


def best_threshold(losses: np.ndarray, is_member: np.ndarray) -> tuple[float, str, float]:
    """Threshold and direction maximizing balanced accuracy over midpoints of sorted losses."""
    order = np.argsort(losses, kind="stable")
    v = losses[order]
    m = is_member[order].astype(float)
    n_m, n_n = m.sum(), (1 - m).sum()
    # after cutting between positions i-1 and i: members strictly below the cut
    below_m = np.concatenate([[0.0], np.cumsum(m)])
    below_n = np.concatenate([[0.0], np.cumsum(1 - m)])
    valid = np.r_[True, v[1:] > v[:-1], True]
    bal_below = 0.5 * (below_m / n_m + (n_n - below_n) / n_n)
    bal_above = 1.0 - bal_below
    bal_below = np.where(valid, bal_below, -1)
    bal_above = np.where(valid, bal_above, -1)
    cuts = np.concatenate([[v[0] - 1.0], 0.5 * (v[1:] + v[:-1]), [v[-1] + 1.0]])
    i, j = int(np.argmax(bal_below)), int(np.argmax(bal_above))
    if bal_below[i] >= bal_above[j]:
        return float(cuts[i]), "below", float(bal_below[i])
    return float(cuts[j]), "above", float(bal_above[j])


def _predict(losses, threshold, direction):
    return losses < threshold if direction == "below" else losses > threshold


def balanced_threshold_attack(member_losses: np.ndarray, nonmember_losses: np.ndarray,
                              seed: int = 0, folds: int = 5) -> MiaReport:
    """Fit a loss threshold and estimate its balanced accuracy by stratified cross-validation."""
    member_losses = np.asarray(member_losses, dtype=np.float64)
    nonmember_losses = np.asarray(nonmember_losses, dtype=np.float64)
    n_m, n_n = len(member_losses), len(nonmember_losses)
    losses = np.concatenate([member_losses, nonmember_losses])
    is_member = np.r_[np.ones(n_m, bool), np.zeros(n_n, bool)]
    if np.ptp(losses) == 0:
        return MiaReport(float(losses[0]), "below", 0.5, 0.5, n_m, n_n, degenerate=True)
    thr, direction, ins = best_threshold(losses, is_member)
    rng = np.random.default_rng([seed, 1601])
    fold = np.empty(len(losses), dtype=int)
    fold[:n_m] = rng.permutation(np.arange(n_m) % folds)
    fold[n_m:] = rng.permutation(np.arange(n_n) % folds)
    pred = np.zeros(len(losses), bool)
    for f in range(folds):
        fit = fold != f
        t, d, _ = best_threshold(losses[fit], is_member[fit])
        pred[~fit] = _predict(losses[~fit], t, d)
    acc = 0.5 * (pred[is_member].mean() + (~pred[~is_member]).mean())
    return MiaReport(thr, direction, float(acc), ins, n_m, n_n)


def nonmember_candidates(bundle: DatasetBundle) -> np.ndarray:
    """Test indices in the same typicality stratum as the forget set (all of them if unknown)."""
    n = len(bundle.test)
    if bundle.test_scores is None or bundle.spec.typicality == "random":
        return np.arange(n)
    s = np.asarray(bundle.test_scores)
    keep = s < 0.5 if bundle.spec.typicality == "atypical" else s >= 0.5
    return np.flatnonzero(keep)


def mia_balanced_loss_threshold(ckpt: Checkpoint, bundle: DatasetBundle, seed: int = 0,
                                folds: int = 5) -> MiaReport:
    """Members are the forget set; non-members an equal-size seeded draw from the test set."""
    cand = nonmember_candidates(bundle)
    k = min(len(bundle.forget), len(cand))
    if k < 20:
        raise DataError("membership inference needs at least 20 examples per population")
    rng = np.random.default_rng([seed, 2718])
    mem = rng.choice(len(bundle.forget), size=k, replace=False)
    non = rng.choice(cand, size=k, replace=False)
    fx, fy = bundle.forget.x[mem], bundle.forget.y[mem]
    tx, ty = bundle.test.x[non], bundle.test.y[non]
    lm = cross_entropy_per_example(predict_logits(ckpt, fx).astype(np.float64), fy)
    ln = cross_entropy_per_example(predict_logits(ckpt, tx).astype(np.float64), ty)
    return balanced_threshold_attack(lm, ln, seed, folds)
