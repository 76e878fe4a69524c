"""Weight-space diagnostics: parameter distances, interpolation curves, barrier height."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .data import DatasetBundle, Split
from .nn import Checkpoint, accuracy, interpolate, l2_param_distance


@dataclass
class LmcCurve:
    a_id: str
    b_id: str
    alphas: np.ndarray
    test: np.ndarray
    forget: np.ndarray
    retain: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.alphas)

    def rows(self) -> list[tuple[float, float, float, float]]:
        return [(float(a), float(t), float(f), float(r))
                for a, t, f, r in zip(self.alphas, self.test, self.forget, self.retain)]

    def reversed(self) -> "LmcCurve":
        return LmcCurve(self.b_id, self.a_id, 1.0 - self.alphas[::-1], self.test[::-1],
                        self.forget[::-1], self.retain[::-1])


LMC_HEADER = ["alpha", "test_acc", "forget_acc", "retain_acc"]


def _acc(ck: Checkpoint, split: Split | None) -> float:
    if split is None or len(split) == 0:
        return float("nan")
    return accuracy(ck, split.x, split.y)


def lmc_curve(a: Checkpoint, b: Checkpoint, bundle: DatasetBundle, n_points: int = 11,
              a_id: str = "a", b_id: str = "b", retain_sample: int | None = 2000,
              bn_interp: str = "variance") -> LmcCurve:
    """Accuracy along the straight line from ``a`` (alpha = 0) to ``b`` (alpha = 1).

    Parameters and batch-norm statistics are interpolated together; every
    point is evaluated with its interpolated running statistics.
    """
    if a.spec_hash != b.spec_hash:
        raise ValueError("checkpoints have different architectures")
    if n_points < 3:
        raise ValueError("n_points must be at least 3")
    retain = bundle.retain
    if retain_sample is not None and len(retain) > retain_sample:
        retain = retain.take(np.linspace(0, len(retain) - 1, retain_sample).astype(int))
    alphas = np.arange(n_points) / (n_points - 1)
    test, forget, ret = [], [], []
    for alpha in alphas:
        ck = interpolate(a, b, float(alpha), bn_interp=bn_interp)
        test.append(_acc(ck, bundle.test))
        forget.append(_acc(ck, bundle.holdout))
        ret.append(_acc(ck, retain))
    return LmcCurve(a_id, b_id, alphas, np.array(test), np.array(forget), np.array(ret))


def barrier_height(curve: LmcCurve, metric: str = "test") -> float:
    """Largest drop of the curve below the chord joining its endpoints (0 if none)."""
    y = np.asarray(getattr(curve, metric), dtype=np.float64)
    alphas = np.asarray(curve.alphas, dtype=np.float64)
    chord = y[0] + (y[-1] - y[0]) * alphas
    if len(y) <= 2:
        return 0.0
    return float(max(0.0, (chord - y)[1:-1].max()))


@dataclass
class DistanceReport:
    rows: dict[str, float]
    retrain: float
    extra: dict = field(default_factory=dict)

    def ordered(self) -> list[tuple[str, float]]:
        return sorted(self.rows.items())


def distance_report(pretrained: Checkpoint, results, retrain: Checkpoint) -> DistanceReport:
    """L2 parameter distance (running statistics excluded) of each result to the pretrained model.

    ``results`` maps method names to checkpoints, or is a list of objects
    with ``method`` and ``checkpoint`` attributes.
    """
    items = results.items() if isinstance(results, dict) else (
        (r.method, r.checkpoint) for r in results)
    rows = {}
    for name, ck in items:
        if ck.spec_hash != pretrained.spec_hash:
            raise ValueError(f"{name}: architecture differs from the pretrained model")
        rows[name] = l2_param_distance(ck, pretrained)
    return DistanceReport(dict(sorted(rows.items())), l2_param_distance(retrain, pretrained))


def spearman(x, y) -> float:
    """Spearman rank correlation; NaN when either input is constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("inputs differ in length")
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(spearmanr(x, y)[0])


def predictor_comparison(distances: dict[str, float], barriers: dict[str, float],
                         post_relearn_forget: dict[str, float]) -> dict:
    """Rank correlation of each weight-space diagnostic with post-relearning forget accuracy."""
    names = sorted(post_relearn_forget)
    target = [post_relearn_forget[n] for n in names]
    rho_l2 = spearman([distances[n] for n in names], target)
    rho_bar = spearman([barriers[n] for n in names], target)
    better = "l2" if (np.nan_to_num(-rho_l2, nan=-2) >= np.nan_to_num(-rho_bar, nan=-2)) else "barrier"
    return {"spearman_l2": rho_l2, "spearman_barrier": rho_bar, "better_predictor": better}
