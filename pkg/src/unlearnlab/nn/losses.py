"""Loss terms with closed-form gradients w.r.t. logits and tap representations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import ForwardTrace, backprop, log_softmax, softmax

_EPS = 1e-12


@dataclass
class CrossEntropy:
    labels: np.ndarray
    weight: float = 1.0

    def __call__(self, logits, taps):
        labels = np.asarray(self.labels)
        if labels.shape != (logits.shape[0],):
            raise ValueError(f"targets shape {labels.shape} != ({logits.shape[0]},)")
        n = logits.shape[0]
        logp = log_softmax(logits)
        loss = -logp[np.arange(n), labels].mean()
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return self.weight * loss, self.weight * d / n, {}


@dataclass
class KLToReference:
    """KL(reference || current) between softened output distributions."""

    ref_logits: np.ndarray
    temperature: float = 1.0
    weight: float = 1.0

    def __call__(self, logits, taps):
        if self.ref_logits.shape != logits.shape:
            raise ValueError(f"reference logits {self.ref_logits.shape} != {logits.shape}")
        t = self.temperature
        n = logits.shape[0]
        logq = log_softmax(self.ref_logits / t)
        logp = log_softmax(logits / t)
        q = np.exp(logq)
        loss = (q * (logq - logp)).sum(axis=1).mean()
        d = (np.exp(logp) - q) / (t * n)
        return self.weight * loss, self.weight * d, {}


@dataclass
class CosineRepresentation:
    """Mean cosine similarity between current and reference tap representations.

    With ``rectified`` the per-example similarity is floored at zero, so
    representations already orthogonal or opposed contribute no gradient.
    """

    ref_taps: dict[str, np.ndarray]
    weight: float = 1.0
    rectified: bool = True

    def __call__(self, logits, taps):
        total = 0.0
        dtaps = {}
        k = len(self.ref_taps)
        for name, ref in self.ref_taps.items():
            r = taps[name]
            n = r.shape[0]
            a = r.reshape(n, -1)
            b = ref.reshape(n, -1)
            na = np.sqrt((a * a).sum(axis=1)) + _EPS
            nb = np.sqrt((b * b).sum(axis=1)) + _EPS
            cos = (a * b).sum(axis=1) / (na * nb)
            active = cos > 0 if self.rectified else np.ones_like(cos, dtype=bool)
            total += np.where(active, cos, 0.0).mean() / k
            dcos = active / (n * k)
            da = dcos[:, None] * (b / (na * nb)[:, None] - cos[:, None] * a / (na * na)[:, None])
            dtaps[name] = self.weight * da.reshape(r.shape).astype(r.dtype, copy=False)
        return self.weight * total, None, dtaps


@dataclass
class EuclideanRepresentation:
    """Mean (over taps and examples) squared distance to reference representations."""

    ref_taps: dict[str, np.ndarray]
    weight: float = 1.0

    def __call__(self, logits, taps):
        total = 0.0
        dtaps = {}
        k = len(self.ref_taps)
        for name, ref in self.ref_taps.items():
            r = taps[name]
            n = r.shape[0]
            diff = (r - ref).reshape(n, -1)
            total += (diff * diff).sum(axis=1).mean() / k
            dtaps[name] = self.weight * (2.0 / (n * k)) * (r - ref)
        return self.weight * total, None, dtaps


@dataclass
class Entropy:
    """Mean Shannon entropy of the predictive distribution (nats)."""

    weight: float = 1.0

    def __call__(self, logits, taps):
        n = logits.shape[0]
        logp = log_softmax(logits)
        p = np.exp(logp)
        h = -(p * logp).sum(axis=1)
        d = -p * (logp + h[:, None]) / n
        return self.weight * h.mean(), self.weight * d, {}


LossTerm = Union[CrossEntropy, KLToReference, CosineRepresentation, EuclideanRepresentation, Entropy]

LOSS_KINDS = {
    "cross-entropy": CrossEntropy,
    "kl-to-reference": KLToReference,
    "cosine-representation": CosineRepresentation,
    "euclidean-representation": EuclideanRepresentation,
    "entropy": Entropy,
}


def make_loss(kind: str, targets=None, **kw) -> LossTerm:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    if kind == "entropy":
        return Entropy(**kw)
    return LOSS_KINDS[kind](targets, **kw)


def evaluate_terms(logits: np.ndarray, taps: dict[str, np.ndarray],
                   loss: LossTerm | Sequence[LossTerm]):
    terms = list(loss) if isinstance(loss, (list, tuple)) else [loss]
    total = 0.0
    dlogits = np.zeros_like(logits)
    dtaps: dict[str, np.ndarray] = {}
    for term in terms:
        value, dl, dt = term(logits, taps)
        total += float(value)
        if dl is not None:
            dlogits += dl
        for name, g in dt.items():
            dtaps[name] = dtaps[name] + g if name in dtaps else g
    return total, dlogits, dtaps


def backward(trace: ForwardTrace | None, loss: LossTerm | Sequence[LossTerm] | str,
             targets=None, **kw) -> tuple[float, np.ndarray]:
    """Loss value and flat parameter gradient for a train-mode trace.

    ``loss`` is a term, a list of terms (composite, summed), or a loss-kind
    name combined with ``targets``.
    """
    if trace is None:
        raise ValueError("backward needs a train-mode trace")
    if isinstance(loss, str):
        loss = make_loss(loss, targets, **kw)
    value, dlogits, dtaps = evaluate_terms(trace.logits, trace.taps, loss)
    if not np.isfinite(value):
        from .core import DivergenceError
        raise DivergenceError("non-finite loss")
    return value, backprop(trace, dlogits, dtaps)


def cross_entropy_per_example(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -logp[np.arange(len(labels)), labels]


__all__ = [
    "CrossEntropy", "KLToReference", "CosineRepresentation", "EuclideanRepresentation",
    "Entropy", "LossTerm", "make_loss", "backward", "evaluate_terms", "softmax",
    "cross_entropy_per_example",
]
