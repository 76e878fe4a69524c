"""Hold-out consistency scores: how often an example is predicted correctly
by models that never trained on it."""

from __future__ import annotations

import numpy as np

from . import audit as _audit
from .data import DataError, Dataset, TypicalityScores
from .nn import ModelSpec, accuracy, init_checkpoint, predict_logits
from .train import TrainConfig, train


def fold_assignment(n: int, folds: int, seed: int, repeat: int) -> np.ndarray:
    """Balanced random fold index per example for one repetition."""
    rng = np.random.default_rng([seed, 5151, repeat])
    return rng.permutation(np.arange(n) % folds)


def score_typicality_holdout(dataset: Dataset, spec: ModelSpec, cfg: TrainConfig,
                             folds: int = 5, seed: int = 0, repeats: int | None = None,
                             audit: _audit.AccessAudit | None = None) -> TypicalityScores:
    """Score each example by hold-out correctness over ``repeats`` k-fold partitions.

    Each repetition trains one model per fold on the other folds and predicts
    the held-out fold, so every example is judged once per repetition. With
    the default ``repeats == folds`` the scores lie in {0, 1/k, ..., 1}.
    """
    if folds < 3:
        raise DataError("need at least 3 folds")
    repeats = folds if repeats is None else repeats
    if repeats < 1:
        raise DataError("need at least one repetition")
    n = len(dataset)
    hits = np.zeros(n)
    full = dataset.split("train")
    with _audit.stage(audit, "typicality"):
        for r in range(repeats):
            assign = fold_assignment(n, folds, seed, r)
            for f in range(folds):
                held = np.flatnonzero(assign == f)
                fit = full.take(np.flatnonzero(assign != f))
                init = init_checkpoint(spec, seed * 1000 + r * folds + f)
                model, _ = train(init, fit, TrainConfig(
                    lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs,
                    batch_size=cfg.batch_size, floor_factor=cfg.floor_factor,
                    seed=cfg.seed + 17 * r + f, eval_every=10 ** 9), phase="typicality")
                pred = predict_logits(model, dataset.examples[held]).argmax(axis=1)
                hits[held] += pred == dataset.labels[held]
    return TypicalityScores(dataset.ids.copy(), hits / repeats, "holdout-consistency")


def holdout_gap(dataset: Dataset, scores: TypicalityScores, spec: ModelSpec, cfg: TrainConfig,
                seed: int = 0) -> tuple[float, float]:
    """Accuracy on atypical and typical members of a model trained without the atypical ones."""
    s = scores.for_ids(dataset.ids)
    atyp = s < 0.5
    if not atyp.any() or atyp.all():
        raise DataError("need both typical and atypical members")
    model, _ = train(init_checkpoint(spec, seed), dataset.split("train", np.flatnonzero(~atyp)),
                     cfg, phase="typicality")
    return (accuracy(model, dataset.examples[atyp], dataset.labels[atyp]),
            accuracy(model, dataset.examples[~atyp], dataset.labels[~atyp]))
