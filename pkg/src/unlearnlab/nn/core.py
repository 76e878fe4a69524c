"""Forward and backward passes over a flat parameter vector.

Every layer reads its parameters as views into ``params`` and writes its
gradients into the matching views of a flat gradient buffer, so the
optimizer only ever sees one contiguous vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import ModelSpec, SpecError

if TYPE_CHECKING:
    from .checkpoint import Checkpoint

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DivergenceError(FloatingPointError):
    """A forward or backward pass produced non-finite values."""


@dataclass
class ForwardTrace:
    """Everything the backward pass needs; produced only by train-mode forwards."""

    spec: ModelSpec
    params: np.ndarray
    caches: list[Any]
    logits: np.ndarray
    taps: dict[str, np.ndarray]
    bn_mean: np.ndarray
    bn_var: np.ndarray
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _views(spec: ModelSpec, flat: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    for slot in spec.param_slots:
        out.setdefault(slot.layer, {})[slot.name] = flat[slot.offset:slot.stop].reshape(slot.shape)
    return out


def _conv_cols(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def run_network(spec: ModelSpec, params: np.ndarray, bn_mean: np.ndarray, bn_var: np.ndarray,
                x: np.ndarray, train: bool, momentum: float = BN_MOMENTUM):
    """Run the layer table. Returns (logits, caches, taps, new_bn_mean, new_bn_var, batch_stats)."""
    dtype = params.dtype
    h = np.asarray(x, dtype=dtype)
    if h.shape[1:] != tuple(spec.input_shape):
        raise SpecError(f"batch shape {h.shape[1:]} does not match input {tuple(spec.input_shape)}")
    if train and h.shape[0] < 2:
        raise SpecError("train-mode batch norm needs at least two examples")
    views = _views(spec, params)
    bn_index = {name: (off, size) for name, off, size in spec.bn_slots}
    new_mean = bn_mean.copy() if train else bn_mean
    new_var = bn_var.copy() if train else bn_var
    caches: list[Any] = []
    taps: dict[str, np.ndarray] = {}
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    for layer in spec.layers:
        kind = layer.kind
        if kind == "dense":
            p = views[layer.name]
            cache = h
            h = h @ p["W"] + p["b"]
        elif kind == "conv2d":
            p = views[layer.name]
            n, _, hh, ww = h.shape
            k = layer.dims[2]
            cols = _conv_cols(h, k)
            wmat = p["W"].reshape(layer.dims[1], -1)
            out = cols @ wmat.T + p["b"]
            cache = (cols, h.shape)
            h = out.reshape(n, hh, ww, layer.dims[1]).transpose(0, 3, 1, 2)
        elif kind == "batchnorm":
            p = views[layer.name]
            off, size = bn_index[layer.name]
            axes = (0,) if h.ndim == 2 else (0, 2, 3)
            bshape = (1, size) if h.ndim == 2 else (1, size, 1, 1)
            if train:
                mu = h.mean(axis=axes)
                var = h.var(axis=axes)
                m = h.size // size
                unbiased = var * (m / max(m - 1, 1))
                new_mean[off:off + size] = (1 - momentum) * bn_mean[off:off + size] + momentum * mu
                new_var[off:off + size] = (1 - momentum) * bn_var[off:off + size] + momentum * unbiased
                batch_stats[layer.name] = (mu, var)
            else:
                mu = bn_mean[off:off + size]
                var = bn_var[off:off + size]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mu.reshape(bshape)) * inv.reshape(bshape)
            cache = (xhat, inv, axes, bshape)
            h = xhat * p["gamma"].reshape(bshape) + p["beta"].reshape(bshape)
        elif kind == "relu":
            cache = h > 0
            h = h * cache
        elif kind == "maxpool":
            n, c, hh, ww = h.shape
            h2, w2 = hh // 2, ww // 2
            xr = h[:, :, :h2 * 2, :w2 * 2].reshape(n, c, h2, 2, w2, 2)
            xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
            idx = xr.argmax(axis=-1)
            cache = (idx, h.shape)
            h = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        elif kind == "flatten":
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        else:  # pragma: no cover - validated by ModelSpec
            raise SpecError(kind)
        caches.append(cache)
        if layer.name in spec.taps:
            taps[layer.name] = h
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite activation in forward pass")
    return h, caches, taps, new_mean, new_var, batch_stats


def backprop(trace: ForwardTrace, dlogits: np.ndarray,
             dtaps: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Backpropagate output (and optional tap) gradients to a flat parameter gradient."""
    spec = trace.spec
    grad = np.zeros_like(trace.params)
    pviews = _views(spec, trace.params)
    gviews = _views(spec, grad)
    dtaps = dtaps or {}
    d = dlogits.astype(trace.params.dtype, copy=False)
    for layer, cache in zip(reversed(spec.layers), reversed(trace.caches)):
        if layer.name in dtaps:
            d = d + dtaps[layer.name]
        kind = layer.kind
        if kind == "dense":
            x = cache
            g = gviews[layer.name]
            g["W"][...] = x.T @ d
            g["b"][...] = d.sum(axis=0)
            d = d @ pviews[layer.name]["W"].T
        elif kind == "conv2d":
            cols, xshape = cache
            n, cin, hh, ww = xshape
            cout, k = layer.dims[1], layer.dims[2]
            dflat = d.transpose(0, 2, 3, 1).reshape(-1, cout)
            g = gviews[layer.name]
            g["W"][...] = (dflat.T @ cols).reshape(g["W"].shape)
            g["b"][...] = dflat.sum(axis=0)
            dcols = (dflat @ pviews[layer.name]["W"].reshape(cout, -1)).reshape(n, hh, ww, cin, k, k)
            p = k // 2
            dxp = np.zeros((n, cin, hh + 2 * p, ww + 2 * p), dtype=d.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + hh, j:j + ww] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            d = dxp[:, :, p:p + hh, p:p + ww]
        elif kind == "batchnorm":
            xhat, inv, axes, bshape = cache
            g = gviews[layer.name]
            gamma = pviews[layer.name]["gamma"].reshape(bshape)
            g["gamma"][...] = (d * xhat).sum(axis=axes)
            g["beta"][...] = d.sum(axis=axes)
            dxhat = d * gamma
            m = d.size // gamma.size
            d = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        elif kind == "relu":
            d = d * cache
        elif kind == "maxpool":
            idx, xshape = cache
            n, c, hh, ww = xshape
            h2, w2 = hh // 2, ww // 2
            dr = np.zeros((n, c, h2, w2, 4), dtype=d.dtype)
            np.put_along_axis(dr, idx[..., None], d[..., None], axis=-1)
            dr = dr.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2 * 2, w2 * 2)
            dx = np.zeros(xshape, dtype=d.dtype)
            dx[:, :, :h2 * 2, :w2 * 2] = dr
            d = dx
        elif kind == "flatten":
            d = d.reshape(cache)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    return grad


def forward(ckpt: "Checkpoint", batch: np.ndarray, mode: str = "eval",
            momentum: float = BN_MOMENTUM) -> tuple[np.ndarray, ForwardTrace | None]:
    """Evaluate ``ckpt`` on ``batch``.

    In ``train`` mode batch norm normalizes with batch statistics and the
    returned trace carries the updated running statistics; in ``eval`` mode
    the running statistics are used and no trace is returned.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    ckpt.check()
    train = mode == "train"
    logits, caches, taps, mean, var, stats = run_network(
        ckpt.spec, ckpt.params, ckpt.bn_mean, ckpt.bn_var, batch, train, momentum)
    if not train:
        return logits, None
    trace = ForwardTrace(ckpt.spec, ckpt.params, caches, logits, taps, mean, var, stats)
    return logits, trace


def eval_taps(ckpt: "Checkpoint", batch: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Eval-mode logits together with the tap representations."""
    logits, _, taps, _, _, _ = run_network(ckpt.spec, ckpt.params, ckpt.bn_mean, ckpt.bn_var,
                                           batch, train=False)
    return logits, taps


def predict_logits(ckpt: "Checkpoint", x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    out = []
    for start in range(0, len(x), batch_size):
        out.append(forward(ckpt, x[start:start + batch_size], "eval")[0])
    if not out:
        return np.zeros((0, ckpt.spec.n_classes), dtype=ckpt.params.dtype)
    return np.concatenate(out)


def accuracy(ckpt: "Checkpoint", x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict_logits(ckpt, x).argmax(axis=1) == y))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
