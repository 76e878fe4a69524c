"""Unlearning methods.

Every method maps (pretrained checkpoint, bundle, config) to an
``UnlearnResult`` and trains only on the retain and forget splits. Methods
that need both splits in one step run a single forward pass over the
concatenated batch, so batch-norm statistics come from the mixture.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import audit as _audit
from .data import DatasetBundle, Split
from .nn import (
    Checkpoint, CosineRepresentation, CrossEntropy, Entropy, EuclideanRepresentation,
    KLToReference, backprop, evaluate_terms, eval_taps, l2_param_distance, forward, perturb,
)
from .train import Evaluator, MetricsRecord, OptimState, adam_step, epoch_batches, optimize

METHODS = (
    "scrub", "circuit_breakers", "neggrad_plus", "catastrophic_forgetting", "l1_sparse", "ssd",
    "random_relabel", "weight_attenuation", "weight_dropout", "weight_distortion",
    "weight_dist_reg", "cbft", "tar",
)

# Extra method ids accepted for baselines and degenerate cases.
AUX_METHODS = ("finetune", "noop")

# Methods that never look at the forget set.
RETAIN_ONLY = frozenset({
    "catastrophic_forgetting", "l1_sparse", "finetune", "weight_attenuation", "weight_dropout",
    "weight_distortion", "weight_dist_reg", "noop",
})

DEFAULT_PARAMS: dict[str, dict] = {
    "scrub": {"kl_weight": 1.0, "ce_weight": 1.0, "temperature": 1.0, "max_epochs": None,
              "forget_batch_size": 16},
    "circuit_breakers": {"c_forget": 10.0, "c_retain": 1.0, "schedule": "ramp",
                         "forget_batch_size": 8},
    "neggrad_plus": {"loss_cap": 50.0, "forget_batch_size": 16},
    "catastrophic_forgetting": {"norm": "l2", "coeff": 1e-3},
    "l1_sparse": {"norm": "l1", "coeff": 1e-4},
    "finetune": {"norm": "l2", "coeff": 0.0},
    "ssd": {"select_threshold": 10.0, "dampen_const": 1.0},
    "random_relabel": {"forget_batch_size": 64},
    "weight_attenuation": {"kind": "attenuate", "magnitude": 0.5},
    "weight_dropout": {"kind": "dropout", "magnitude": 0.2},
    "weight_distortion": {"kind": "gaussian", "magnitude": 0.02},
    "weight_dist_reg": {"lambda_dist": 0.01},
    "cbft": {"lambda_mid": 1e-3, "loss_cap": 50.0, "forget_batch_size": 16},
    "tar": {"inner_steps": 4, "inner_lr": None, "lambda_align": 1.0, "lambda_entropy": 1.0,
            "forget_batch_size": 16},
    "noop": {},
}


class InvalidParameter(ValueError):
    pass


@dataclass(frozen=True)
class UnlearnConfig:
    method: str
    lr: float = 1e-5
    epochs: int = 100
    weight_decay: float = 0.0
    batch_size: int = 64
    floor_factor: float = 0.1
    seed: int = 0
    eval_every: int = 10
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in METHODS and self.method not in AUX_METHODS:
            raise InvalidParameter(f"unknown unlearning method {self.method!r}")
        if not self.lr > 0:
            raise InvalidParameter("lr must be positive")
        if self.epochs < 0:
            raise InvalidParameter("epochs must be non-negative")
        if self.batch_size < 2:
            raise InvalidParameter("batch_size must be at least 2")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.method])
        if unknown:
            raise InvalidParameter(f"{self.method}: unknown parameters {sorted(unknown)}")

    def resolved(self) -> dict:
        """Method parameters with defaults filled in."""
        out = dict(DEFAULT_PARAMS[self.method])
        out.update(self.params)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnConfig":
        return cls(**d)


@dataclass
class UnlearnResult:
    method: str
    checkpoint: Checkpoint
    records: list[MetricsRecord]
    wall_clock: float
    steps: int
    pretrained_hash: str
    distance: float
    phases: list[dict] = field(default_factory=list)


StepFn = Callable[[int, Checkpoint], tuple]


@dataclass
class _Ctx:
    """Everything a method body needs; built once per run."""

    start: Checkpoint
    pretrained: Checkpoint
    retain: Split
    forget: Split
    cfg: UnlearnConfig
    p: dict
    n_classes: int
    safeguard: Checkpoint | None = None

    def retain_batches(self, epochs: int | None = None, stream: int = 1) -> list[np.ndarray]:
        ep = self.cfg.epochs if epochs is None else epochs
        return epoch_batches(len(self.retain), self.cfg.batch_size, self.cfg.seed, ep, stream)

    def forget_stream(self, n_steps: int, batch_size: int, stream: int = 2) -> list[np.ndarray]:
        """``n_steps`` forget batches, cycling through reshuffled epochs."""
        bs = min(batch_size, len(self.forget))
        out: list[np.ndarray] = []
        epoch = 0
        while len(out) < n_steps:
            out.extend(epoch_batches(len(self.forget), bs, self.cfg.seed * 7919 + epoch, 1, stream))
            epoch += 1
        return out[:n_steps]


def _train_trace(ck: Checkpoint, x: np.ndarray):
    return forward(ck, x, "train")[1]


def _ref_outputs(ref: Checkpoint, x: np.ndarray):
    """Logits and taps of a frozen reference model, evaluated with its running statistics."""
    return eval_taps(ref, x)


def _grad(trace, terms) -> tuple[float, np.ndarray]:
    value, dlogits, dtaps = evaluate_terms(trace.logits, trace.taps, terms)
    return value, backprop(trace, dlogits, dtaps)


def _trainable_mask(spec) -> np.ndarray:
    return spec.weight_mask(("weight", "bias", "bn_affine"))


# ---------------------------------------------------------------- methods

def _finetune_regularized(ctx: _Ctx) -> tuple[int, StepFn]:
    norm, coeff = ctx.p["norm"], float(ctx.p["coeff"])
    if norm not in ("l1", "l2"):
        raise InvalidParameter(f"norm must be l1 or l2, got {norm!r}")
    if coeff < 0:
        raise InvalidParameter("coeff must be non-negative")
    batches = ctx.retain_batches()
    r = ctx.retain

    def step(t, cur):
        idx = batches[t]
        tr = _train_trace(cur, r.x[idx])
        loss, g = _grad(tr, CrossEntropy(r.y[idx]))
        if coeff:
            if norm == "l2":
                loss += 0.5 * coeff * float(cur.params @ cur.params)
                g = g + coeff * cur.params
            else:
                loss += coeff * float(np.abs(cur.params).sum())
                g = g + coeff * np.sign(cur.params)
        return loss, g, tr.bn_mean, tr.bn_var
    return len(batches), step


def _scrub(ctx: _Ctx) -> tuple[int, StepFn]:
    p = ctx.p
    max_epochs = ctx.cfg.epochs if p["max_epochs"] is None else int(p["max_epochs"])
    if max_epochs < 0 or p["kl_weight"] < 0 or p["ce_weight"] < 0 or p["temperature"] <= 0:
        raise InvalidParameter("scrub weights must be non-negative and temperature positive")
    f_bs = min(int(p["forget_batch_size"]), len(ctx.forget))
    plan: list[tuple[str, np.ndarray]] = []
    for epoch in range(ctx.cfg.epochs):
        if epoch < max_epochs:
            fb = epoch_batches(len(ctx.forget), f_bs, ctx.cfg.seed, 1, 1000 + epoch)
            plan.extend(("max", b) for b in fb)
        rb = epoch_batches(len(ctx.retain), ctx.cfg.batch_size, ctx.cfg.seed, 1, 2000 + epoch)
        plan.extend(("min", b) for b in rb)
    teacher = ctx.pretrained
    T = float(p["temperature"])

    def step(t, cur):
        kind, idx = plan[t]
        if kind == "max":
            x = ctx.forget.x[idx]
            ref, _ = _ref_outputs(teacher, x)
            tr = _train_trace(cur, x)
            loss, g = _grad(tr, KLToReference(ref, T, weight=-1.0))
        else:
            x, y = ctx.retain.x[idx], ctx.retain.y[idx]
            ref, _ = _ref_outputs(teacher, x)
            tr = _train_trace(cur, x)
            loss, g = _grad(tr, [KLToReference(ref, T, weight=p["kl_weight"]),
                                 CrossEntropy(y, weight=p["ce_weight"])])
        return loss, g, tr.bn_mean, tr.bn_var
    return len(plan), step


def _neggrad_plus(ctx: _Ctx) -> tuple[int, StepFn]:
    cap = float(ctx.p["loss_cap"])
    rb = ctx.retain_batches()
    fb = ctx.forget_stream(len(rb), int(ctx.p["forget_batch_size"]))

    def step(t, cur):
        i = t // 2
        if t % 2 == 0:
            x, y = ctx.retain.x[rb[i]], ctx.retain.y[rb[i]]
            tr = _train_trace(cur, x)
            loss, g = _grad(tr, CrossEntropy(y))
            return loss, g, tr.bn_mean, tr.bn_var
        x, y = ctx.forget.x[fb[i]], ctx.forget.y[fb[i]]
        tr = _train_trace(cur, x)
        loss, g = _grad(tr, CrossEntropy(y, weight=-1.0))
        if -loss > cap:
            return loss, None, cur.bn_mean, cur.bn_var
        return loss, g, tr.bn_mean, tr.bn_var
    return 2 * len(rb), step


def _joint(ctx: _Ctx, cur: Checkpoint, ridx, fidx):
    """Forward over the concatenated retain and forget batches."""
    xr, xf = ctx.retain.x[ridx], ctx.forget.x[fidx]
    x = np.concatenate([xr, xf])
    return x, len(xr), _train_trace(cur, x)


class _Sliced:
    """Applies a loss term to a row slice of the logits and taps."""

    def __init__(self, term, sl: slice):
        self.term, self.sl = term, sl

    def __call__(self, logits, taps):
        sub = {k: v[self.sl] for k, v in taps.items()}
        value, dl, dt = self.term(logits[self.sl], sub)
        full_dl = None
        if dl is not None:
            full_dl = np.zeros_like(logits)
            full_dl[self.sl] = dl
        full_dt = {}
        for k, g in dt.items():
            z = np.zeros_like(taps[k])
            z[self.sl] = g
            full_dt[k] = z
        return value, full_dl, full_dt


def _circuit_breakers(ctx: _Ctx) -> tuple[int, StepFn]:
    cf, cr = float(ctx.p["c_forget"]), float(ctx.p["c_retain"])
    if cf < 0 or cr < 0:
        raise InvalidParameter("circuit breaker coefficients must be non-negative")
    if ctx.p["schedule"] not in ("ramp", "constant"):
        raise InvalidParameter("schedule must be 'ramp' or 'constant'")
    ramp = ctx.p["schedule"] == "ramp"
    rb = ctx.retain_batches()
    fb = ctx.forget_stream(len(rb), int(ctx.p["forget_batch_size"]))
    ref = ctx.pretrained
    total = max(len(rb), 1)

    def step(t, cur):
        x, nr, tr = _joint(ctx, cur, rb[t], fb[t])
        _, ref_taps = _ref_outputs(ref, x)
        r_sl, f_sl = slice(0, nr), slice(nr, None)
        # "ramp": forget weight decays from c_forget to c_forget/2 while the
        # retain weight grows from 0 to c_retain/2 over the run
        wf, wr = (cf * (1 - t / (2 * total)), cr * t / (2 * total)) if ramp else (cf, cr)
        terms = [
            _Sliced(EuclideanRepresentation({k: v[r_sl] for k, v in ref_taps.items()}, wr), r_sl),
            _Sliced(CosineRepresentation({k: v[f_sl] for k, v in ref_taps.items()}, wf), f_sl),
        ]
        loss, g = _grad(tr, terms)
        return loss, g, tr.bn_mean, tr.bn_var
    return len(rb), step


def fisher_diagonal(ck: Checkpoint, split: Split, batch_size: int, seed: int) -> np.ndarray:
    """Mean over mini-batches of the squared cross-entropy gradient."""
    batches = epoch_batches(len(split), batch_size, seed, 1, 77)
    acc = np.zeros(ck.spec.n_params, dtype=np.float64)
    for idx in batches:
        tr = _train_trace(ck, split.x[idx])
        _, g = _grad(tr, CrossEntropy(split.y[idx]))
        acc += g.astype(np.float64) ** 2
    return acc / len(batches)


def ssd_dampen(params: np.ndarray, f_retain: np.ndarray, f_forget: np.ndarray,
               alpha: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale parameters whose forget importance exceeds ``alpha`` times their retain importance.

    Returns the dampened parameters and the per-parameter factors (1 where unselected).
    """
    selected = f_forget > alpha * f_retain
    factor = np.ones_like(f_forget)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(selected, lam * f_retain / np.where(f_forget > 0, f_forget, 1.0), 1.0)
    factor[selected] = np.minimum(ratio[selected], 1.0)
    return (params * factor).astype(params.dtype), factor


def _ssd(ctx: _Ctx) -> tuple[int, StepFn]:
    alpha, lam = float(ctx.p["select_threshold"]), float(ctx.p["dampen_const"])
    if alpha <= 0 or lam < 0:
        raise InvalidParameter("ssd needs select_threshold > 0 and dampen_const >= 0")
    bs = ctx.cfg.batch_size
    fr = fisher_diagonal(ctx.start, ctx.retain, bs, ctx.cfg.seed)
    ff = fisher_diagonal(ctx.start, ctx.forget, min(bs, len(ctx.forget)), ctx.cfg.seed)
    mask = _trainable_mask(ctx.start.spec)
    params, _ = ssd_dampen(ctx.start.params, np.where(mask, fr, np.inf), ff, alpha, lam)
    ctx.start = ctx.start.replace(params=params)
    n, step = _finetune_regularized(replace(ctx, p={"norm": "l2", "coeff": 0.0}))
    return n, step


def _random_relabel(ctx: _Ctx) -> tuple[int, StepFn]:
    rb = ctx.retain_batches()
    fb = ctx.forget_stream(len(rb), int(ctx.p["forget_batch_size"]))
    C = ctx.n_classes

    def step(t, cur):
        x, nr, tr = _joint(ctx, cur, rb[t], fb[t])
        rng = np.random.default_rng([ctx.cfg.seed, 31, t])
        y = np.concatenate([ctx.retain.y[rb[t]], rng.integers(0, C, size=len(fb[t]))])
        loss, g = _grad(tr, CrossEntropy(y))
        return loss, g, tr.bn_mean, tr.bn_var
    return len(rb), step


def _perturb_then_finetune(ctx: _Ctx) -> tuple[int, StepFn]:
    kind, mag = ctx.p["kind"], float(ctx.p["magnitude"])
    if mag < 0:
        raise InvalidParameter("perturbation magnitude must be non-negative")
    if kind == "dropout" and mag > 1:
        raise InvalidParameter("dropout fraction must be at most 1")
    ctx.start = perturb(ctx.start, kind, mag, seed=ctx.cfg.seed)
    return _finetune_regularized(replace(ctx, p={"norm": "l2", "coeff": 0.0}))


def distance_push_gradient(params: np.ndarray, anchor: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of ``-lam * ||params - anchor|| / sqrt(n)``; zero at the anchor itself."""
    diff = params.astype(np.float64) - anchor.astype(np.float64)
    norm = float(np.sqrt(diff @ diff))
    if norm == 0.0:
        return np.zeros_like(params)
    return (-lam / math.sqrt(params.size) * diff / norm).astype(params.dtype)


def _weight_dist_reg(ctx: _Ctx) -> tuple[int, StepFn]:
    lam = float(ctx.p["lambda_dist"])
    if lam <= 0:
        raise InvalidParameter("lambda_dist must be positive")
    batches = ctx.retain_batches()
    anchor = ctx.pretrained.params
    mask = _trainable_mask(ctx.start.spec)
    root_n = math.sqrt(anchor.size)

    def step(t, cur):
        idx = batches[t]
        tr = _train_trace(cur, ctx.retain.x[idx])
        loss, g = _grad(tr, CrossEntropy(ctx.retain.y[idx]))
        d = cur.params.astype(np.float64) - anchor
        loss -= lam * float(np.sqrt(d @ d)) / root_n
        g = g + np.where(mask, distance_push_gradient(cur.params, anchor, lam), 0)
        return loss, g, tr.bn_mean, tr.bn_var
    return len(batches), step


def _cbft(ctx: _Ctx) -> tuple[int, StepFn]:
    lam, cap = float(ctx.p["lambda_mid"]), float(ctx.p["loss_cap"])
    if lam < 0 or cap <= 0:
        raise InvalidParameter("cbft needs lambda_mid >= 0 and loss_cap > 0")
    rb = ctx.retain_batches()
    fb = ctx.forget_stream(len(rb), int(ctx.p["forget_batch_size"]))
    pre = ctx.pretrained

    def step(t, cur):
        xr, yr = ctx.retain.x[rb[t]], ctx.retain.y[rb[t]]
        tr = _train_trace(cur, xr)
        loss, g = _grad(tr, CrossEntropy(yr))
        mid_params = (0.5 * (cur.params.astype(np.float64) + pre.params)).astype(cur.params.dtype)
        mid = cur.replace(params=mid_params)
        xm = np.concatenate([xr, ctx.forget.x[fb[t]]])
        ym = np.concatenate([yr, ctx.forget.y[fb[t]]])
        trm = _train_trace(mid, xm)
        mloss, mg = _grad(trm, CrossEntropy(ym))
        if mloss <= cap:
            loss -= lam * mloss
            g = g - lam * 0.5 * mg
        return loss, g, tr.bn_mean, tr.bn_var
    return len(rb), step


def _tar(ctx: _Ctx) -> tuple[int, StepFn]:
    p = ctx.p
    K = int(p["inner_steps"])
    inner_lr = ctx.cfg.lr if p["inner_lr"] is None else float(p["inner_lr"])
    la, le = float(p["lambda_align"]), float(p["lambda_entropy"])
    if K < 0 or inner_lr <= 0 or la < 0 or le < 0:
        raise InvalidParameter("tar needs inner_steps >= 0, inner_lr > 0, non-negative weights")
    safeguard = ctx.safeguard if ctx.safeguard is not None else ctx.start
    rb = ctx.retain_batches()
    inner = epoch_batches(len(ctx.retain), ctx.cfg.batch_size, ctx.cfg.seed,
                          max(1, K * ctx.cfg.epochs), 5)
    fb = ctx.forget_stream(len(rb), int(p["forget_batch_size"]))

    def step(t, cur):
        # simulated adversary: K fresh-Adam fine-tuning steps from the current point
        adv = cur
        state = OptimState.zeros(cur.spec.n_params, cur.params.dtype)
        for k in range(K):
            idx = inner[(t * K + k) % len(inner)]
            tr_i = _train_trace(adv, ctx.retain.x[idx])
            _, gi = _grad(tr_i, CrossEntropy(ctx.retain.y[idx]))
            new, state = adam_step(state, adv.params, gi, inner_lr)
            adv = Checkpoint(adv.spec, new, tr_i.bn_mean, tr_i.bn_var, adv.step_count)
        # entropy on the forget set at the adapted point; first order: gradient used at θ
        tr_f = _train_trace(adv, ctx.forget.x[fb[t]])
        ent, g_ent = _grad(tr_f, Entropy(weight=-le))
        xr = ctx.retain.x[rb[t]]
        _, ref_taps = _ref_outputs(safeguard, xr)
        tr = _train_trace(cur, xr)
        al, g_al = _grad(tr, EuclideanRepresentation(ref_taps, la))
        return ent + al, g_ent + g_al, tr.bn_mean, tr.bn_var
    return len(rb), step


def _noop(ctx: _Ctx) -> tuple[int, StepFn]:
    return 0, lambda t, cur: (0.0, None, cur.bn_mean, cur.bn_var)


_BODIES: dict[str, Callable[[_Ctx], tuple[int, StepFn]]] = {
    "scrub": _scrub,
    "circuit_breakers": _circuit_breakers,
    "neggrad_plus": _neggrad_plus,
    "catastrophic_forgetting": _finetune_regularized,
    "l1_sparse": _finetune_regularized,
    "finetune": _finetune_regularized,
    "ssd": _ssd,
    "random_relabel": _random_relabel,
    "weight_attenuation": _perturb_then_finetune,
    "weight_dropout": _perturb_then_finetune,
    "weight_distortion": _perturb_then_finetune,
    "weight_dist_reg": _weight_dist_reg,
    "cbft": _cbft,
    "tar": _tar,
    "noop": _noop,
}


def unlearn(pretrained: Checkpoint, bundle: DatasetBundle, cfg: UnlearnConfig, *,
            start: Checkpoint | None = None, safeguard: Checkpoint | None = None,
            evaluator: Evaluator | None = None, audit: _audit.AccessAudit | None = None,
            phase: str | None = None) -> UnlearnResult:
    """Run one unlearning method.

    ``start`` defaults to ``pretrained``; it differs when the method is the
    second phase of a composition. A zero epoch budget returns ``start``. Anchored terms (distillation teacher,
    distance and midpoint anchors, representation references) always use
    ``pretrained``; TAR aligns to ``safeguard`` (defaults to ``start``).
    """
    start = pretrained if start is None else start
    if start.spec_hash != pretrained.spec_hash:
        raise ValueError("start checkpoint does not match the pretrained architecture")
    t0 = time.perf_counter()
    phase = phase or f"unlearn:{cfg.method}"
    if cfg.epochs == 0:
        # a zero budget is the identity, including for perturbation-based methods
        return UnlearnResult(cfg.method, start.copy(), [], 0.0, 0, pretrained.content_hash(),
                             l2_param_distance(start, pretrained),
                             [{"method": cfg.method, "steps": 0, "wall_clock": 0.0, "epochs": 0}])
    with _audit.stage(audit, phase):
        retain = bundle.retain.read("train")
        forget = bundle.forget if cfg.method in RETAIN_ONLY else bundle.forget.read("train")
        if len(retain) < 2:
            raise ValueError("retain set too small to train on")
        n_classes = int(pretrained.spec.n_classes)
        ctx = _Ctx(start.copy(), pretrained, retain, forget, cfg, cfg.resolved(), n_classes,
                   safeguard)
        n_steps, step = _BODIES[cfg.method](ctx)
        ckpt, records = optimize(ctx.start, n_steps, step, lr=cfg.lr,
                                 weight_decay=cfg.weight_decay, floor_factor=cfg.floor_factor,
                                 phase=phase, evaluator=evaluator, eval_every=cfg.eval_every)
    wall = time.perf_counter() - t0
    return UnlearnResult(cfg.method, ckpt, records, wall, n_steps, pretrained.content_hash(),
                         l2_param_distance(ckpt, pretrained),
                         [{"method": cfg.method, "steps": n_steps, "wall_clock": wall,
                           "epochs": cfg.epochs}])


def compose_two_phase(pretrained: Checkpoint, bundle: DatasetBundle, first: UnlearnConfig,
                      second: UnlearnConfig, *, evaluator: Evaluator | None = None,
                      audit: _audit.AccessAudit | None = None) -> UnlearnResult:
    """Run ``first`` on the pretrained model, then ``second`` from its output."""
    r1 = unlearn(pretrained, bundle, first, evaluator=evaluator, audit=audit,
                 phase=f"unlearn:{first.method}")
    r2 = unlearn(pretrained, bundle, second, start=r1.checkpoint, safeguard=r1.checkpoint,
                 evaluator=evaluator, audit=audit,
                 phase=f"unlearn:{first.method}+{second.method}")
    return UnlearnResult(f"{first.method}+{second.method}", r2.checkpoint, r1.records + r2.records,
                         r1.wall_clock + r2.wall_clock, r1.steps + r2.steps, r1.pretrained_hash,
                         r2.distance, r1.phases + r2.phases)
