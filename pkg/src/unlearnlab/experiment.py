"""Declarative experiment runner.

A run goes pretrain -> retrain-from-scratch -> unlearning methods -> attacks on
every resulting checkpoint -> weight-space diagnostics -> CSV/SVG reports.
Every completed stage is recorded in ``manifest.json`` together with its
output files, so an interrupted or repeated run skips finished work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, plots
from . import audit as _audit
from .attacks import RelearnConfig, mia_balanced_loss_threshold, quantization_sweep, relearn
from .data import (
    DataError, Dataset, DatasetBundle, ForgetSpec, SyntheticGeometry, TypicalityScores,
    build_bundle, load_idx, make_synthetic, save_manifest,
)
from .diagnostics import LMC_HEADER, barrier_height, lmc_curve, predictor_comparison
from .nn import Checkpoint, ModelSpec, conv_tiny, init_checkpoint, l2_param_distance, mlp_tiny
from .nn import load as load_checkpoint
from .nn import save as save_checkpoint
from .train import (
    METRICS_HEADER, PRESETS, Evaluator, MetricsRecord, Preset, TrainConfig, retrain_from_scratch,
    split_accuracy, train,
)
from .typicality import score_typicality_holdout
from .unlearn import UnlearnConfig, UnlearnResult, compose_two_phase, unlearn

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- configuration ------------------------------------------------------------

def _build(cls, data: Any, where: str):
    """Instantiate a flat dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    classes: int = 10
    per_class: int = 500
    atypical_fraction: float = 0.04
    input_dim: int = 32
    test_per_class: int = 200
    pool_per_class: int = 100
    separation: float = 3.0
    spread: float = 1.0
    atypical_radius: float = 1.6
    typicality: str = "ground-truth"     # or "holdout"
    typicality_folds: int = 5
    typicality_epochs: int = 20
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    pool_fraction: float = 0.5           # share of the idx test file held out as a reminder pool

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "idx"):
            raise ValueError(f"kind must be synthetic or idx, not {self.kind!r}")
        if self.typicality not in ("ground-truth", "holdout"):
            raise ValueError("typicality must be ground-truth or holdout")
        if self.kind == "idx" and self.typicality == "ground-truth":
            raise ValueError("idx data has no ground-truth typicality; use holdout")
        if self.kind == "idx" and not (self.train_images and self.train_labels
                                       and self.test_images and self.test_labels):
            raise ValueError("idx data needs train/test image and label paths")
        if not 0.0 < self.pool_fraction < 1.0:
            raise ValueError("pool_fraction must lie in (0, 1)")
        if self.kind == "synthetic":
            if round(self.per_class * self.atypical_fraction) < 10:
                raise ValueError("synthetic data needs per_class * atypical_fraction >= 10")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"          # mlp | conv
    hidden: int | None = None  # default from the preset

    def __post_init__(self) -> None:
        if self.arch not in ("mlp", "conv"):
            raise ValueError("arch must be mlp or conv")


@dataclass(frozen=True)
class PhaseOverrides:
    lr: float | None = None
    epochs: int | None = None
    weight_decay: float | None = None
    batch_size: int | None = None


@dataclass(frozen=True)
class MethodEntry:
    method: str
    name: str = ""
    lr: float | None = None
    epochs: int | None = None
    params: dict = field(default_factory=dict)
    then: dict | None = None   # second phase: {"method": ..., "lr": ..., "epochs": ..., "params": ...}

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.method if self.then is None else f"{self.method}+{self.then['method']}"


@dataclass(frozen=True)
class AttackConfig:
    n_relearn: list = field(default_factory=lambda: [0])
    sources: list = field(default_factory=lambda: ["retain"])
    lr: float | None = None
    epochs: int | None = None
    corruption_sigma: float = 0.5
    quant_bits: list = field(default_factory=lambda: [32, 16, 8, 6, 4, 3, 2])
    mia: bool = True


@dataclass(frozen=True)
class DiagnosticsConfig:
    lmc: bool = True
    lmc_points: int = 11
    scatter_window: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    forget: ForgetSpec = field(default_factory=ForgetSpec)
    pretrain: PhaseOverrides = field(default_factory=PhaseOverrides)
    unlearn: PhaseOverrides = field(default_factory=PhaseOverrides)
    methods: tuple = ()
    attacks: AttackConfig = field(default_factory=AttackConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a table")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        methods = d.get("methods", [])
        if not isinstance(methods, list):
            raise ConfigError("methods must be a list of tables")
        entries = tuple(_build(MethodEntry, m, f"methods.{i}") for i, m in enumerate(methods))
        forget = d.get("forget", {})
        if isinstance(forget, dict):
            if "seed" not in forget:
                forget = {**forget, "seed": int(d.get("seed", 0))}
        cfg = cls(
            seed=int(d.get("seed", 0)),
            preset=str(d.get("preset", "desk")),
            data=_build(DataConfig, d.get("data"), "data"),
            model=_build(ModelConfig, d.get("model"), "model"),
            forget=_build(ForgetSpec, forget, "forget"),
            pretrain=_build(PhaseOverrides, d.get("pretrain"), "pretrain"),
            unlearn=_build(PhaseOverrides, d.get("unlearn"), "unlearn"),
            methods=entries,
            attacks=_build(AttackConfig, d.get("attacks"), "attacks"),
            diagnostics=_build(DiagnosticsConfig, d.get("diagnostics"), "diagnostics"),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError("method names must be unique")
        for m in self.methods:
            for phase in [m] + ([m.then] if m.then is not None else []):
                try:
                    self.unlearn_config(m, second=phase is not m)
                except (ValueError, TypeError, KeyError) as exc:
                    raise ConfigError(f"method {m.label!r}: {exc}") from None
        for src in self.attacks.sources:
            if src not in ("retain", "heldout-test", "corrupted-test"):
                raise ConfigError(f"unknown reminder source {src!r}")
        if any(int(n) < 0 for n in self.attacks.n_relearn):
            raise ConfigError("n_relearn values must be non-negative")
        if any(not 2 <= int(b) <= 32 for b in self.attacks.quant_bits):
            raise ConfigError("quantization bits must lie in [2, 32]")
        if self.diagnostics.lmc_points < 3:
            raise ConfigError("lmc_points must be at least 3")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = seed
        d["forget"]["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def with_preset(self, preset: str) -> "ExperimentConfig":
        d = self.to_dict()
        d["preset"] = preset
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [_strip_none(asdict(m)) for m in self.methods]
        return _strip_none(d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # -- resolved settings --

    @property
    def preset_obj(self) -> Preset:
        return PRESETS[self.preset].with_seed(self.seed)

    def train_config(self) -> TrainConfig:
        p = self.preset_obj.pretrain
        o = self.pretrain
        return TrainConfig(
            lr=o.lr if o.lr is not None else p.lr,
            weight_decay=o.weight_decay if o.weight_decay is not None else p.weight_decay,
            epochs=o.epochs if o.epochs is not None else p.epochs,
            batch_size=o.batch_size if o.batch_size is not None else p.batch_size,
            floor_factor=p.floor_factor, seed=self.seed)

    def unlearn_config(self, entry: MethodEntry, second: bool = False) -> UnlearnConfig:
        src = entry.then if second else asdict(entry)
        unknown = set(src) - {"method", "lr", "epochs", "params", "name", "then"}
        if unknown:
            raise ConfigError(f"unknown keys in second phase: {sorted(unknown)}")
        method = src["method"]
        pre = self.preset_obj
        params = dict(pre.method_params.get(method, {}))
        params.update(src.get("params") or {})
        lr = src.get("lr") or self.unlearn.lr or pre.unlearn_lr
        epochs = src.get("epochs")
        if epochs is None:
            epochs = self.unlearn.epochs if self.unlearn.epochs is not None else pre.unlearn_epochs
        bs = self.unlearn.batch_size or pre.batch_size
        return UnlearnConfig(method, lr=lr, epochs=int(epochs), batch_size=bs,
                             weight_decay=self.unlearn.weight_decay or 0.0, seed=self.seed,
                             params=params)

    def relearn_config(self, n: int, source: str) -> RelearnConfig:
        pre = self.preset_obj
        return RelearnConfig(n_relearn=int(n), source=source,
                             lr=self.attacks.lr or pre.relearn_lr,
                             epochs=self.attacks.epochs or pre.relearn_epochs,
                             batch_size=pre.batch_size, seed=self.seed,
                             corruption_sigma=self.attacks.corruption_sigma)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_strip_none(v) for v in d]
    return d


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)


# -- data and model -------------------------------------------------------------

@dataclass
class Materials:
    train: Dataset
    test: Dataset
    pool: Dataset | None
    scores: TypicalityScores
    test_scores: TypicalityScores | None
    spec: ModelSpec


def build_model_spec(cfg: ExperimentConfig, input_shape: tuple, n_classes: int) -> ModelSpec:
    hidden = cfg.model.hidden or cfg.preset_obj.hidden
    if cfg.model.arch == "mlp":
        if len(input_shape) != 1:
            input_dim = int(np.prod(input_shape))
            raise ConfigError(f"mlp needs flat inputs; got shape {input_shape} ({input_dim} values)")
        return mlp_tiny(input_shape[0], n_classes, hidden)
    if len(input_shape) != 3:
        raise ConfigError(f"conv needs (channels, height, width) inputs; got {input_shape}")
    return conv_tiny(input_shape, n_classes, hidden=hidden)


def load_materials(cfg: ExperimentConfig, cache_dir: Path | None = None,
                   audit: _audit.AccessAudit | None = None) -> Materials:
    d = cfg.data
    if d.kind == "synthetic":
        geom = SyntheticGeometry(d.separation, d.spread, d.atypical_radius)
        train_ds, scores = make_synthetic(d.classes, d.per_class, d.atypical_fraction,
                                          d.input_dim, cfg.seed, geometry=geom)
        test_ds, test_scores = make_synthetic(d.classes, d.test_per_class, d.atypical_fraction,
                                              d.input_dim, cfg.seed, stream="test", geometry=geom)
        pool_ds = None
        if d.pool_per_class:
            pool_ds, _ = make_synthetic(d.classes, d.pool_per_class, d.atypical_fraction,
                                        d.input_dim, cfg.seed, stream="pool", geometry=geom)
    else:
        train_ds = load_idx(d.train_images, d.train_labels)
        full_test = load_idx(d.test_images, d.test_labels, train_ds.n_classes, id_offset=10 ** 7)
        rng = np.random.default_rng([cfg.seed, 99])
        order = rng.permutation(len(full_test))
        cut = int(round(d.pool_fraction * len(order)))
        pool_idx, test_idx = np.sort(order[:cut]), np.sort(order[cut:])
        pick = lambda ix: Dataset(full_test.examples[ix], full_test.labels[ix],  # noqa: E731
                                  full_test.ids[ix], full_test.n_classes, "idx-file")
        test_ds, pool_ds = pick(test_idx), pick(pool_idx)
        scores, test_scores = None, None
    spec = build_model_spec(cfg, train_ds.input_shape, train_ds.n_classes)
    if d.typicality == "holdout":
        scores = _holdout_scores(cfg, train_ds, spec, cache_dir, audit)
        test_scores = None
    return Materials(train_ds, test_ds, pool_ds, scores, test_scores, spec)


def _holdout_scores(cfg, train_ds, spec, cache_dir, audit) -> TypicalityScores:
    tcfg = cfg.train_config()
    tcfg = TrainConfig(lr=tcfg.lr, weight_decay=tcfg.weight_decay, epochs=cfg.data.typicality_epochs,
                       batch_size=tcfg.batch_size, floor_factor=tcfg.floor_factor, seed=cfg.seed)
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(json.dumps([spec.hash, asdict(tcfg), cfg.data.typicality_folds,
                                         cfg.seed, len(train_ds)]).encode()).hexdigest()[:16]
        path = cache_dir / f"typicality-{key}.json"
        if path.exists():
            raw = json.loads(path.read_text())
            return TypicalityScores(np.array(raw["ids"]), np.array(raw["scores"]), raw["method"])
    sc = score_typicality_holdout(train_ds, spec, tcfg, cfg.data.typicality_folds, cfg.seed,
                                  audit=audit)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"ids": sc.ids.tolist(), "scores": sc.scores.tolist(),
                                    "method": sc.method}))
    return sc


def make_bundle(cfg: ExperimentConfig, m: Materials, n_relearn: int = 0) -> DatasetBundle:
    return build_bundle(m.train, m.scores, cfg.forget, n_relearn, cfg.seed, test=m.test,
                        pool=m.pool, test_scores=m.test_scores)


# -- manifest ---------------------------------------------------------------------

class RunManifest:
    """Stage registry persisted as JSON; writes go through one lock."""

    def __init__(self, out: Path, config: ExperimentConfig):
        self.out = out
        self.path = out / "manifest.json"
        self.lock = threading.Lock()
        self.data: dict = {
            "config_hash": config.hash(),
            "seed": config.seed,
            "preset": config.preset,
            "tool_version": __version__,
            "stages": {},
            "failures": [],
        }
        if self.path.exists():
            old = json.loads(self.path.read_text())
            if old.get("config_hash") == self.data["config_hash"]:
                self.data["stages"] = old.get("stages", {})

    @property
    def stages(self) -> dict:
        return self.data["stages"]

    def done(self, stage: str) -> dict | None:
        entry = self.stages.get(stage)
        if entry is None:
            return None
        for rel in entry.get("files", {}).values():
            if not (self.out / rel).exists():
                return None
        return entry

    def record(self, stage: str, files: dict[str, str], **info) -> None:
        with self.lock:
            self.stages[stage] = {"files": files, **info}
            self._write()

    def fail(self, stage: str, exc: BaseException) -> None:
        with self.lock:
            self.data["failures"].append({"stage": stage, "error": f"{type(exc).__name__}: {exc}"})
            self._write()

    def _write(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        tmp.replace(self.path)

    def file(self, stage: str, key: str) -> Path:
        return self.out / self.stages[stage]["files"][key]

    def verify(self) -> list[str]:
        """Referenced files that are missing or whose checkpoints fail to load."""
        bad = []
        for stage, entry in self.stages.items():
            for key, rel in entry.get("files", {}).items():
                p = self.out / rel
                if not p.exists():
                    bad.append(rel)
                elif rel.endswith(".ulck"):
                    ck = load_checkpoint(p)
                    if entry.get("hash") and ck.content_hash() != entry["hash"]:
                        bad.append(rel)
        return bad


def write_metrics(path: Path, records: list[MetricsRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([r.phase, r.step, _fmt(r.test_acc), _fmt(r.forget_ho_acc), _fmt(r.train_loss),
                    _fmt(r.lr)])
    path.write_text(buf.getvalue())


def read_metrics(path: Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["phase"], int(r["step"]), float(r["test_acc"]),
                          float(r["forget_ho_acc"]), float(r["train_loss"]), float(r["lr"]))
            for r in rows]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.6g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- aggregation --------------------------------------------------------------------

@dataclass(frozen=True)
class ScatterRow:
    method: str
    source: str
    n_relearn: int
    test_acc: float
    forget_acc: float
    n_records: int
    short_window: bool


def window_mean(records: list[MetricsRecord], window_steps: int = 50) -> tuple[float, float, int, bool]:
    """Mean (test, forget) over records within the last ``window_steps`` steps.

    Records are taken every few steps plus one at the final step; the window
    holds every record with step >= ``final - window_steps``, i.e. the final
    record and those sampled in the preceding ``window_steps`` steps. A
    stream shorter than the window is averaged whole and flagged.
    """
    if not records:
        raise ValueError("empty metric stream")
    final = records[-1].step
    short = final < window_steps
    sel = records if short else [r for r in records if r.step >= final - window_steps]
    return (float(np.mean([r.test_acc for r in sel])), float(np.mean([r.forget_ho_acc for r in sel])),
            len(sel), short)


def aggregate_scatter(streams: dict[tuple[str, str, int], list[MetricsRecord]],
                      window_steps: int = 50) -> list[ScatterRow]:
    rows = []
    for (method, source, n), recs in sorted(streams.items()):
        t, f, k, short = window_mean(recs, window_steps)
        rows.append(ScatterRow(method, source, int(n), t, f, k, short))
    return rows


# -- the run ------------------------------------------------------------------------

class Runner:
    def __init__(self, cfg: ExperimentConfig, out: str | Path, *, threads: int = 1,
                 audit: _audit.AccessAudit | None = None, log=None):
        self.cfg = cfg
        self.out = Path(out)
        self.threads = max(1, int(threads))
        self.audit = audit if audit is not None else _audit.AccessAudit(strict=True)
        self.manifest = RunManifest(self.out, cfg)
        self.log = log or (lambda msg: None)
        self.trained: list[str] = []   # stages that actually ran this invocation
        self._materials: Materials | None = None
        self._bundles: dict[int, DatasetBundle] = {}

    # -- helpers --

    @property
    def materials(self) -> Materials:
        if self._materials is None:
            try:
                self._materials = load_materials(self.cfg, self.out / "cache", self.audit)
            except DataError as exc:
                raise ConfigError(f"data: {exc}") from None
        return self._materials

    def bundle(self, n_relearn: int = 0) -> DatasetBundle:
        if n_relearn not in self._bundles:
            if 0 not in self._bundles:
                self._bundles[0] = make_bundle(self.cfg, self.materials, 0)
            self._bundles[n_relearn] = self._bundles[0].with_relearn(n_relearn)
        return self._bundles[n_relearn]

    def _save_ckpt(self, stage: str, ck: Checkpoint) -> str:
        h = ck.content_hash()
        rel = f"ckpt/{stage.split(':')[0]}-{h[:16]}.ulck"
        save_checkpoint(ck, self.out / rel)
        return rel

    def checkpoint(self, stage: str) -> Checkpoint:
        return load_checkpoint(self.manifest.file(stage, "checkpoint"))

    def _stage(self, stage: str, fn):
        """Run ``fn`` unless the manifest already holds ``stage``; failures are recorded."""
        if self.manifest.done(stage):
            return
        self.log(f"[run] {stage}")
        try:
            fn()
        except _audit.AuditViolation:
            self.manifest.fail(stage, _audit.AuditViolation("access audit violation"))
            raise
        except Exception as exc:
            self.manifest.fail(stage, exc)
            raise StageFailure(stage, exc) from exc
        self.trained.append(stage)

    def _store(self, stage: str, ck: Checkpoint, records: list[MetricsRecord], **info) -> None:
        rel = self._save_ckpt(stage, ck)
        mrel = f"metrics/{stage.replace(':', '__')}.csv"
        write_metrics(self.out / mrel, records)
        self.manifest.record(stage, {"checkpoint": rel, "metrics": mrel}, hash=ck.content_hash(),
                             **info)

    def _parallel(self, jobs) -> None:
        if self.threads == 1 or len(jobs) <= 1:
            for job in jobs:
                job()
            return
        with ThreadPoolExecutor(self.threads) as ex:
            for f in [ex.submit(job) for job in jobs]:
                f.result()

    # -- stages --

    def stage_pretrain(self) -> None:
        m = self.materials
        b = self.bundle(0)
        save_manifest(b, self._bundle_path())
        ev = Evaluator.for_bundle(b)

        def init():
            ck = init_checkpoint(m.spec, self.cfg.seed)
            rel = self._save_ckpt("init", ck)
            self.manifest.record("init", {"checkpoint": rel}, hash=ck.content_hash())

        def pre():
            with _audit.stage(self.audit, "pretrain"):
                ck, recs = train(self.checkpoint("init"), m.train.split("train"),
                                 self.cfg.train_config(), phase="pretrain", evaluator=ev)
            self._store("pretrain", ck, recs)

        def re():
            with _audit.stage(self.audit, "retrain"):
                ck, recs = retrain_from_scratch(self.checkpoint("init"), b, self.cfg.train_config(),
                                                evaluator=ev)
            self._store("retrain", ck, recs)

        self._stage("init", init)
        self._stage("pretrain", pre)
        self._stage("retrain", re)

    def _bundle_path(self) -> Path:
        p = self.out / "data" / "bundle.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def stage_unlearn(self) -> None:
        self.stage_pretrain()
        b = self.bundle(0)
        ev = Evaluator.for_bundle(b)

        def job(entry: MethodEntry):
            stage = f"unlearn:{entry.label}"

            def run():
                pre = self.checkpoint("pretrain")
                first = self.cfg.unlearn_config(entry)
                if entry.then is None:
                    res: UnlearnResult = unlearn(pre, b, first, evaluator=ev, audit=self.audit,
                                                 phase=stage)
                else:
                    res = compose_two_phase(pre, b, first, self.cfg.unlearn_config(entry, True),
                                            evaluator=ev, audit=self.audit)
                self._store(stage, res.checkpoint, res.records, steps=res.steps,
                            distance=res.distance, pretrained_hash=res.pretrained_hash,
                            phases=[{k: v for k, v in p.items() if k != "wall_clock"}
                                    for p in res.phases])
            return lambda: self._stage(stage, run)

        self._parallel([job(e) for e in self.cfg.methods])

    def targets(self) -> list[tuple[str, str]]:
        """(label, stage) of every checkpoint that attacks and diagnostics cover."""
        return [("retrain", "retrain")] + [(m.label, f"unlearn:{m.label}") for m in self.cfg.methods]

    def stage_attack(self) -> None:
        self.stage_unlearn()
        jobs = []
        for label, src_stage in self.targets():
            for source in self.cfg.attacks.sources:
                for n in self.cfg.attacks.n_relearn:
                    jobs.append(self._relearn_job(label, src_stage, source, int(n)))
            jobs.append(self._quant_job(label, src_stage))
            if self.cfg.attacks.mia:
                jobs.append(self._mia_job(label, src_stage))
        self._parallel(jobs)

    def _relearn_job(self, label, src_stage, source, n):
        stage = f"relearn:{label}:{source}:{n}"

        def run():
            rc = self.cfg.relearn_config(n, source)
            ck, recs, used = relearn(self.checkpoint(src_stage), self.bundle(n), rc,
                                     audit=self.audit, phase=f"relearn:{label}")
            self._store(stage, ck, recs, n_relearn=n, source=source,
                        holdout_ids=[int(i) for i in used.holdout.ids])
        return lambda: self._stage(stage, run)

    def _quant_job(self, label, src_stage):
        stage = f"attack:quant:{label}"

        def run():
            with _audit.stage(self.audit, "attack"):
                rows = quantization_sweep(self.checkpoint(src_stage),
                                          sorted({int(b) for b in self.cfg.attacks.quant_bits},
                                                 reverse=True), self.bundle(0))
            rel = f"results/quant__{label}.csv"
            write_csv(self.out / rel, ["bits", "test_acc", "forget_acc", "top_class_share"],
                      [(r.bits, r.test_acc, r.forget_acc, r.top_class_share) for r in rows])
            self.manifest.record(stage, {"table": rel})
        return lambda: self._stage(stage, run)

    def _mia_job(self, label, src_stage):
        stage = f"attack:mia:{label}"

        def run():
            with _audit.stage(self.audit, "attack"):
                rep = mia_balanced_loss_threshold(self.checkpoint(src_stage), self.bundle(0),
                                                  self.cfg.seed)
            rel = f"results/mia__{label}.json"
            (self.out / rel).parent.mkdir(parents=True, exist_ok=True)
            (self.out / rel).write_text(json.dumps(asdict(rep), sort_keys=True))
            self.manifest.record(stage, {"report": rel})
        return lambda: self._stage(stage, run)

    def stage_diagnose(self) -> None:
        self.stage_unlearn()
        if not self.cfg.diagnostics.lmc:
            return
        jobs = []
        for label, src_stage in self.targets():
            stage = f"diagnose:lmc:{label}"

            def run(label=label, src_stage=src_stage, stage=stage):
                with _audit.stage(self.audit, "diagnose"):
                    curve = lmc_curve(self.checkpoint("pretrain"), self.checkpoint(src_stage),
                                      self.bundle(0), self.cfg.diagnostics.lmc_points,
                                      "pretrain", label)
                rel = f"results/lmc__{label}.csv"
                write_csv(self.out / rel, LMC_HEADER, curve.rows())
                self.manifest.record(stage, {"curve": rel}, barrier=barrier_height(curve))
            jobs.append(lambda run=run, stage=stage: self._stage(stage, run))
        self._parallel(jobs)

    def run(self, until: str = "report") -> RunManifest:
        order = ["pretrain", "unlearn", "attack", "diagnose", "report"]
        if until not in order:
            raise ValueError(f"unknown stage {until!r}")
        upto = order[: order.index(until) + 1]
        self.stage_pretrain()
        if "unlearn" in upto:
            self.stage_unlearn()
        if "attack" in upto:
            self.stage_attack()
        if "diagnose" in upto:
            self.stage_diagnose()
        if "report" in upto:
            write_reports(self)
        if not self.audit.passed:
            raise _audit.AuditViolation("access audit recorded violations")
        return self.manifest


def run_experiment(cfg: ExperimentConfig, out: str | Path, *, threads: int = 1,
                   until: str = "report", log=None) -> RunManifest:
    return Runner(cfg, out, threads=threads, log=log).run(until)


# -- reports --------------------------------------------------------------------------

def _load_records(runner: Runner, stage: str) -> list[MetricsRecord]:
    return read_metrics(runner.manifest.file(stage, "metrics"))


def write_reports(runner: Runner) -> dict[str, Path]:
    """Summary tables and plots under ``report/``, rebuilt from stored stage outputs."""
    cfg, man, out = runner.cfg, runner.manifest, runner.out
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    b0 = runner.bundle(0)
    pre = runner.checkpoint("pretrain")
    targets = runner.targets()

    # post-unlearning accuracies and distances
    ck_cache = {label: runner.checkpoint(stage) for label, stage in targets}
    base = {label: (split_accuracy(ck, b0.test), split_accuracy(ck, b0.holdout))
            for label, ck in ck_cache.items()}
    dist = {label: l2_param_distance(ck, pre) for label, ck in ck_cache.items()}
    write_csv(rep / "distance.csv", ["method", "l2_distance"],
              [(label, dist[label]) for label in sorted(dist)])
    paths["distance"] = rep / "distance.csv"

    # scatter: post-unlearn point plus each relearning stream's window mean
    streams = {}
    for label, _ in targets:
        for source in cfg.attacks.sources:
            for n in cfg.attacks.n_relearn:
                stage = f"relearn:{label}:{source}:{int(n)}"
                if man.done(stage):
                    streams[(label, source, int(n))] = _load_records(runner, stage)
    scatter = aggregate_scatter(streams, cfg.diagnostics.scatter_window)
    write_csv(rep / "scatter.csv",
              ["method", "source", "n_relearn", "test_acc", "forget_ho_acc", "n_records",
               "short_window"],
              [(r.method, r.source, r.n_relearn, r.test_acc, r.forget_acc, r.n_records,
                int(r.short_window)) for r in scatter])
    paths["scatter"] = rep / "scatter.csv"

    # per-method summary at the primary attack setting (first source, first n)
    src0, n0 = cfg.attacks.sources[0], int(cfg.attacks.n_relearn[0])
    post = {r.method: r for r in scatter if r.source == src0 and r.n_relearn == n0}
    barriers = {}
    for label, _ in targets:
        e = man.done(f"diagnose:lmc:{label}")
        barriers[label] = float(e["barrier"]) if e else float("nan")
    rs_post = post["retrain"].forget_acc if "retrain" in post else float("nan")
    summary_rows = []
    for label, _ in targets:
        t_u, f_u = base[label]
        f_r = post[label].forget_acc if label in post else float("nan")
        summary_rows.append((label, dist[label], barriers[label], t_u, f_u, f_r, f_r - f_u,
                             f_r - rs_post))
    write_csv(rep / "summary.csv",
              ["method", "l2_distance", "barrier", "test_acc", "forget_acc_unlearned",
               "forget_acc_relearned", "recovery", "excess_over_retrain"], summary_rows)
    paths["summary"] = rep / "summary.csv"

    methods_only = [m.label for m in cfg.methods if m.label in post]
    if len(methods_only) >= 3:
        cmp = predictor_comparison({k: dist[k] for k in methods_only},
                                   {k: barriers[k] for k in methods_only},
                                   {k: post[k].forget_acc for k in methods_only})
        write_csv(rep / "predictors.csv", ["spearman_l2", "spearman_barrier", "better_predictor"],
                  [(cmp["spearman_l2"], cmp["spearman_barrier"], cmp["better_predictor"])])
        paths["predictors"] = rep / "predictors.csv"

    # attack tables
    qrows = []
    for label, _ in targets:
        e = man.done(f"attack:quant:{label}")
        if e:
            for r in read_csv(out / e["files"]["table"]):
                qrows.append((label, r["bits"], r["test_acc"], r["forget_acc"], r["top_class_share"]))
    if qrows:
        write_csv(rep / "quantization.csv",
                  ["method", "bits", "test_acc", "forget_acc", "top_class_share"], qrows)
        paths["quantization"] = rep / "quantization.csv"
    mrows = []
    for label, _ in targets:
        e = man.done(f"attack:mia:{label}")
        if e:
            d = json.loads((out / e["files"]["report"]).read_text())
            mrows.append((label, d["accuracy"], d["insample_accuracy"], d["threshold"],
                          d["direction"], d["n_members"], d["n_nonmembers"], int(d["degenerate"])))
    if mrows:
        write_csv(rep / "mia.csv", ["method", "balanced_acc", "insample_acc", "threshold",
                                    "direction", "n_members", "n_nonmembers", "degenerate"], mrows)
        paths["mia"] = rep / "mia.csv"
    write_csv(rep / "barrier.csv", ["method", "barrier"],
              [(k, barriers[k]) for k in sorted(barriers)])
    paths["barrier"] = rep / "barrier.csv"
    paths.update(emit_plots(out))
    return paths


class ReportError(RuntimeError):
    pass


def emit_plots(out: str | Path) -> dict[str, Path]:
    """Render report/*.svg from the run directory's CSV tables and manifest.

    Raises ReportError naming every series that the manifest promises but
    whose file is missing.
    """
    out = Path(out)
    rep = out / "report"
    man = json.loads((out / "manifest.json").read_text())
    stages = man.get("stages", {})
    missing = []
    need = [rep / "scatter.csv", rep / "distance.csv"]
    missing += [str(p.relative_to(out)) for p in need if not p.exists()]
    curves = {}
    for stage, entry in sorted(stages.items()):
        if stage.startswith("diagnose:lmc:"):
            p = out / entry["files"]["curve"]
            if p.exists():
                curves[stage.split(":", 2)[2]] = p
            else:
                missing.append(entry["files"]["curve"])
    if missing:
        raise ReportError(f"missing series: {', '.join(missing)}")
    paths = {}
    rows = read_csv(rep / "scatter.csv")
    panels = sorted({(r["source"], int(r["n_relearn"])) for r in rows})
    labels = [f"{s} n={n}" for s, n in panels]
    pts = [{"panel": f"{r['source']} n={r['n_relearn']}", "method": r["method"],
            "x": float(r["test_acc"]), "y": float(r["forget_ho_acc"])} for r in rows]
    (rep / "scatter.svg").write_text(plots.scatter_panels(pts, labels))
    paths["scatter_svg"] = rep / "scatter.svg"
    series = {}
    for label, p in curves.items():
        c = read_csv(p)
        series[label] = ([float(r["alpha"]) for r in c], [float(r["test_acc"]) for r in c])
    (rep / "lmc.svg").write_text(plots.line_plot(series, "pretrained to each model",
                                                 ylabel="test accuracy"))
    paths["lmc_svg"] = rep / "lmc.svg"
    d = {r["method"]: float(r["l2_distance"]) for r in read_csv(rep / "distance.csv")}
    (rep / "distance.svg").write_text(plots.bar_chart(d, "distance to pretrained", "L2"))
    paths["distance_svg"] = rep / "distance.svg"
    return paths


# -- epoch sweep ------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    method: str
    epochs: int
    test_acc: float
    forget_acc_unlearned: float
    forget_acc_relearned: float


def epoch_sweep(cfg: ExperimentConfig, out: str | Path, epochs_list, methods=None, *,
                source: str = "retain", log=None) -> list[SweepRow]:
    """Unlearn at each epoch budget, then relearn with no forget examples."""
    runner = Runner(cfg, out, log=log)
    runner.stage_pretrain()
    b = runner.bundle(0)
    pre = runner.checkpoint("pretrain")
    entries = [m for m in cfg.methods if methods is None or m.label in methods]
    if methods is not None:
        missing = sorted(set(methods) - {m.label for m in entries})
        if missing:
            raise ConfigError(f"methods not in the config: {missing}")
    rows = []
    for entry in entries:
        for ep in epochs_list:
            ucfg = cfg.unlearn_config(entry)
            ucfg = UnlearnConfig(ucfg.method, lr=ucfg.lr, epochs=int(ep), batch_size=ucfg.batch_size,
                                 weight_decay=ucfg.weight_decay, seed=ucfg.seed, params=ucfg.params)
            res = unlearn(pre, b, ucfg, audit=runner.audit, phase=f"unlearn:{entry.label}")
            ck, _, _ = relearn(res.checkpoint, b, cfg.relearn_config(0, source), audit=runner.audit)
            rows.append(SweepRow(entry.label, int(ep), split_accuracy(res.checkpoint, b.test),
                                 split_accuracy(res.checkpoint, b.holdout),
                                 split_accuracy(ck, b.holdout)))
    write_csv(Path(out) / "report" / "epoch_sweep.csv",
              ["method", "epochs", "test_acc", "forget_acc_unlearned", "forget_acc_relearned"],
              [(r.method, r.epochs, r.test_acc, r.forget_acc_unlearned, r.forget_acc_relearned)
               for r in rows])
    if not runner.audit.passed:
        raise _audit.AuditViolation("access audit recorded violations")
    return rows


def format_exception(exc: BaseException) -> str:
    return "".join(traceback.format_exception_only(type(exc), exc)).strip()
