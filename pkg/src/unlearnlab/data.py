"""Datasets, synthetic typicality-controlled data, IDX files, and forget-set partitions."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import audit

STREAM_OFFSETS = {"train": 0, "test": 1_000_000, "pool": 2_000_000}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Split:
    """A view of examples with the access roles it carries for auditing."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    roles: frozenset = frozenset()

    def __len__(self) -> int:
        return len(self.y)

    def take(self, index) -> "Split":
        return Split(self.x[index], self.y[index], self.ids[index], self.roles)

    def concat(self, other: "Split") -> "Split":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Split(np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]),
                     np.concatenate([self.ids, other.ids]), self.roles | other.roles)

    def with_roles(self, *roles: str) -> "Split":
        return Split(self.x, self.y, self.ids, frozenset(roles))

    def read(self, purpose: str) -> "Split":
        """Record an access against the active audit stage and return self."""
        audit.record(self.roles, purpose, len(self))
        return self


@dataclass
class Dataset:
    examples: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    n_classes: int
    provenance: str = "synthetic"

    def __post_init__(self) -> None:
        n = len(self.labels)
        if n == 0:
            raise DataError("dataset is empty")
        if len(self.examples) != n or len(self.ids) != n:
            raise DataError("examples, labels and ids must have equal length")
        if len(np.unique(self.ids)) != n:
            raise DataError("example ids must be unique")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError("label out of range")
        missing = np.setdiff1d(np.arange(self.n_classes), self.labels)
        if missing.size:
            raise DataError(f"classes without examples: {missing.tolist()}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.examples.shape[1:])

    def split(self, role: str, index=None) -> Split:
        if index is None:
            return Split(self.examples, self.labels, self.ids, frozenset([role]))
        return Split(self.examples[index], self.labels[index], self.ids[index], frozenset([role]))

    def index_of(self, ids: Iterable[int]) -> np.ndarray:
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown example id {exc.args[0]}") from None


@dataclass
class TypicalityScores:
    ids: np.ndarray
    scores: np.ndarray
    method: str = "ground-truth"

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.scores):
            raise DataError("one score per example id")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise DataError("typicality scores must lie in [0, 1]")

    def for_ids(self, ids: np.ndarray) -> np.ndarray:
        lookup = dict(zip(self.ids.tolist(), self.scores.tolist()))
        return np.array([lookup[int(i)] for i in ids])


# -- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticGeometry:
    """Knobs of the synthetic generator; defaults are the desk settings."""

    separation: float = 3.0    # distance scale of class centers
    spread: float = 1.0        # per-coordinate std of typical members
    atypical_radius: float = 1.6  # atypical offset from the host center, in units of typical radius
    atypical_jitter: float = 0.25


def _stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


def make_synthetic(classes: int, per_class: int, atypical_fraction: float, input_dim: int,
                   seed: int, *, stream: str = "train",
                   geometry: SyntheticGeometry | None = None) -> tuple[Dataset, TypicalityScores]:
    """Gaussian class clusters plus an isolated atypical subpopulation per class.

    Class centers depend only on ``seed``; ``stream`` ("train", "test",
    "pool") draws independent samples from the same distribution, with
    disjoint id ranges. Atypical members of class ``c`` sit in the outskirts
    of a different, randomly chosen class's cluster, so they are predictable
    only when memorized. Ground-truth scores are 1.0 for typical and 0.0 for
    atypical members.
    """
    g = geometry or SyntheticGeometry()
    if classes < 2 or per_class < 1 or input_dim < 1:
        raise DataError("need classes >= 2, per_class >= 1, input_dim >= 1")
    if not 0.0 < atypical_fraction <= 0.2:
        raise DataError("atypical_fraction must lie in (0, 0.2]")
    n_atyp = int(round(per_class * atypical_fraction))
    if stream == "train" and n_atyp < 10:
        raise DataError("per_class * atypical_fraction must be at least 10")
    if stream not in STREAM_OFFSETS:
        raise DataError(f"unknown stream {stream!r}")

    world = _stream_rng(seed, "centers")
    centers = world.normal(0.0, g.separation / np.sqrt(2.0), size=(classes, input_dim))
    rng = _stream_rng(seed, stream)
    radius = g.spread * np.sqrt(input_dim)

    xs, ys, atyp = [], [], []
    for c in range(classes):
        n_typ = per_class - n_atyp
        xs.append(centers[c] + rng.normal(0.0, g.spread, size=(n_typ, input_dim)))
        hosts = (c + rng.integers(1, classes, size=n_atyp)) % classes
        direction = rng.normal(size=(n_atyp, input_dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        offset = direction * radius * g.atypical_radius
        jitter = rng.normal(0.0, g.spread * g.atypical_jitter, size=(n_atyp, input_dim))
        xs.append(centers[hosts] + offset + jitter)
        ys.append(np.full(per_class, c))
        atyp.append(np.r_[np.zeros(n_typ, bool), np.ones(n_atyp, bool)])
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys).astype(np.int64)
    is_atyp = np.concatenate(atyp)
    order = rng.permutation(len(y))
    x, y, is_atyp = x[order], y[order], is_atyp[order]
    ids = STREAM_OFFSETS[stream] + np.arange(len(y), dtype=np.int64)
    ds = Dataset(x, y, ids, classes, "synthetic")
    return ds, TypicalityScores(ids.copy(), np.where(is_atyp, 0.0, 1.0), "ground-truth")


def corrupt(split: Split, sigma: float, seed: int) -> Split:
    """Additive Gaussian feature noise; the 'corrupted' reminder source."""
    rng = np.random.default_rng([seed, 7919])
    noisy = split.x + rng.normal(0.0, sigma, size=split.x.shape).astype(split.x.dtype)
    return Split(noisy, split.y, split.ids, split.roles)


# -- IDX files ---------------------------------------------------------------

_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DataError(f"{path}: truncated header at offset {len(data)}")
    if data[0] != 0 or data[1] != 0:
        raise DataError(f"{path}: bad magic at offset 0 (expected two zero bytes)")
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: bad magic at offset 2 (unknown type code 0x{code:02x})")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated dimension table at offset {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header < need:
        raise DataError(f"{path}: truncated payload at offset {len(data)}, need {header + need} bytes")
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
            np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}[array.dtype.newbyteorder("=")]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(array.dtype.newbyteorder(">")).tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int | None = None,
             id_offset: int = 0) -> Dataset:
    """Image/label IDX pair (magic 0x00000803 / 0x00000801) as a Dataset with pixels in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: expected magic 0x00000803 (3-d images), got {images.ndim}-d")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected magic 0x00000801 (1-d labels), got {labels.ndim}-d")
    if len(images) != len(labels):
        raise DataError("image and label counts differ")
    labels = labels.astype(np.int64)
    c = int(labels.max()) + 1 if n_classes is None else n_classes
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"label out of range for {c} classes")
    x = images.astype(np.float32)
    if images.dtype.kind == "u":
        x /= 255.0
    x = x[:, None, :, :]
    ids = id_offset + np.arange(len(labels), dtype=np.int64)
    return Dataset(x, labels, ids, c, "idx-file")


# -- forget specs and bundles ---------------------------------------------------

@dataclass(frozen=True)
class ForgetSpec:
    scope: str = "class-agnostic"   # or "sub-class"
    typicality: str = "atypical"    # typical | random | atypical
    fraction: float | None = None   # 0.01 when neither fraction nor count is given
    count: int | None = None
    class_id: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scope not in ("class-agnostic", "sub-class"):
            raise DataError(f"unknown scope {self.scope!r}")
        if self.typicality not in ("typical", "random", "atypical"):
            raise DataError(f"unknown typicality {self.typicality!r}")
        if self.scope == "sub-class" and self.class_id is None:
            raise DataError("sub-class scope needs class_id")
        if self.fraction is None and self.count is None:
            object.__setattr__(self, "fraction", 0.01)
        if self.fraction is not None and self.count is not None:
            raise DataError("give exactly one of fraction or count")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise DataError("fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ForgetSpec":
        return cls(**d)


@dataclass
class DatasetBundle:
    retain: Split
    forget: Split
    relearn: Split
    holdout: Split
    test: Split
    pool: Split | None = None
    spec: ForgetSpec = field(default_factory=ForgetSpec)
    seed: int = 0
    n_relearn: int = 0
    test_scores: np.ndarray | None = None  # typicality of test examples, when known

    def manifest(self) -> dict:
        return {
            "forget_spec": self.spec.to_dict(),
            "seed": self.seed,
            "n_relearn": self.n_relearn,
            "forget_ids": self.forget.ids.tolist(),
            "relearn_ids": self.relearn.ids.tolist(),
            "holdout_ids": self.holdout.ids.tolist(),
        }

    def with_relearn(self, n_relearn: int, seed: int | None = None) -> "DatasetBundle":
        """Same forget set, re-split into relearn/holdout parts."""
        seed = self.seed if seed is None else seed
        re_idx, ho_idx = _split_relearn(len(self.forget), n_relearn, seed)
        return DatasetBundle(
            self.retain, self.forget,
            self.forget.take(re_idx).with_roles("forget_re"),
            self.forget.take(ho_idx).with_roles("forget_ho"),
            self.test, self.pool, self.spec, seed, n_relearn, self.test_scores)


def select_forget(dataset: Dataset, scores: TypicalityScores, spec: ForgetSpec) -> np.ndarray:
    """Indices (into ``dataset``) of the forget set, sorted by example id."""
    if spec.scope == "sub-class":
        pool = np.flatnonzero(dataset.labels == spec.class_id)
    else:
        pool = np.arange(len(dataset))
    k = spec.count if spec.count is not None else int(round(spec.fraction * len(pool)))
    if k > len(pool):
        raise DataError(f"requested {k} forget examples from a pool of {len(pool)}")
    if k < 0:
        raise DataError("forget count must be non-negative")
    s = scores.for_ids(dataset.ids[pool])
    ids = dataset.ids[pool]
    if spec.typicality == "atypical":
        order = np.lexsort((ids, s))
        chosen = pool[order[:k]]
    elif spec.typicality == "typical":
        order = np.lexsort((ids, -s))
        chosen = pool[order[:k]]
    else:
        rng = np.random.default_rng([spec.seed, 31337])
        chosen = rng.choice(pool, size=k, replace=False)
    return chosen[np.argsort(dataset.ids[chosen])]


def _split_relearn(n_forget: int, n_relearn: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= n_relearn <= n_forget:
        raise DataError(f"n_relearn={n_relearn} exceeds forget set size {n_forget}")
    rng = np.random.default_rng([seed, 4242])
    re_idx = np.sort(rng.choice(n_forget, size=n_relearn, replace=False))
    ho_idx = np.setdiff1d(np.arange(n_forget), re_idx)
    return re_idx, ho_idx


def build_bundle(dataset: Dataset, scores: TypicalityScores, spec: ForgetSpec, n_relearn: int,
                 seed: int, *, test: Dataset, pool: Dataset | None = None,
                 test_scores: TypicalityScores | None = None) -> DatasetBundle:
    """Partition ``dataset`` into retain/forget and the forget set into relearn/holdout."""
    forget_idx = select_forget(dataset, scores, spec)
    keep = np.ones(len(dataset), bool)
    keep[forget_idx] = False
    forget = dataset.split("forget", forget_idx)
    bundle = DatasetBundle(
        retain=dataset.split("retain", np.flatnonzero(keep)),
        forget=forget,
        relearn=forget.take(np.array([], dtype=np.int64)).with_roles("forget_re"),
        holdout=forget.with_roles("forget_ho"),
        test=test.split("test"),
        pool=None if pool is None else pool.split("pool"),
        spec=spec,
        seed=seed,
        test_scores=None if test_scores is None else test_scores.for_ids(test.ids),
    )
    return bundle.with_relearn(n_relearn, seed)


def bundle_from_manifest(dataset: Dataset, manifest: dict, *, test: Dataset,
                         pool: Dataset | None = None,
                         test_scores: TypicalityScores | None = None) -> DatasetBundle:
    forget_idx = dataset.index_of(manifest["forget_ids"])
    keep = np.ones(len(dataset), bool)
    keep[forget_idx] = False
    forget = dataset.split("forget", forget_idx)
    pos = {int(i): k for k, i in enumerate(forget.ids)}
    re_idx = np.array([pos[int(i)] for i in manifest["relearn_ids"]], dtype=np.int64)
    ho_idx = np.array([pos[int(i)] for i in manifest["holdout_ids"]], dtype=np.int64)
    return DatasetBundle(
        retain=dataset.split("retain", np.flatnonzero(keep)),
        forget=forget,
        relearn=forget.take(re_idx).with_roles("forget_re"),
        holdout=forget.take(ho_idx).with_roles("forget_ho"),
        test=test.split("test"),
        pool=None if pool is None else pool.split("pool"),
        spec=ForgetSpec.from_dict(manifest["forget_spec"]),
        seed=int(manifest["seed"]),
        n_relearn=int(manifest["n_relearn"]),
        test_scores=None if test_scores is None else test_scores.for_ids(test.ids),
    )


def save_manifest(bundle: DatasetBundle, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bundle.manifest(), indent=1, sort_keys=True))


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def minibatches(split: Split, batch_size: int, rng: np.random.Generator | None,
                drop_last: bool = False) -> Sequence[np.ndarray]:
    """Index arrays for one epoch; shuffled when ``rng`` is given."""
    n = len(split)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if out and len(out[-1]) < 2 and len(out) > 1:
        # batch norm needs two examples; fold a singleton tail into the previous batch
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    if drop_last and out and len(out[-1]) < batch_size:
        out.pop()
    return out
