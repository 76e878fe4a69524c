"""Checkpoints: flat parameters plus batch-norm running statistics.

Includes weight-space arithmetic (distance, interpolation, perturbation)
and the binary ULCK1 file format.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelSpec, SpecError

MAGIC = b"ULCK1"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    step_count: int = 0

    @property
    def spec_hash(self) -> str:
        return self.spec.hash

    @property
    def dtype(self):
        return self.params.dtype

    def check(self) -> None:
        if self.params.shape != (self.spec.n_params,):
            raise SpecError(f"params length {self.params.shape} != {self.spec.n_params}")
        if self.bn_mean.shape != (self.spec.n_bn,) or self.bn_var.shape != (self.spec.n_bn,):
            raise SpecError("batch-norm statistics do not match the spec")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, self.params.copy(), self.bn_mean.copy(), self.bn_var.copy(),
                          self.step_count)

    def replace(self, **kw) -> "Checkpoint":
        fields = dict(spec=self.spec, params=self.params, bn_mean=self.bn_mean,
                      bn_var=self.bn_var, step_count=self.step_count)
        fields.update(kw)
        return Checkpoint(**fields)

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.spec, self.params.astype(dtype), self.bn_mean.astype(dtype),
                          self.bn_var.astype(dtype), self.step_count)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec_hash.encode())
        for arr in (self.params, self.bn_mean, self.bn_var):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.step_count).encode())
        return h.hexdigest()

    def equals(self, other: "Checkpoint") -> bool:
        return (self.spec_hash == other.spec_hash
                and np.array_equal(self.params, other.params)
                and np.array_equal(self.bn_mean, other.bn_mean)
                and np.array_equal(self.bn_var, other.bn_var))

    def tensor(self, layer: str, name: str) -> np.ndarray:
        for slot in self.spec.param_slots:
            if slot.layer == layer and slot.name == name:
                return self.params[slot.offset:slot.stop].reshape(slot.shape)
        raise KeyError(f"{layer}.{name}")


def init_checkpoint(spec: ModelSpec, seed: int, dtype=np.float32) -> Checkpoint:
    """Kaiming-uniform (fan-in) weights, uniform biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params, dtype=np.float64)
    for slot in spec.param_slots:
        if slot.role == "weight":
            fan_in = int(np.prod(slot.shape[1:])) if len(slot.shape) == 4 else slot.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[slot.offset:slot.stop] = rng.uniform(-bound, bound, slot.size)
        elif slot.role == "bias":
            # fan-in of the owning layer's weight
            wslot = next(s for s in spec.param_slots if s.layer == slot.layer and s.role == "weight")
            fan_in = int(np.prod(wslot.shape[1:])) if len(wslot.shape) == 4 else wslot.shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[slot.offset:slot.stop] = rng.uniform(-bound, bound, slot.size)
        elif slot.name == "gamma":
            params[slot.offset:slot.stop] = 1.0
    return Checkpoint(spec, params.astype(dtype), np.zeros(spec.n_bn, dtype=dtype),
                      np.ones(spec.n_bn, dtype=dtype), 0)


def zero_checkpoint(spec: ModelSpec, dtype=np.float32) -> Checkpoint:
    return Checkpoint(spec, np.zeros(spec.n_params, dtype=dtype), np.zeros(spec.n_bn, dtype=dtype),
                      np.ones(spec.n_bn, dtype=dtype), 0)


def _same_spec(a: Checkpoint, b: Checkpoint) -> None:
    if a.spec_hash != b.spec_hash:
        raise SpecError(f"spec hash mismatch: {a.spec_hash[:12]} vs {b.spec_hash[:12]}")


def l2_param_distance(a: Checkpoint, b: Checkpoint) -> float:
    """Euclidean distance between trainable parameters; BN running stats are ignored."""
    _same_spec(a, b)
    diff = a.params.astype(np.float64) - b.params.astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))


def interpolate(a: Checkpoint, b: Checkpoint, alpha: float, bn_interp: str = "variance") -> Checkpoint:
    """Point ``(1 - alpha) * a + alpha * b`` on the segment, BN statistics included.

    ``bn_interp="std"`` interpolates running standard deviations instead of
    variances.
    """
    _same_spec(a, b)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return a.copy()
    if alpha == 1.0:
        return b.copy()
    dtype = a.params.dtype

    def lerp(x, y):
        return ((1.0 - alpha) * x.astype(np.float64) + alpha * y.astype(np.float64)).astype(dtype)

    if bn_interp == "variance":
        var = lerp(a.bn_var, b.bn_var)
    elif bn_interp == "std":
        var = (lerp(np.sqrt(a.bn_var), np.sqrt(b.bn_var)).astype(np.float64) ** 2).astype(dtype)
    else:
        raise ValueError(f"bn_interp must be 'variance' or 'std', not {bn_interp!r}")
    return Checkpoint(a.spec, lerp(a.params, b.params), lerp(a.bn_mean, b.bn_mean), var, 0)


PERTURB_KINDS = ("attenuate", "dropout", "gaussian")


def perturb(ckpt: Checkpoint, kind: str, magnitude: float, seed: int = 0,
            weights_only: bool = False) -> Checkpoint:
    """Attenuate, randomly zero, or add Gaussian noise to trainable parameters.

    ``weights_only`` restricts the perturbation to dense/conv weight tensors;
    by default biases and BN affine parameters are included. Running
    statistics are never touched.
    """
    roles = ("weight",) if weights_only else ("weight", "bias", "bn_affine")
    mask = ckpt.spec.weight_mask(roles)
    idx = np.flatnonzero(mask)
    params = ckpt.params.copy()
    rng = np.random.default_rng(seed)
    if kind == "attenuate":
        if not magnitude > 0:
            raise ValueError("attenuation factor must be positive")
        params[idx] = (params[idx] * magnitude).astype(params.dtype)
    elif kind == "dropout":
        if not 0.0 <= magnitude < 1.0:
            raise ValueError("dropout fraction must lie in [0, 1)")
        k = int(round(magnitude * idx.size))
        params[rng.choice(idx, size=k, replace=False)] = 0.0
    elif kind == "gaussian":
        if not magnitude >= 0:
            raise ValueError("noise standard deviation must be non-negative")
        if magnitude > 0:
            params[idx] = params[idx] + rng.normal(0.0, magnitude, idx.size).astype(params.dtype)
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    return ckpt.replace(params=params, bn_mean=ckpt.bn_mean.copy(), bn_var=ckpt.bn_var.copy())


# -- ULCK1 file format ------------------------------------------------------

def _layer_table(spec: ModelSpec) -> list[tuple[str, str, tuple[int, ...]]]:
    table = [(f"{s.layer}.{s.name}", s.role, s.shape) for s in spec.param_slots]
    for name, _, size in spec.bn_slots:
        table.append((f"{name}.running_mean", "running_mean", (size,)))
    for name, _, size in spec.bn_slots:
        table.append((f"{name}.running_var", "running_var", (size,)))
    return table


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    ckpt.check()
    if ckpt.params.dtype == np.float32:
        code, le = 4, "<f4"
    elif ckpt.params.dtype == np.float64:
        code, le = 8, "<f8"
    else:
        raise CheckpointFormatError(f"unsupported dtype {ckpt.params.dtype}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HB", FORMAT_VERSION, code))
    buf.write(bytes.fromhex(ckpt.spec_hash))
    buf.write(struct.pack("<Q", ckpt.step_count))
    spec_json = ckpt.spec.to_json().encode()
    buf.write(struct.pack("<I", len(spec_json)))
    buf.write(spec_json)
    table = _layer_table(ckpt.spec)
    buf.write(struct.pack("<I", len(table)))
    for name, kind, shape in table:
        buf.write(_pack_str(name))
        buf.write(_pack_str(kind))
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<QQ", ckpt.spec.n_params, ckpt.spec.n_bn))
    for arr in (ckpt.params, ckpt.bn_mean, ckpt.bn_var):
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0: not a ULCK1 checkpoint")
    version, code = r.unpack("<HB")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    if code not in (4, 8):
        raise CheckpointFormatError(f"bad dtype code {code} at offset {r.pos - 1}")
    stored_hash = r.take(32).hex()
    (step_count,) = r.unpack("<Q")
    (n_json,) = r.unpack("<I")
    spec = ModelSpec.from_dict(__import__("json").loads(r.take(n_json).decode()))
    if spec.hash != stored_hash:
        raise CheckpointFormatError("embedded spec does not match the stored spec hash")
    (n_table,) = r.unpack("<I")
    table = []
    for _ in range(n_table):
        name = r.string()
        kind = r.string()
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        table.append((name, kind, shape))
    if table != _layer_table(spec):
        raise CheckpointFormatError("layer table does not match the embedded spec")
    n_params, n_bn = r.unpack("<QQ")
    if n_params != spec.n_params or n_bn != spec.n_bn:
        raise CheckpointFormatError("parameter counts do not match the spec")
    le = "<f4" if code == 4 else "<f8"
    native = np.float32 if code == 4 else np.float64

    def arr(n):
        return np.frombuffer(r.take(n * code), dtype=le).astype(native)

    params, mean, var = arr(n_params), arr(n_bn), arr(n_bn)
    if r.pos != len(data):
        raise CheckpointFormatError(f"trailing bytes after offset {r.pos}")
    return Checkpoint(spec, params, mean, var, int(step_count))


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)
    return path


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
