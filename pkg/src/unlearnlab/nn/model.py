"""Model descriptions: layer tables, parameter layout, and the two desk architectures."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "maxpool", "flatten")


class SpecError(ValueError):
    """Raised for malformed model specs or spec/checkpoint mismatches."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    # dense: in_dim, out_dim; conv2d: in_ch, out_ch, kernel; batchnorm: features
    dims: tuple[int, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        return cls(d["name"], d["kind"], tuple(int(v) for v in d["dims"]))


@dataclass(frozen=True)
class ParamSlot:
    """Location of one named parameter tensor inside the flat parameter vector."""

    layer: str
    name: str
    offset: int
    shape: tuple[int, ...]
    role: str  # "weight", "bias" or "bn_affine"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    taps: tuple[str, ...]
    n_classes: int
    name: str = "custom"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        self.validate()

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "taps": list(self.taps),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(
            input_shape=tuple(int(v) for v in d["input_shape"]),
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            taps=tuple(d["taps"]),
            n_classes=int(d["n_classes"]),
            name=d.get("name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        if "hash" not in self._cache:
            self._cache["hash"] = hashlib.sha256(self.to_json().encode()).hexdigest()
        return self._cache["hash"]

    # -- shape checking ----------------------------------------------------
    def validate(self) -> None:
        if self.n_classes < 2:
            raise SpecError("need at least two classes")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise SpecError("layer names must be unique")
        for tap in self.taps:
            if tap not in names:
                raise SpecError(f"tap {tap!r} does not reference a layer")
        shape = tuple(self.input_shape)
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise SpecError(f"unknown layer kind {layer.kind!r}")
            shape = _out_shape(layer, shape)
        if shape != (self.n_classes,):
            raise SpecError(f"network output shape {shape} != ({self.n_classes},)")

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-example output shape of each layer."""
        out = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = _out_shape(layer, shape)
            out.append(shape)
        return out

    # -- parameter layout --------------------------------------------------
    @property
    def param_slots(self) -> tuple[ParamSlot, ...]:
        if "slots" not in self._cache:
            slots = []
            offset = 0
            for layer in self.layers:
                for pname, shape, role in _layer_params(layer):
                    slot = ParamSlot(layer.name, pname, offset, shape, role)
                    slots.append(slot)
                    offset = slot.stop
            self._cache["slots"] = tuple(slots)
        return self._cache["slots"]

    @property
    def n_params(self) -> int:
        slots = self.param_slots
        return slots[-1].stop if slots else 0

    @property
    def bn_slots(self) -> tuple[tuple[str, int, int], ...]:
        """(layer name, offset, size) of each batch-norm layer's running statistics."""
        if "bn" not in self._cache:
            out = []
            offset = 0
            for layer in self.layers:
                if layer.kind == "batchnorm":
                    out.append((layer.name, offset, layer.dims[0]))
                    offset += layer.dims[0]
            self._cache["bn"] = tuple(out)
        return self._cache["bn"]

    @property
    def n_bn(self) -> int:
        return sum(size for _, _, size in self.bn_slots)

    def weight_mask(self, roles: tuple[str, ...] = ("weight", "bias", "bn_affine")) -> np.ndarray:
        """Boolean mask over the flat parameter vector selecting the given roles."""
        mask = np.zeros(self.n_params, dtype=bool)
        for slot in self.param_slots:
            if slot.role in roles:
                mask[slot.offset:slot.stop] = True
        return mask


def _out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind, dims = layer.kind, layer.dims
    if kind == "dense":
        if len(shape) != 1 or shape[0] != dims[0]:
            raise SpecError(f"{layer.name}: dense expects ({dims[0]},), got {shape}")
        return (dims[1],)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != dims[0]:
            raise SpecError(f"{layer.name}: conv2d expects ({dims[0]}, H, W), got {shape}")
        if dims[2] % 2 != 1:
            raise SpecError(f"{layer.name}: kernel size must be odd")
        return (dims[1], shape[1], shape[2])
    if kind == "batchnorm":
        if shape[0] != dims[0]:
            raise SpecError(f"{layer.name}: batchnorm over {dims[0]} features, got {shape}")
        return shape
    if kind == "relu":
        return shape
    if kind == "maxpool":
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise SpecError(f"{layer.name}: maxpool needs (C, H>=2, W>=2), got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    raise SpecError(f"unknown layer kind {kind!r}")


def _layer_params(layer: LayerSpec) -> list[tuple[str, tuple[int, ...], str]]:
    d = layer.dims
    if layer.kind == "dense":
        return [("W", (d[0], d[1]), "weight"), ("b", (d[1],), "bias")]
    if layer.kind == "conv2d":
        return [("W", (d[1], d[0], d[2], d[2]), "weight"), ("b", (d[1],), "bias")]
    if layer.kind == "batchnorm":
        return [("gamma", (d[0],), "bn_affine"), ("beta", (d[0],), "bn_affine")]
    return []


def mlp_tiny(input_dim: int, n_classes: int, hidden: int = 64) -> ModelSpec:
    """input -> dense+BN+ReLU -> dense+BN+ReLU -> dense(C); taps after each hidden block."""
    layers = (
        LayerSpec("fc1", "dense", (input_dim, hidden)),
        LayerSpec("bn1", "batchnorm", (hidden,)),
        LayerSpec("relu1", "relu"),
        LayerSpec("fc2", "dense", (hidden, hidden)),
        LayerSpec("bn2", "batchnorm", (hidden,)),
        LayerSpec("relu2", "relu"),
        LayerSpec("fc3", "dense", (hidden, n_classes)),
    )
    return ModelSpec((input_dim,), layers, ("relu1", "relu2"), n_classes, name="MlpTiny")


def conv_tiny(input_shape: tuple[int, int, int], n_classes: int,
              channels: tuple[int, int] = (8, 16), hidden: int = 64) -> ModelSpec:
    """Two conv3x3+BN+ReLU+pool blocks, then dense(hidden)+ReLU and dense(C)."""
    c, h, w = input_shape
    c1, c2 = channels
    flat = c2 * (h // 2 // 2) * (w // 2 // 2)
    layers = (
        LayerSpec("conv1", "conv2d", (c, c1, 3)),
        LayerSpec("bn1", "batchnorm", (c1,)),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool"),
        LayerSpec("conv2", "conv2d", (c1, c2, 3)),
        LayerSpec("bn2", "batchnorm", (c2,)),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool"),
        LayerSpec("flat", "flatten"),
        LayerSpec("fc1", "dense", (flat, hidden)),
        LayerSpec("relu3", "relu"),
        LayerSpec("fc2", "dense", (hidden, n_classes)),
    )
    return ModelSpec(tuple(input_shape), layers, ("pool1", "pool2"), n_classes, name="ConvTiny")


def build_spec(name: str, input_shape: tuple[int, ...], n_classes: int, **kw: Any) -> ModelSpec:
    if name.lower() in ("mlptiny", "mlp_tiny", "mlp"):
        if len(input_shape) != 1:
            input_shape = (int(np.prod(input_shape)),)
        return mlp_tiny(input_shape[0], n_classes, **kw)
    if name.lower() in ("convtiny", "conv_tiny", "conv"):
        return conv_tiny(tuple(input_shape), n_classes, **kw)
    raise SpecError(f"unknown architecture {name!r}")
