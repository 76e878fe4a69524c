"""Minimal numpy network core: layer table, exact backprop, checkpoint arithmetic."""

from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    init_checkpoint,
    interpolate,
    l2_param_distance,
    load,
    perturb,
    save,
    zero_checkpoint,
)
from .core import (
    DivergenceError,
    ForwardTrace,
    accuracy,
    backprop,
    eval_taps,
    forward,
    log_softmax,
    predict_logits,
    run_network,
    softmax,
)
from .losses import (
    CosineRepresentation,
    CrossEntropy,
    Entropy,
    EuclideanRepresentation,
    KLToReference,
    backward,
    evaluate_terms,
    cross_entropy_per_example,
    make_loss,
)
from .model import LayerSpec, ModelSpec, SpecError, build_spec, conv_tiny, mlp_tiny

__all__ = [
    "Checkpoint",
    "CheckpointFormatError",
    "CosineRepresentation",
    "CrossEntropy",
    "DivergenceError",
    "Entropy",
    "EuclideanRepresentation",
    "ForwardTrace",
    "KLToReference",
    "LayerSpec",
    "ModelSpec",
    "SpecError",
    "accuracy",
    "backprop",
    "backward",
    "build_spec",
    "conv_tiny",
    "cross_entropy_per_example",
    "eval_taps",
    "evaluate_terms",
    "forward",
    "init_checkpoint",
    "interpolate",
    "l2_param_distance",
    "load",
    "log_softmax",
    "make_loss",
    "mlp_tiny",
    "perturb",
    "predict_logits",
    "run_network",
    "save",
    "softmax",
    "zero_checkpoint",
]
