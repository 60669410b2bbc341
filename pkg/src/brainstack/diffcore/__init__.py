"""Minimal deterministic reverse-mode differentiation on numpy arrays."""
from . import ops
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointFormatError,
    DiffcoreError,
    NumericError,
    OracleError,
    ShapeError,
    StateError,
    StepAbortedError,
)
from .gradcheck import finite_difference_gradient, relative_error
from .optim import sgd_step
from .rng import make_rng
from .tensor import Context, Graph, Parameter, Tensor, as_tensor, backward, no_grad

__all__ = [
    "CheckpointFormatError", "Context", "DiffcoreError", "Graph", "NumericError", "OracleError",
    "Parameter", "ShapeError", "StateError", "StepAbortedError", "Tensor", "as_tensor", "backward",
    "decode_checkpoint", "encode_checkpoint", "finite_difference_gradient", "load_checkpoint",
    "make_rng", "no_grad", "ops", "relative_error", "save_checkpoint", "sgd_step",
]
