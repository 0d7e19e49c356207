from . import checkpoint, ops
from .checkpoint import CheckpointError
from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import AdamW, clip_grad_norm, global_grad_norm
from .tensor import ComputationTape, Tensor, backward, build_tape, grad_enabled, no_grad

__all__ = [
    "AdamW", "CheckpointError", "ComputationTape", "Tensor", "backward", "build_tape",
    "clip_grad_norm", "global_grad_norm", "grad_enabled", "gradcheck", "no_grad",
    "checkpoint", "numerical_grad", "ops", "relative_error",
]
