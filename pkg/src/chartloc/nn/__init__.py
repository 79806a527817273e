from . import tensor as ops
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import Conv2d, Dense, Module, Parameter, glorot_uniform
from .optim import AdamState, NonFiniteGradient, adam_step
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "ops", "Tensor", "Parameter", "Module", "Dense", "Conv2d", "glorot_uniform",
    "AdamState", "adam_step", "NonFiniteGradient", "grad_check", "GradCheckReport",
    "save_checkpoint", "read_checkpoint", "load_into", "CheckpointError", "ShapeError", "no_grad",
]
