from .checkpoint import CheckpointError, load_tensors, save_tensors
from .nn import MlpSpec, Params, init_mlp, linear, mlp
from .optim import SGD, Adam, opt_step
from .tensor import GradError, Tensor, concat, grad, is_grad_enabled, no_grad

__all__ = [
    "Adam",
    "CheckpointError",
    "GradError",
    "MlpSpec",
    "Params",
    "SGD",
    "Tensor",
    "concat",
    "grad",
    "init_mlp",
    "is_grad_enabled",
    "linear",
    "load_tensors",
    "mlp",
    "no_grad",
    "opt_step",
    "save_tensors",
]
