from . import functional
from .gradcheck import directional_grad_check, grad_check, run_checks, sampled_grad_check
from .module import Module
from .tensor import Parameter, Tensor

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "functional",
    "grad_check",
    "directional_grad_check",
    "sampled_grad_check",
    "run_checks",
]
