"""Accelerated multi-coil MRI reconstruction with a cascaded network, desk scale.

Everything runs on float64 numpy arrays through a small reverse-mode
differentiation engine; the convolution hot spots are numba-jitted with a
numpy fallback (env var DIRCN_KERNELS).
"""

from .autodiff import Module, Parameter, Tensor, functional, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "Module", "functional", "grad_check", "__version__"]
