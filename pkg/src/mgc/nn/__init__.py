"""Small reverse-mode autodiff engine (float64, NCHW) used by the MGC networks."""

from . import functional
from .gradcheck import grad_check
from .modules import Conv2d, ConvBlock, LayerNorm, Linear, Module, Parameter
from .tensor import NonFiniteError, Tensor, as_tensor, concat, matmul

__all__ = [
    "Conv2d", "ConvBlock", "LayerNorm", "Linear", "Module", "NonFiniteError", "Parameter",
    "Tensor", "as_tensor", "concat", "functional", "grad_check", "matmul",
]
