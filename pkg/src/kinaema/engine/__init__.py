from kinaema.engine.tensor import Tensor, no_grad, precision
from kinaema.engine.nn import (
    GRUCell, LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter,
    SelfAttentionBlock, attention, gru_cell,
)
from kinaema.engine.gradcheck import GradCheckReport, grad_check

__all__ = [
    "Tensor", "no_grad", "precision", "GRUCell", "LayerNorm", "Linear", "MLP", "Module",
    "MultiHeadAttention", "Parameter", "SelfAttentionBlock", "attention", "gru_cell",
    "GradCheckReport", "grad_check",
]
