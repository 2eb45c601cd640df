"""Minimal differentiable-operator core: tensors, layers, grad checking."""

from .tensor import (DiffTensor, ParamStore, as_tensor, checked, grad_enabled,
                     load_checkpoint, make_node, no_grad, save_checkpoint)
from .ops import (add, additive_attention, affine_const, attention_pool,
                  bilinear_sample, concat, expm2x2, expm2x2_value,
                  external_lookup, gru_cell, inverse2x2, layer_norm, linear,
                  lstm_cell, matvec, mean_of, mul, relu, reshape, scale,
                  scaled_dot_attention, sigmoid, slice_vec, softmax, softplus,
                  stack_rows, sub, tanh, vsum)
from .conv import (batch_norm2d, conv2d, dropout, maxpool2x2,
                   upsample_bilinear)
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "DiffTensor", "ParamStore", "as_tensor", "checked", "grad_enabled",
    "load_checkpoint", "make_node", "no_grad", "save_checkpoint",
    "add", "additive_attention", "affine_const", "attention_pool",
    "bilinear_sample", "concat", "expm2x2", "expm2x2_value",
    "external_lookup", "gru_cell", "inverse2x2", "layer_norm", "linear",
    "lstm_cell", "matvec", "mean_of", "mul", "relu", "reshape", "scale",
    "scaled_dot_attention", "sigmoid", "slice_vec", "softmax", "softplus",
    "stack_rows", "sub", "tanh", "vsum",
    "batch_norm2d", "conv2d", "dropout", "maxpool2x2", "upsample_bilinear",
    "GradCheckReport", "grad_check",
]
