"""Differentiable compute substrate: tensors, tape autodiff, layers, AMSGrad."""
from . import functional
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .functional import conv2d, layer_norm, lstm_cell, lstm_sequence
from .gradcheck import GradCheckReport, gradient_check
from .layers import (
    BatchNorm, Buffer, Conv2d, Dropout, Embedding, LayerNorm, Linear, LSTMLayer, Module, ModuleList, Parameter,
)
from .optim import AMSGrad, OptimizerStateError, clip_grad_norm
from .tensor import (
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    current_tape,
    exp,
    get_dtype,
    log,
    log_softmax,
    matmul,
    no_grad,
    precision,
    relu,
    reshape,
    set_precision,
    sigmoid,
    softmax,
    stack,
    take_rows,
    tanh,
    transpose,
)
