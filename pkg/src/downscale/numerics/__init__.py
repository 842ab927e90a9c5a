"""Minimal tensor engine: reverse-mode autodiff, neural primitives, Adam, flop accounting."""

from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .flops import FlopLedger, credit, credit_ledger, flop_scope, isolated_scope, with_flop_ledger
from .ops import (
    add, attention, concat, conv2d, div, gelu, getitem, huber, layer_norm, linear, matmul, mean, mul,
    pad_edge, patchify, pixel_shuffle, reshape, softmax, sparse_matmul, square, stack, sub, sum,
    take_rows, transpose, upsample_bilinear,
)
from .optim import AdamState, adam_step, zero_grads
from .tensor import (
    NonFiniteError, StaleGraphError, Tensor, as_tensor, backward, debug_enabled, grad_enabled, no_grad,
    set_debug,
)
