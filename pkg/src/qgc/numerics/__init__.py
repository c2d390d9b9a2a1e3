"""Minimal float64 tensor engine with reverse-mode autodiff."""
from .checkpoint import CheckpointError, load, save, tensor_hash
from .nn import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerLayer,
    causal_mask,
    key_padding_mask,
    transformer_encoder_layer,
)
from .optim import Adam, FrozenParameterError
from .tensor import (
    DimensionError,
    GraphError,
    Tensor,
    add,
    backward,
    concat,
    embedding,
    exp,
    gelu,
    graph_nodes,
    index,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    pad_axis,
    relu,
    reshape,
    scatter_rows,
    softmax,
    square,
    stack,
    sub,
    sum_,
    take_rows,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
