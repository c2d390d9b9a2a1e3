"""Parameter containers and transformer building blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)


class Module:
    """Tree of named parameters discovered from attributes.

    Tensor attributes are parameters, Module attributes are children, and lists
    of Modules are indexed children (``layers.0.attn.wq``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and all(isinstance(v, Module) for v in val):
                for i, child in enumerate(val):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = Tensor(_normal(rng, (d_in, d_out), std), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Tensor(_normal(rng, (n, d), std), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return embedding(self.weight, ids)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, out_std: float | None = None):
        if d % n_heads:
            raise DimensionError(f"model dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng, std=out_std)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        *lead, L, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            t = reshape(t, (*lead, L, h, dh))
            n = len(lead)
            return transpose(t, (*range(n), n + 1, n, n + 2))

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        scores = matmul(q, transpose(k, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1)))
        scores = scores * (1.0 / math.sqrt(dh))
        if mask is not None:
            mask = np.expand_dims(mask, -3)  # broadcast over heads
        probs = softmax(scores, axis=-1, mask=mask)
        ctx = matmul(probs, v)
        n = len(lead)
        ctx = reshape(transpose(ctx, (*range(n), n + 1, n, n + 2)), (*lead, L, d))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, out_std: float | None = None):
        self.w1 = Linear(d, d_ff, rng)
        self.w2 = Linear(d_ff, d, rng, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(gelu(self.w1(x)))


class TransformerLayer(Module):
    """Pre-norm block: ``x + Attn(LN(x))`` then ``+ FFN(LN(.))``."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng: np.random.Generator, n_layers_total: int = 1):
        # scaled-down residual projections keep deep stacks near identity at init
        out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * n_layers_total)
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng, out_std=out_std)
        self.ln2 = LayerNorm(d)
        self.mlp = FeedForward(d, d_ff, rng, out_std=out_std)

    @property
    def d_model(self) -> int:
        return self.ln1.gamma.shape[0]

    def mlp_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.mlp.named_parameters("mlp."))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return transformer_encoder_layer(x, self, mask)


def transformer_encoder_layer(x: Tensor, params: TransformerLayer, mask: np.ndarray | None = None) -> Tensor:
    """One pre-norm self-attention + feed-forward block over ``x`` of shape [..., L, d].

    ``mask`` is a boolean [..., L, L] array; ``mask[i, j]`` allows position i to
    attend to j. ``None`` means full bidirectional attention.
    """
    d = params.d_model
    if x.shape[-1] != d:
        raise DimensionError(f"layer expects model dim {d}, got input {x.shape}")
    if mask is not None:
        L = x.shape[-2]
        if mask.shape[-2:] != (L, L):
            raise DimensionError(f"mask shape {mask.shape} does not match sequence length {L}")
    h = add(x, params.attn(params.ln1(x), mask))
    return add(h, params.mlp(params.ln2(h)))


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def key_padding_mask(lengths: np.ndarray, L: int, causal: bool = False) -> np.ndarray:
    """[B, L, L] mask allowing attention only to real (non-pad) keys.

    Pad query rows attend to themselves so no row is empty.
    """
    lengths = np.asarray(lengths)
    valid = np.arange(L)[None, :] < lengths[:, None]
    m = valid[:, None, :] & np.ones((1, L, 1), dtype=bool)
    if causal:
        m = m & causal_mask(L)[None]
    eye = np.eye(L, dtype=bool)[None]
    return m | (eye & ~valid[:, :, None])
