"""Query-guided document compressor.

A document is compressed in four stages, always conditioned on the query:

1. ``encode_context``: query and document are encoded jointly (``[q; SEP; d]``)
   by two bidirectional transformer layers.
2. ``pool_ngrams``: the document is cut into consecutive n-grams; each n-gram
   becomes a softmax-weighted sum of its token states, weights coming from dot
   products with the mean query state.
3. ``review``: two more layers read ``[h_q; h_d; pooled]`` and refine the pooled
   slots.
4. ``align``: an affine map into the target LM's embedding space.

All stages work on padded batches of documents (leading axis D). The ragged last
n-gram keeps ``N_d mod n`` tokens.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .target_lm import SoftSegment, TargetLM


class EncoderOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class CompressorConfig:
    vocab_size: int
    d_c: int = 128
    d_lm: int = 128
    n_heads: int = 4
    d_ff: int = 0  # 0 -> 4 * d_c
    max_len: int = 512
    n_default: int = 4
    sep_id: int = 3
    # ablation switches; all True is the full model
    query_guided_encoder: bool = True
    query_guided_pooling: bool = True
    reviewing: bool = True
    seed: int = 0

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_c

    @property
    def variant(self) -> str:
        if not self.query_guided_encoder:
            return "w/o query-guided context encoder"
        if not self.query_guided_pooling:
            return "w/o query-guided pooling layer"
        if not self.reviewing:
            return "w/o query-document reviewing layer"
        return "full"


class Align(nx.Module):
    """``e = W h + b`` with ``W`` of shape [d_lm, d_c]."""

    def __init__(self, d_c: int, d_lm: int):
        self.weight = Tensor(np.eye(d_lm, d_c), requires_grad=True)
        self.bias = Tensor(np.zeros(d_lm), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.weight.shape[1]:
            raise nx.DimensionError(f"align expects dim {self.weight.shape[1]}, got {h.shape}")
        return nx.matmul(h, nx.transpose(self.weight)) + self.bias


@dataclass
class EncodedBatch:
    h_q: Tensor  # [D, Nq, d_c]
    h_d: Tensor  # [D, Nd, d_c]
    q_len: np.ndarray
    d_len: np.ndarray


@dataclass
class PooledBatch:
    pooled: Tensor  # [D, G, d_c]
    weights: Tensor  # [D, G, n]
    n: int
    n_groups: np.ndarray  # [D]


@dataclass
class CompressedBatch:
    embeddings: Tensor  # [D, G, d_lm]
    n: int
    n_groups: np.ndarray
    source_len: np.ndarray
    weights: np.ndarray  # [D, G*n] pooling weights per (padded) token position

    def flat(self) -> Tensor:
        D, G, d = self.embeddings.shape
        return nx.reshape(self.embeddings, (D * G, d))

    def rows(self, i: int) -> np.ndarray:
        G = self.embeddings.shape[1]
        return i * G + np.arange(self.n_groups[i])

    def segment(self, i: int, flat: Tensor | None = None) -> SoftSegment:
        return SoftSegment(self.flat() if flat is None else flat, self.rows(i))


@dataclass
class CompressedDocument:
    embeddings: Tensor  # [N_g, d_lm]
    n_gram_size: int
    source_len: int
    weights: np.ndarray  # [N_d]

    @property
    def n_groups(self) -> int:
        return self.embeddings.shape[0]


def n_groups(doc_len: int, n: int) -> int:
    return -(-doc_len // n)


def _pad_ids(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lens.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


class CompressorModel(nx.Module):
    def __init__(self, config: CompressorConfig):
        rng = np.random.default_rng(config.seed)
        d = config.d_c
        self._config = config
        self.tok_emb = Tensor(rng.normal(0, 0.02, (config.vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0, 0.02, (config.max_len, d)), requires_grad=True)
        self.encoder = [nx.TransformerLayer(d, config.n_heads, config.ff_dim, rng, 4) for _ in range(2)]
        self.reviewer = [nx.TransformerLayer(d, config.n_heads, config.ff_dim, rng, 4) for _ in range(2)]
        self.align = Align(d, config.d_lm)
        self._apply_trainability()

    @property
    def config(self) -> CompressorConfig:
        return self._config

    # -- trainability --------------------------------------------------------
    def _apply_trainability(self) -> None:
        frozen = set(self.frozen_parameter_names())
        for name, p in self.named_parameters():
            p.requires_grad = name not in frozen
        if not self._config.reviewing:
            for name, p in self.named_parameters():
                if name.startswith("reviewer."):
                    p.requires_grad = False

    def frozen_parameter_names(self) -> list[str]:
        """Feed-forward sublayer parameters of both encoder stacks."""
        return [n for n, _ in self.named_parameters() if ".mlp." in n]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def mlp_state(self) -> dict[str, np.ndarray]:
        frozen = set(self.frozen_parameter_names())
        return {n: p.data for n, p in self.named_parameters() if n in frozen}

    def mlp_hash(self) -> str:
        return nx.tensor_hash(self.mlp_state())

    def parameter_hash(self) -> str:
        return nx.tensor_hash(self.state_dict())

    def init_from_lm(self, lm: TargetLM, copy_layers: bool = True) -> None:
        """Copy the LM's embeddings (projected/truncated to d_c) and, when the widths
        match, its first decoder layers into both encoder stacks."""
        d_c, d_lm = self._config.d_c, lm.d_model
        rng = np.random.default_rng(self._config.seed + 7919)

        def fit(a: np.ndarray) -> np.ndarray:
            if d_c == d_lm:
                return a.copy()
            if d_c < d_lm:
                return a[:, :d_c].copy()
            return np.concatenate([a, rng.normal(0, 0.02, (a.shape[0], d_c - d_lm))], axis=1)

        self.tok_emb.data = fit(lm.tok_emb.data)
        n = min(self.pos_emb.shape[0], lm.pos_emb.shape[0])
        self.pos_emb.data[:n] = fit(lm.pos_emb.data[:n])
        if copy_layers and d_c == d_lm and self._config.ff_dim == lm.config.ff_dim \
                and self._config.n_heads == lm.config.n_heads:
            src = lm.layers
            for i, layer in enumerate(self.encoder + self.reviewer):
                state = {k: v.copy() for k, v in src[i % len(src)].state_dict().items()}
                layer.load_state_dict(state)
        self._apply_trainability()

    # -- stage 1 -----------------------------------------------------------
    def encode_context_batch(self, queries: Sequence[Sequence[int]], docs: Sequence[Sequence[int]]) -> EncodedBatch:
        cfg = self._config
        q_ids, q_len = _pad_ids(queries)
        d_ids, d_len = _pad_ids(docs)
        if (q_len < 1).any() or (d_len < 1).any():
            raise ValueError("query and document must each contain at least one token")
        total = q_len + 1 + d_len
        if total.max() > cfg.max_len:
            raise EncoderOverflowError(f"query+document length {int(total.max())} exceeds encoder limit {cfg.max_len}")
        D = len(docs)
        Nq, Nd = q_ids.shape[1], d_ids.shape[1]
        # layout per row: [query (padded to Nq)] [SEP] [document (padded to Nd)]
        ids = np.concatenate([q_ids, np.full((D, 1), cfg.sep_id), d_ids], axis=1)
        L = Nq + 1 + Nd
        pos = np.arange(L)[None, :].repeat(D, 0)
        q_valid = np.arange(Nq)[None, :] < q_len[:, None]
        d_valid = np.arange(Nd)[None, :] < d_len[:, None]
        valid = np.concatenate([q_valid, np.ones((D, 1), bool), d_valid], axis=1)
        if cfg.query_guided_encoder:
            # contiguous positions: query, SEP, then document
            pos = np.concatenate([np.arange(Nq)[None].repeat(D, 0), q_len[:, None] + np.arange(Nd + 1)[None]], axis=1)
            mask = valid[:, None, :] & np.ones((1, L, 1), bool)
        else:
            # independent encodings: block-diagonal attention, document positions restart at 0
            pos = np.concatenate([np.arange(Nq)[None].repeat(D, 0), np.zeros((D, 1), np.int64),
                                  np.arange(Nd)[None].repeat(D, 0)], axis=1)
            part = np.concatenate([np.zeros(Nq, int), [1], np.full(Nd, 2)])
            mask = (part[None, :, None] == part[None, None, :]) & valid[:, None, :]
        mask = mask | np.eye(L, dtype=bool)[None]
        x = nx.embedding(self.tok_emb, ids) + nx.embedding(self.pos_emb, pos)
        for layer in self.encoder:
            x = layer(x, mask)
        h_q = x[:, :Nq]
        h_d = x[:, Nq + 1 :]
        return EncodedBatch(h_q, h_d, q_len, d_len)

    def encode_context(self, query_ids: Sequence[int], doc_ids: Sequence[int]) -> dict:
        enc = self.encode_context_batch([query_ids], [doc_ids])
        return {"h_q": enc.h_q[0], "h_d": enc.h_d[0]}

    # -- stage 2 -----------------------------------------------------------
    def pool_batch(self, enc: EncodedBatch, n: int) -> PooledBatch:
        return pool_ngrams_batch(enc.h_q, enc.h_d, n, enc.q_len, enc.d_len,
                                 query_guided=self._config.query_guided_pooling)

    # -- stage 3 -----------------------------------------------------------
    def review_batch(self, enc: EncodedBatch, pooled: PooledBatch) -> Tensor:
        h_q, h_d, p = enc.h_q, enc.h_d, pooled.pooled
        D, Nq, d = h_q.shape
        Nd, G = h_d.shape[1], p.shape[1]
        L = Nq + Nd + G
        if L > self._config.max_len:
            raise EncoderOverflowError(f"reviewing sequence of {L} exceeds limit {self._config.max_len}")
        valid = np.concatenate([
            np.arange(Nq)[None, :] < enc.q_len[:, None],
            np.arange(Nd)[None, :] < enc.d_len[:, None],
            np.arange(G)[None, :] < pooled.n_groups[:, None],
        ], axis=1)
        mask = (valid[:, None, :] & np.ones((1, L, 1), bool)) | np.eye(L, dtype=bool)[None]
        # per-row contiguous positions so padding never shifts the real tokens
        ql, dl = enc.q_len[:, None], enc.d_len[:, None]
        pos = np.concatenate([np.arange(Nq)[None].repeat(D, 0), ql + np.arange(Nd)[None],
                              ql + dl + np.arange(G)[None]], axis=1)
        x = nx.concat([h_q, h_d, p], axis=1) + nx.embedding(self.pos_emb, np.minimum(pos, L - 1))
        for layer in self.reviewer:
            x = layer(x, mask)
        return x[:, Nq + Nd :]

    # -- full pipeline ------------------------------------------------------
    def compress_batch(self, queries: Sequence[Sequence[int]], docs: Sequence[Sequence[int]], n: int) -> CompressedBatch:
        if n < 1:
            raise ValueError(f"n-gram size must be >= 1, got {n}")
        enc = self.encode_context_batch(queries, docs)
        pooled = self.pool_batch(enc, n)
        refined = self.review_batch(enc, pooled) if self._config.reviewing else pooled.pooled
        emb = self.align(refined)
        D, G, _ = pooled.weights.shape
        return CompressedBatch(emb, n, pooled.n_groups, enc.d_len, pooled.weights.data.reshape(D, G * n))

    def compress_document(self, query_ids: Sequence[int], doc_ids: Sequence[int], n: int | None = None) -> CompressedDocument:
        n = self._config.n_default if n is None else n
        cb = self.compress_batch([query_ids], [doc_ids], n)
        g = int(cb.n_groups[0])
        return CompressedDocument(cb.embeddings[0, :g], n, len(doc_ids), cb.weights[0, : len(doc_ids)].copy())

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path) -> str:
        path = Path(path)
        digest = nx.save(path, self.state_dict())
        meta = asdict(self._config)
        meta["frozen_mlp"] = True
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return digest

    @classmethod
    def load(cls, path: str | Path) -> "CompressorModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        meta.pop("frozen_mlp", None)
        model = cls(CompressorConfig(**meta))
        model.load_state_dict(nx.load(path))
        model._apply_trainability()
        return model

    def pooling_dump(self, query_ids, doc_ids, n: int, vocab=None) -> dict:
        """Per-document pooling weights for inspection."""
        with nx.no_grad():
            cd = self.compress_document(query_ids, doc_ids, n)
        toks = [vocab.tokens[i] for i in doc_ids] if vocab is not None else list(map(int, doc_ids))
        return {"n": n, "n_groups": cd.n_groups,
                "groups": [[{"token": toks[i], "weight": float(cd.weights[i])}
                            for i in range(j * n, min((j + 1) * n, len(doc_ids)))] for j in range(cd.n_groups)]}


def pool_ngrams_batch(h_q: Tensor, h_d: Tensor, n: int, q_len: np.ndarray, d_len: np.ndarray,
                      query_guided: bool = True) -> PooledBatch:
    """Query-guided n-gram pooling over padded batches ``h_q`` [D, Nq, d], ``h_d`` [D, Nd, d]."""
    if n < 1:
        raise ValueError(f"n-gram size must be >= 1, got {n}")
    D, Nd, d = h_d.shape
    Nq = h_q.shape[1]
    G = n_groups(Nd, n)
    pad = G * n - Nd
    token_valid = np.arange(G * n)[None, :] < d_len[:, None]  # [D, G*n]
    groups_mask = token_valid.reshape(D, G, n)
    hd = nx.pad_axis(h_d, 1, pad)
    hd_groups = nx.reshape(hd, (D, G, n, d))
    if query_guided:
        qmask = (np.arange(Nq)[None, :] < q_len[:, None]).astype(float) / q_len[:, None]
        hq_mean = nx.matmul(Tensor(qmask[:, None, :]), h_q)  # [D, 1, d]
        scores = nx.matmul(hd, nx.transpose(hq_mean, (0, 2, 1)))  # [D, G*n, 1]
        w = nx.softmax(nx.reshape(scores, (D, G, n)), axis=-1, mask=groups_mask)
    else:
        cnt = groups_mask.sum(-1, keepdims=True)
        w = Tensor(np.divide(groups_mask, cnt, out=np.zeros(groups_mask.shape), where=cnt > 0))
    pooled = nx.matmul(nx.reshape(w, (D, G, 1, n)), hd_groups)  # [D, G, 1, d]
    pooled = nx.reshape(pooled, (D, G, d))
    ng = -(-d_len // n)
    return PooledBatch(pooled, w, n, ng)


def pool_ngrams(h_q: Tensor, h_d: Tensor, n: int) -> dict:
    """Single-document pooling: ``{"pooled": [N_g, d], "weights": [N_d]}``."""
    pb = pool_ngrams_batch(nx.reshape(h_q, (1, *h_q.shape)), nx.reshape(h_d, (1, *h_d.shape)), n,
                           np.array([h_q.shape[0]]), np.array([h_d.shape[0]]))
    g = int(pb.n_groups[0])
    return {"pooled": pb.pooled[0, :g], "weights": pb.weights.data.reshape(-1)[: h_d.shape[0]].copy()}
