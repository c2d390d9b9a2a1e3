"""Relevance ranking and per-document compression plans.

Each retrieved document gets an n-gram size from its relevance rank ``O`` (1 =
most relevant): ``min(multiplier * O, cap)``. Documents whose normalised score
falls below ``epsilon`` are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .compressor import CompressorModel, n_groups
from .target_lm import ContextOverflowError, MixedInput, SoftSegment, TargetLM, TokenSegment
from .textdata import Document, QueryExample

DEFAULT_EPSILON = 0.35
DEFAULT_CAP = 16
DEFAULT_MULTIPLIER = 2


class ScorerError(RuntimeError):
    def __init__(self, doc_id: str, cause: Exception):
        super().__init__(f"scorer failed on document {doc_id!r}: {cause}")
        self.doc_id = doc_id


class Scorer(Protocol):
    name: str

    def score(self, query_ids: Sequence[int], document: Document) -> float: ...


class OverlapScorer:
    """Fraction of distinct query token types that occur in the document."""

    name = "overlap"

    def __init__(self, ignore: Sequence[int] = ()):
        self.ignore = set(int(i) for i in ignore)

    def score(self, query_ids, document) -> float:
        q = set(int(i) for i in query_ids) - self.ignore
        if not q:
            return 0.0
        return len(q & set(int(i) for i in document.token_ids)) / len(q)


class FileScorer:
    """Passes through ``Document.score`` from the dataset file."""

    name = "file"

    def score(self, query_ids, document) -> float:
        if document.score is None:
            raise ValueError("document has no 'score' field")
        return float(document.score)


class LMNLLScorer:
    """Negative mean NLL of the query under the target LM, conditioned on the document."""

    name = "lm-nll"

    def __init__(self, lm: TargetLM, instruction_ids: Sequence[int] = ()):
        self.lm = lm
        self.instruction_ids = list(instruction_ids)

    def score(self, query_ids, document) -> float:
        return float(self.score_many(query_ids, [document])[0])

    def score_many(self, query_ids, documents: Sequence[Document]) -> np.ndarray:
        q = list(query_ids)
        inputs = [MixedInput.of_tokens(self.instruction_ids, d.token_ids, q[:1]) for d in documents]
        # teacher-force the rest of the query; score every query token but the first
        if len(q) < 2:
            return np.zeros(len(documents))
        with nx.no_grad():
            lp, _ = self.lm.answer_logprob_batch(inputs, [q[1:]] * len(documents))
        return lp.data / (len(q) - 1)


@dataclass(frozen=True)
class RerankerScore:
    doc_id: str
    score: float
    rank: int


def rank_documents(example: QueryExample, scorer: Scorer, normalize: bool = True) -> list[RerankerScore]:
    """Scores for every document, ordered by rank (descending score, ties by original order)."""
    docs = example.documents
    if hasattr(scorer, "score_many"):
        try:
            raw = np.asarray(scorer.score_many(example.query_ids, docs), dtype=float)
        except Exception:
            raw = None  # fall back to per-document calls to name the failing document
    else:
        raw = None
    if raw is None:
        vals = []
        for d in docs:
            try:
                vals.append(float(scorer.score(example.query_ids, d)))
            except Exception as exc:
                raise ScorerError(d.id, exc) from exc
        raw = np.array(vals)
    if normalize:
        raw = minmax(raw)
    order = sorted(range(len(docs)), key=lambda i: (-raw[i], i))
    return [RerankerScore(docs[i].id, float(raw[i]), r + 1) for r, i in enumerate(order)]


def minmax(x: np.ndarray) -> np.ndarray:
    """Per-example min-max scaling to [0, 1]; a constant vector maps to all ones."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


@dataclass(frozen=True)
class PlanEntry:
    doc_id: str
    score: float
    rank: int
    n_gram_size: int | None  # None means dropped

    @property
    def dropped(self) -> bool:
        return self.n_gram_size is None


@dataclass
class CompressionPlan:
    entries: list[PlanEntry]
    epsilon: float
    cap: int = DEFAULT_CAP
    multiplier: int = DEFAULT_MULTIPLIER

    @property
    def kept(self) -> list[PlanEntry]:
        return sorted((e for e in self.entries if not e.dropped), key=lambda e: e.rank)

    @property
    def dropped(self) -> list[PlanEntry]:
        return [e for e in self.entries if e.dropped]

    def for_doc(self, doc_id: str) -> PlanEntry:
        return next(e for e in self.entries if e.doc_id == doc_id)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "cap": self.cap, "multiplier": self.multiplier,
                "entries": [{"doc_id": e.doc_id, "score": e.score, "rank": e.rank,
                             "n": e.n_gram_size} for e in self.entries]}


def ngram_size(rank: int, score: float, epsilon: float, cap: int = DEFAULT_CAP,
               multiplier: int = DEFAULT_MULTIPLIER) -> int | None:
    if score < epsilon:
        return None
    return min(multiplier * rank, cap)


def assign_plan(scores: Sequence[RerankerScore], epsilon: float = DEFAULT_EPSILON,
                cap: int = DEFAULT_CAP, multiplier: int = DEFAULT_MULTIPLIER) -> CompressionPlan:
    ranks = sorted(s.rank for s in scores)
    if ranks != list(range(1, len(scores) + 1)):
        raise ValueError(f"ranks must be a permutation of 1..{len(scores)}, got {ranks}")
    entries = [PlanEntry(s.doc_id, s.score, s.rank, ngram_size(s.rank, s.score, epsilon, cap, multiplier))
               for s in scores]
    return CompressionPlan(entries, epsilon, cap, multiplier)


def fixed_plan(example: QueryExample, n: int) -> CompressionPlan:
    """Every document kept at the same n-gram size, in original order."""
    return CompressionPlan([PlanEntry(d.id, 1.0, i + 1, n) for i, d in enumerate(example.documents)],
                           epsilon=0.0, cap=n, multiplier=0)


def compressed_length(example: QueryExample, plan: CompressionPlan) -> int:
    lens = {d.id: len(d.token_ids) for d in example.documents}
    return sum(n_groups(lens[e.doc_id], e.n_gram_size) for e in plan.kept)


def compress_planned(examples: Sequence[QueryExample], plans: Sequence[CompressionPlan],
                     compressor: CompressorModel) -> list[dict]:
    """Compress every kept document, batching documents that share an n-gram size.

    Returns per example a mapping ``doc_id -> SoftSegment``.
    """
    jobs: dict[int, list[tuple[int, Document]]] = {}
    for ei, (ex, plan) in enumerate(zip(examples, plans)):
        by_id = {d.id: d for d in ex.documents}
        for e in plan.kept:
            jobs.setdefault(e.n_gram_size, []).append((ei, by_id[e.doc_id]))
    out: list[dict] = [dict() for _ in examples]
    for n, items in sorted(jobs.items()):
        cb = compressor.compress_batch([examples[ei].query_ids for ei, _ in items],
                                       [d.token_ids for _, d in items], n)
        flat = cb.flat()
        for j, (ei, d) in enumerate(items):
            out[ei][d.id] = cb.segment(j, flat)
    return out


def assemble_from_segments(example: QueryExample, plan: CompressionPlan, segments: dict) -> MixedInput:
    parts: list = [TokenSegment(example.instruction_ids)] if example.instruction_ids else []
    parts += [segments[e.doc_id] for e in plan.kept]
    parts.append(TokenSegment(example.query_ids))
    return MixedInput(parts)


def assemble_input(example: QueryExample, plan: CompressionPlan, compressor: CompressorModel,
                   target_lm: TargetLM | None = None) -> MixedInput:
    """instruction || kept documents compressed at their n, most relevant first || query."""
    segs = compress_planned([example], [plan], compressor)[0]
    inp = assemble_from_segments(example, plan, segs)
    if target_lm is not None and len(inp) > target_lm.config.context_limit:
        raise ContextOverflowError(
            f"assembled input of {len(inp)} (instruction {len(example.instruction_ids)}, "
            f"documents {[len(segs[e.doc_id]) for e in plan.kept]}, query {len(example.query_ids)}) "
            f"exceeds context limit {target_lm.config.context_limit}")
    return inp


def make_scorer(name: str, lm: TargetLM | None = None, instruction_ids: Sequence[int] = (),
                ignore: Sequence[int] = ()) -> Scorer:
    if name == "overlap":
        return OverlapScorer(ignore)
    if name == "file":
        return FileScorer()
    if name == "lm-nll":
        if lm is None:
            raise ValueError("lm-nll scorer needs a target LM")
        return LMNLLScorer(lm, instruction_ids)
    raise ValueError(f"unknown scorer {name!r}")
