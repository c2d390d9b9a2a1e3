"""Answer metrics, compression ratio and stage-wise throughput."""
from __future__ import annotations

import math
import re
import string
import time
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Any, Callable, Mapping, Sequence

from ..compressor import CompressedDocument, n_groups
from ..strategy import CompressionPlan
from ..textdata import QueryExample

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
_WS = re.compile(r"\s+")

SETTINGS = ("closed-book", "oracle", "base", "base-with-answer", "qgc", "truncation", "reranker-drop")


def normalize(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace."""
    return _WS.sub(" ", _PUNCT.sub(" ", text.lower())).strip()


def accuracy(prediction: str, answers: Sequence[str]) -> int:
    """1 iff some normalised answer occurs inside the normalised prediction."""
    pred = normalize(prediction)
    if not pred:
        return 0
    return int(any(a and a in pred for a in map(normalize, answers)))


def exact_match(prediction: str, answers: Sequence[str]) -> int:
    pred = normalize(prediction)
    return int(any(pred == normalize(a) for a in answers))


def f1(prediction: str, answers: Sequence[str]) -> float:
    pred = normalize(prediction).split()
    best = 0.0
    for a in answers:
        gold = normalize(a).split()
        common = sum((Counter(pred) & Counter(gold)).values())
        if common == 0:
            continue
        p, r = common / len(pred), common / len(gold)
        best = max(best, 2 * p * r / (p + r))
    return best


def compression_ratio(example: QueryExample, compressed: CompressionPlan | Mapping[str, CompressedDocument] | None) -> float:
    """Original document tokens over compressed units.

    ``compressed`` is a plan, a ``doc_id -> CompressedDocument`` mapping (dropped
    documents absent), or ``None`` for raw tokens. All documents dropped gives
    ``math.inf``.
    """
    total = sum(len(d.token_ids) for d in example.documents)
    if total == 0:
        raise ValueError("example has no document tokens")
    if compressed is None:
        return 1.0
    if isinstance(compressed, CompressionPlan):
        lens = {d.id: len(d.token_ids) for d in example.documents}
        units = sum(n_groups(lens[e.doc_id], e.n_gram_size) for e in compressed.kept)
    else:
        units = sum(cd.n_groups for cd in compressed.values())
    return math.inf if units == 0 else total / units


def corpus_compression_ratio(examples: Sequence[QueryExample], units: Sequence[int]) -> float:
    """Aggregate CR: total original document tokens over total compressed units."""
    total = sum(len(d.token_ids) for ex in examples for d in ex.documents)
    s = sum(units)
    return math.inf if s == 0 else total / s


@dataclass(frozen=True)
class EvalResult:
    metric: str
    value: float
    n_examples: int
    compression_ratio: float
    throughput: float | None
    setting: str
    label: str = ""
    n: int | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.compression_ratio):
            d["compression_ratio"] = "inf"
        return d


@dataclass(frozen=True)
class ThroughputReport:
    n_examples: int
    compress_seconds: float
    generate_seconds: float
    compress_tp: float
    generate_tp: float
    total_tp: float

    def to_dict(self) -> dict:
        return asdict(self)


def throughput(examples: Sequence[Any], compress: Callable[[Any], Any], generate: Callable[[Any], Any],
               warmup: int = 3) -> ThroughputReport:
    """Serial per-example timing of the compression and generation stages.

    The first ``warmup`` examples are run but not timed. Stages run back to back
    in one thread, so ``total_tp <= min(compress_tp, generate_tp)`` holds by
    construction.
    """
    if warmup < 3:
        raise ValueError("at least 3 warm-up examples are required")
    if len(examples) <= warmup:
        raise ValueError(f"need more than {warmup} examples, got {len(examples)}")
    for ex in examples[:warmup]:
        generate(compress(ex))
    tc = tg = 0.0
    timed = examples[warmup:]
    for ex in timed:
        t0 = time.perf_counter()
        state = compress(ex)
        t1 = time.perf_counter()
        generate(state)
        t2 = time.perf_counter()
        tc += t1 - t0
        tg += t2 - t1
    n = len(timed)
    rate = lambda s: n / s if s > 0 else math.inf  # noqa: E731
    return ThroughputReport(n, tc, tg, rate(tc), rate(tg), rate(tc + tg))
