"""Study drivers: key-information loss, accuracy vs. compression ratio, ablations."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..compressor import CompressorConfig, CompressorModel
from ..strategy import (
    DEFAULT_CAP,
    DEFAULT_EPSILON,
    DEFAULT_MULTIPLIER,
    CompressionPlan,
    Scorer,
    assign_plan,
    compressed_length,
    fixed_plan,
    rank_documents,
)
from ..target_lm import MixedInput, TargetLM, closed_book_input, oracle_input, token_input
from ..textdata import Document, QueryExample, Vocabulary
from .harness import matched_budget, predict, qgc_inputs, score_predictions, truncated_input
from .metrics import EvalResult, corpus_compression_ratio

log = logging.getLogger(__name__)

CSV_FIELDS = ("setting", "label", "n", "CR", "metric", "value")


@dataclass(frozen=True)
class StudySettings:
    ngram_sizes: tuple[int, ...] = (1, 2, 4, 8)
    distractor_counts: tuple[int, ...] = (1, 2, 3, 4)
    distractor_n: int = 4
    max_new_tokens: int = 4
    batch_size: int = 32


@dataclass
class StudyTable:
    results: list[EvalResult] = field(default_factory=list)

    def value(self, setting: str, label: str = "", n: int | None = None, metric: str = "acc") -> float:
        for r in self.results:
            if (r.setting, r.label, r.n, r.metric) == (setting, label, n, metric):
                return r.value
        raise KeyError((setting, label, n, metric))

    def rows(self) -> list[dict]:
        return [{"setting": r.setting, "label": r.label, "n": "" if r.n is None else r.n,
                 "CR": "inf" if math.isinf(r.compression_ratio) else f"{r.compression_ratio:.6g}",
                 "metric": r.metric, "value": f"{r.value:.6f}"} for r in self.results]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.results], indent=2, sort_keys=True)

    def write(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".json").write_text(self.to_json())


def _emit(table: StudyTable, scores: dict, n_ex: int, cr: float, setting: str, label: str = "",
          n: int | None = None) -> None:
    for metric in ("acc", "em", "f1"):
        table.results.append(EvalResult(metric, scores[metric], n_ex, cr, None, setting, label, n))
    log.info("%-16s %-12s n=%-4s CR=%-6.3g acc=%.3f", setting, label, n, cr, scores["acc"])


def _with_docs(ex: QueryExample, docs: Sequence[Document]) -> QueryExample:
    return replace(ex, documents=list(docs))


def _gold_plus(ex: QueryExample, k: int) -> list[Document]:
    """Gold document(s) and the first ``k`` distractors, in original order."""
    keep = {d.id for d in [d for d in ex.documents if not d.is_gold][:k]}
    return [d for d in ex.documents if d.is_gold or d.id in keep]


def _run(lm, inputs, examples, vocab, s: StudySettings) -> dict:
    return score_predictions(predict(lm, inputs, s.max_new_tokens, s.batch_size), examples, vocab)


def _raw_cr(examples: Sequence[QueryExample], kept: Sequence[Sequence[Document]]) -> float:
    return corpus_compression_ratio(examples, [sum(len(d.token_ids) for d in ds) for ds in kept])


def run_key_info_study(examples: Sequence[QueryExample], compressor: CompressorModel, lm: TargetLM,
                       vocab: Vocabulary, settings: StudySettings = StudySettings()) -> StudyTable:
    """Closed-book, Oracle, raw base, and per-n sweeps of QGC, prefix truncation
    and truncation-with-answer; then a distractor-count sweep."""
    ex = list(examples)
    s = settings
    t = StudyTable()
    N = len(ex)
    _emit(t, _run(lm, [closed_book_input(e) for e in ex], ex, vocab, s), N, math.inf, "closed-book")
    _emit(t, _run(lm, [oracle_input(e) for e in ex], ex, vocab, s), N,
          _raw_cr(ex, [e.gold_documents for e in ex]), "oracle")
    _emit(t, _run(lm, [token_input(e) for e in ex], ex, vocab, s), N, 1.0, "base")
    for n in s.ngram_sizes:
        budgets = [matched_budget(e, n) for e in ex]
        cr = corpus_compression_ratio(ex, budgets)
        plans = [fixed_plan(e, n) for e in ex]
        _emit(t, _run(lm, qgc_inputs(ex, plans, compressor, s.batch_size), ex, vocab, s), N, cr, "qgc", "fixed", n)
        _emit(t, _run(lm, [truncated_input(e, b) for e, b in zip(ex, budgets)], ex, vocab, s), N, cr,
              "truncation", "prefix", n)
        _emit(t, _run(lm, [truncated_input(e, b, append_answer=True) for e, b in zip(ex, budgets)], ex, vocab, s),
              N, cr, "base-with-answer", "prefix+answer", n)
    n = s.distractor_n
    for k in s.distractor_counts:
        sub = [_with_docs(e, _gold_plus(e, k)) for e in ex]
        label = f"{k}-distractors"
        _emit(t, _run(lm, [token_input(e) for e in sub], sub, vocab, s), N, 1.0, "base", label)
        budgets = [matched_budget(e, n) for e in sub]
        cr = corpus_compression_ratio(sub, budgets)
        _emit(t, _run(lm, qgc_inputs(sub, [fixed_plan(e, n) for e in sub], compressor, s.batch_size), sub, vocab, s),
              N, cr, "qgc", label, n)
        _emit(t, _run(lm, [truncated_input(e, b) for e, b in zip(sub, budgets)], sub, vocab, s), N, cr,
              "truncation", label, n)
    return t


def dynamic_plans(examples: Sequence[QueryExample], scorer: Scorer, epsilon: float = DEFAULT_EPSILON,
                  cap: int = DEFAULT_CAP, multiplier: int = DEFAULT_MULTIPLIER) -> list[CompressionPlan]:
    return [assign_plan(rank_documents(e, scorer), epsilon, cap, multiplier) for e in examples]


def _plan_docs(ex: QueryExample, plan: CompressionPlan) -> list[Document]:
    by_id = {d.id: d for d in ex.documents}
    return [by_id[e.doc_id] for e in plan.kept]


def run_comparison(examples: Sequence[QueryExample], compressor: CompressorModel, lm: TargetLM, vocab: Vocabulary,
                   scorer: Scorer, epsilon: float = DEFAULT_EPSILON, cap: int = DEFAULT_CAP,
                   multiplier: int = DEFAULT_MULTIPLIER, settings: StudySettings = StudySettings()) -> StudyTable:
    """Accuracy vs. CR: QGC with the dynamic strategy against the reranker-drop
    baseline (same ranking and threshold, kept documents as raw tokens) and
    prefix truncation at the matched compressed length."""
    ex = list(examples)
    s = settings
    t = StudyTable()
    N = len(ex)
    plans = dynamic_plans(ex, scorer, epsilon, cap, multiplier)
    units = [compressed_length(e, p) for e, p in zip(ex, plans)]
    cr = corpus_compression_ratio(ex, units)
    _emit(t, _run(lm, qgc_inputs(ex, plans, compressor, s.batch_size), ex, vocab, s), N, cr, "qgc", "dynamic")
    kept = [_plan_docs(e, p) for e, p in zip(ex, plans)]
    _emit(t, _run(lm, [token_input(e, k) for e, k in zip(ex, kept)], ex, vocab, s), N, _raw_cr(ex, kept),
          "reranker-drop", scorer.name)
    _emit(t, _run(lm, [truncated_input(e, u) for e, u in zip(ex, units)], ex, vocab, s), N, cr,
          "truncation", "matched-dynamic")
    return t


# -- ablations ------------------------------------------------------------------

ABLATION_VARIANTS = (
    "full",
    "w/o query-guided context encoder",
    "w/o query-guided pooling layer",
    "w/o query-document reviewing layer",
    "w/o dynamically compressing strategy",
)

_VARIANT_FLAGS = {
    "full": {},
    "w/o query-guided context encoder": {"query_guided_encoder": False},
    "w/o query-guided pooling layer": {"query_guided_pooling": False},
    "w/o query-document reviewing layer": {"reviewing": False},
}


def variant_config(base: CompressorConfig, variant: str, seed: int) -> CompressorConfig:
    """Compressor config for a trained variant (the dynamic-strategy ablation reuses ``full``)."""
    flags = _VARIANT_FLAGS["full" if variant == ABLATION_VARIANTS[4] else variant]
    on = {"query_guided_encoder": True, "query_guided_pooling": True, "reviewing": True}
    return replace(base, seed=seed, **{**on, **flags})


@dataclass
class AblationRow:
    variant: str
    accuracies: list[float]
    median: float


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def median(self, variant: str) -> float:
        return next(r.median for r in self.rows if r.variant == variant)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", *[f"seed{s}" for s in self.seeds], "median"])
        for r in self.rows:
            w.writerow([r.variant, *[f"{a:.6f}" for a in r.accuracies], f"{r.median:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True)


TrainFn = Callable[[CompressorConfig], CompressorModel]


def run_ablations(
    heldout: Sequence[QueryExample],
    lm: TargetLM,
    vocab: Vocabulary,
    base_config: CompressorConfig,
    train_fn: TrainFn | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    scorer: Scorer | None = None,
    epsilon: float = DEFAULT_EPSILON,
    fixed_n: int = 4,
    trained: Mapping[tuple[str, int], CompressorModel] | None = None,
    settings: StudySettings = StudySettings(),
) -> AblationTable:
    """Held-out accuracy of the full model and four ablations, per seed and median.

    Variants are evaluated with the dynamic strategy (``scorer``/``epsilon``)
    except "w/o dynamically compressing strategy", which is the full model with
    every document at ``fixed_n``. Models come from ``trained[(variant, seed)]``
    or are produced by ``train_fn(config)``.
    """
    if scorer is None:
        raise ValueError("run_ablations needs a scorer for the dynamic strategy")
    ex = list(heldout)
    plans = dynamic_plans(ex, scorer, epsilon)
    fixed = [fixed_plan(e, fixed_n) for e in ex]
    acc: dict[str, list[float]] = {v: [] for v in ABLATION_VARIANTS}
    for seed in seeds:
        for variant in ABLATION_VARIANTS[:4]:
            model = (trained or {}).get((variant, seed))
            if model is None:
                if train_fn is None:
                    raise FileNotFoundError(f"missing checkpoint for variant {variant!r} seed {seed}")
                model = train_fn(variant_config(base_config, variant, seed))
            a = _run(lm, qgc_inputs(ex, plans, model, settings.batch_size), ex, vocab, settings)["acc"]
            acc[variant].append(a)
            log.info("ablation seed %d %-36s acc %.3f", seed, variant, a)
            if variant == "full":
                a = _run(lm, qgc_inputs(ex, fixed, model, settings.batch_size), ex, vocab, settings)["acc"]
                acc[ABLATION_VARIANTS[4]].append(a)
                log.info("ablation seed %d %-36s acc %.3f", seed, ABLATION_VARIANTS[4], a)
    rows = [AblationRow(v, acc[v], float(statistics.median(acc[v]))) for v in ABLATION_VARIANTS]
    return AblationTable(rows, list(seeds))
