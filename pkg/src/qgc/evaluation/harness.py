"""Batched prediction and scoring for the evaluation settings."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..compressor import CompressorModel, n_groups
from ..strategy import CompressionPlan, assemble_from_segments, compress_planned, fixed_plan
from ..target_lm import MixedInput, TargetLM, TokenSegment, contains_answer
from ..textdata import QueryExample, Vocabulary
from .metrics import accuracy, exact_match, f1


def predict(lm: TargetLM, inputs: Sequence[MixedInput], max_new_tokens: int = 4, batch_size: int = 64) -> list[list[int]]:
    out: list[list[int]] = []
    for i in range(0, len(inputs), batch_size):
        out += lm.generate_greedy_batch(inputs[i : i + batch_size], max_new_tokens)
    return out


def qgc_inputs(examples: Sequence[QueryExample], plans: Sequence[CompressionPlan],
               compressor: CompressorModel, batch_size: int = 32) -> list[MixedInput]:
    """Assembled (instruction, compressed documents, query) inputs, no gradient."""
    out = []
    with nx.no_grad():
        for i in range(0, len(examples), batch_size):
            ex, pl = examples[i : i + batch_size], plans[i : i + batch_size]
            segs = compress_planned(ex, pl, compressor)
            out += [assemble_from_segments(e, p, s) for e, p, s in zip(ex, pl, segs)]
    return out


def compressed_accuracy(examples: Sequence[QueryExample], compressor: CompressorModel, lm: TargetLM,
                        n: int = 4, max_new_tokens: int = 4, batch_size: int = 32) -> float:
    """Token-level answer containment with every document compressed at ``n``."""
    if not examples:
        return float("nan")
    inputs = qgc_inputs(examples, [fixed_plan(e, n) for e in examples], compressor, batch_size)
    preds = predict(lm, inputs, max_new_tokens, batch_size)
    return float(np.mean([contains_answer(p, e.answers) for p, e in zip(preds, examples)]))


def score_predictions(preds: Sequence[Sequence[int]], examples: Sequence[QueryExample], vocab: Vocabulary) -> dict:
    """Mean Acc / EM / F1 over decoded predictions."""
    acc, em, f = [], [], []
    for p, ex in zip(preds, examples):
        text = vocab.decode(p)
        answers = [vocab.decode(a) for a in ex.answers]
        acc.append(accuracy(text, answers))
        em.append(exact_match(text, answers))
        f.append(f1(text, answers))
    return {"acc": float(np.mean(acc)), "em": float(np.mean(em)), "f1": float(np.mean(f))}


def truncated_input(example: QueryExample, budget: int, append_answer: bool = False,
                    documents=None) -> MixedInput:
    """Instruction, the first ``budget`` tokens of the concatenated documents, query.

    With ``append_answer`` the gold answer tokens follow the truncated context.
    """
    docs = example.documents if documents is None else documents
    context = [t for d in docs for t in d.token_ids][: max(budget, 0)]
    if append_answer:
        context = context + list(example.answers[0])
    parts = [TokenSegment(example.instruction_ids)] if example.instruction_ids else []
    if context:
        parts.append(TokenSegment(context))
    parts.append(TokenSegment(example.query_ids))
    return MixedInput(parts)


def matched_budget(example: QueryExample, n: int, documents=None) -> int:
    """Token budget giving truncation the same compressed length as QGC at ``n``."""
    docs = example.documents if documents is None else documents
    return sum(n_groups(len(d.token_ids), n) for d in docs)
