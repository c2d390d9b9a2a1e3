"""Compressor training: L = CE(answer | compressed input) + kl_weight * KL(full || compressed)."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .compressor import CompressorModel
from .evaluation.harness import compressed_accuracy
from .target_lm import MixedInput, SoftSegment, TargetLM, TokenSegment, kl_divergence, token_input
from .textdata import Document, QueryExample

log = logging.getLogger(__name__)


class FrozenContractError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 15
    n_gram_candidates: tuple[int, ...] = (4, 6, 8, 10)
    distractor_range: tuple[int, int] = (1, 4)
    seed: int = 0
    kl_weight: float = 1.0
    eval_n: int = 4
    eval_examples: int = 200
    max_new_tokens: int = 4
    grad_clip: float | None = 1.0
    debug: bool = False  # frozen-hash audit every step instead of every epoch
    max_train_examples: int | None = None

    def validate(self) -> None:
        if not self.n_gram_candidates or min(self.n_gram_candidates) < 1:
            raise ValueError("n_gram_candidates must be non-empty and >= 1")
        lo, hi = self.distractor_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad distractor_range {self.distractor_range}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size, epochs and learning_rate must be positive")

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        raw.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("n_gram_candidates", "distractor_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class TrainingInstance:
    example: QueryExample
    documents: list[Document]
    n: int


@dataclass
class EpochRecord:
    epoch: int
    mean_total: float
    mean_ce: float
    mean_kl: float
    heldout_accuracy: float
    lm_hash_ok: bool
    mlp_hash_ok: bool
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = 0.0
    checkpoint_path: str | None = None
    lm_hash: str = ""
    mlp_hash: str = ""
    frozen_checks_passed: bool = True

    def to_dict(self, timing: bool = True) -> dict:
        """``timing=False`` drops wall-clock fields so the report is reproducible byte for byte."""
        d = asdict(self)
        if not timing:
            for e in d["epochs"]:
                del e["seconds"]
        return d


def build_batch(examples: Sequence[QueryExample], config: TrainConfig, rng: np.random.Generator,
                pool: Sequence[QueryExample] | None = None) -> list[TrainingInstance]:
    """Gold document plus U{lo..hi} distractors (own distractors first, borrowed if short),
    shuffled; one n-gram size per batch."""
    n = int(config.n_gram_candidates[int(rng.integers(len(config.n_gram_candidates)))])
    lo, hi = config.distractor_range
    out = []
    for ex in examples:
        gold = ex.gold_documents[0]
        k = int(rng.integers(lo, hi + 1))
        own = [d for d in ex.documents if not d.is_gold]
        picked = [own[int(i)] for i in rng.permutation(len(own))[:k]]
        if len(picked) < k:
            answer_set = {t for a in ex.answers for t in a}
            pool_docs = [d for other in (pool or ()) if other is not ex for d in other.documents
                         if not answer_set & set(d.token_ids)]
            need = k - len(picked)
            if len(pool_docs) < need:
                raise ValueError(f"not enough distractor documents: need {k}, have {len(picked) + len(pool_docs)}")
            # borrowed documents are distractors here even if gold for their own example
            picked += [replace(pool_docs[int(i)], is_gold=False)
                       for i in rng.choice(len(pool_docs), size=need, replace=False)]
        docs = [gold] + picked
        docs = [docs[int(i)] for i in rng.permutation(len(docs))]
        out.append(TrainingInstance(ex, docs, n))
    return out


@dataclass
class LossParts:
    total: nx.Tensor
    ce: nx.Tensor
    kl: nx.Tensor


def batch_loss(instances: Sequence[TrainingInstance], compressor: CompressorModel, lm: TargetLM,
               kl_weight: float = 1.0) -> LossParts:
    """Mean over instances of ``-log p(y|x~) + kl_weight * KL(p(y|x) || p(y|x~))``.

    Documents of all instances are compressed in one batch; instances may mix
    n-gram sizes, in which case one compression batch is run per size.
    """
    sizes = sorted({inst.n for inst in instances})
    segs: list[list[SoftSegment]] = [[] for _ in instances]
    for n in sizes:
        idx = [(i, d) for i, inst in enumerate(instances) if inst.n == n for d in inst.documents]
        cb = compressor.compress_batch([instances[i].example.query_ids for i, _ in idx],
                                       [d.token_ids for _, d in idx], n)
        flat = cb.flat()
        for j, (i, _) in enumerate(idx):
            segs[i].append(cb.segment(j, flat))
    student, teacher, answers = [], [], []
    for inst, s in zip(instances, segs):
        ex = inst.example
        parts = ([TokenSegment(ex.instruction_ids)] if ex.instruction_ids else []) + s + [TokenSegment(ex.query_ids)]
        student.append(MixedInput(parts))
        teacher.append(token_input(ex, inst.documents))
        answers.append(ex.answers[0])
    B = len(instances)
    with nx.no_grad():
        t_logd, _, _ = lm.answer_log_dists(teacher, answers)
    lp, s_logd = lm.answer_logprob_batch(student, answers)
    ce = -nx.mean(lp)
    kl = kl_divergence(t_logd.data, s_logd) * (1.0 / B)
    total = ce + kl * kl_weight if kl_weight else ce
    return LossParts(total, ce, kl)


def loss(instance: TrainingInstance, compressor: CompressorModel, target_lm: TargetLM,
         kl_weight: float = 1.0) -> dict:
    parts = batch_loss([instance], compressor, target_lm, kl_weight)
    return {"total": parts.total, "ce": parts.ce, "kl": parts.kl}


def train(
    train_examples: Sequence[QueryExample],
    compressor: CompressorModel,
    target_lm: TargetLM,
    config: TrainConfig = TrainConfig(),
    heldout: Sequence[QueryExample] = (),
    checkpoint_path: str | Path | None = None,
) -> TrainReport:
    """Adam over trainable compressor parameters; frozen hashes audited every epoch."""
    config.validate()
    if not target_lm.frozen:
        raise FrozenContractError("target LM must be frozen before compressor training")
    rng = np.random.default_rng(config.seed)
    lm_hash = target_lm.parameter_hash()
    mlp_hash = compressor.mlp_hash()
    report = TrainReport(lm_hash=lm_hash, mlp_hash=mlp_hash)
    params = [p for _, p in compressor.trainable_parameters()]
    opt = nx.Adam(params, lr=config.learning_rate, grad_clip=config.grad_clip)
    data = list(train_examples)
    if config.max_train_examples is not None:
        data = data[: config.max_train_examples]
    heldout = list(heldout)[: config.eval_examples]
    best_state = None

    def audit() -> tuple[bool, bool]:
        return target_lm.parameter_hash() == lm_hash, compressor.mlp_hash() == mlp_hash

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(data))
        tot, ces, kls = [], [], []
        for s in range(0, len(data), config.batch_size):
            chunk = [data[int(i)] for i in order[s : s + config.batch_size]]
            instances = build_batch(chunk, config, rng, pool=data)
            dump = json.dumps([{"docs": [d.id for d in i.documents], "n": i.n} for i in instances])
            try:
                parts = batch_loss(instances, compressor, target_lm, config.kl_weight)
            except FloatingPointError as exc:
                raise NonFiniteLossError(f"non-finite values at epoch {epoch} ({exc}): batch {dump}") from exc
            value = parts.total.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: batch {dump}")
            opt.zero_grad()
            nx.backward(parts.total)
            for p in target_lm.parameters():
                if p.grad is not None:
                    raise FrozenContractError("gradient reached a frozen target-LM parameter")
            opt.step()
            tot.append(value)
            ces.append(parts.ce.item())
            kls.append(parts.kl.item())
            if config.debug:
                lm_ok, mlp_ok = audit()
                if not (lm_ok and mlp_ok):
                    raise FrozenContractError(f"frozen parameters changed at epoch {epoch}")
        lm_ok, mlp_ok = audit()
        acc = compressed_accuracy(heldout, compressor, target_lm, config.eval_n, config.max_new_tokens) if heldout else float("nan")
        rec = EpochRecord(epoch, float(np.mean(tot)), float(np.mean(ces)), float(np.mean(kls)), acc,
                          lm_ok, mlp_ok, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("compressor epoch %d total %.4f ce %.4f kl %.4f heldout@n=%d %.3f (%.0fs)",
                 epoch, rec.mean_total, rec.mean_ce, rec.mean_kl, config.eval_n, acc, rec.seconds)
        if not (lm_ok and mlp_ok):
            report.frozen_checks_passed = False
            raise FrozenContractError(f"frozen parameters changed during epoch {epoch} "
                                      f"(lm ok={lm_ok}, mlp ok={mlp_ok})")
        # without held-out data the last epoch is kept
        if best_state is None or not heldout or acc > report.best_accuracy:
            if heldout:
                report.best_accuracy = acc
            report.best_epoch = epoch
            best_state = {k: v.copy() for k, v in compressor.state_dict().items()}
    if best_state is not None:
        compressor.load_state_dict(best_state)
        compressor._apply_trainability()
    if checkpoint_path is not None:
        compressor.save(checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return report
