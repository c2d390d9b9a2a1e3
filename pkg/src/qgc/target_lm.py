"""Frozen decoder-only toy language model.

The model defines the embedding space compressed documents are aligned into.
Inputs are :class:`MixedInput` sequences of token segments (embedded through the
tied embedding table) and soft segments (precomputed embedding vectors).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .textdata import Document, QueryExample

log = logging.getLogger(__name__)


class ContextOverflowError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, msg: str, best_accuracy: float):
        super().__init__(msg)
        self.best_accuracy = best_accuracy


@dataclass(frozen=True)
class TokenSegment:
    ids: tuple[int, ...]

    def __init__(self, ids):
        object.__setattr__(self, "ids", tuple(int(i) for i in ids))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class SoftSegment:
    """Embedding vectors fed directly to the LM: ``source`` [R, d], or selected ``rows`` of it."""

    source: Tensor
    rows: np.ndarray | None = None

    def __len__(self) -> int:
        return self.source.shape[0] if self.rows is None else len(self.rows)

    @property
    def vectors(self) -> Tensor:
        return self.source if self.rows is None else nx.take_rows(self.source, self.rows)


@dataclass
class MixedInput:
    segments: list = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments)

    @classmethod
    def of_tokens(cls, *id_lists) -> "MixedInput":
        return cls([TokenSegment(ids) for ids in id_lists if len(ids)])

    def kinds(self) -> list[str]:
        return ["soft" if isinstance(s, SoftSegment) else "token" for s in self.segments]


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 0  # 0 -> 4 * d_model
    context_limit: int = 512
    seed: int = 0

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model


@dataclass
class PackedBatch:
    """Right-padded batch. Soft rows are flat indices ``b * L + t``."""

    ids: np.ndarray  # [B, L]
    lengths: np.ndarray  # [B]
    soft_rows: np.ndarray  # [S]
    soft_values: Tensor | None  # [S, d]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape


class TargetLM(nx.Module):
    def __init__(self, config: LMConfig):
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self._config = config
        self._frozen = False
        self.tok_emb = Tensor(rng.normal(0, 0.02, (config.vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0, 0.02, (config.context_limit, d)), requires_grad=True)
        self.layers = [nx.TransformerLayer(d, config.n_heads, config.ff_dim, rng, config.n_layers)
                       for _ in range(config.n_layers)]
        self.ln_f = nx.LayerNorm(d)

    @property
    def config(self) -> LMConfig:
        return self._config

    @property
    def d_model(self) -> int:
        return self._config.d_model

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self.set_requires_grad(False)
        self.zero_grad()  # stale gradients from pretraining would trip the frozen-LM audit
        self._frozen = True

    def parameter_hash(self) -> str:
        return nx.tensor_hash(self.state_dict())

    # -- batching ------------------------------------------------------------
    def pack(self, inputs: Sequence[MixedInput], suffixes: Sequence[Sequence[int]] | None = None) -> PackedBatch:
        suffixes = suffixes or [()] * len(inputs)
        lengths = np.array([len(x) + len(s) for x, s in zip(inputs, suffixes)], dtype=np.int64)
        limit = self._config.context_limit
        if lengths.size and lengths.max() > limit:
            raise ContextOverflowError(
                f"input lengths {sorted(lengths.tolist())[-3:]} exceed context limit {limit}")
        L = int(lengths.max()) if lengths.size else 0
        ids = np.zeros((len(inputs), L), dtype=np.int64)
        # soft rows grouped per source tensor so each source costs one gather
        groups: dict[int, tuple[Tensor, list, list]] = {}
        d = self.d_model
        for b, (inp, suf) in enumerate(zip(inputs, suffixes)):
            t = 0
            for seg in inp.segments:
                n = len(seg)
                if isinstance(seg, SoftSegment):
                    src = seg.source
                    if src.ndim != 2 or src.shape[1] != d:
                        raise nx.DimensionError(f"soft segment shape {src.shape}, expected [n, {d}]")
                    entry = groups.setdefault(id(src), (src, [], []))
                    entry[1].append(b * L + t + np.arange(n))
                    entry[2].append(np.arange(src.shape[0]) if seg.rows is None else np.asarray(seg.rows))
                else:
                    ids[b, t : t + n] = seg.ids
                t += n
            ids[b, t : t + len(suf)] = suf
        dest, vals = [], []
        for src, dst, rows in groups.values():
            dest.append(np.concatenate(dst))
            rows = np.concatenate(rows)
            whole = rows.size == src.shape[0] and np.array_equal(rows, np.arange(src.shape[0]))
            vals.append(src if whole else nx.take_rows(src, rows))
        if not vals:
            return PackedBatch(ids, lengths, np.zeros(0, dtype=np.int64), None)
        return PackedBatch(ids, lengths, np.concatenate(dest), vals[0] if len(vals) == 1 else nx.concat(vals, 0))

    # -- forward ------------------------------------------------------------
    def hidden(self, batch: PackedBatch) -> Tensor:
        B, L = batch.shape
        x = nx.embedding(self.tok_emb, batch.ids)
        if batch.soft_values is not None and batch.soft_rows.size:
            keep = np.ones((B * L, 1))
            keep[batch.soft_rows] = 0.0
            soft = nx.scatter_rows(batch.soft_values, batch.soft_rows, B * L)
            x = nx.reshape(nx.reshape(x, (B * L, self.d_model)) * Tensor(keep) + soft, (B, L, self.d_model))
        x = x + self.pos_emb[:L]
        mask = nx.key_padding_mask(batch.lengths, L, causal=True)
        for layer in self.layers:
            x = layer(x, mask)
        return self.ln_f(x)

    def logits_at(self, batch: PackedBatch, flat_positions: np.ndarray) -> Tensor:
        """Next-token logits [M, V] at flat positions ``b * L + t``."""
        h = self.hidden(batch)
        B, L = batch.shape
        h = nx.take_rows(nx.reshape(h, (B * L, self.d_model)), flat_positions)
        return nx.matmul(h, nx.transpose(self.tok_emb))

    # -- scoring ------------------------------------------------------------
    def answer_log_dists(self, inputs: Sequence[MixedInput], answers: Sequence[Sequence[int]]):
        """Teacher-forced log-distributions over the vocabulary at each answer position.

        Returns ``(log_dists [M, V], targets [M], owner [M])`` where ``owner`` maps
        each row to its input index.
        """
        if any(len(a) == 0 for a in answers):
            raise ValueError("answers must be non-empty")
        batch = self.pack(inputs, [list(a)[:-1] for a in answers])
        L = batch.shape[1]
        rows, targets, owner = [], [], []
        for b, (inp, ans) in enumerate(zip(inputs, answers)):
            start = len(inp) - 1
            for t, tok in enumerate(ans):
                rows.append(b * L + start + t)
                targets.append(int(tok))
                owner.append(b)
        if min(len(x) for x in inputs) < 1:
            raise ValueError("input must contain at least one position")
        logits = self.logits_at(batch, np.array(rows))
        return nx.log_softmax(logits, axis=-1), np.array(targets), np.array(owner)

    def answer_logprob_batch(self, inputs: Sequence[MixedInput], answers: Sequence[Sequence[int]]):
        """Per-input ``log p(answer | input)`` as a tensor [B] plus the log-dists."""
        logd, targets, owner = self.answer_log_dists(inputs, answers)
        picked = logd[np.arange(len(targets)), targets]
        onehot = np.zeros((len(inputs), len(targets)))
        onehot[owner, np.arange(len(targets))] = 1.0
        return nx.matmul(Tensor(onehot), nx.reshape(picked, (-1, 1))).reshape(-1), logd

    def answer_logprobs(self, inp: MixedInput, answer: Sequence[int]) -> dict:
        """``{"log_prob": Tensor scalar, "per_position_dists": [T, V] array}``."""
        lp, logd = self.answer_logprob_batch([inp], [answer])
        return {"log_prob": lp.reshape(()), "per_position_dists": np.exp(logd.data)}

    def kl_teacher_student(self, full_input: MixedInput, compressed_input: MixedInput, answer: Sequence[int]) -> Tensor:
        """Sum over answer positions of KL(p(.|full) || p(.|compressed)); teacher detached."""
        with nx.no_grad():
            teacher, _, _ = self.answer_log_dists([full_input], [answer])
        student, _, _ = self.answer_log_dists([compressed_input], [answer])
        return kl_divergence(teacher.data, student)

    # -- decoding -----------------------------------------------------------
    def generate_greedy_batch(self, inputs: Sequence[MixedInput], max_new_tokens: int, eos_id: int = 2) -> list[list[int]]:
        outs: list[list[int]] = [[] for _ in inputs]
        if max_new_tokens <= 0:
            return outs
        for x in inputs:
            if len(x) + max_new_tokens - 1 > self._config.context_limit:
                raise ContextOverflowError(f"input of {len(x)} + {max_new_tokens} new tokens exceeds context limit")
        active = list(range(len(inputs)))
        with nx.no_grad():
            for _ in range(max_new_tokens):
                sub = [inputs[i] for i in active]
                batch = self.pack(sub, [outs[i] for i in active])
                L = batch.shape[1]
                last = np.array([j * L + batch.lengths[j] - 1 for j in range(len(sub))])
                logits = self.logits_at(batch, last).data
                nxt = np.argmax(logits, axis=-1)  # first maximum -> lowest id on ties
                still = []
                for j, i in enumerate(active):
                    tok = int(nxt[j])
                    if tok == eos_id:
                        continue
                    outs[i].append(tok)
                    still.append(i)
                active = still
                if not active:
                    break
        return outs

    def generate_greedy(self, inp: MixedInput, max_new_tokens: int, eos_id: int = 2) -> list[int]:
        return self.generate_greedy_batch([inp], max_new_tokens, eos_id)[0]

    # -- persistence --------------------------------------------------------
    def save(self, path: str | Path, vocab_path: str | None = None) -> str:
        path = Path(path)
        digest = nx.save(path, self.state_dict())
        meta = {
            "d_lm": self._config.d_model,
            "layers": self._config.n_layers,
            "heads": self._config.n_heads,
            "context_limit": self._config.context_limit,
            "vocab_path": vocab_path,
            "frozen": self._frozen,
            "vocab_size": self._config.vocab_size,
            "d_ff": self._config.ff_dim,
            "seed": self._config.seed,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return digest

    @classmethod
    def load(cls, path: str | Path) -> "TargetLM":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        cfg = LMConfig(vocab_size=meta["vocab_size"], d_model=meta["d_lm"], n_layers=meta["layers"],
                       n_heads=meta["heads"], d_ff=meta["d_ff"], context_limit=meta["context_limit"],
                       seed=meta.get("seed", 0))
        lm = cls(cfg)
        lm.load_state_dict(nx.load(path))
        if meta.get("frozen"):
            lm.freeze()
        return lm


def kl_divergence(teacher_logp: np.ndarray, student_logp: Tensor) -> Tensor:
    """sum_rows sum_v p(v) (log p(v) - log q(v)) with p fixed."""
    p = np.exp(teacher_logp)
    const = float((p * teacher_logp).sum())
    return nx.sum_(student_logp * Tensor(-p)) + const


# -- inputs for the uncompressed settings -----------------------------------------
def token_input(example: QueryExample, documents: Sequence | None = None) -> MixedInput:
    """instruction || documents (as raw tokens) || query."""
    docs = example.documents if documents is None else documents
    ids = [list(example.instruction_ids)] + [list(d.token_ids) for d in docs] + [list(example.query_ids)]
    return MixedInput([TokenSegment(seq) for seq in ids if seq])


def oracle_input(example: QueryExample) -> MixedInput:
    return token_input(example, example.gold_documents)


def closed_book_input(example: QueryExample) -> MixedInput:
    return token_input(example, [])


def contains_answer(pred: Sequence[int], answers: Sequence[Sequence[int]]) -> bool:
    pred = list(pred)
    for a in answers:
        a = list(a)
        if any(pred[i : i + len(a)] == a for i in range(len(pred) - len(a) + 1)):
            return True
    return False


# -- pretraining --------------------------------------------------------------
@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    closed_book_rate: float = 0.05
    oracle_rate: float = 0.2
    # context prefix followed by the bare answer tokens, so the LM learns to use
    # an answer that is handed to it
    answer_hint_rate: float = 0.3
    # gold plus documents from other examples that share a query keyword (e.g. the
    # queried attribute), so telling documents apart by entity is actually trained
    hard_negative_rate: float = 0.3
    target_accuracy: float = 0.95
    # early stop once both Oracle and all-documents accuracy reach these
    stop_accuracy: float = 0.985
    stop_full_accuracy: float = 0.95
    eval_examples: int = 300
    max_new_tokens: int = 4
    seed: int = 0


class HardNegatives:
    """Documents of other examples that share a query keyword with an example's gold document.

    Keywords are query tokens present in the gold document whose document
    frequency is below ``max_df`` (template words such as "is" do not count).
    Sampling rejects documents of the same example, documents containing an answer
    token, and documents containing every keyword (those would contradict the gold fact).
    """

    def __init__(self, examples: Sequence[QueryExample], max_df: float = 0.5):
        self.examples = examples
        docs = [(i, d) for i, ex in enumerate(examples) for d in ex.documents]
        df: dict[int, int] = {}
        for _, d in docs:
            for t in set(d.token_ids):
                df[t] = df.get(t, 0) + 1
        self.by_token: dict[int, list[tuple[int, Document]]] = {}
        for i, d in docs:
            for t in set(d.token_ids):
                if df[t] < max_df * len(docs):
                    self.by_token.setdefault(t, []).append((i, d))
        self.keys = []
        for ex in examples:
            gold = {t for g in ex.gold_documents for t in g.token_ids}
            self.keys.append([t for t in dict.fromkeys(ex.query_ids) if t in gold and t in self.by_token])

    def sample(self, i: int, k: int, rng: np.random.Generator, tries: int = 50) -> list[Document]:
        keys = self.keys[i]
        if not keys:
            return []
        answer = {t for a in self.examples[i].answers for t in a}
        all_keys = set(keys)
        out: dict[str, Document] = {}
        for _ in range(tries):
            if len(out) == k:
                break
            cands = self.by_token[keys[int(rng.integers(len(keys)))]]
            j, d = cands[int(rng.integers(len(cands)))]
            toks = set(d.token_ids)
            # a document holding every keyword would state a conflicting fact
            if j != i and d.id not in out and not answer & toks and not all_keys <= toks:
                out[d.id] = d
        return list(out.values())


def _pretrain_sequence(ex: QueryExample, rng: np.random.Generator, cfg: PretrainConfig, eos_id: int,
                       hard: tuple[HardNegatives, int] | None = None):
    """Token sequence and the positions whose next token is scored (query + answer + EOS)."""
    u = rng.random()
    hint = False
    c_oracle = cfg.closed_book_rate + cfg.oracle_rate
    c_hint = c_oracle + cfg.answer_hint_rate
    if u < cfg.closed_book_rate:
        docs = []
    elif u < c_oracle:
        docs = ex.gold_documents
    elif u < c_hint:
        docs, hint = ex.documents, True
    elif u < c_hint + cfg.hard_negative_rate and hard is not None:
        docs = hard[0].sample(hard[1], int(rng.integers(1, max(len(ex.documents), 2))), rng)
        docs.insert(int(rng.integers(len(docs) + 1)), ex.gold_documents[0])
    else:
        distract = [d for d in ex.documents if not d.is_gold]
        k = int(rng.integers(0, len(distract) + 1))
        chosen = {distract[int(i)].id for i in rng.permutation(len(distract))[:k]}
        docs = [d for d in ex.documents if d.is_gold or d.id in chosen]
    context = [t for d in docs for t in d.token_ids]
    if hint:
        context = context[: int(rng.integers(0, len(context) + 1))] + list(ex.answers[0])
    seq = list(ex.instruction_ids) + context
    q_start = len(seq)
    seq += list(ex.query_ids) + list(ex.answers[0]) + [eos_id]
    targets = list(range(q_start, len(seq)))  # positions of tokens to predict
    return seq, targets


def _length_buckets(samples: list, batch_size: int, rng: np.random.Generator, pool: int = 16) -> list[list]:
    """Batches of similar length: sort within pools of ``pool`` batches, shuffle batch order."""
    batches = []
    span = batch_size * pool
    for s in range(0, len(samples), span):
        group = sorted(samples[s : s + span], key=lambda x: len(x[0]))
        batches += [group[i : i + batch_size] for i in range(0, len(group), batch_size)]
    return [batches[int(i)] for i in rng.permutation(len(batches))]


def setting_accuracy(lm: TargetLM, examples: Sequence[QueryExample], make_input, max_new_tokens: int = 4,
                     batch_size: int = 64) -> float:
    hits = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        preds = lm.generate_greedy_batch([make_input(e) for e in chunk], max_new_tokens)
        hits += sum(contains_answer(p, e.answers) for p, e in zip(preds, chunk))
    return hits / max(len(examples), 1)


def oracle_accuracy(lm: TargetLM, examples: Sequence[QueryExample], max_new_tokens: int = 4, batch_size: int = 64) -> float:
    return setting_accuracy(lm, examples, oracle_input, max_new_tokens, batch_size)


def lm_step_loss(lm: TargetLM, seqs: list[list[int]], targets: list[list[int]]) -> Tensor:
    lengths = np.array([len(s) for s in seqs])
    L = int(lengths.max())
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    batch = PackedBatch(ids, lengths, np.zeros(0, dtype=np.int64), None)
    rows = np.array([b * L + t - 1 for b, ts in enumerate(targets) for t in ts])
    tgt = ids.reshape(-1)[rows + 1]
    logd = nx.log_softmax(lm.logits_at(batch, rows), axis=-1)
    return -nx.mean(logd[np.arange(len(rows)), tgt])


def pretrain(
    train: Sequence[QueryExample],
    dev: Sequence[QueryExample],
    lm_config: LMConfig,
    config: PretrainConfig = PretrainConfig(),
    eos_id: int = 2,
) -> TargetLM:
    """Train the toy LM on uncompressed inputs, then freeze it.

    Raises :class:`TrainingDivergenceError` when held-out Oracle accuracy stays
    below ``config.target_accuracy`` after ``config.epochs``.
    """
    lm = TargetLM(lm_config)
    rng = np.random.default_rng(config.seed)
    opt = nx.Adam(lm.parameters(), lr=config.learning_rate, betas=(0.9, 0.98), grad_clip=config.grad_clip)
    dev_eval = list(dev[: config.eval_examples])
    best = 0.0
    best_key = None
    best_state = None
    step = 0
    n = len(train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    hard = HardNegatives(train) if config.hard_negative_rate > 0 else None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        samples = [_pretrain_sequence(train[int(i)], rng, config, eos_id, hard and (hard, int(i))) for i in order]
        losses = []
        for chunk in _length_buckets(samples, config.batch_size, rng):
            seqs, tgts = zip(*chunk)
            step += 1
            warm = min(1.0, step / max(config.warmup_steps, 1))
            decay = 0.5 * (1 + math.cos(math.pi * min(step / total, 1.0)))
            opt.lr = config.learning_rate * warm * max(decay, 0.05)
            loss = lm_step_loss(lm, list(seqs), list(tgts))
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
            losses.append(loss.item())
        acc = oracle_accuracy(lm, dev_eval, config.max_new_tokens)
        full = setting_accuracy(lm, dev_eval, token_input, config.max_new_tokens)
        log.info("lm epoch %d loss %.4f dev-oracle-acc %.3f dev-full-acc %.3f",
                 epoch, float(np.mean(losses)), acc, full)
        key = (acc >= config.target_accuracy, min(acc, full), acc)
        if best_key is None or key > best_key:
            best_key, best = key, acc
            best_state = {k: v.copy() for k, v in lm.state_dict().items()}
        if acc >= config.stop_accuracy and full >= config.stop_full_accuracy:
            break
    if best_state is not None:
        lm.load_state_dict(best_state)
    if best < config.target_accuracy:
        raise TrainingDivergenceError(
            f"target LM reached only {best:.3f} Oracle accuracy (< {config.target_accuracy})", best)
    lm.freeze()
    return lm
