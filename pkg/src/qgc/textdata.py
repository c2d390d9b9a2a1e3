"""Word-level tokenizer, retrieval-QA records, JSONL I/O and the synthetic corpus.

Synthetic examples are key-value lookups. Each document talks about one entity
through fact sentences ``<entity> <attribute> <value> .`` mixed with filler
sentences; the query asks ``what is the <attribute> of <entity> ?``. Exactly one
document (the gold one) states the asked fact, and the answer value occurs in no
other document.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)

INSTRUCTION = "answer using the documents :"
TEMPLATE_WORDS = ("what", "is", "the", "of", "?", ".", "answer", "using", "documents", ":")
ATTRIBUTES = ("color", "city", "job", "pet", "sport", "food", "tool", "song", "car", "gem", "tree", "bird")


class SchemaError(ValueError):
    pass


class JsonlError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class Vocabulary:
    """Ordered token list; ids are list positions and the four specials come first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            dupes = [t for t, c in Counter(tokens).items() if c > 1]
            raise ValueError(f"duplicate tokens in vocabulary: {dupes[:5]}")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    sep_id = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index[token]

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[w] for w in text.split()]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIALS):
                if i == self.eos_id:
                    break
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def build_vocab(corpus: Sequence[str]) -> Vocabulary:
    """Frequency-sorted word vocabulary (ties keep first occurrence), specials first."""
    if not corpus:
        raise ValueError("build_vocab needs a non-empty corpus")
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    for line in corpus:
        for w in line.split():
            counts[w] += 1
            first.setdefault(w, len(first))
    order = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], first[w]))
    return Vocabulary(list(SPECIALS) + order)


@dataclass
class Document:
    id: str
    token_ids: list[int]
    is_gold: bool = False
    score: float | None = None

    def __post_init__(self) -> None:
        if len(self.token_ids) < 1:
            raise SchemaError(f"document {self.id!r} is empty")


@dataclass
class QueryExample:
    query_ids: list[int]
    instruction_ids: list[int]
    documents: list[Document]
    answers: list[list[int]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.answers or any(len(a) == 0 for a in self.answers):
            raise SchemaError("example needs at least one non-empty answer")
        if not any(d.is_gold for d in self.documents):
            raise SchemaError("example needs at least one gold document")

    @property
    def gold_documents(self) -> list[Document]:
        return [d for d in self.documents if d.is_gold]

    @property
    def gold_index(self) -> int:
        return next(i for i, d in enumerate(self.documents) if d.is_gold)


# -- synthetic corpus --------------------------------------------------------
@dataclass(frozen=True)
class CorpusConfig:
    n_examples: int = 1000
    n_docs_per_example: int = 5
    doc_len: int = 24
    vocab_size: int = 2048
    seed: int = 0
    n_attributes: int = 8
    values_per_attribute: int = 16
    facts_per_doc: int = 2

    def validate(self) -> None:
        for name in ("n_examples", "n_docs_per_example", "doc_len", "vocab_size",
                     "n_attributes", "values_per_attribute", "facts_per_doc"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.n_attributes > len(ATTRIBUTES):
            raise ValueError(f"at most {len(ATTRIBUTES)} attributes supported")
        if self.facts_per_doc > self.n_attributes:
            raise ValueError("facts_per_doc cannot exceed n_attributes")
        if self.doc_len < FACT_LEN * self.facts_per_doc + 1:
            raise ValueError(f"doc_len {self.doc_len} too short for {self.facts_per_doc} facts")
        if self.values_per_attribute < 2:
            raise ValueError("need at least two values per attribute")


FACT_LEN = 4  # <entity> <attribute> <value> .


@dataclass(frozen=True)
class SyntheticInventory:
    """Word classes of the synthetic language, derived from the config alone."""

    attributes: tuple[str, ...]
    values: dict
    entities: tuple[str, ...]
    fillers: tuple[str, ...]

    @property
    def vocabulary(self) -> Vocabulary:
        words = list(TEMPLATE_WORDS) + list(self.attributes)
        for a in self.attributes:
            words += self.values[a]
        return Vocabulary(list(SPECIALS) + words + list(self.entities) + list(self.fillers))


def synthetic_inventory(config: CorpusConfig) -> SyntheticInventory:
    config.validate()
    attrs = ATTRIBUTES[: config.n_attributes]
    values = {a: [f"{a}{j:02d}" for j in range(config.values_per_attribute)] for a in attrs}
    fixed = len(SPECIALS) + len(TEMPLATE_WORDS) + len(attrs) + len(attrs) * config.values_per_attribute
    free = config.vocab_size - fixed
    n_ent = free // 2
    n_fill = free - n_ent
    if n_ent < config.n_docs_per_example or n_fill < 8:
        raise ValueError(f"vocab_size {config.vocab_size} too small for the synthetic inventory")
    entities = tuple(f"ent{i:04d}" for i in range(n_ent))
    fillers = tuple(f"w{i:04d}" for i in range(n_fill))
    return SyntheticInventory(attrs, values, entities, fillers)


def _fact(entity: str, attr: str, value: str) -> list[str]:
    return [entity, attr, value, "."]


def _filler_sentences(rng: np.random.Generator, fillers: Sequence[str], n_tokens: int) -> list[list[str]]:
    out: list[list[str]] = []
    while n_tokens > 0:
        k = min(n_tokens, int(rng.integers(3, 7)))
        words = [fillers[int(i)] for i in rng.integers(0, len(fillers), size=k - 1)]
        out.append(words + ["."])
        n_tokens -= k
    return out


def _document(rng, inv: SyntheticInventory, facts: list[list[str]], doc_len: int) -> list[str]:
    sentences = facts + _filler_sentences(rng, inv.fillers, doc_len - FACT_LEN * len(facts))
    order = rng.permutation(len(sentences))
    words = [w for i in order for w in sentences[int(i)]]
    assert len(words) == doc_len
    return words


def generate_corpus(config: CorpusConfig, vocab: Vocabulary | None = None) -> list[QueryExample]:
    """Deterministic synthetic key-value QA corpus (see module docstring)."""
    inv = synthetic_inventory(config)
    vocab = vocab or inv.vocabulary
    rng = np.random.default_rng(config.seed)
    attrs = inv.attributes
    examples = []
    for ex_i in range(config.n_examples):
        K = config.n_docs_per_example
        ents = [inv.entities[int(i)] for i in rng.choice(len(inv.entities), size=K, replace=False)]
        gold_attr = attrs[int(rng.integers(len(attrs)))]
        vals = inv.values[gold_attr]
        answer = vals[int(rng.integers(len(vals)))]
        gold_pos = int(rng.integers(K))
        docs = []
        for k in range(K):
            ent = ents[0] if k == gold_pos else ents[1 + k - (k > gold_pos)]
            if k == gold_pos:
                others = [a for a in attrs if a != gold_attr]
                extra = [others[int(i)] for i in rng.choice(len(others), size=config.facts_per_doc - 1, replace=False)]
                facts = [_fact(ent, gold_attr, answer)]
                facts += [_fact(ent, a, inv.values[a][int(rng.integers(len(inv.values[a])))]) for a in extra]
            else:
                chosen = [attrs[int(i)] for i in rng.choice(len(attrs), size=config.facts_per_doc, replace=False)]
                facts = []
                for a in chosen:
                    pool = [v for v in inv.values[a] if v != answer]
                    facts.append(_fact(ent, a, pool[int(rng.integers(len(pool)))]))
            words = _document(rng, inv, facts, config.doc_len)
            docs.append(Document(id=f"ex{ex_i}-d{k}", token_ids=vocab.encode(" ".join(words)), is_gold=k == gold_pos))
        query = f"what is the {gold_attr} of {ents[0]} ?"
        examples.append(
            QueryExample(
                query_ids=vocab.encode(query),
                instruction_ids=vocab.encode(INSTRUCTION),
                documents=docs,
                answers=[vocab.encode(answer)],
                meta={"entity": ents[0], "attribute": gold_attr},
            )
        )
    return examples


def split_corpus(examples: Sequence[QueryExample], fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    n = len(examples)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return list(examples[:a]), list(examples[a:b]), list(examples[b:])


# -- JSONL ---------------------------------------------------------------
def example_to_record(ex: QueryExample, vocab: Vocabulary) -> dict:
    docs = []
    for d in ex.documents:
        rec = {"id": d.id, "text": vocab.decode(d.token_ids, skip_special=False), "is_gold": d.is_gold}
        if d.score is not None:
            rec["score"] = d.score
        docs.append(rec)
    return {
        "query": vocab.decode(ex.query_ids, skip_special=False),
        "instruction": vocab.decode(ex.instruction_ids, skip_special=False),
        "documents": docs,
        "answers": [vocab.decode(a, skip_special=False) for a in ex.answers],
    }


def record_to_example(rec: dict, vocab: Vocabulary) -> QueryExample:
    for key in ("query", "instruction", "documents", "answers"):
        if key not in rec:
            raise SchemaError(f"missing required field {key!r}")
    if not isinstance(rec["documents"], list) or not isinstance(rec["answers"], list):
        raise SchemaError("'documents' and 'answers' must be arrays")
    docs = []
    for i, d in enumerate(rec["documents"]):
        for key in ("id", "text", "is_gold"):
            if key not in d:
                raise SchemaError(f"document {i} missing required field {key!r}")
        score = d.get("score")
        docs.append(Document(id=str(d["id"]), token_ids=vocab.encode(d["text"]), is_gold=bool(d["is_gold"]),
                             score=None if score is None else float(score)))
    return QueryExample(
        query_ids=vocab.encode(rec["query"]),
        instruction_ids=vocab.encode(rec["instruction"]),
        documents=docs,
        answers=[vocab.encode(a) for a in rec["answers"]],
    )


def save_jsonl(examples: Iterable[QueryExample], path: str | Path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex, vocab), sort_keys=True) + "\n")


def load_jsonl(path: str | Path, vocab: Vocabulary) -> list[QueryExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise JsonlError(lineno, "expected a JSON object")
            try:
                out.append(record_to_example(rec, vocab))
            except (SchemaError, KeyError) as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
    return out


def jsonl_texts(path: str | Path) -> list[str]:
    """All text fields of a JSONL dataset, for building a vocabulary."""
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(lineno, f"malformed JSON ({exc.msg})") from None
            texts.append(rec.get("instruction", ""))
            texts.append(rec.get("query", ""))
            texts.extend(d.get("text", "") for d in rec.get("documents", []))
            texts.extend(rec.get("answers", []))
    return texts
