"""``qgc`` command line: data generation, training, compression, evaluation, studies.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .compressor import CompressorConfig, CompressorModel
from .evaluation import studies
from .evaluation.harness import predict, qgc_inputs, score_predictions
from .evaluation.metrics import compression_ratio, corpus_compression_ratio, throughput
from .strategy import (
    DEFAULT_CAP,
    DEFAULT_EPSILON,
    DEFAULT_MULTIPLIER,
    assign_plan,
    compress_planned,
    compressed_length,
    fixed_plan,
    make_scorer,
    rank_documents,
)
from .target_lm import LMConfig, PretrainConfig, TargetLM, TrainingDivergenceError, pretrain
from .textdata import CorpusConfig, Vocabulary, generate_corpus, load_jsonl, save_jsonl, split_corpus, synthetic_inventory
from .training import TrainConfig, train

log = logging.getLogger("qgc")

VARIANTS = {
    "full": "full",
    "no-encoder": "w/o query-guided context encoder",
    "no-pooling": "w/o query-guided pooling layer",
    "no-reviewing": "w/o query-document reviewing layer",
}


class UsageError(Exception):
    pass


class MissingArtifactError(Exception):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path}; produce it with `qgc {producer}`")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    artifact_hashes: dict[str, str] = field(default_factory=dict)
    duration_seconds: float = 0.0
    exit_code: int = 0

    def write(self, runs_dir: Path) -> Path:
        runs_dir.mkdir(parents=True, exist_ok=True)
        i = 0
        while (path := runs_dir / f"{i:05d}-{self.command}.json").exists():
            i += 1
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path: str | Path, producer: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(p, producer)
    return p


def _load_data(data_dir: str, split: str) -> tuple[Vocabulary, list]:
    d = Path(data_dir)
    vocab = Vocabulary.load(_require(d / "vocab.txt", "gen-data"))
    return vocab, load_jsonl(_require(d / f"{split}.jsonl", "gen-data"), vocab)


def _load_lm(path: str) -> TargetLM:
    return TargetLM.load(_require(path, "train-lm"))


def _load_compressor(path: str) -> CompressorModel:
    return CompressorModel.load(_require(path, "train-compressor"))


def _positive(name: str, value, minimum=1) -> None:
    if value is not None and value < minimum:
        raise UsageError(f"--{name} must be >= {minimum}, got {value}")


def _plans(args, examples, lm: TargetLM | None, vocab: Vocabulary):
    """Fixed-n plans with --ngram, otherwise the dynamic strategy."""
    if args.ngram is not None:
        _positive("ngram", args.ngram)
        return [fixed_plan(e, args.ngram) for e in examples]
    ignore = [vocab.id(w) for w in ("what", "is", "the", "of", "?") if w in vocab]
    scorer = make_scorer(args.scorer, lm, examples[0].instruction_ids if examples else (), ignore=ignore)
    return [assign_plan(rank_documents(e, scorer), args.epsilon, args.cap, args.rank_multiplier) for e in examples]


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args, m: RunManifest) -> None:
    for name in ("examples", "docs", "doc_len", "vocab"):
        _positive(name.replace("_", "-"), getattr(args, name))
    cfg = CorpusConfig(n_examples=args.examples, n_docs_per_example=args.docs, doc_len=args.doc_len,
                       vocab_size=args.vocab, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = synthetic_inventory(cfg).vocabulary
    splits = split_corpus(generate_corpus(cfg, vocab), (0.8, 0.1, 0.1))
    vocab.save(out / "vocab.txt")
    m.outputs["vocab"] = str(out / "vocab.txt")
    for name, part in zip(("train", "dev", "test"), splits):
        save_jsonl(part, out / f"{name}.jsonl", vocab)
        m.outputs[name] = str(out / f"{name}.jsonl")
    log.info("wrote %s", ", ".join(f"{k}={len(p)}" for k, p in zip(("train", "dev", "test"), splits)))


def cmd_train_lm(args, m: RunManifest) -> None:
    vocab, tr = _load_data(args.data, "train")
    _, dev = _load_data(args.data, "dev")
    m.inputs["data"] = args.data
    cfg = LMConfig(vocab_size=len(vocab), d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
                   context_limit=args.context_limit, seed=args.seed)
    pcfg = PretrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
                          eval_examples=args.eval_examples, target_accuracy=args.min_oracle_acc)
    lm = pretrain(tr, dev, cfg, pcfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    lm.save(args.out, vocab_path=str(Path(args.data) / "vocab.txt"))
    m.outputs["lm"] = args.out


def cmd_train_compressor(args, m: RunManifest) -> None:
    vocab, tr = _load_data(args.data, "train")
    _, dev = _load_data(args.data, "dev")
    lm = _load_lm(args.lm)
    m.inputs.update(data=args.data, lm=args.lm)
    model = new_compressor(lm, len(vocab), args.variant, args.seed, args.d_c)
    tcfg = _train_config(args)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report = train(tr, model, lm, tcfg, heldout=dev, checkpoint_path=args.out)
    report_path = Path(args.out).with_suffix(".report.json")
    report_path.write_text(json.dumps(report.to_dict(timing=False), indent=2, sort_keys=True))
    timing_path = Path(args.out).with_suffix(".timing.json")  # wall clock, not reproducible
    timing_path.write_text(json.dumps([e.seconds for e in report.epochs]))
    m.outputs.update(compressor=args.out, report=str(report_path), timing=str(timing_path))


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       kl_weight=args.kl_weight, n_gram_candidates=tuple(args.ngram_candidates),
                       eval_examples=args.eval_examples, max_new_tokens=args.max_new_tokens,
                       max_train_examples=args.max_train_examples)


def new_compressor(lm: TargetLM, vocab_size: int, variant: str, seed: int, d_c: int | None = None) -> CompressorModel:
    base = CompressorConfig(vocab_size=vocab_size, d_c=d_c or lm.d_model, d_lm=lm.d_model,
                            n_heads=lm.config.n_heads, max_len=lm.config.context_limit)
    model = CompressorModel(studies.variant_config(base, VARIANTS[variant], seed))
    model.init_from_lm(lm)
    return model


def cmd_compress(args, m: RunManifest) -> None:
    comp = _load_compressor(args.compressor)
    m.inputs["compressor"] = args.compressor
    if args.query is not None or args.document is not None:
        if args.query is None or args.document is None or args.vocab_file is None:
            raise UsageError("--query and --document need each other and --vocab-file")
        vocab = Vocabulary.load(_require(args.vocab_file, "gen-data"))
        q, d = vocab.encode(args.query), vocab.encode(args.document)
        _positive("ngram", args.ngram)
        n = comp.config.n_default if args.ngram is None else args.ngram
        with nx.no_grad():
            cd = comp.compress_document(q, d, n)
        report = {"n": n, "source_tokens": len(d), "embeddings": cd.n_groups}
        tensors = {"document": cd.embeddings.data}
    else:
        vocab, ex = _load_data(args.data, args.split)
        ex = ex[: args.limit] if args.limit else ex
        lm = _load_lm(args.lm) if args.scorer == "lm-nll" and args.ngram is None else None
        plans = _plans(args, ex, lm, vocab)
        tensors, docs = {}, []
        with nx.no_grad():
            for i in range(0, len(ex), 32):
                segs = compress_planned(ex[i : i + 32], plans[i : i + 32], comp)
                for e, p, s in zip(ex[i : i + 32], plans[i : i + 32], segs):
                    for entry in p.entries:
                        rec = {"doc_id": entry.doc_id, "rank": entry.rank, "score": round(entry.score, 12),
                               "n": entry.n_gram_size, "embeddings": 0}
                        if not entry.dropped:
                            tensors[entry.doc_id] = s[entry.doc_id].vectors.data
                            rec["embeddings"] = len(s[entry.doc_id])
                        docs.append(rec)
        units = [compressed_length(e, p) for e, p in zip(ex, plans)]
        cr = corpus_compression_ratio(ex, units)
        report = {"examples": len(ex), "documents": docs, "compression_ratio": _num(cr)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nx.save(out.with_suffix(".ckpt"), tensors)
    out.with_suffix(".json").write_text(json.dumps(report, indent=2, sort_keys=True))
    m.outputs.update(embeddings=str(out.with_suffix(".ckpt")), report=str(out.with_suffix(".json")))
    print(json.dumps({k: v for k, v in report.items() if k != "documents"}, sort_keys=True))


def _num(x: float):
    return "inf" if math.isinf(x) else x


def cmd_eval(args, m: RunManifest) -> None:
    vocab, ex = _load_data(args.data, args.split)
    ex = ex[: args.limit] if args.limit else ex
    lm = _load_lm(args.lm)
    comp = _load_compressor(args.compressor)
    m.inputs.update(data=args.data, lm=args.lm, compressor=args.compressor)
    plans = _plans(args, ex, lm, vocab)
    preds = predict(lm, qgc_inputs(ex, plans, comp), args.max_new_tokens)
    scores = score_predictions(preds, ex, vocab)
    units = [compressed_length(e, p) for e, p in zip(ex, plans)]
    result = {"n_examples": len(ex), **scores, "compression_ratio": _num(corpus_compression_ratio(ex, units)),
              "mean_example_cr": _num(float(np.mean([compression_ratio(e, p) for e, p in zip(ex, plans)])))}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    m.outputs["eval"] = str(out / "eval.json")
    if args.throughput:
        # timing is not deterministic; kept out of the primary artifact
        plan_of = {id(e): p for e, p in zip(ex, plans)}

        def compress(e):
            with nx.no_grad():
                return qgc_inputs([e], [plan_of[id(e)]], comp)[0]

        tp = throughput(ex[: args.throughput], compress, lambda inp: lm.generate_greedy(inp, args.max_new_tokens))
        (out / "throughput.json").write_text(json.dumps(tp.to_dict(), indent=2, sort_keys=True))
        m.outputs["throughput"] = str(out / "throughput.json")
    print(json.dumps(result, sort_keys=True))


def cmd_study(args, m: RunManifest) -> None:
    vocab, ex = _load_data(args.data, args.split)
    ex = ex[: args.limit] if args.limit else ex
    lm = _load_lm(args.lm)
    comp = _load_compressor(args.compressor)
    m.inputs.update(data=args.data, lm=args.lm, compressor=args.compressor)
    s = studies.StudySettings(max_new_tokens=args.max_new_tokens)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    studies.run_key_info_study(ex, comp, lm, vocab, s).write(out / "key_info")
    ignore = [vocab.id(w) for w in ("what", "is", "the", "of", "?") if w in vocab]
    scorer = make_scorer(args.scorer, lm, ex[0].instruction_ids, ignore=ignore)
    studies.run_comparison(ex, comp, lm, vocab, scorer, args.epsilon, args.cap, args.rank_multiplier, s) \
        .write(out / "comparison")
    for stem in ("key_info", "comparison"):
        for ext in (".csv", ".json"):
            m.outputs[stem + ext] = str(out / (stem + ext))
    print((out / "key_info.csv").read_text(), end="")


def cmd_ablate(args, m: RunManifest) -> None:
    vocab, tr = _load_data(args.data, "train")
    _, dev = _load_data(args.data, "dev")
    _, held = _load_data(args.data, args.split)
    held = held[: args.limit] if args.limit else held
    lm = _load_lm(args.lm)
    m.inputs.update(data=args.data, lm=args.lm)
    tcfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = {v: k for k, v in VARIANTS.items()}

    def train_fn(cfg: CompressorConfig) -> CompressorModel:
        ckpt = out / f"{names[cfg.variant]}-seed{cfg.seed}.ckpt"
        if ckpt.exists() and args.reuse:
            return CompressorModel.load(ckpt)
        model = CompressorModel(cfg)
        model.init_from_lm(lm)
        train(tr, model, lm, TrainConfig(**{**asdict(tcfg), "seed": cfg.seed}), heldout=dev, checkpoint_path=ckpt)
        return model

    base = CompressorConfig(vocab_size=len(vocab), d_c=args.d_c or lm.d_model, d_lm=lm.d_model,
                            n_heads=lm.config.n_heads, max_len=lm.config.context_limit)
    ignore = [vocab.id(w) for w in ("what", "is", "the", "of", "?") if w in vocab]
    scorer = make_scorer(args.scorer, lm, held[0].instruction_ids, ignore=ignore)
    table = studies.run_ablations(held, lm, vocab, base, train_fn, args.seeds, scorer, args.epsilon,
                                  args.ngram or 4, settings=studies.StudySettings(max_new_tokens=args.max_new_tokens))
    (out / "ablations.csv").write_text(table.to_csv())
    (out / "ablations.json").write_text(table.to_json())
    m.outputs.update(csv=str(out / "ablations.csv"), json=str(out / "ablations.json"))
    print(table.to_csv(), end="")


# -- parser ----------------------------------------------------------------------

def _strategy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ngram", type=int, default=None, help="fixed n-gram size (default: dynamic strategy)")
    p.add_argument("--scorer", choices=("overlap", "file", "lm-nll"), default="overlap")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--rank-multiplier", type=int, default=DEFAULT_MULTIPLIER)
    p.add_argument("--max-new-tokens", type=int, default=4)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--kl-weight", type=float, default=1.0)
    p.add_argument("--ngram-candidates", type=int, nargs="+", default=[4, 6, 8, 10])
    p.add_argument("--eval-examples", type=int, default=200)
    p.add_argument("--max-train-examples", type=int, default=None)
    p.add_argument("--d-c", type=int, default=None, help="compressor width (default: LM width)")


COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "train-lm": cmd_train_lm,
    "train-compressor": cmd_train_compressor,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "study": cmd_study,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag values; explicit flags win")
    parser.add_argument("--runs-dir", default="runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--examples", type=int, default=1000)
    p.add_argument("--docs", type=int, default=5)
    p.add_argument("--doc-len", type=int, default=24)
    p.add_argument("--vocab", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")

    p = sub.add_parser("train-lm", help="pretrain and freeze the target LM")
    p.add_argument("--data", default="data")
    p.add_argument("--out", default="models/lm.ckpt")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--context-limit", type=int, default=512)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-examples", type=int, default=300)
    p.add_argument("--min-oracle-acc", type=float, default=0.95,
                   help="fail unless held-out Oracle accuracy reaches this")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-compressor", help="train the compressor against the frozen LM")
    p.add_argument("--data", default="data")
    p.add_argument("--lm", default="models/lm.ckpt")
    p.add_argument("--out", default="models/compressor.ckpt")
    p.add_argument("--variant", choices=tuple(VARIANTS), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=4)
    _train_flags(p)

    p = sub.add_parser("compress", help="compress documents to soft embeddings")
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--lm", default="models/lm.ckpt")
    p.add_argument("--compressor", default="models/compressor.ckpt")
    p.add_argument("--out", default="out/compressed")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--query", default=None, help="compress one document given as text")
    p.add_argument("--document", default=None)
    p.add_argument("--vocab-file", default=None)
    _strategy_flags(p)

    for name, helptext in (("eval", "Acc/EM/F1/CR on a split"), ("study", "key-information and CR studies")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", default="data")
        p.add_argument("--split", default="test")
        p.add_argument("--lm", default="models/lm.ckpt")
        p.add_argument("--compressor", default="models/compressor.ckpt")
        p.add_argument("--out", default=f"results/{name}")
        p.add_argument("--limit", type=int, default=None)
        _strategy_flags(p)
        if name == "eval":
            p.add_argument("--throughput", type=int, default=0, metavar="N",
                           help="also time compression and generation on N examples")

    p = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--lm", default="models/lm.ckpt")
    p.add_argument("--out", default="results/ablate")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reuse", action="store_true", help="load variant checkpoints already in --out")
    _strategy_flags(p)
    _train_flags(p)
    return parser


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        unknown = sorted(set(overrides) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)  # flags given on the command line still win
    return args


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    config = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "runs_dir")}
    m = RunManifest(args.command, config, getattr(args, "seed", None))
    t0 = time.perf_counter()
    code = 0
    try:
        COMMANDS[args.command](args, m)
    except UsageError as exc:
        print(f"qgc {args.command}: usage error: {exc}", file=sys.stderr)
        code = 2
    except (MissingArtifactError, TrainingDivergenceError, ValueError, RuntimeError, OSError) as exc:
        print(f"qgc {args.command}: error: {exc}", file=sys.stderr)
        code = 1
    m.exit_code = code
    m.duration_seconds = time.perf_counter() - t0
    for name, path in m.outputs.items():
        if Path(path).is_file():
            m.artifact_hashes[name] = file_hash(Path(path))
    m.write(Path(args.runs_dir))
    return code


if __name__ == "__main__":
    sys.exit(main())
