"""Acceptance suite: nine criteria, one PASS/FAIL line each (printed in the terminal summary).

Criteria 4-7 need a pretrained target LM and trained compressors at desk scale.
They are built once and cached under ``$QGC_ACCEPTANCE_DIR`` (default
``.acceptance/`` in the repository), keyed by a hash of the profile below and of
the training-relevant sources, so only the first run pays the training cost.
Build times are stored next to the artifacts and reported by criterion 5.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pytest

import qgc
from qgc import numerics as nx
from qgc.cli import main as cli_main
from qgc.compressor import CompressorConfig, CompressorModel, n_groups, pool_ngrams
from qgc.evaluation import compression_ratio, predict, qgc_inputs, score_predictions, throughput
from qgc.evaluation.studies import (
    ABLATION_VARIANTS,
    StudySettings,
    run_ablations,
    run_key_info_study,
    variant_config,
)
from qgc.strategy import OverlapScorer, RerankerScore, assign_plan, fixed_plan
from qgc.target_lm import (
    LMConfig,
    PretrainConfig,
    TargetLM,
    TrainingDivergenceError,
    oracle_input,
    pretrain,
)
from qgc.textdata import TEMPLATE_WORDS, CorpusConfig, Document, QueryExample, generate_corpus, split_corpus, synthetic_inventory
from qgc.training import TrainConfig, TrainingInstance, batch_loss, train

from conftest import ACCEPTANCE, grad_check, make_compressor, make_lm

ROOT = Path(__file__).resolve().parents[1]
CACHE_ROOT = Path(os.environ.get("QGC_ACCEPTANCE_DIR", ROOT / ".acceptance"))

# -- desk-scale profile ------------------------------------------------------------

CORPUS = CorpusConfig(n_examples=25000, n_docs_per_example=5, doc_len=24, vocab_size=2048, seed=1)
LM = LMConfig(vocab_size=2048, d_model=64, n_layers=2, n_heads=4, context_limit=512, seed=0)
PRETRAIN = PretrainConfig(epochs=12, learning_rate=1e-3, eval_examples=200)
D_C = 64
TRAIN = TrainConfig(learning_rate=2e-3, batch_size=16, epochs=6, max_train_examples=10000, eval_examples=200)
SEEDS = (0, 1, 2)
HELDOUT = 500
EPSILON = 0.35

LM_SOURCES = ("numerics/tensor.py", "numerics/nn.py", "numerics/optim.py", "textdata.py", "target_lm.py")
COMPRESSOR_SOURCES = LM_SOURCES + ("compressor.py", "training.py")


def profile_key(profile: dict, sources: tuple[str, ...]) -> str:
    """Hash of a profile and the sources that produce its artifacts."""
    h = hashlib.sha256(json.dumps(profile, sort_keys=True, default=list).encode())
    src = Path(qgc.__file__).parent
    for rel in sources:
        h.update((src / rel).read_bytes())
    return h.hexdigest()[:16]


def report(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[k] = line
    print(line)


# -- cached desk-scale artifacts ----------------------------------------------------

SLUG = {"full": "full", ABLATION_VARIANTS[1]: "no-encoder", ABLATION_VARIANTS[2]: "no-pooling",
        ABLATION_VARIANTS[3]: "no-reviewing"}


@dataclass
class Bundle:
    vocab: object
    train: list
    dev: list
    heldout: list
    lm: TargetLM | None
    lm_error: str = ""
    models: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def _timed(timings: dict, key: str, path: Path, fn):
    t0 = time.perf_counter()
    out = fn()
    timings[key] = time.perf_counter() - t0
    path.write_text(json.dumps(timings, indent=2, sort_keys=True))
    return out


@pytest.fixture(scope="session")
def bundle() -> Bundle:
    lm_profile = {"corpus": asdict(CORPUS), "lm": asdict(LM), "pretrain": asdict(PRETRAIN)}
    cache = CACHE_ROOT / f"lm-{profile_key(lm_profile, LM_SOURCES)}"
    comp_cache = cache / f"compressors-{profile_key({'d_c': D_C, 'train': asdict(TRAIN)}, COMPRESSOR_SOURCES)}"
    comp_cache.mkdir(parents=True, exist_ok=True)
    tpath = comp_cache / "timings.json"
    lm_tpath = cache / "timings.json"
    lm_timings = json.loads(lm_tpath.read_text()) if lm_tpath.exists() else {}
    timings = json.loads(tpath.read_text()) if tpath.exists() else {}
    vocab = synthetic_inventory(CORPUS).vocabulary
    tr, dev, test = split_corpus(generate_corpus(CORPUS, vocab))
    b = Bundle(vocab, tr, dev, test[:HELDOUT], None, timings=timings)

    lm_path = cache / "lm.ckpt"
    if lm_path.exists():
        b.lm = TargetLM.load(lm_path)
    elif (cache / "lm.error").exists():
        b.lm_error = (cache / "lm.error").read_text()
    else:
        try:
            b.lm = _timed(lm_timings, "pretrain_seconds", lm_tpath, lambda: pretrain(tr, dev, LM, PRETRAIN))
            b.lm.save(lm_path)
        except TrainingDivergenceError as exc:
            b.lm_error = str(exc)
            (cache / "lm.error").write_text(b.lm_error)
    timings.update(lm_timings)
    if b.lm is None:
        return b

    base = CompressorConfig(vocab_size=len(vocab), d_c=D_C, d_lm=LM.d_model, n_heads=LM.n_heads,
                            max_len=LM.context_limit)
    for seed in SEEDS:
        for variant in ABLATION_VARIANTS[:4]:
            path = comp_cache / f"{SLUG[variant]}-seed{seed}.ckpt"
            rpath = path.with_suffix(".report.json")
            if path.exists() and rpath.exists():
                model = CompressorModel.load(path)
            else:
                model = CompressorModel(variant_config(base, variant, seed))
                model.init_from_lm(b.lm)
                cfg = TrainConfig(**{**asdict(TRAIN), "seed": seed})
                rep = _timed(timings, f"train_{SLUG[variant]}_seed{seed}_seconds", tpath,
                             lambda: train(tr, model, b.lm, cfg, heldout=dev, checkpoint_path=path))
                rpath.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
            b.models[(variant, seed)] = model
            b.reports[(variant, seed)] = json.loads(rpath.read_text())
    return b


def _acc(lm, inputs, examples, vocab) -> float:
    return score_predictions(predict(lm, inputs, 4), examples, vocab)["acc"]


# -- 1. dynamic-rule exactness --------------------------------------------------------

def test_criterion_1_dynamic_rule_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    tuples = mismatches = 0
    while tuples < 1000:
        m = int(rng.integers(1, 12))
        eps = float(rng.choice([rng.random(), 0.35, 0.0, 1.0]))
        scores = rng.random(m)
        scores[rng.random(m) < 0.1] = eps  # exact-threshold ties
        ranks = rng.permutation(m) + 1
        plan = assign_plan([RerankerScore(f"d{i}", float(s), int(r)) for i, (s, r) in enumerate(zip(scores, ranks))], eps)
        for e, s, r in zip(plan.entries, scores, ranks):
            expected = None if s < eps else min(2 * int(r), 16)
            mismatches += e.n_gram_size != expected
            tuples += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 1.0
    report(1, ok, f"{tuples} tuples, {mismatches} mismatches, {dt:.3f}s (< 1s)")
    assert ok


# -- 2. pooling algebra -----------------------------------------------------------------

def test_criterion_2_pooling_algebra():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst_sum = worst_id = 0.0
    bad_groups = 0
    for _ in range(200):
        nd, nq, d = int(rng.integers(1, 40)), int(rng.integers(1, 8)), int(rng.integers(2, 16))
        hq, hd = nx.Tensor(rng.normal(size=(nq, d))), nx.Tensor(rng.normal(size=(nd, d)))
        for n in (1, 2, 3, 4, 7):
            out = pool_ngrams(hq, hd, n)
            g = out["pooled"].shape[0]
            bad_groups += g != math.ceil(nd / n) or g != n_groups(nd, n)
            w = out["weights"]
            for j in range(g):
                worst_sum = max(worst_sum, abs(w[j * n : (j + 1) * n].sum() - 1.0))
            if n == 1:
                worst_id = max(worst_id, float(np.max(np.abs(out["pooled"].data - hd.data))))
    dt = time.perf_counter() - t0
    ok = worst_sum <= 1e-9 and worst_id <= 1e-12 and bad_groups == 0 and dt < 10
    report(2, ok, f"max |sum w - 1| = {worst_sum:.1e}, n=1 max dev = {worst_id:.1e}, "
                  f"{bad_groups} group-count errors, {dt:.2f}s (< 10s)")
    assert ok


# -- 3. gradient fidelity ---------------------------------------------------------------

def test_criterion_3_gradient_fidelity(tiny_corpus, tiny_vocab):
    t0 = time.perf_counter()
    worst, worst_at = 0.0, ""
    for seed in range(20):
        rng = np.random.default_rng(seed)
        lm = make_lm(len(tiny_vocab), d=8, layers=1, seed=seed)
        comp = make_compressor(len(tiny_vocab), d=8, seed=seed)
        comp.init_from_lm(lm)
        for p in comp.parameters():  # move off the LM copy so no group sits at a special point
            if p.requires_grad:
                p.data += rng.normal(0, 0.05, p.data.shape)
        exs = [tiny_corpus[int(i)] for i in rng.choice(len(tiny_corpus), size=2, replace=False)]
        n = int(rng.integers(1, 5))
        insts = [TrainingInstance(e, [e.documents[int(i)] for i in rng.permutation(len(e.documents))], n) for e in exs]
        assert max(len(d.token_ids) for i in insts for d in i.documents) <= 12
        for name, p in comp.trainable_parameters():
            err = grad_check(lambda: batch_loss(insts, comp, lm).total, [p], rng, samples=3)
            if err > worst:
                worst, worst_at = err, f"{name} (seed {seed})"
    dt = time.perf_counter() - t0
    groups = len(comp.trainable_parameters())
    ok = worst < 1e-4 and dt < 300
    report(3, ok, f"{groups} parameter groups x 20 seeds, worst rel. error {worst:.2e} at {worst_at}, {dt:.0f}s (< 300s)")
    assert ok


# -- 4. frozen contracts ----------------------------------------------------------------

def test_criterion_4_frozen_contracts(bundle):
    if bundle.lm is None:
        report(4, False, f"no target LM: {bundle.lm_error}")
        pytest.fail(bundle.lm_error)
    lm_hash = bundle.lm.parameter_hash()
    problems = []
    for (variant, seed), model in bundle.models.items():
        rep = bundle.reports[(variant, seed)]
        if rep["lm_hash"] != lm_hash:
            problems.append(f"{variant}/{seed}: LM hash changed")
        if model.mlp_hash() != rep["mlp_hash"]:
            problems.append(f"{variant}/{seed}: MLP hash changed")
        if not (rep["frozen_checks_passed"] and all(e["lm_hash_ok"] and e["mlp_hash_ok"] for e in rep["epochs"])):
            problems.append(f"{variant}/{seed}: per-epoch audit failed")
    ok = not problems and len(bundle.models) == 4 * len(SEEDS)
    report(4, ok, f"{len(bundle.models)} training runs; LM and MLP hashes identical before/after"
           if ok else "; ".join(problems) or "missing training runs")
    assert ok


# -- 5. end-to-end learning -------------------------------------------------------------

def test_criterion_5_end_to_end(bundle):
    if bundle.lm is None:
        report(5, False, f"target LM did not reach Oracle target: {bundle.lm_error}")
        pytest.fail(bundle.lm_error)
    ho, lm, vocab = bundle.heldout, bundle.lm, bundle.vocab
    oracle = _acc(lm, [oracle_input(e) for e in ho], ho, vocab)
    full = bundle.models[("full", 0)]
    comp = _acc(lm, qgc_inputs(ho, [fixed_plan(e, 4) for e in ho], full), ho, vocab)
    minutes = (bundle.timings.get("pretrain_seconds", math.nan) + bundle.timings.get("train_full_seed0_seconds", math.nan)) / 60
    ok = (len(bundle.train) >= 5000 and len(vocab) == 2048 and all(len(e.documents) == 5 for e in ho)
          and oracle >= 0.95 and comp >= 0.8 * oracle)
    report(5, ok, f"train={len(bundle.train)} |V|={len(vocab)}; Oracle acc {oracle:.3f} (>= 0.95); "
                  f"compressor n=4 acc {comp:.3f} vs 0.8 x Oracle = {0.8 * oracle:.3f}; "
                  f"LM + compressor training {minutes:.1f} min (target < 60)")
    assert ok


# -- 6. key-information loss --------------------------------------------------------------

def test_criterion_6_key_information(bundle):
    if bundle.lm is None:
        report(6, False, f"no target LM: {bundle.lm_error}")
        pytest.fail(bundle.lm_error)
    sweep = (1, 2, 4, 8)
    t = run_key_info_study(bundle.heldout, bundle.models[("full", 0)], bundle.lm, bundle.vocab,
                           StudySettings(ngram_sizes=sweep, distractor_counts=()))
    q = {n: t.value("qgc", "fixed", n) for n in sweep}
    tr = {n: t.value("truncation", "prefix", n) for n in sweep}
    wa = {n: t.value("base-with-answer", "prefix+answer", n) for n in sweep}
    q_drop, t_drop = q[1] - q[4], tr[1] - tr[4]
    spread = max(wa.values()) - min(wa.values())
    ok = q_drop < 0.5 * t_drop and spread <= 0.05
    fmt = lambda d: " ".join(f"{n}:{v:.3f}" for n, v in d.items())  # noqa: E731
    report(6, ok, f"QGC drop n1->n4 {q_drop:+.3f} vs truncation drop {t_drop:+.3f} (need < half); "
                  f"truncation+answer spread {spread:.3f} (<= 0.05) | qgc {fmt(q)} | trunc {fmt(tr)} | +ans {fmt(wa)}")
    assert ok


# -- 7. ablation ordering ----------------------------------------------------------------

def test_criterion_7_ablation_ordering(bundle):
    if bundle.lm is None:
        report(7, False, f"no target LM: {bundle.lm_error}")
        pytest.fail(bundle.lm_error)
    ignore = [bundle.vocab.id(w) for w in TEMPLATE_WORDS if w in bundle.vocab]
    base = CompressorConfig(vocab_size=len(bundle.vocab), d_c=D_C, d_lm=LM.d_model, n_heads=LM.n_heads,
                            max_len=LM.context_limit)
    table = run_ablations(bundle.heldout, bundle.lm, bundle.vocab, base, seeds=SEEDS,
                          scorer=OverlapScorer(ignore), epsilon=EPSILON, trained=bundle.models)
    med = {r.variant: r.median for r in table.rows}
    full = med["full"]
    drop = {v: full - med[v] for v in ABLATION_VARIANTS[1:]}
    enc, pool, rev = drop[ABLATION_VARIANTS[1]], drop[ABLATION_VARIANTS[2]], drop[ABLATION_VARIANTS[3]]
    ok = all(full >= med[v] for v in ABLATION_VARIANTS[1:]) and enc > rev and pool > rev
    report(7, ok, "3-seed medians " + ", ".join(f"{v}={m:.3f}" for v, m in med.items())
           + f"; drops encoder {enc:+.3f}, pooling {pool:+.3f}, reviewing {rev:+.3f}")
    assert ok


# -- 8. CR / throughput accounting ---------------------------------------------------------

def test_criterion_8_accounting(tiny_corpus, tiny_compressor, tiny_lm):
    def ex(lens):
        return QueryExample([5, 6], [1], [Document(f"d{i}", [7] * n, is_gold=i == 0) for i, n in enumerate(lens)], [[7]])

    e1, e2 = ex([100, 10]), ex([30, 30, 30])
    dyn = assign_plan([RerankerScore("d0", 1.0, 1), RerankerScore("d1", 0.5, 2), RerankerScore("d2", 0.1, 3)])
    cds = {d.id: tiny_compressor.compress_document([5, 6], d.token_ids, 4) for d in e1.documents}
    cases = [
        (compression_ratio(e1, None), 1.0),
        (compression_ratio(e1, fixed_plan(e1, 4)), 110 / 28),  # 25 + 3 slots
        (compression_ratio(e1, fixed_plan(e1, 1)), 1.0),
        (compression_ratio(e1, cds), 110 / 28),
        (compression_ratio(e2, dyn), 90 / 23),  # 15 + 8 slots, third dropped
        (compression_ratio(e2, assign_plan([RerankerScore(f"d{i}", 0.0, i + 1) for i in range(3)])), math.inf),
    ]
    cr_ok = all(a == b for a, b in cases)
    exs = tiny_corpus[:8]
    plan_of = {id(e): fixed_plan(e, 4) for e in exs}

    def compress(e):
        with nx.no_grad():
            return qgc_inputs([e], [plan_of[id(e)]], tiny_compressor)[0]

    tp = throughput(exs, compress, lambda inp: tiny_lm.generate_greedy(inp, 4))
    tp_ok = (tp.compress_seconds > 0 and tp.generate_seconds > 0
             and tp.total_tp <= min(tp.compress_tp, tp.generate_tp))
    ok = cr_ok and tp_ok
    report(8, ok, f"{sum(a == b for a, b in cases)}/{len(cases)} CR fixtures exact; throughput compress "
                  f"{tp.compress_tp:.1f}/s, generate {tp.generate_tp:.1f}/s, total {tp.total_tp:.1f}/s <= stage bound")
    assert ok


# -- 9. CLI determinism -------------------------------------------------------------------

def _cli_round(root: Path) -> dict[str, bytes]:
    data, lm, comp = root / "data", root / "lm.ckpt", root / "comp.ckpt"
    small = ["--epochs", "1", "--batch-size", "8", "--eval-examples", "4", "--ngram-candidates", "2", "4",
             "--lr", "1e-3"]
    runs = [
        ["gen-data", "--examples", "40", "--docs", "3", "--doc-len", "16", "--vocab", "300", "--seed", "3",
         "--out", str(data)],
        ["train-lm", "--data", str(data), "--out", str(lm), "--d-model", "8", "--layers", "1", "--heads", "2",
         "--context-limit", "128", "--epochs", "1", "--eval-examples", "4", "--min-oracle-acc", "0"],
        ["train-compressor", "--data", str(data), "--lm", str(lm), "--out", str(comp), *small],
        ["compress", "--data", str(data), "--lm", str(lm), "--compressor", str(comp), "--out", str(root / "emb")],
        ["eval", "--data", str(data), "--lm", str(lm), "--compressor", str(comp), "--out", str(root / "eval")],
        ["study", "--data", str(data), "--lm", str(lm), "--compressor", str(comp), "--out", str(root / "study")],
        ["ablate", "--data", str(data), "--lm", str(lm), "--out", str(root / "ablate"), "--seeds", "0", *small],
    ]
    for argv in runs:
        code = cli_main(["--runs-dir", str(root / "runs"), *argv])
        assert code == 0, f"{argv[0]} exited {code}"
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and "runs" not in p.parts and not p.name.endswith(".timing.json")}


def test_criterion_9_cli_determinism(tmp_path):
    a, b = _cli_round(tmp_path / "a"), _cli_round(tmp_path / "b")
    rel = lambda files, root: {k: v.replace(str(tmp_path / root).encode(), b"<root>") for k, v in files.items()}  # noqa: E731
    a, b = rel(a, "a"), rel(b, "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differing and len(a) > 10
    report(9, ok, f"7 commands x 2 runs, {len(a)} artifacts byte-identical" if ok else f"differing: {differing}")
    assert ok
