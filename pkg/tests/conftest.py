from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from qgc import numerics as nx
from qgc.compressor import CompressorConfig, CompressorModel
from qgc.target_lm import LMConfig, TargetLM
from qgc.textdata import CorpusConfig, generate_corpus, synthetic_inventory

TINY_CORPUS = CorpusConfig(n_examples=24, n_docs_per_example=3, doc_len=12, vocab_size=160, seed=3,
                           n_attributes=4, values_per_attribute=4)


def central_difference(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                       idx: Sequence[tuple] | None = None) -> dict[tuple, float]:
    """Central differences of scalar ``f`` w.r.t. entries of ``arr`` (modified in place, restored)."""
    out = {}
    for i in (idx if idx is not None else list(np.ndindex(arr.shape))):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise max; the floor absorbs near-zero gradients."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def grad_check(loss_fn: Callable[[], nx.Tensor], params: Sequence[nx.Tensor], rng: np.random.Generator,
               samples: int = 6, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over sampled entries.

    Gradients smaller than the difference quotient's round-off (~eps*|f|/h) are compared against
    a floor of 1e5 times that level, so structurally zero gradients (e.g. attention key biases,
    which softmax shift-invariance cancels) are not scored on noise.
    """
    for p in params:
        p.grad = None
    value = loss_fn()
    nx.backward(value)
    floor = max(1e-6, 1e5 * np.finfo(float).eps * abs(value.item()) / h)
    worst = 0.0
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = rng.choice(p.data.size, size=min(samples, p.data.size), replace=False)
        idx = [np.unravel_index(int(i), p.data.shape) for i in flat]
        with nx.no_grad():
            fd = central_difference(lambda: loss_fn().item(), p.data, h, idx)
        worst = max(worst, rel_err([g[i] for i in idx], [fd[i] for i in idx], floor))
    return worst


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY_CORPUS)


@pytest.fixture(scope="session")
def tiny_vocab():
    return synthetic_inventory(TINY_CORPUS).vocabulary


def make_lm(vocab_size: int, d: int = 8, layers: int = 1, seed: int = 0, freeze: bool = True) -> TargetLM:
    lm = TargetLM(LMConfig(vocab_size=vocab_size, d_model=d, n_layers=layers, n_heads=2, context_limit=128, seed=seed))
    if freeze:
        lm.freeze()
    return lm


def make_compressor(vocab_size: int, d: int = 8, seed: int = 0, **flags) -> CompressorModel:
    return CompressorModel(CompressorConfig(vocab_size=vocab_size, d_c=d, d_lm=d, n_heads=2, max_len=128,
                                            seed=seed, **flags))


@pytest.fixture
def tiny_lm(tiny_vocab):
    return make_lm(len(tiny_vocab))


@pytest.fixture
def tiny_compressor(tiny_vocab, tiny_lm):
    c = make_compressor(len(tiny_vocab))
    c.init_from_lm(tiny_lm)
    return c


# one "criterion k: PASS/FAIL ..." line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
