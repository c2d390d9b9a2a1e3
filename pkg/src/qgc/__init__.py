"""Query-guided compression of retrieved documents for a frozen language model.

Modules:
    numerics     float64 reverse-mode autodiff, transformer layers, Adam, checkpoints
    textdata     vocabulary, synthetic fact corpus, JSONL I/O
    target_lm    small decoder-only LM that is pretrained once and then frozen
    compressor   query-guided encoder, n-gram pooling, reviewing layers, alignment
    strategy     relevance ranking and per-document n-gram plans
    training     compressor training against the frozen LM
    evaluation   metrics, compression ratio, throughput, study drivers
    cli          the ``qgc`` command
"""

__version__ = "0.1.0"
