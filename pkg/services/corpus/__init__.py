"""Built-in problems and their verified expectations"""

from services.corpus.registry import (
    BUILTIN_PREFIX, CORPUS, CorpusEntry, CorpusSummary, Expectation,
    corpus_check, get_entry, resolve_problem,
)

__all__ = [
    "BUILTIN_PREFIX",
    "CORPUS",
    "CorpusEntry",
    "CorpusSummary",
    "Expectation",
    "corpus_check",
    "get_entry",
    "resolve_problem",
]
