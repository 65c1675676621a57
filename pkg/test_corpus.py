"""
Tests for the built-in corpus and its expectation gate
"""

import shutil

import pytest

from services.config import get_settings
from services.corpus import CORPUS, CorpusEntry, Expectation, corpus_check, get_entry, resolve_problem
from services.corpus.registry import DERIVED, PAPER, TRIVIAL, problem_dir, type_is
from services.errors import PreconditionError, ProblemFormatError


def test_every_builtin_problem_loads():
    names = [entry.name for entry in CORPUS]
    assert len(names) == len(set(names)) == 10
    for entry in CORPUS:
        P = entry.load()
        assert P.n == 1
        assert entry.expectations


def test_corpus_passes_at_default_tolerances():
    summary = corpus_check()
    report = summary.to_dict()
    assert summary.passed, [r.to_dict() for r in summary.failures]
    assert report["failed"] == 0
    assert report["failed_entries"] == []
    assert report["total"] == sum(len(e.expectations) for e in CORPUS)
    assert {r["tag"] for r in report["results"]} == {PAPER, TRIVIAL, DERIVED}
    assert all("oracle" in r for r in report["results"] if r["tag"] == DERIVED)


def test_wrong_expectation_names_its_entry():
    entry = CorpusEntry("quadratic", "quadratic.blp", (type_is(0.5, (0.5,), "2", TRIVIAL),))
    summary = corpus_check(entries=[entry])
    assert not summary.passed
    assert summary.to_dict()["failed_entries"] == ["quadratic"]
    assert summary.failures[0].observed == "1"


def test_raising_expectation_is_a_failure():
    # g1 = x - y1 is positive at (0.5, 0)
    entry = CorpusEntry("type2-kink", "type2-kink.blp", (type_is(0.5, (0.0,), "1", TRIVIAL),))
    summary = corpus_check(entries=[entry])
    assert not summary.passed
    assert summary.failures[0].error.startswith("InfeasiblePointError")


def test_rank_override_breaks_near_duplicate():
    summary = corpus_check({"rank": 1e-2, "act": None}, entries=[get_entry("near-duplicate")])
    assert not summary.passed
    assert summary.to_dict()["failed_entries"] == ["near-duplicate"]
    assert summary.tolerances == {"rank": 1e-2}


def test_expectation_provenance_is_validated():
    with pytest.raises(PreconditionError):
        Expectation("anything", "GUESSED", lambda P: (True, None))
    with pytest.raises(PreconditionError):
        Expectation("anything", DERIVED, lambda P: (True, None))
    assert Expectation("anything", DERIVED, lambda P: (True, None), oracle="by hand").oracle == "by hand"


def test_unknown_builtin_and_file_sources():
    with pytest.raises(ProblemFormatError):
        get_entry("no-such-problem")
    with pytest.raises(ProblemFormatError):
        resolve_problem("builtin:no-such-problem")
    P = resolve_problem(str(problem_dir() / "quadratic.blp"))
    assert P.m == 1


def test_corpus_dir_from_environment(monkeypatch, tmp_path):
    shutil.copy(problem_dir() / "quadratic.blp", tmp_path / "quadratic.blp")
    monkeypatch.setenv("BILEVEL_CORPUS_DIR", str(tmp_path))
    monkeypatch.setenv("BILEVEL_SEED", "7")
    assert get_settings().seed == 7
    assert problem_dir() == tmp_path
    assert resolve_problem("builtin:quadratic").m == 1
    with pytest.raises(ProblemFormatError):
        resolve_problem("builtin:double-well")
