import numpy as np
import pytest

from mdistmult.kg import TripleSet, Vocab, augment_with_inverses
from mdistmult.model import ModelConfig, ParameterSet, init_parameters


def toy_triples():
    """20 facts over 10 entities; every (head, relation) and its reverse has one tail."""
    return [(i, 0, (i + 1) % 10) for i in range(10)] + [(i, 1, (i + 3) % 10) for i in range(10)]


@pytest.fixture
def toy_vocab():
    return Vocab(tuple(f"e{i}" for i in range(10)), ("next", "skip"), 2)


@pytest.fixture
def toy_train(toy_vocab):
    return augment_with_inverses(TripleSet.from_triples(toy_triples(), "train"), toy_vocab)


def random_params(n_modules, entities=6, relations=4, dim=5, seed=0, dtype="float64"):
    return init_parameters(ModelConfig(dim, n_modules, entities, relations, seed=seed, dtype=dtype))


def zero_params(n_modules, entities, relations, dim):
    heads = [np.zeros((entities, dim)) for _ in range(n_modules)]
    rels = [np.zeros((relations, dim)) for _ in range(n_modules)]
    tail = None if n_modules == 1 else np.zeros((entities, dim))
    return ParameterSet(heads, rels, tail)


@pytest.fixture
def write_tsv(tmp_path):
    def write(name, rows):
        path = tmp_path / name
        path.write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")
        return path

    return write


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def check(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
