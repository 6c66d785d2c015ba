"""Small generated knowledge graphs with controlled relation symmetry."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import TripleSet, Vocab, write_triples

KINDS = ("antisymmetric_pairs", "symmetric_pairs", "random_er")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToySpec:
    entity_count: int
    kind: str = "antisymmetric_pairs"
    edge_density: float = 1.0
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    relation_count: int = 1
    max_retries: int = 1000

    def __post_init__(self):
        if self.entity_count < 4:
            raise ValueError("entity_count must be >= 4")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not 0 < self.edge_density <= 1:
            raise ValueError("edge_density must be in (0, 1]")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1) > 1e-9:
            raise ValueError("split_fractions must be three positive values summing to 1")
        if self.relation_count < 1:
            raise ValueError("relation_count must be >= 1")


def _facts(spec: ToySpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.entity_count
    if spec.kind == "random_er":
        # directed, no self loops, spread over relation_count relations
        slots = n * (n - 1) * spec.relation_count
        count = int(round(spec.edge_density * slots))
        picked = rng.choice(slots, size=count, replace=False)
        rel, rest = np.divmod(picked, n * (n - 1))
        h, k = np.divmod(rest, n - 1)
        t = k + (k >= h)
        return np.stack([h, rel, t], axis=1)

    pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64)
    count = int(round(spec.edge_density * len(pairs)))
    chosen = pairs[np.sort(rng.choice(len(pairs), size=count, replace=False))]
    if spec.kind == "antisymmetric_pairs":
        flip = rng.random(count) < 0.5
        chosen[flip] = chosen[flip][:, ::-1]
        return np.stack([chosen[:, 0], np.zeros(count, dtype=np.int64), chosen[:, 1]], axis=1)
    zeros = np.zeros(count, dtype=np.int64)
    forward = np.stack([chosen[:, 0], zeros, chosen[:, 1]], axis=1)
    backward = np.stack([chosen[:, 1], zeros, chosen[:, 0]], axis=1)
    return np.concatenate([forward, backward])


def _split(facts: np.ndarray, spec: ToySpec, rng: np.random.Generator):
    order = rng.permutation(len(facts))
    n_valid = int(round(spec.split_fractions[1] * len(facts)))
    n_test = int(round(spec.split_fractions[2] * len(facts)))
    train = list(order[: len(facts) - n_valid - n_test])
    held = [list(order[len(train) : len(train) + n_valid]), list(order[len(train) + n_valid :])]

    counts = np.zeros(spec.entity_count, dtype=np.int64)
    for i in train:
        counts[facts[i, 0]] += 1
        counts[facts[i, 2]] += 1

    def uncovered(i) -> bool:
        return counts[facts[i, 0]] == 0 or counts[facts[i, 2]] == 0

    for _ in range(spec.max_retries):
        bad = [(s, j) for s, part in enumerate(held) for j, i in enumerate(part) if uncovered(i)]
        if not bad:
            return train, held[0], held[1]
        s, j = bad[0]
        offender = held[s][j]
        # swap the offender with a train fact whose endpoints stay covered without it
        counts[facts[offender, 0]] += 1
        counts[facts[offender, 2]] += 1
        candidates = [k for k, i in enumerate(train) if counts[facts[i, 0]] > 1 and counts[facts[i, 2]] > 1]
        if not candidates:
            break
        k = candidates[rng.integers(len(candidates))]
        swapped = train[k]
        counts[facts[swapped, 0]] -= 1
        counts[facts[swapped, 2]] -= 1
        train[k] = offender
        held[s][j] = swapped
    raise GenerationError(
        f"could not cover every valid/test entity in train within {spec.max_retries} retries; "
        "increase edge_density or entity_count"
    )


def generate(spec: ToySpec) -> tuple[TripleSet, TripleSet, TripleSet, Vocab]:
    """Sample facts for ``spec`` and split them; every valid/test entity occurs in train."""
    rng = np.random.default_rng(spec.seed)
    facts = _facts(spec, rng)
    if len(facts) < 3:
        raise GenerationError("too few facts to fill three splits")
    train, valid, test = _split(facts, spec, rng)
    rel_names = ("r",) if spec.relation_count == 1 or spec.kind != "random_er" else tuple(
        f"r{i}" for i in range(spec.relation_count)
    )
    vocab = Vocab(tuple(f"e{i}" for i in range(spec.entity_count)), rel_names, len(rel_names))
    sets = [TripleSet(facts[sorted(idx)], label) for idx, label in ((train, "train"), (valid, "valid"), (test, "test"))]
    return sets[0], sets[1], sets[2], vocab


def write_splits(directory: str | Path, spec: ToySpec) -> Vocab:
    """Write ``train.tsv``, ``valid.tsv`` and ``test.tsv`` for ``spec`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, valid, test, vocab = generate(spec)
    for ts in (train, valid, test):
        write_triples(directory / f"{ts.split}.tsv", ts, vocab)
    return vocab
