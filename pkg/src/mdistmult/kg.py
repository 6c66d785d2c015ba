"""Triple datasets: vocabulary, integer encoding, inverse augmentation, filter index."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
REVERSE_SUFFIX = "_reverse"


class DataError(Exception):
    """Malformed, unreadable or inconsistent triple data."""


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Vocab:
    id_to_entity: tuple[str, ...]
    id_to_relation: tuple[str, ...]
    base_relation_count: int
    entity_to_id: dict[str, int] = field(init=False, repr=False, compare=False)
    relation_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entity_to_id", {e: i for i, e in enumerate(self.id_to_entity)})
        object.__setattr__(self, "relation_to_id", {r: i for i, r in enumerate(self.id_to_relation)})
        if len(self.entity_to_id) != len(self.id_to_entity):
            raise DataError("duplicate entity names in vocab")
        if len(self.relation_to_id) != len(self.id_to_relation):
            raise DataError("duplicate relation names in vocab")
        if self.relation_count not in (self.base_relation_count, 2 * self.base_relation_count):
            raise DataError(
                f"relation count {self.relation_count} inconsistent with base count {self.base_relation_count}"
            )

    @property
    def entity_count(self) -> int:
        return len(self.id_to_entity)

    @property
    def relation_count(self) -> int:
        return len(self.id_to_relation)

    @property
    def is_augmented(self) -> bool:
        return self.relation_count == 2 * self.base_relation_count

    def with_reverse_relations(self) -> "Vocab":
        """Return a vocab whose relation r has reverse ``r + base_relation_count``."""
        if self.is_augmented:
            raise DataError("vocab already contains reverse relations")
        base = self.id_to_relation
        return Vocab(self.id_to_entity, base + tuple(r + REVERSE_SUFFIX for r in base), len(base))

    def reverse_of(self, relation: int) -> int:
        if not self.is_augmented:
            raise DataError("vocab has no reverse relations")
        b = self.base_relation_count
        return relation + b if relation < b else relation - b

    def encode(self, head: str, relation: str, tail: str) -> Triple:
        return Triple(self.entity_to_id[head], self.relation_to_id[relation], self.entity_to_id[tail])

    def decode(self, triple: Sequence[int]) -> tuple[str, str, str]:
        h, r, t = triple
        return self.id_to_entity[h], self.id_to_relation[r], self.id_to_entity[t]


@dataclass(frozen=True)
class TripleSet:
    """Integer-encoded triples of one split, stored as an ``(n, 3)`` int64 array."""

    array: np.ndarray
    split: str
    augmented: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split label {self.split!r}")
        arr = np.asarray(self.array, dtype=np.int64).reshape(-1, 3)
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence[int]], split: str, augmented: bool = False) -> "TripleSet":
        return cls(np.array(list(triples), dtype=np.int64).reshape(-1, 3), split, augmented)

    def __len__(self) -> int:
        return len(self.array)

    def __iter__(self) -> Iterator[Triple]:
        for h, r, t in self.array.tolist():
            yield Triple(h, r, t)

    def __getitem__(self, i: int) -> Triple:
        return Triple(*self.array[i].tolist())

    @property
    def heads(self) -> np.ndarray:
        return self.array[:, 0]

    @property
    def relations(self) -> np.ndarray:
        return self.array[:, 1]

    @property
    def tails(self) -> np.ndarray:
        return self.array[:, 2]


class FilterIndex:
    """Known true tails for every ``(head, relation)`` query."""

    _EMPTY = np.empty(0, dtype=np.int64)

    def __init__(self, true_tails: dict[tuple[int, int], np.ndarray]):
        self._true_tails = true_tails

    def tails(self, head: int, relation: int) -> np.ndarray:
        return self._true_tails.get((int(head), int(relation)), self._EMPTY)

    def keys(self):
        return self._true_tails.keys()

    def __len__(self) -> int:
        return len(self._true_tails)

    def __contains__(self, triple) -> bool:
        h, r, t = triple
        tails = self.tails(h, r)
        i = np.searchsorted(tails, t)
        return bool(i < len(tails) and tails[i] == t)


def _read_rows(path: Path) -> Iterator[tuple[int, list[str]]]:
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
                yield lineno, fields
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8: {exc}") from exc


def build_vocab(file_paths: Sequence[str | Path]) -> Vocab:
    """Collect entities and relations across files in first-appearance order."""
    if not file_paths:
        raise DataError("no triple files given")
    entities: dict[str, None] = {}
    relations: dict[str, None] = {}
    for path in file_paths:
        for _, (h, r, t) in _read_rows(Path(path)):
            entities.setdefault(h)
            relations.setdefault(r)
            entities.setdefault(t)
    names = tuple(relations)
    return Vocab(tuple(entities), names, len(names))


def load_triples(path: str | Path, vocab: Vocab, split: str) -> TripleSet:
    """Encode a TSV file against a closed vocabulary, dropping duplicate lines.

    Relations named ``<name>_reverse`` mark the set as already augmented.
    """
    path = Path(path)
    rows: dict[Triple, None] = {}
    duplicates = 0
    for lineno, (h, r, t) in _read_rows(path):
        for name, table in ((h, vocab.entity_to_id), (r, vocab.relation_to_id), (t, vocab.entity_to_id)):
            if name not in table:
                raise DataError(f"{path}:{lineno}: unknown symbol {name!r}")
        triple = vocab.encode(h, r, t)
        if triple in rows:
            duplicates += 1
        else:
            rows[triple] = None
    if duplicates:
        log.warning("%s: dropped %d duplicate triples", path, duplicates)
    ts = TripleSet.from_triples(rows, split)
    if len(ts) and vocab.is_augmented and (ts.relations >= vocab.base_relation_count).any():
        ts = TripleSet(ts.array, split, augmented=True)
    return ts


def augment_with_inverses(triples: TripleSet, vocab: Vocab) -> TripleSet:
    """Append ``(t, r + base_relation_count, h)`` for every ``(h, r, t)``.

    Output order is the input triples followed by their reverses.
    """
    if triples.augmented or (len(triples) and (triples.relations >= vocab.base_relation_count).any()):
        raise DataError(f"{triples.split} split already contains reverse relations")
    arr = triples.array
    rev = np.stack([arr[:, 2], arr[:, 1] + vocab.base_relation_count, arr[:, 0]], axis=1)
    return TripleSet(np.concatenate([arr, rev]), triples.split, augmented=True)


def build_filter_index(sets: Iterable[TripleSet]) -> FilterIndex:
    buckets: dict[tuple[int, int], set[int]] = {}
    for ts in sets:
        for h, r, t in ts.array.tolist():
            buckets.setdefault((h, r), set()).add(t)
    return FilterIndex({k: np.array(sorted(v), dtype=np.int64) for k, v in buckets.items()})


def write_triples(path: str | Path, triples: TripleSet, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for triple in triples:
            fh.write("\t".join(vocab.decode(triple)) + "\n")


def write_vocab(directory: str | Path, vocab: Vocab) -> None:
    """Dump ``entities.tsv`` and ``relations.tsv`` as (index, name) rows."""
    directory = Path(directory)
    for fname, names in (("entities.tsv", vocab.id_to_entity), ("relations.tsv", vocab.id_to_relation)):
        with open(directory / fname, "w", encoding="utf-8") as fh:
            for i, name in enumerate(names):
                fh.write(f"{i}\t{name}\n")


def _read_names(path: Path) -> tuple[str, ...]:
    names = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                idx, _, name = line.partition("\t")
                if not idx.isdigit() or int(idx) != len(names):
                    raise DataError(f"{path}:{lineno}: expected dense index {len(names)}, got {idx!r}")
                names.append(name)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return tuple(names)


def read_vocab(directory: str | Path) -> Vocab:
    directory = Path(directory)
    entities = _read_names(directory / "entities.tsv")
    relations = _read_names(directory / "relations.tsv")
    half = len(relations) // 2
    augmented = (
        len(relations) % 2 == 0
        and half > 0
        and all(relations[i + half] == relations[i] + REVERSE_SUFFIX for i in range(half))
    )
    return Vocab(entities, relations, half if augmented else len(relations))
