"""DistMult / MDistMult parameters and scoring.

Module ``i`` scores a triple as ``sum_k H_i[h, k] * R_i[r, k] * T[t, k]`` where
``T`` is one tail table shared by every module. The overall score is the sum
over modules. With a single module the head table *is* the tail table, which
gives back plain (symmetric) DistMult.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

CHECKPOINT_VERSION = 1
_HEADER_END = "end_header"

ALL = "all"
ModuleSelector = Union[int, str]


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    module_count: int
    entity_count: int
    relation_count: int
    seed: int = 0
    init_scale: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("dim", "module_count", "entity_count", "relation_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 6.0 / math.sqrt(self.dim)

    @property
    def aliased(self) -> bool:
        return self.module_count == 1


class ParameterSet:
    """Embedding tables for ``N`` modules.

    ``head_tables[i]`` is ``|E| x d``, ``relation_tables[i]`` is ``|R| x d`` and
    ``shared_tail_table`` is ``|E| x d``. For ``N == 1`` ``head_tables[0]`` and
    ``shared_tail_table`` are the same array object.
    """

    def __init__(self, head_tables, relation_tables, shared_tail_table=None):
        if len(head_tables) != len(relation_tables) or not head_tables:
            raise ValueError("need one relation table per head table")
        if shared_tail_table is None:
            if len(head_tables) != 1:
                raise ValueError("a separate tail table is required when N > 1")
            shared_tail_table = head_tables[0]
        self.head_tables = list(head_tables)
        self.relation_tables = list(relation_tables)
        self.shared_tail_table = shared_tail_table
        shape_e = shared_tail_table.shape
        for h in self.head_tables:
            if h.shape != shape_e:
                raise ValueError(f"head table shape {h.shape} != tail table shape {shape_e}")
        for r in self.relation_tables:
            if r.ndim != 2 or r.shape[1] != shape_e[1]:
                raise ValueError(f"relation table shape {r.shape} incompatible with dim {shape_e[1]}")

    @property
    def module_count(self) -> int:
        return len(self.head_tables)

    @property
    def aliased(self) -> bool:
        return self.head_tables[0] is self.shared_tail_table

    @property
    def dim(self) -> int:
        return self.shared_tail_table.shape[1]

    @property
    def entity_count(self) -> int:
        return self.shared_tail_table.shape[0]

    @property
    def relation_count(self) -> int:
        return self.relation_tables[0].shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.shared_tail_table.dtype

    def named_tables(self) -> dict[str, np.ndarray]:
        """Distinct storage arrays keyed by name, in checkpoint order."""
        out = {f"head_{i}": h for i, h in enumerate(self.head_tables)}
        if not self.aliased:
            out["tail"] = self.shared_tail_table
        out.update({f"relation_{i}": r for i, r in enumerate(self.relation_tables)})
        return out

    def copy(self, dtype=None) -> "ParameterSet":
        cast = (lambda a: a.astype(dtype)) if dtype is not None else (lambda a: a.copy())
        heads = [cast(h) for h in self.head_tables]
        rels = [cast(r) for r in self.relation_tables]
        return ParameterSet(heads, rels, None if self.aliased else cast(self.shared_tail_table))

    def equals(self, other: "ParameterSet") -> bool:
        mine, theirs = self.named_tables(), other.named_tables()
        return mine.keys() == theirs.keys() and all(np.array_equal(mine[k], theirs[k]) for k in mine)


def init_parameters(config: ModelConfig) -> ParameterSet:
    """Uniform ``[-scale, scale]`` init, one independent RNG stream per table."""
    n = config.module_count
    table_count = 2 * n + (0 if config.aliased else 1)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(table_count)]
    scale = config.scale
    dtype = np.dtype(config.dtype)

    def draw(rows: int) -> np.ndarray:
        return streams.pop(0).uniform(-scale, scale, size=(rows, config.dim)).astype(dtype)

    heads = [draw(config.entity_count) for _ in range(n)]
    tail = None if config.aliased else draw(config.entity_count)
    rels = [draw(config.relation_count) for _ in range(n)]
    return ParameterSet(heads, rels, tail)


def _check(params: ParameterSet, h: int, r: int, t: int | None = None) -> None:
    if not 0 <= h < params.entity_count:
        raise IndexError(f"head index {h} out of range [0, {params.entity_count})")
    if not 0 <= r < params.relation_count:
        raise IndexError(f"relation index {r} out of range [0, {params.relation_count})")
    if t is not None and not 0 <= t < params.entity_count:
        raise IndexError(f"tail index {t} out of range [0, {params.entity_count})")


def _modules(params: ParameterSet, selector: ModuleSelector) -> range:
    if selector == ALL:
        return range(params.module_count)
    if isinstance(selector, (int, np.integer)) and 0 <= selector < params.module_count:
        return range(selector, selector + 1)
    raise IndexError(f"module selector {selector!r} invalid for N={params.module_count}")


def score_module(params: ParameterSet, i: int, h: int, r: int, t: int) -> float:
    _check(params, h, r, t)
    (i,) = _modules(params, i)
    return float(score_triples(params, [h], [r], [t], i)[0])


def score_all(params: ParameterSet, h: int, r: int, t: int) -> float:
    _check(params, h, r, t)
    return float(sum(score_module(params, i, h, r, t) for i in range(params.module_count)))


def score_triples(params: ParameterSet, heads, relations, tails, selector: ModuleSelector = ALL) -> np.ndarray:
    """Pointwise scores, multiplied as ``(head * tail) . relation``.

    That order makes the single-module score bitwise symmetric in head and tail.
    """
    heads, relations, tails = (np.asarray(x) for x in (heads, relations, tails))
    tv = params.shared_tail_table[tails].astype(np.float64)
    out = np.zeros(len(heads))
    for i in _modules(params, selector):
        hv = params.head_tables[i][heads].astype(np.float64)
        rv = params.relation_tables[i][relations].astype(np.float64)
        out += np.einsum("bd,bd->b", hv * tv, rv)
    return out


def query_vectors(params: ParameterSet, heads, relations, selector: ModuleSelector = ALL) -> np.ndarray:
    """Stack ``H_i[h] * R_i[r]`` for the selected modules: shape ``(m, B, d)``, float64."""
    return np.stack(
        [
            params.head_tables[i][heads].astype(np.float64) * params.relation_tables[i][relations].astype(np.float64)
            for i in _modules(params, selector)
        ]
    )


def score_tails_batch(params: ParameterSet, heads, relations, selector: ModuleSelector = ALL) -> np.ndarray:
    """Scores of every candidate tail for a batch of queries, shape ``(B, |E|)``."""
    q = query_vectors(params, np.asarray(heads), np.asarray(relations), selector).sum(axis=0)
    return q @ params.shared_tail_table.astype(np.float64).T


def score_all_tails(params: ParameterSet, selector: ModuleSelector, h: int, r: int) -> np.ndarray:
    """Score vector over all tails for one query; ``selector`` is a module index or ``"all"``."""
    _check(params, h, r)
    return score_tails_batch(params, [h], [r], selector)[0]


def save_checkpoint(path: str | Path, params: ParameterSet, seed: int = 0) -> None:
    """Text header followed by little-endian float32 tables.

    Table order: heads ``0..N``, shared tail (omitted when aliased), relations ``0..N``.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dim": params.dim,
        "n_modules": params.module_count,
        "entity_count": params.entity_count,
        "relation_count": params.relation_count,
        "seed": seed,
        "aliased": int(params.aliased),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for key, value in header.items():
            fh.write(f"{key}={value}\n".encode("ascii"))
        fh.write(f"{_HEADER_END}\n".encode("ascii"))
        for table in params.named_tables().values():
            fh.write(np.ascontiguousarray(table, dtype="<f4").tobytes())
    tmp.replace(path)


def read_checkpoint_header(fh) -> dict[str, int]:
    header: dict[str, int] = {}
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("truncated checkpoint header")
        line = line.decode("ascii").strip()
        if line == _HEADER_END:
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"bad checkpoint header line {line!r}")
        header[key] = int(value)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict[str, int]]:
    with open(path, "rb") as fh:
        header = read_checkpoint_header(fh)
        d, n = header["dim"], header["n_modules"]
        ne, nr = header["entity_count"], header["relation_count"]
        aliased = bool(header["aliased"])
        if aliased != (n == 1):
            raise ValueError("aliasing flag inconsistent with module count")

        def read(rows: int) -> np.ndarray:
            count = rows * d
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("truncated checkpoint body")
            return np.frombuffer(buf, dtype="<f4").reshape(rows, d).astype(np.float32)

        heads = [read(ne) for _ in range(n)]
        tail = None if aliased else read(ne)
        rels = [read(nr) for _ in range(n)]
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint body")
    return ParameterSet(heads, rels, tail), header
