"""Raw and filtered tail ranking with MR, MRR and Hits@k."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kg import FilterIndex, Triple, TripleSet
from .model import ParameterSet, score_tails_batch, score_triples

MODES = ("raw", "filtered")
TIE_POLICIES = ("average", "pessimistic")
DIRECTIONS = ("forward", "reverse")


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "filtered"
    hits_levels: tuple[int, ...] = (1, 3, 10)
    tie_policy: str = "average"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.tie_policy not in TIE_POLICIES:
            raise ValueError(f"tie_policy must be one of {TIE_POLICIES}")
        levels = tuple(int(k) for k in self.hits_levels)
        if not levels or list(levels) != sorted(set(levels)) or levels[0] < 1:
            raise ValueError("hits_levels must be strictly ascending integers >= 1")
        object.__setattr__(self, "hits_levels", levels)


@dataclass(frozen=True)
class RankingResult:
    triple: Triple
    rank: float
    direction: str = "forward"


@dataclass
class MetricsReport:
    mr: float
    mrr: float
    hits: dict[int, float]
    count: int
    per_direction: dict[str, Optional["MetricsReport"]] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"count={self.count}", f"mr={self.mr:.4f}", f"mrr={self.mrr:.6f}"]
        lines += [f"h{k}={v:.6f}" for k, v in self.hits.items()]
        for direction, sub in self.per_direction.items():
            if sub is None:
                continue
            lines += [f"{direction}.count={sub.count}", f"{direction}.mr={sub.mr:.4f}", f"{direction}.mrr={sub.mrr:.6f}"]
            lines += [f"{direction}.h{k}={v:.6f}" for k, v in sub.hits.items()]
        return "\n".join(lines)

    def csv_fields(self) -> list[str]:
        return ["mr", "mrr", *(f"h{k}" for k in self.hits), "count"]

    def csv_values(self) -> list[str]:
        return [f"{self.mr:.4f}", f"{self.mrr:.6f}", *(f"{v:.6f}" for v in self.hits.values()), str(self.count)]


def csv_header(levels: Sequence[int] = (1, 3, 10)) -> list[str]:
    return ["dim", "N", "mode", "mr", "mrr", *(f"h{k}" for k in levels), "count"]


def csv_row(report: MetricsReport, dim: int, n_modules: int, mode: str) -> list[str]:
    return [str(dim), str(n_modules), mode, *report.csv_values()]


def rank_of(
    scores: np.ndarray,
    target: int,
    excluded: np.ndarray | None = None,
    extra_scores: Sequence[float] = (),
    tie_policy: str = "average",
    extra_reference: Optional[float] = None,
) -> float:
    """Rank of ``scores[target]`` among candidates not in ``excluded``.

    ``extra_scores`` are additional contenders that are not entities; they are
    compared with ``extra_reference`` when given (a target score computed the
    same way they were), else with ``scores[target]``.
    """
    s = scores[target]
    contender = np.ones(len(scores), dtype=bool)
    if excluded is not None and len(excluded):
        contender[excluded] = False
    contender[target] = False
    higher = int(np.count_nonzero(scores[contender] > s))
    ties = int(np.count_nonzero(scores[contender] == s))
    extra = np.asarray(extra_scores, dtype=np.float64)
    ref = s if extra_reference is None else extra_reference
    higher += int(np.count_nonzero(extra > ref))
    ties += int(np.count_nonzero(extra == ref))
    return 1.0 + higher + (ties / 2.0 if tie_policy == "average" else ties)


def _excluded(filter_index: Optional[FilterIndex], config: EvalConfig, h: int, r: int, t: int):
    if config.mode == "raw":
        return None
    if filter_index is None:
        raise ValueError("filtered mode requires a filter index")
    known = filter_index.tails(h, r)
    return known[known != t]


def rank_tail(
    params: ParameterSet,
    triple,
    filter_index: Optional[FilterIndex],
    config: EvalConfig,
    direction: str = "forward",
    extra_scores: Sequence[float] = (),
) -> RankingResult:
    h, r, t = (int(x) for x in triple)
    if not 0 <= t < params.entity_count:
        raise IndexError(f"target entity {t} outside [0, {params.entity_count})")
    scores = score_tails_batch(params, [h], [r])[0]
    rank = rank_of(scores, t, _excluded(filter_index, config, h, r, t), extra_scores, config.tie_policy)
    return RankingResult(Triple(h, r, t), rank, direction)


def _summarize(ranks: np.ndarray, levels: Sequence[int]) -> MetricsReport:
    return MetricsReport(
        mr=float(ranks.mean()),
        mrr=float((1.0 / ranks).mean()),
        hits={k: float((ranks <= k).mean()) for k in levels},
        count=len(ranks),
    )


def compute_metrics(results: Sequence[RankingResult], config: EvalConfig = EvalConfig()) -> MetricsReport:
    if not results:
        raise ValueError("no ranking results to aggregate")
    ranks = np.array([res.rank for res in results], dtype=np.float64)
    report = _summarize(ranks, config.hits_levels)
    directions = np.array([res.direction for res in results])
    for direction in DIRECTIONS:
        sel = ranks[directions == direction]
        report.per_direction[direction] = _summarize(sel, config.hits_levels) if len(sel) else None
    return report


def rank_triples(
    params: ParameterSet,
    triples: TripleSet,
    filter_index: Optional[FilterIndex],
    config: EvalConfig,
    base_relation_count: Optional[int] = None,
    reverse_distractors: bool = False,
    chunk: int = 512,
) -> list[RankingResult]:
    """Rank the tail of every triple; relations ``>= base_relation_count`` count as reverse.

    With ``reverse_distractors`` the score of the swapped triple ``(t, r, h)``
    is added as one extra contender.
    """
    if base_relation_count is None:
        base_relation_count = params.relation_count // 2 if triples.augmented else params.relation_count
    arr = triples.array
    if len(arr) and (arr[:, [0, 2]].max() >= params.entity_count or arr[:, 1].max() >= params.relation_count):
        raise IndexError("triple indices exceed model dimensions")
    results = []
    for lo in range(0, len(arr), chunk):
        part = arr[lo : lo + chunk]
        scores = score_tails_batch(params, part[:, 0], part[:, 1])
        if reverse_distractors:
            forward = score_triples(params, part[:, 0], part[:, 1], part[:, 2])
            swapped = score_triples(params, part[:, 2], part[:, 1], part[:, 0])
        for j, (h, r, t) in enumerate(part.tolist()):
            extra, ref = ((swapped[j],), forward[j]) if reverse_distractors else ((), None)
            excluded = _excluded(filter_index, config, h, r, t)
            rank = rank_of(scores[j], t, excluded, extra, config.tie_policy, ref)
            direction = "reverse" if r >= base_relation_count else "forward"
            results.append(RankingResult(Triple(h, r, t), rank, direction))
    return results


def evaluate(
    params: ParameterSet,
    test: TripleSet,
    filter_index: Optional[FilterIndex],
    config: EvalConfig = EvalConfig(),
    base_relation_count: Optional[int] = None,
    reverse_distractors: bool = False,
) -> MetricsReport:
    """Tail-rank every (augmented) test triple; reverse triples stand in for head prediction."""
    results = rank_triples(params, test, filter_index, config, base_relation_count, reverse_distractors)
    return compute_metrics(results, config)
