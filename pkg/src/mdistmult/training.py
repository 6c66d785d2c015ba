"""Losses, hand-written gradients, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .kg import FilterIndex, TripleSet
from .model import ModelConfig, ParameterSet, init_parameters, save_checkpoint

log = logging.getLogger(__name__)

LOSS_KINDS = ("joint_softmax", "margin")
MARGIN = 1.0


class DivergenceError(FloatingPointError):
    """Raised when a loss, gradient or update stops being finite.

    ``params`` holds the last parameters known to be finite, when available.
    """

    def __init__(self, message: str, params: Optional[ParameterSet] = None, epoch: Optional[int] = None):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 0.0005
    batch_size: int = 256
    dropout_p: float = 0.5
    l2_lambda: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_kind: str = "joint_softmax"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "AdamState":
        tables = params.named_tables()
        return cls(
            {k: np.zeros_like(v) for k, v in tables.items()},
            {k: np.zeros_like(v) for k, v in tables.items()},
        )


# -- losses -----------------------------------------------------------------


def _logsumexp(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(scores - m).sum(axis=-1, keepdims=True)))[..., 0]


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_probability(scores, target: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    return float(_softmax(scores)[target])


def module_loss(scores, target: int) -> float:
    """Cross-entropy ``logsumexp(scores) - scores[target]``."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(_logsumexp(scores) - scores[target])


def margin_loss(pos_score: float, neg_score: float) -> float:
    return max(neg_score - pos_score + MARGIN, 0.0)


def joint_loss(params: ParameterSet, triple) -> float:
    """Global softmax loss plus one softmax loss per module, over every candidate tail."""
    loss, _ = _joint_batch(params, np.asarray([triple], dtype=np.int64), None, need_grad=False)
    return loss


# -- dropout ----------------------------------------------------------------


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``p``, else ``1 / (1 - p)``."""
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def apply_dropout(vector, p: float, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    vector = np.asarray(vector)
    if not training or p == 0:
        return vector
    return vector * dropout_mask(vector.shape, p, rng)


@dataclass
class _Masks:
    heads: list
    relations: list
    tails: np.ndarray  # (|E|, d) for the joint loss, (B, d) for margin batches

    @classmethod
    def draw(cls, params: ParameterSet, batch_size: int, tail_rows: int, p: float, rng):
        d = params.dim
        n = params.module_count
        heads = [dropout_mask((batch_size, d), p, rng) for _ in range(n)]
        relations = [dropout_mask((batch_size, d), p, rng) for _ in range(n)]
        tails = dropout_mask((tail_rows, d), p, rng)
        return cls(heads, relations, tails)


# -- forward / backward -----------------------------------------------------


def _zero_grads(params: ParameterSet) -> dict[str, np.ndarray]:
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.named_tables().items()}


def _fold_tail(grads: dict[str, np.ndarray], params: ParameterSet, tail_grad: np.ndarray) -> None:
    grads["head_0" if params.aliased else "tail"] += tail_grad


def _joint_batch(params: ParameterSet, triples: np.ndarray, masks: Optional[_Masks], need_grad: bool = True):
    """Mean joint loss over a batch and (optionally) its gradient per named table."""
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    b = len(triples)
    rows = np.arange(b)
    tail = params.shared_tail_table.astype(np.float64)
    if masks is not None:
        tail = tail * masks.tails

    hv, rv, module_scores = [], [], []
    for i in range(params.module_count):
        hi = params.head_tables[i][h].astype(np.float64)
        ri = params.relation_tables[i][r].astype(np.float64)
        if masks is not None:
            hi = hi * masks.heads[i]
            ri = ri * masks.relations[i]
        hv.append(hi)
        rv.append(ri)
        module_scores.append((hi * ri) @ tail.T)
    total = np.sum(module_scores, axis=0)

    per_triple = _logsumexp(total) - total[rows, t]
    for s in module_scores:
        per_triple = per_triple + _logsumexp(s) - s[rows, t]
    loss = float(per_triple.mean())
    if not need_grad:
        return loss, None
    if not math.isfinite(loss):
        return loss, None

    grads = _zero_grads(params)
    d_total = _softmax(total)
    d_total[rows, t] -= 1.0
    d_tail = np.zeros_like(tail)
    for i, s in enumerate(module_scores):
        d_s = _softmax(s)
        d_s[rows, t] -= 1.0
        d_s = (d_s + d_total) / b
        d_q = d_s @ tail
        d_tail += d_s.T @ (hv[i] * rv[i])
        d_h = d_q * rv[i]
        d_r = d_q * hv[i]
        if masks is not None:
            d_h *= masks.heads[i]
            d_r *= masks.relations[i]
        np.add.at(grads[f"head_{i}"], h, d_h)
        np.add.at(grads[f"relation_{i}"], r, d_r)
    if masks is not None:
        d_tail *= masks.tails
    _fold_tail(grads, params, d_tail)
    return loss, grads


def _pointwise_scores(params: ParameterSet, triples: np.ndarray, masks: Optional[_Masks]):
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    tv = params.shared_tail_table[t].astype(np.float64)
    if masks is not None:
        tv = tv * masks.tails
    hv, rv = [], []
    score = np.zeros(len(triples))
    for i in range(params.module_count):
        hi = params.head_tables[i][h].astype(np.float64)
        ri = params.relation_tables[i][r].astype(np.float64)
        if masks is not None:
            hi = hi * masks.heads[i]
            ri = ri * masks.relations[i]
        hv.append(hi)
        rv.append(ri)
        score += np.einsum("bd,bd,bd->b", hi, ri, tv)
    return score, hv, rv, tv


def _pointwise_backward(params, triples, d_score, hv, rv, tv, masks, grads) -> None:
    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    d_tv = np.zeros_like(tv)
    for i in range(params.module_count):
        d_h = d_score[:, None] * rv[i] * tv
        d_r = d_score[:, None] * hv[i] * tv
        d_tv += d_score[:, None] * hv[i] * rv[i]
        if masks is not None:
            d_h *= masks.heads[i]
            d_r *= masks.relations[i]
        np.add.at(grads[f"head_{i}"], h, d_h)
        np.add.at(grads[f"relation_{i}"], r, d_r)
    if masks is not None:
        d_tv *= masks.tails
    tail_grad = np.zeros_like(grads["head_0"])
    np.add.at(tail_grad, t, d_tv)
    _fold_tail(grads, params, tail_grad)


def corrupt(triples: np.ndarray, entity_count: int, rng: np.random.Generator) -> np.ndarray:
    """One negative per positive: replace head or tail (even odds) with a uniform entity."""
    neg = triples.copy()
    replace_head = rng.random(len(triples)) < 0.5
    replacement = rng.integers(0, entity_count, size=len(triples))
    neg[replace_head, 0] = replacement[replace_head]
    neg[~replace_head, 2] = replacement[~replace_head]
    return neg


def _margin_batch(params, positives, negatives, pos_masks=None, neg_masks=None, need_grad=True):
    s_pos, hp, rp, tp = _pointwise_scores(params, positives, pos_masks)
    s_neg, hn, rn, tn = _pointwise_scores(params, negatives, neg_masks)
    hinge = s_neg - s_pos + MARGIN
    loss = float(np.maximum(hinge, 0.0).mean())
    if not need_grad or not math.isfinite(loss):
        return loss, None
    active = (hinge > 0).astype(np.float64) / len(positives)
    grads = _zero_grads(params)
    _pointwise_backward(params, positives, -active, hp, rp, tp, pos_masks, grads)
    _pointwise_backward(params, negatives, active, hn, rn, tn, neg_masks, grads)
    return loss, grads


def _diagnose(params: ParameterSet) -> str:
    bad = [k for k, v in params.named_tables().items() if not np.isfinite(v).all()]
    if bad:
        return "non-finite entries in " + ", ".join(bad)
    peak = {k: float(np.abs(v).max()) for k, v in params.named_tables().items()}
    worst = max(peak, key=peak.get)
    return f"parameters finite; largest magnitude {peak[worst]:.3g} in {worst} overflowed the scores"


def compute_gradients(params: ParameterSet, batch, config: TrainConfig, rng: np.random.Generator):
    """Return ``(mean_loss, grads)`` for one mini-batch.

    ``grads`` maps each name of ``params.named_tables()`` to a float64 array of
    the same shape. The L2 penalty is left to :func:`adam_step`.
    """
    triples = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    p = config.dropout_p
    with np.errstate(over="ignore", invalid="ignore"):
        if config.loss_kind == "joint_softmax":
            masks = _Masks.draw(params, len(triples), params.entity_count, p, rng) if p > 0 else None
            loss, grads = _joint_batch(params, triples, masks)
        else:
            negatives = corrupt(triples, params.entity_count, rng)
            pos_masks = neg_masks = None
            if p > 0:
                pos_masks = _Masks.draw(params, len(triples), len(triples), p, rng)
                neg_masks = _Masks.draw(params, len(triples), len(triples), p, rng)
            loss, grads = _margin_batch(params, triples, negatives, pos_masks, neg_masks)
        finite = grads is not None and all(np.isfinite(g).all() for g in grads.values())
    if not finite:
        raise DivergenceError(f"non-finite loss/gradient ({loss}): {_diagnose(params)}")
    return loss, grads


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam with coupled L2 (``g + lambda * theta``), in place.

    Parameters are left untouched if any updated value would be non-finite.
    """
    tables = params.named_tables()
    if grads.keys() != tables.keys():
        raise ValueError(f"gradient tables {sorted(grads)} do not match parameters {sorted(tables)}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    step = state.step_count + 1
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    updates = {}
    for name, theta in tables.items():
        g = grads[name] + config.l2_lambda * theta
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * (g * g)
        new = theta - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        if not np.isfinite(new).all():
            raise DivergenceError(f"non-finite Adam update for {name}")
        updates[name] = (new, m, v)
    for name, (new, m, v) in updates.items():
        tables[name][...] = new
        state.first_moment[name][...] = m
        state.second_moment[name][...] = v
    state.step_count = step


# -- gradient check ---------------------------------------------------------


def finite_difference_check(params: ParameterSet, batch, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of the joint loss.

    Runs without dropout on a float64 copy; checks every coordinate of the
    head and relation rows used by the batch and every tail row.
    Relative error uses a ``1e-12`` denominator floor, so saturated models whose
    true gradients sit near round-off report large errors.
    """
    work = params.copy(np.float64)
    triples = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    _, analytic = _joint_batch(work, triples, None)

    def loss() -> float:
        return _joint_batch(work, triples, None, need_grad=False)[0]

    heads = np.unique(triples[:, 0])
    relations = np.unique(triples[:, 1])
    worst = 0.0
    for name, table in work.named_tables().items():
        if name == "tail" or (name == "head_0" and work.aliased):
            rows = np.arange(table.shape[0])
        elif name.startswith("head_"):
            rows = heads
        else:
            rows = relations
        for row in rows:
            for k in range(table.shape[1]):
                saved = table[row, k]
                table[row, k] = saved + epsilon
                up = loss()
                table[row, k] = saved - epsilon
                down = loss()
                table[row, k] = saved
                numeric = (up - down) / (2 * epsilon)
                exact = analytic[name][row, k]
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
                worst = max(worst, err)
    return worst


# -- training loop ----------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    elapsed_seconds: float
    valid_mrr: Optional[float] = None


@dataclass
class TrainResult:
    params: ParameterSet
    log: list[EpochLog] = field(default_factory=list)
    state: Optional[AdamState] = None


class _CsvLog:
    FIELDS = ("epoch", "mean_loss", "elapsed_seconds", "valid_mrr")

    def __init__(self, path):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self.fh = open(self.path, "a", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(self.FIELDS)
            self.fh.flush()

    def write(self, entry: EpochLog) -> None:
        mrr = "" if entry.valid_mrr is None else f"{entry.valid_mrr:.6f}"
        self.writer.writerow([entry.epoch, repr(entry.mean_loss), f"{entry.elapsed_seconds:.3f}", mrr])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def train(
    train_set: TripleSet,
    model_config: ModelConfig,
    config: TrainConfig,
    *,
    params: Optional[ParameterSet] = None,
    valid: Optional[TripleSet] = None,
    filter_index: Optional[FilterIndex] = None,
    valid_every: int = 0,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Shuffled mini-batch Adam over ``train_set`` (expected to be inverse-augmented).

    On divergence the last finite parameters are checkpointed (if a path is
    given) and :class:`DivergenceError` is raised carrying them.
    """
    if not train_set.augmented:
        log.warning("training on a split without reverse triples; head prediction will not be learned")
    if params is None:
        params = init_parameters(model_config)
    triples = train_set.array
    if len(triples) == 0 and config.epochs:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    result = TrainResult(params, [], state)
    csv_log = _CsvLog(log_path) if log_path else None
    start = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(triples))
            total = 0.0
            try:
                for lo in range(0, len(order), config.batch_size):
                    batch = triples[order[lo : lo + config.batch_size]]
                    loss, grads = compute_gradients(params, batch, config, rng)
                    adam_step(params, grads, state, config)
                    total += loss * len(batch)
            except DivergenceError as exc:
                exc.params, exc.epoch = params, epoch
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, params, model_config.seed)
                log.error("diverged in epoch %d: %s", epoch, exc)
                raise
            entry = EpochLog(epoch, total / len(triples), time.perf_counter() - start)
            if valid is not None and valid_every and epoch % valid_every == 0:
                from .evaluation import EvalConfig, evaluate

                report = evaluate(params, valid, filter_index, EvalConfig(mode="filtered" if filter_index else "raw"))
                entry.valid_mrr = report.mrr
            result.log.append(entry)
            if csv_log:
                csv_log.write(entry)
            log.info(
                "epoch %d loss %.6f%s", epoch, entry.mean_loss,
                "" if entry.valid_mrr is None else f" valid_mrr {entry.valid_mrr:.4f}",
            )
            if checkpoint_path and checkpoint_every and epoch % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, model_config.seed)
    finally:
        if csv_log:
            csv_log.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, model_config.seed)
    return result
