"""Token-saliency scores over a perturbation window of query rows.

Four score families are computed per cached position ``p`` from the windowed
query rows ``i`` (1-based ``w`` through ``q_len``):

* value:   sum_i A[i,p]^2 * ||v_p||^2
* key:     sum_i (A[i,p] * Z[i,p])^2 * ||v_p - o_i||^2
* joint:   value + key + 2 * sum_i A[i,p]^2 * Z[i,p] * (||v_p||^2 - v_p . o_i)
* attn_l1: sum_i |A[i,p]|  (the attention-only baseline family)

Value, key and attn_l1 are non-negative by construction. The joint cross
term is signed; the joint total is algebraically a windowed sum of squared
norms, so anything below zero is cancellation noise, which is ranked as-is
unless callers ask for clamping. All arithmetic is float64.

Causally masked entries contribute nothing: their weights are exact zeros
and the ``-inf`` logits are excluded before any product is formed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionInstance
from .errors import (
    AccumulatorError,
    AggregationError,
    DegenerateRowError,
    OrderingError,
    ShapeError,
    WindowError,
)

__all__ = [
    "JointParts",
    "SaliencyVector",
    "ScoreAccumulator",
    "Scorer",
    "accumulate",
    "aggregate_group",
    "reconstruct_logits",
    "score_attn_l1",
    "score_joint",
    "score_joint_parts",
    "score_key",
    "score_value",
    "scorer_fn",
]


class Scorer(str, enum.Enum):
    """Which score family produced a saliency vector."""

    VALUE = "value"
    KEY = "key"
    JOINT = "joint"
    ATTN_L1 = "attn_l1"


@dataclass(frozen=True)
class SaliencyVector:
    """Per-cached-position scores for one head.

    ``window_start`` is the 1-based first query row of the perturbation
    window that produced the scores.
    """

    scores: np.ndarray
    scorer: Scorer
    window_start: int

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        if self.scores.ndim != 1:
            raise ShapeError(f"scores must be 1-d, got shape {self.scores.shape}")
        if self.window_start < 1:
            raise WindowError(f"window_start must be >= 1, got {self.window_start}")
        if self.s and self.window_start > self.s:
            raise WindowError(
                f"window_start {self.window_start} beyond cache length {self.s}"
            )

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def s(self) -> int:
        return self.scores.shape[0]


def _check_window(inst: AttentionInstance, w: int) -> int:
    if not 1 <= w <= inst.q_len:
        raise WindowError(
            f"window start {w} outside [1, {inst.q_len}] for a {inst.q_len}-row instance"
        )
    return w - 1


def _windowed(inst: AttentionInstance, w: int):
    """Weights, logits and outputs restricted to query rows w..q_len (1-based)."""
    lo = _check_window(inst, w)
    a = inst.weights[lo:]
    z = inst.logits[lo:]
    o = inst.outputs[lo:]
    masked = np.isneginf(z)
    return a, np.where(masked, 0.0, z), o, masked


def score_value(inst: AttentionInstance, w: int) -> SaliencyVector:
    """Squared attention column mass times squared value norm.

    Exactly equals the zero-row proxy loss for value pruning: the objective
    is quadratic in the value matrix, so the second-order form is not an
    approximation here.
    """
    a, _, _, _ = _windowed(inst, w)
    col_sq = np.sum(a * a, axis=0)
    v_sq = np.sum(inst.values * inst.values, axis=1)
    return SaliencyVector(col_sq * v_sq, Scorer.VALUE, w)


def score_key(inst: AttentionInstance, w: int) -> SaliencyVector:
    """Logit-weighted attention mass times value/output deviation."""
    a, z, o, masked = _windowed(inst, w)
    az_sq = np.where(masked, 0.0, (a * z) ** 2)
    dev = _sq_deviation(inst.values, o)
    return SaliencyVector(np.sum(az_sq * dev, axis=0), Scorer.KEY, w)


@dataclass(frozen=True)
class JointParts:
    """The three summands of the joint score, exposed for testing."""

    cross: np.ndarray
    value: np.ndarray
    key: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.cross + self.value + self.key


def score_joint_parts(inst: AttentionInstance, w: int) -> JointParts:
    """Cross, value and key summands of the joint score, separately."""
    a, z, o, masked = _windowed(inst, w)
    v = inst.values
    v_sq = np.sum(v * v, axis=1)
    vo = o @ v.T                                  # (rows, s): v_p . o_i
    a_sq_z = np.where(masked, 0.0, a * a * z)
    cross = 2.0 * np.sum(a_sq_z * (v_sq[None, :] - vo), axis=0)
    return JointParts(
        cross=cross,
        value=score_value(inst, w).scores,
        key=score_key(inst, w).scores,
    )


def score_joint(
    inst: AttentionInstance, w: int, clamp_negative: bool = False
) -> SaliencyVector:
    """Combined key/value pruning estimate; the cross term keeps its sign.

    The second-order estimate of a squared error can undershoot zero, so
    negative totals are meaningful and ranked as-is by default.
    ``clamp_negative=True`` floors them at zero instead.
    """
    total = score_joint_parts(inst, w).total
    if clamp_negative:
        total = np.maximum(total, 0.0)
    return SaliencyVector(total, Scorer.JOINT, w)


def score_attn_l1(inst: AttentionInstance, w: int) -> SaliencyVector:
    """Column L1 mass of the windowed attention matrix.

    ``w=1`` accumulates over the whole history, ``w=q_len`` reads only the
    newest query row, and intermediate ``w`` gives the short-window variant.
    """
    a, _, _, _ = _windowed(inst, w)
    return SaliencyVector(np.sum(np.abs(a), axis=0), Scorer.ATTN_L1, w)


_SCORE_FNS = {
    Scorer.VALUE: score_value,
    Scorer.KEY: score_key,
    Scorer.JOINT: score_joint,
    Scorer.ATTN_L1: score_attn_l1,
}


def scorer_fn(scorer: Scorer):
    """The scoring function for a ``Scorer`` member."""
    return _SCORE_FNS[Scorer(scorer)]


def _sq_deviation(values: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """(rows, s) matrix of ||v_p - o_i||^2, clamped at zero."""
    v_sq = np.sum(values * values, axis=1)
    o_sq = np.sum(outputs * outputs, axis=1)
    dev = v_sq[None, :] + o_sq[:, None] - 2.0 * (outputs @ values.T)
    return np.maximum(dev, 0.0)


def reconstruct_logits(weights) -> np.ndarray:
    """Recover logits from attention weights up to the softmax shift.

    Traces that carry only attention weights lose the per-row additive
    constant; this reconstruction pins it by placing the maximum unmasked
    logit of every row at exactly 0. Zero weights map back to ``-inf``.
    """
    a = np.asarray(weights, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"weights must be 2-d, got shape {a.shape}")
    if np.any(a < 0.0):
        raise ShapeError("attention weights must be non-negative")
    with np.errstate(divide="ignore"):
        logs = np.log(a)
    row_max = np.max(logs, axis=1, keepdims=True) if a.shape[1] else None
    if row_max is None or not np.all(np.isfinite(row_max)):
        raise DegenerateRowError("weight row with no positive entry")
    return logs - row_max


def aggregate_group(
    per_query_head: Sequence[SaliencyVector], group_size: int
) -> SaliencyVector:
    """Elementwise sum across the query heads sharing one KV head."""
    if len(per_query_head) != group_size:
        raise AggregationError(
            f"expected {group_size} score vectors, got {len(per_query_head)}"
        )
    first = per_query_head[0]
    for sal in per_query_head[1:]:
        if len(sal) != len(first) or sal.scorer != first.scorer:
            raise AggregationError("score vectors disagree on length or scorer")
        if sal.window_start != first.window_start:
            raise AggregationError("score vectors disagree on window start")
    total = np.sum([sal.scores for sal in per_query_head], axis=0)
    return SaliencyVector(total, first.scorer, first.window_start)


class ScoreAccumulator:
    """Running per-token score totals across decode steps.

    Totals are keyed by original token position; positions dropped by an
    eviction are removed permanently. New positions must be registered with
    :meth:`track` before they can be scored.
    """

    def __init__(self):
        self._positions: list[int] = []
        self._totals: list[float] = []
        self.steps_seen = 0

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(self._positions)

    @property
    def running(self) -> np.ndarray:
        return np.array(self._totals, dtype=np.float64)

    def track(self, original_pos: int) -> None:
        """Register a newly cached position with a zero running total."""
        if self._positions and original_pos <= self._positions[-1]:
            raise OrderingError(
                f"position {original_pos} is not after {self._positions[-1]}"
            )
        self._positions.append(int(original_pos))
        self._totals.append(0.0)

    def __len__(self) -> int:
        return len(self._positions)


def accumulate(
    acc: ScoreAccumulator, fresh: SaliencyVector, kept_positions: Iterable[int]
) -> ScoreAccumulator:
    """Add one step's scores, then drop everything not in ``kept_positions``.

    ``fresh`` must cover exactly the positions the accumulator tracks, in
    order. Mutates and returns ``acc``.
    """
    if len(fresh) != len(acc):
        raise AccumulatorError(
            f"fresh scores cover {len(fresh)} positions, accumulator tracks {len(acc)}"
        )
    kept = set(int(p) for p in kept_positions)
    tracked = set(acc._positions)
    if not kept <= tracked:
        raise AccumulatorError(f"kept positions {sorted(kept - tracked)} are not cached")
    updated = [t + s for t, s in zip(acc._totals, fresh.scores)]
    keep_idx = [i for i, p in enumerate(acc._positions) if p in kept]
    acc._positions = [acc._positions[i] for i in keep_idx]
    acc._totals = [updated[i] for i in keep_idx]
    acc.steps_seen += 1
    return acc
