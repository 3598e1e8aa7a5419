"""Brute-force ground truth for eviction scoring.

Two pruning semantics are first-class and deliberately distinct:

* ``ZERO_ROW`` replaces the selected key and/or value row with the zero
  vector. A zeroed key still participates in the softmax with logit 0; this
  is the constraint form the closed-form scores approximate, and it can give
  a low-attention token *more* weight than it had.
* ``REMOVE_ROW`` deletes the token outright: its softmax slot disappears and
  the remaining weights renormalize, which is what deployment eviction
  actually does. Removal is the same operation for every pruning kind, since
  a token without a softmax slot contributes neither key nor value.

Conflating the two would make the finite-difference checks meaningless, so
every error here states which one it used. All computation is float64; the
proxy error is always measured over the perturbation window's query rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionInstance, compute_logits, softmax_rows
from .errors import MetricError, PositionError, SemanticsError, ShapeError, WindowError
from .saliency import SaliencyVector, score_joint, score_key, score_value

__all__ = [
    "OracleReport",
    "PruneKind",
    "PruneMode",
    "PruneSemantics",
    "exact_eviction_error",
    "fit_order",
    "semantics_gap_summary",
    "taylor_residual",
    "topk_recall",
    "topk_recall_reserved",
    "true_eviction_error",
]


class PruneKind(str, enum.Enum):
    VALUE = "value"
    KEY = "key"
    JOINT = "joint"


class PruneSemantics(str, enum.Enum):
    ZERO_ROW = "zero_row"
    REMOVE_ROW = "remove_row"


@dataclass(frozen=True)
class PruneMode:
    """Which rows get pruned, and whether they are zeroed or deleted."""

    kind: PruneKind
    semantics: PruneSemantics = PruneSemantics.ZERO_ROW


def _check_position(inst: AttentionInstance, p: int) -> int:
    if not 0 <= p < inst.s:
        raise PositionError(f"position {p} out of range for cache length {inst.s}")
    return int(p)


def _check_window(inst: AttentionInstance, w: int) -> int:
    if not 1 <= w <= inst.q_len:
        raise WindowError(
            f"window start {w} outside [1, {inst.q_len}] for a {inst.q_len}-row instance"
        )
    return int(w)


def _windowed_sq_error(outputs_hat: np.ndarray, inst: AttentionInstance, w: int) -> float:
    diff = outputs_hat[w - 1 :] - inst.outputs[w - 1 :]
    return float(np.sum(diff * diff))


def _softmax_rows_allow_empty(logits: np.ndarray) -> np.ndarray:
    """Softmax where a fully masked row yields all-zero weights.

    Removing a token can leave an early causal row with nothing to attend
    to; its perturbed output is then the zero vector by convention.
    """
    if logits.shape[1] == 0:
        return np.zeros_like(logits)
    row_max = np.max(logits, axis=1, keepdims=True)
    finite = np.isfinite(row_max[:, 0])
    safe_max = np.where(finite[:, None], row_max, 0.0)
    e = np.where(np.isneginf(logits), 0.0, np.exp(logits - safe_max))
    sums = e.sum(axis=1, keepdims=True)
    sums[sums == 0.0] = 1.0
    return e / sums


def _zero_row_outputs(
    inst: AttentionInstance, p: int, kind: PruneKind, fraction: float
) -> np.ndarray:
    """Recompute outputs with the targeted rows scaled down by ``fraction``.

    ``fraction=1`` zeroes the rows exactly (IEEE subtraction of the row from
    itself); smaller fractions drive the finite-difference checks.
    """
    values_hat = inst.values.copy()
    if kind in (PruneKind.VALUE, PruneKind.JOINT):
        values_hat[p] = values_hat[p] - fraction * inst.values[p]
    if kind in (PruneKind.KEY, PruneKind.JOINT):
        keys_hat = inst.keys.copy()
        keys_hat[p] = keys_hat[p] - fraction * inst.keys[p]
        logits_hat = compute_logits(
            inst.queries, keys_hat, inst.scale, inst.causal, inst.q_offset
        )
        weights_hat = softmax_rows(logits_hat)
    else:
        weights_hat = inst.weights
    return weights_hat @ values_hat


def _remove_row_outputs(inst: AttentionInstance, p: int) -> np.ndarray:
    keep = np.arange(inst.s) != p
    weights_hat = _softmax_rows_allow_empty(inst.logits[:, keep])
    return weights_hat @ inst.values[keep]


def exact_eviction_error(
    inst: AttentionInstance, p: int, mode: PruneMode, w: int = 1
) -> float:
    """Recompute attention under ``mode`` and return the windowed squared error.

    This is the measurable proxy objective: the squared Frobenius norm of the
    change in historical attention outputs over query rows ``w..q_len``.
    """
    p = _check_position(inst, p)
    w = _check_window(inst, w)
    if mode.semantics is PruneSemantics.ZERO_ROW:
        outputs_hat = _zero_row_outputs(inst, p, mode.kind, 1.0)
    else:
        outputs_hat = _remove_row_outputs(inst, p)
    return _windowed_sq_error(outputs_hat, inst, w)


def true_eviction_error(
    prefill: AttentionInstance, next_query, p: int
) -> float:
    """Squared change in the next decode step's output when token ``p`` is evicted.

    The decode query attends over the full cache (it arrives after every
    cached token), so no causal masking applies here. Removal semantics.
    """
    p = _check_position(prefill, p)
    q = np.asarray(next_query, dtype=np.float64)
    if q.shape != (prefill.d,):
        raise ShapeError(f"next_query must have shape ({prefill.d},), got {q.shape}")
    logits = prefill.scale * (prefill.keys @ q)
    weights = softmax_rows(logits[None, :])[0]
    full = weights @ prefill.values
    keep = np.arange(prefill.s) != p
    if not np.any(keep):
        evicted = np.zeros_like(full)
    else:
        weights_minus = softmax_rows(logits[keep][None, :])[0]
        evicted = weights_minus @ prefill.values[keep]
    diff = full - evicted
    return float(diff @ diff)


_CLOSED_FORM = {
    PruneKind.VALUE: score_value,
    PruneKind.KEY: score_key,
    PruneKind.JOINT: score_joint,
}


def taylor_residual(
    inst: AttentionInstance,
    p: int,
    mode: PruneMode,
    w: int,
    eps_list: Sequence[float],
) -> list[tuple[float, float]]:
    """Finite-difference check of the closed-form scores.

    Scales the targeted row(s) down by each ``eps`` and returns
    ``(eps, L(eps) / eps^2 / closed_form_score)`` pairs. The ratios approach
    1 as ``eps -> 0``; for value pruning they equal 1 for any ``eps`` because
    that objective is exactly quadratic.
    """
    if mode.semantics is not PruneSemantics.ZERO_ROW:
        raise SemanticsError("finite-difference checks apply to zero-row semantics only")
    p = _check_position(inst, p)
    w = _check_window(inst, w)
    closed = float(_CLOSED_FORM[mode.kind](inst, w).scores[p])
    if closed <= 0.0:
        raise MetricError(
            f"closed-form {mode.kind.value} score is {closed} at p={p}; ratio undefined"
        )
    out = []
    for eps in eps_list:
        eps = float(eps)
        if eps <= 0.0:
            raise MetricError(f"eps must be positive, got {eps}")
        loss = _windowed_sq_error(_zero_row_outputs(inst, p, mode.kind, eps), inst, w)
        out.append((eps, loss / (eps * eps) / closed))
    return out


def fit_order(pairs: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of log(loss) against log(eps).

    ``pairs`` holds (eps, loss) samples; a slope near 2 confirms that the
    first-order terms vanish at the expansion point.
    """
    if len(pairs) < 2:
        raise MetricError("need at least two (eps, loss) samples to fit an order")
    x = np.log([e for e, _ in pairs])
    y = np.log([l for _, l in pairs])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def _scores_of(x) -> np.ndarray:
    return x.scores if isinstance(x, SaliencyVector) else np.asarray(x, dtype=np.float64)


def topk_recall(reference, candidate, k: int) -> float:
    """Fraction of the reference top-k also present in the candidate top-k.

    Both rankings use the policy module's deterministic tie-break (higher
    score first, ties to the more recent position). Accepts ``SaliencyVector``
    or plain arrays, so the true-error oracle can serve as reference.
    """
    return topk_recall_reserved(reference, candidate, k, reserve=0)


def topk_recall_reserved(reference, candidate, k: int, reserve: int = 0) -> float:
    """Recall where the candidate unconditionally keeps the last ``reserve`` tokens.

    The reference top-k stays pure; the candidate spends ``reserve`` of its k
    slots on the most recent positions and ranks only the remainder. This is
    the recent-window-reservation analysis knob.
    """
    from .policy import rank_positions

    ref = _scores_of(reference)
    cand = _scores_of(candidate)
    if ref.shape != cand.shape:
        raise MetricError(
            f"length mismatch: reference {ref.shape} vs candidate {cand.shape}"
        )
    s = ref.shape[0]
    if not 1 <= k <= s:
        raise MetricError(f"k={k} outside [1, {s}]")
    if not 0 <= reserve <= k:
        raise MetricError(f"reserve={reserve} outside [0, k={k}]")
    top_ref = set(rank_positions(ref)[:k].tolist())
    forced = set(range(s - reserve, s))
    scored = rank_positions(cand[: s - reserve])[: k - reserve] if reserve < k else []
    top_cand = forced | set(int(i) for i in scored)
    return len(top_ref & top_cand) / k


@dataclass
class OracleReport:
    """Aggregated oracle results for a batch of instances.

    ``recall_at_k`` holds mean recall per scorer for the primary
    configuration; ``sweeps`` carries the full (window, reserve, k) grid.
    ``semantics_gap`` summarizes |remove_row - zero_row| so the proxy
    approximation can be quantified rather than assumed.
    """

    exact_errors: list = field(default_factory=list)    # instances x s
    true_errors: list = field(default_factory=list)     # instances x s
    recall_at_k: dict = field(default_factory=dict)     # scorer -> mean recall
    taylor_ratios: list = field(default_factory=list)   # (eps, ratio) pairs
    semantics_gap: dict = field(default_factory=dict)   # summary statistics
    sweeps: list = field(default_factory=list)          # per-configuration blocks

    def to_dict(self) -> dict:
        return {
            "exact_errors": [[float(x) for x in row] for row in self.exact_errors],
            "true_errors": [[float(x) for x in row] for row in self.true_errors],
            "recall_at_k": {k: float(v) for k, v in sorted(self.recall_at_k.items())},
            "taylor_ratios": [[float(e), float(r)] for e, r in self.taylor_ratios],
            "semantics_gap": {k: float(v) for k, v in sorted(self.semantics_gap.items())},
            "sweeps": self.sweeps,
        }


def semantics_gap_summary(gaps: Iterable[float]) -> dict:
    """Mean/median/max summary of |remove_row - zero_row| error gaps."""
    arr = np.asarray(list(gaps), dtype=np.float64)
    if arr.size == 0:
        return {"count": 0.0, "mean": 0.0, "median": 0.0, "max": 0.0}
    return {
        "count": float(arr.size),
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "max": float(arr.max()),
    }
