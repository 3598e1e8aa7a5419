"""Dense single-head scaled-dot-product attention with exposed intermediates.

Everything here is deliberately plain: dense row-major float64 matrices,
masked logits represented by an exact ``-inf`` sentinel so that masked
attention weights come out as exact zeros, and one head at a time. Batch and
head loops belong to callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateRowError, ShapeError

__all__ = [
    "AttentionInstance",
    "DecodeStep",
    "attention_output",
    "causal_mask",
    "compute_logits",
    "decode_step",
    "run_attention",
    "softmax_rows",
]


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d matrix, got shape {a.shape}")
    return a


def _as_vector(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be a 1-d vector, got shape {a.shape}")
    return a


def causal_mask(q_len: int, s: int, q_offset: int) -> np.ndarray:
    """Boolean mask of shape (q_len, s); True marks entries the query may not see.

    Query row ``i`` sits at absolute position ``q_offset + i`` and attends to
    key columns ``j <= q_offset + i``.
    """
    rows = np.arange(q_len)[:, None] + q_offset
    cols = np.arange(s)[None, :]
    return cols > rows


def compute_logits(
    queries,
    keys,
    scale: float,
    causal: bool = False,
    q_offset: Optional[int] = None,
) -> np.ndarray:
    """Scaled dot-product logits; causally masked entries are exactly ``-inf``."""
    q = _as_matrix(queries, "queries")
    k = _as_matrix(keys, "keys")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(
            f"queries and keys disagree on head dim: {q.shape[1]} vs {k.shape[1]}"
        )
    if scale <= 0:
        raise ShapeError(f"scale must be positive, got {scale}")
    logits = scale * (q @ k.T)
    if causal:
        if q_offset is None:
            q_offset = k.shape[0] - q.shape[0]
        logits[causal_mask(q.shape[0], k.shape[0], q_offset)] = -np.inf
    return logits


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; ``-inf`` maps to an exact 0."""
    z = _as_matrix(logits, "logits")
    row_max = np.max(z, axis=1) if z.shape[1] else np.full(z.shape[0], -np.inf)
    if not np.all(np.isfinite(row_max)):
        raise DegenerateRowError("softmax row without any finite entry")
    e = np.exp(z - row_max[:, None])
    return e / e.sum(axis=1, keepdims=True)


def attention_output(weights, values) -> np.ndarray:
    """Weighted value mixture ``weights @ values``."""
    a = _as_matrix(weights, "weights")
    v = _as_matrix(values, "values")
    if a.shape[1] != v.shape[0]:
        raise ShapeError(
            f"weights have {a.shape[1]} columns but values have {v.shape[0]} rows"
        )
    return a @ v


@dataclass(frozen=True)
class AttentionInstance:
    """One head's full attention state at one moment.

    ``queries`` holds the last ``q_len`` rows of a sequence of ``s`` tokens
    (``q_offset = s - q_len``); ``logits``/``weights``/``outputs`` are the
    matching intermediates. Masked logits are ``-inf`` and masked weights are
    exact zeros.
    """

    queries: np.ndarray   # (q_len, d)
    keys: np.ndarray      # (s, d)
    values: np.ndarray    # (s, d)
    logits: np.ndarray    # (q_len, s)
    weights: np.ndarray   # (q_len, s)
    outputs: np.ndarray   # (q_len, d)
    scale: float
    causal: bool
    q_offset: int

    @property
    def q_len(self) -> int:
        return self.queries.shape[0]

    @property
    def s(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.keys.shape[1]

    def masked(self) -> np.ndarray:
        """Boolean (q_len, s) mask of structurally forbidden entries."""
        if not self.causal:
            return np.zeros((self.q_len, self.s), dtype=bool)
        return causal_mask(self.q_len, self.s, self.q_offset)

    def validate(self, atol: float = 1e-9) -> None:
        """Check the structural invariants; raises ``ShapeError`` on violation."""
        mask = self.masked()
        row_sums = self.weights.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=atol):
            raise ShapeError("attention rows do not sum to 1")
        if np.any(self.weights[mask] != 0.0):
            raise ShapeError("masked attention weights are not exactly zero")
        expect = compute_logits(
            self.queries, self.keys, self.scale, self.causal, self.q_offset
        )
        keep = ~mask
        if not np.allclose(self.logits[keep], expect[keep], atol=1e-9):
            raise ShapeError("logits do not match scale * Q K^T")
        if not np.allclose(self.outputs, self.weights @ self.values, atol=1e-9):
            raise ShapeError("outputs do not match weights @ values")


def run_attention(
    queries,
    keys,
    values,
    scale: Optional[float] = None,
    causal: bool = True,
    q_offset: Optional[int] = None,
) -> AttentionInstance:
    """Compute logits, weights and outputs from raw projections.

    ``scale`` defaults to ``1/sqrt(d)``; ``q_offset`` defaults to aligning the
    queries with the tail of the key sequence.
    """
    q = _as_matrix(queries, "queries")
    k = _as_matrix(keys, "keys")
    v = _as_matrix(values, "values")
    if k.shape != v.shape:
        raise ShapeError(f"keys {k.shape} and values {v.shape} must match")
    if scale is None:
        scale = 1.0 / math.sqrt(k.shape[1])
    if q_offset is None:
        q_offset = k.shape[0] - q.shape[0]
    logits = compute_logits(q, k, scale, causal, q_offset)
    weights = softmax_rows(logits)
    return AttentionInstance(
        queries=q,
        keys=k,
        values=v,
        logits=logits,
        weights=weights,
        outputs=weights @ v,
        scale=scale,
        causal=causal,
        q_offset=q_offset,
    )


@dataclass(frozen=True)
class DecodeStep:
    """Single-row attention state produced by one decode step."""

    query: np.ndarray    # (d,)
    logits: np.ndarray   # (s,)
    weights: np.ndarray  # (s,)
    output: np.ndarray   # (d,)
    step_index: int

    def as_instance(self, cache, scale: float) -> AttentionInstance:
        """View this step as a one-query-row instance over the cache."""
        return AttentionInstance(
            queries=self.query[None, :],
            keys=cache.keys,
            values=cache.values,
            logits=self.logits[None, :],
            weights=self.weights[None, :],
            outputs=self.output[None, :],
            scale=scale,
            causal=True,
            q_offset=len(cache) - 1,
        )


def decode_step(
    cache,
    query,
    key,
    value,
    scale: Optional[float] = None,
    original_pos: Optional[int] = None,
    step_index: Optional[int] = None,
) -> DecodeStep:
    """Append ``(key, value)`` to the cache, then attend over the whole cache.

    The new token attends to itself, so the append happens first. Mutates
    ``cache``; all returned arrays are fresh.
    """
    q = _as_vector(query, "query")
    k = _as_vector(key, "key")
    v = _as_vector(value, "value")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError("query, key and value must share the head dimension")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[0])
    cache.append(k, v, original_pos)
    logits = compute_logits(q[None, :], cache.keys, scale)[0]
    weights = softmax_rows(logits[None, :])[0]
    output = weights @ cache.values
    if step_index is None:
        step_index = len(cache) - 1
    return DecodeStep(
        query=q, logits=logits, weights=weights, output=output, step_index=step_index
    )
