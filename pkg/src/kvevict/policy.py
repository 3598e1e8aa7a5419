"""Eviction decisions: budget, sinks, recent window, pooling, presets.

Selection is deterministic: positions are ranked by score descending with
ties broken toward the *larger* (more recent) position. Causal accumulation
structurally favors early tokens, so breaking ties toward recency leans
against that bias and makes every decision reproducible.

``num_coming`` reserves headroom for tokens that will arrive right after an
eviction: the standalone selector keeps ``budget - num_coming`` tokens and
protects only the final ``recent_window - num_coming`` positions. The decode
loop evicts after the step's token has already been appended, so the
headroom slot is the one that token consumed: the loop lands on exactly
``budget`` retained while protecting the same ``recent_window - num_coming``
tail.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .attention import decode_step
from .cache import KvCache
from .errors import ConfigError, ShapeError
from .saliency import (
    SaliencyVector,
    ScoreAccumulator,
    Scorer,
    accumulate,
    scorer_fn,
)

__all__ = [
    "DecodeRecord",
    "EvictionDecision",
    "PolicyConfig",
    "PRESET_NAMES",
    "decode_evict_loop",
    "pool_scores",
    "prefill_decision",
    "preset",
    "rank_positions",
    "select_retained",
]


def rank_positions(scores) -> np.ndarray:
    """Positions ordered best-first: score descending, ties to larger position."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"scores must be 1-d, got shape {s.shape}")
    # lexsort uses the last key as primary: -score ascending == score
    # descending, then -position ascending == position descending.
    return np.lexsort((-np.arange(s.shape[0]), -s))


@dataclass(frozen=True)
class PolicyConfig:
    """Everything needed to turn a score vector into an eviction decision."""

    budget: int
    sink_count: int = 0
    recent_window: int = 0
    window_start: int = 1
    pool_kernel: int = 1
    pool_stride: int = 1
    scorer: Scorer = Scorer.ATTN_L1
    num_coming: int = 0

    def validate(self) -> None:
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.sink_count < 0 or self.recent_window < 0 or self.num_coming < 0:
            raise ConfigError("sink_count, recent_window and num_coming must be >= 0")
        if self.sink_count + self.recent_window >= self.budget:
            raise ConfigError(
                f"sink_count + recent_window ({self.sink_count}+{self.recent_window}) "
                f"must stay below budget {self.budget}"
            )
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigError(f"pool_kernel must be odd and >= 1, got {self.pool_kernel}")
        if self.pool_stride < 1:
            raise ConfigError(f"pool_stride must be >= 1, got {self.pool_stride}")
        if self.window_start < 1:
            raise ConfigError(f"window_start must be >= 1, got {self.window_start}")
        Scorer(self.scorer)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "sink_count": self.sink_count,
            "recent_window": self.recent_window,
            "window_start": self.window_start,
            "pool_kernel": self.pool_kernel,
            "pool_stride": self.pool_stride,
            "scorer": Scorer(self.scorer).value,
            "num_coming": self.num_coming,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown policy config keys: {sorted(extra)}")
        kwargs = dict(data)
        if "scorer" in kwargs:
            try:
                kwargs["scorer"] = Scorer(kwargs["scorer"])
            except ValueError as exc:
                raise ConfigError(f"unknown scorer {kwargs['scorer']!r}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class EvictionDecision:
    """Partition of the cached slots into retained and evicted, both sorted."""

    retained: tuple[int, ...]
    evicted: tuple[int, ...]
    scores_used: SaliencyVector


def pool_scores(scores: SaliencyVector, kernel: int, stride: int = 1) -> SaliencyVector:
    """Sliding-window maximum with same-length output.

    Edge positions use the truncated window; ``kernel=1`` is the identity.
    With ``stride > 1`` the window anchors snap to multiples of the stride
    and every position reads its anchor's window maximum.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"pool kernel must be odd and >= 1, got {kernel}")
    if stride < 1:
        raise ConfigError(f"pool stride must be >= 1, got {stride}")
    raw = scores.scores
    if kernel == 1 and stride == 1:
        return SaliencyVector(raw.copy(), scores.scorer, scores.window_start)
    n = raw.shape[0]
    half = kernel // 2
    pooled = np.empty(n)
    for i in range(n):
        anchor = (i // stride) * stride
        lo = max(0, anchor - half)
        hi = min(n, anchor + half + 1)
        pooled[i] = raw[lo:hi].max()
    return SaliencyVector(pooled, scores.scorer, scores.window_start)


def _carve(
    raw: np.ndarray,
    cache_len: int,
    sink_count: int,
    cutoff: int,
    hh_count: int,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Shared carve-out: sinks + top heavy hitters + recent tail."""
    cutoff = min(max(cutoff, 0), cache_len)
    sink_hi = min(sink_count, cutoff)
    pool = np.arange(sink_hi, cutoff)
    hh_count = max(0, min(hh_count, pool.shape[0]))
    order = np.lexsort((-pool, -raw[pool])) if pool.size else np.empty(0, dtype=int)
    heavy = pool[order][:hh_count]
    keep = np.zeros(cache_len, dtype=bool)
    keep[:sink_hi] = True
    keep[heavy] = True
    keep[cutoff:] = True
    retained = tuple(int(i) for i in np.flatnonzero(keep))
    evicted = tuple(int(i) for i in np.flatnonzero(~keep))
    return retained, evicted


def select_retained(
    scores: SaliencyVector, cache_len: int, cfg: PolicyConfig
) -> EvictionDecision:
    """Pick the retained slot set for one eviction.

    Positions below ``sink_count`` and at or above
    ``cache_len - recent_window + num_coming`` are kept unconditionally; the
    top ``budget - recent_window - sink_count`` scorers among the rest fill
    the heavy-hitter quota. A budget at or above the cache length is a no-op.
    """
    cfg.validate()
    if len(scores) != cache_len:
        raise ShapeError(
            f"scores cover {len(scores)} positions but cache length is {cache_len}"
        )
    if cfg.budget >= cache_len:
        return EvictionDecision(tuple(range(cache_len)), (), scores)
    cutoff = cache_len - cfg.recent_window + cfg.num_coming
    hh_count = cfg.budget - cfg.recent_window - cfg.sink_count
    retained, evicted = _carve(scores.scores, cache_len, cfg.sink_count, cutoff, hh_count)
    return EvictionDecision(retained, evicted, scores)


def _loop_decision(
    scores: SaliencyVector, cache_len: int, cfg: PolicyConfig
) -> EvictionDecision:
    """Eviction inside the decode loop: lands on exactly ``budget`` retained.

    The step's token is already cached when this runs, so the ``num_coming``
    headroom only shrinks the protected recent tail, not the total kept.
    """
    protected = max(cfg.recent_window - cfg.num_coming, 0)
    cutoff = cache_len - protected
    hh_count = cfg.budget - cfg.sink_count - protected
    retained, evicted = _carve(scores.scores, cache_len, cfg.sink_count, cutoff, hh_count)
    return EvictionDecision(retained, evicted, scores)


PRESET_NAMES = ("h2o", "tova", "snapkv", "value", "key", "joint")

# Observation-window rows used by the short-window presets: 16 rows at desk
# scale, 5% of the prompt once contexts grow past 320 tokens.
_OBS_ROWS = 16
_DECODE_SINKS = 4


def _obs_rows(context: int) -> int:
    return min(max(1, context), max(_OBS_ROWS, context // 20))


def preset(
    name: str,
    context: int,
    budget: Optional[int] = None,
    phase: str = "prefill",
) -> PolicyConfig:
    """Named eviction configurations.

    ``h2o``/``tova``/``snapkv`` are the attention-baseline setups; ``value``,
    ``key`` and ``joint`` reuse the h2o eviction strategy with the scorer
    swapped for the corresponding output-aware score. ``context`` is the
    cache length the scores will cover. Prefill presets evict once with no
    headroom; decode presets keep 4 sink tokens and one slot of headroom for
    the next token.
    """
    key = str(name).strip().lower().replace("-", "_")
    aliases = {"obc_value": "value", "obc_key": "key", "obc_joint": "joint"}
    key = aliases.get(key, key)
    if key not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    if phase not in ("prefill", "decode"):
        raise ConfigError(f"phase must be 'prefill' or 'decode', got {phase!r}")
    if context < 1:
        raise ConfigError(f"context must be >= 1, got {context}")
    if budget is None:
        budget = max(2, context // 4)
    if budget < 2:
        raise ConfigError(f"budget must be >= 2, got {budget}")

    scorer = {
        "h2o": Scorer.ATTN_L1,
        "tova": Scorer.ATTN_L1,
        "snapkv": Scorer.ATTN_L1,
        "value": Scorer.VALUE,
        "key": Scorer.KEY,
        "joint": Scorer.JOINT,
    }[key]

    if phase == "decode":
        sinks = min(_DECODE_SINKS, max(budget - 2, 0))
        recent = 0 if key == "tova" else min(budget // 2, budget - sinks - 1)
        return PolicyConfig(
            budget=budget,
            sink_count=sinks,
            recent_window=recent,
            window_start=1,
            pool_kernel=7 if key == "snapkv" else 1,
            pool_stride=1,
            scorer=scorer,
            num_coming=1,
        )

    rows = _obs_rows(context)
    short_w = max(1, context - rows + 1)
    recent = min(rows, budget // 2)
    if key == "tova":
        window_start, recent, kernel = context, 0, 1
    elif key == "h2o":
        window_start, kernel = short_w, 1
    elif key == "snapkv":
        window_start, kernel = short_w, 7
    else:  # output-aware scorers ride the h2o strategy
        window_start, kernel = short_w, 1
    return PolicyConfig(
        budget=budget,
        sink_count=0,
        recent_window=recent,
        window_start=window_start,
        pool_kernel=kernel,
        pool_stride=1,
        scorer=scorer,
        num_coming=0,
    )


def prefill_decision(inst, cfg: PolicyConfig) -> EvictionDecision:
    """One-shot prefill eviction: score at the config's window, pool, select.

    Pooling runs before the sink/recent carve-outs, so pooled scores are
    what the heavy-hitter competition sees.
    """
    cfg.validate()
    sal = scorer_fn(cfg.scorer)(inst, cfg.window_start)
    pooled = pool_scores(sal, cfg.pool_kernel, cfg.pool_stride)
    return select_retained(pooled, inst.s, cfg)


@dataclass(frozen=True)
class DecodeRecord:
    """Per-step outcome of the decode eviction loop.

    ``cache_positions`` reflects the cache after any eviction this step;
    ``evicted_positions`` are original token indices, not slots.
    """

    step_index: int
    output: np.ndarray
    cache_positions: tuple[int, ...]
    decision: Optional[EvictionDecision]
    evicted_positions: tuple[int, ...] = ()


def decode_evict_loop(
    stream: Iterable[tuple],
    cfg: PolicyConfig,
    acc: Optional[ScoreAccumulator] = None,
) -> list[DecodeRecord]:
    """Run per-step scoring, accumulation and eviction over a decode stream.

    ``stream`` yields ``(query, key, value)`` per step. Each step appends the
    token, scores the newest query row, folds the fresh scores into the
    accumulator, and once the cache length exceeds the budget evicts back
    down to exactly the budget using the accumulated totals (pooled first
    when the config asks for it).
    """
    cfg.validate()
    if acc is None:
        acc = ScoreAccumulator()
    score = scorer_fn(cfg.scorer)
    cache: Optional[KvCache] = None
    records: list[DecodeRecord] = []
    for t, (q, k, v) in enumerate(stream):
        if cache is None:
            cache = KvCache(np.asarray(q, dtype=np.float64).shape[0])
        step = decode_step(cache, q, k, v, original_pos=t, step_index=t)
        acc.track(t)
        inst = step.as_instance(cache, scale=1.0 / np.sqrt(cache.d))
        fresh = score(inst, 1)
        totals = acc.running + fresh.scores
        decision = None
        evicted_positions: tuple[int, ...] = ()
        if len(cache) > cfg.budget:
            sal = SaliencyVector(totals, cfg.scorer, 1)
            pooled = pool_scores(sal, cfg.pool_kernel, cfg.pool_stride)
            decision = _loop_decision(pooled, len(cache), cfg)
            kept = [cache.positions[i] for i in decision.retained]
            evicted_positions = tuple(cache.positions[i] for i in decision.evicted)
        else:
            kept = list(cache.positions)
        accumulate(acc, fresh, kept)
        if decision is not None:
            cache.apply_eviction(decision)
        records.append(
            DecodeRecord(
                step_index=t,
                output=step.output,
                cache_positions=cache.positions,
                decision=decision,
                evicted_positions=evicted_positions,
            )
        )
    return records
