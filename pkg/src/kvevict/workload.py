"""Synthetic attention workloads and the binary trace container.

All generators are pure functions of their seed, driven by NumPy's
counter-based Philox bit generator, so every workload is reproducible from
its spec alone. Draw order is part of the contract and documented per
generator.

Trace container layout (version 1, all integers and floats little-endian):

    bytes 0..7    magic ``b"KVTRACE1"``
    bytes 8..11   uint32 byte length of the JSON header
    next N bytes  UTF-8 JSON header (sorted keys)
    then, per layer: queries, keys, values blobs of raw IEEE-754 floats in
    header-declared precision, each laid out head-major then row-major:
    queries (num_q_heads, T, d), keys/values (num_kv_heads, T, d) with
    ``T = prompt_len + decode_len``.

The payload must end exactly where the header says it does; a short file is
a truncation error and trailing bytes are a shape error.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionInstance, run_attention
from .errors import (
    ConfigError,
    ShapeError,
    TraceMagicError,
    TraceShapeError,
    TraceTruncatedError,
    TraceVersionError,
)

__all__ = [
    "MAGIC",
    "NeedleSpec",
    "TraceHeader",
    "TraceTensors",
    "TRACE_VERSION",
    "atomic_write_bytes",
    "gen_decode_stream",
    "gen_needle",
    "gen_random",
    "gen_trace_tensors",
    "read_trace",
    "rng",
    "write_trace",
]

MAGIC = b"KVTRACE1"
TRACE_VERSION = 1

_PRECISIONS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def rng(seed: int) -> np.random.Generator:
    """Philox-backed generator; the package-wide reproducibility anchor."""
    return np.random.Generator(np.random.Philox(seed))


def gen_random(s: int, d: int, q_len: int, seed: int) -> AttentionInstance:
    """Causal instance with i.i.d. standard-normal projections.

    Draw order: queries (q_len, d), then keys (s, d), then values (s, d),
    each filled row-major.
    """
    if s < 1 or d < 1 or not 1 <= q_len <= s:
        raise ShapeError(f"invalid dimensions s={s}, d={d}, q_len={q_len}")
    g = rng(seed)
    queries = g.standard_normal((q_len, d))
    keys = g.standard_normal((s, d))
    values = g.standard_normal((s, d))
    return run_attention(queries, keys, values)


# Needle-construction constants, frozen after calibration runs: the planted
# token must be the true-error argmax in >= 95% of seeds while leaving the
# rest of the task non-trivial for attention-only scorers. Background value
# norms are log-normal so that token impact is not a function of attention
# alone.
_QUESTION_ROWS = 16
_RECENCY_SPAN = 4
_NEEDLE_PULL = 2.0
_RECENCY_PULL = 1.5
_DEC_NEEDLE_PULL = 4.0
_DEC_RECENCY_PULL = 2.5
_DEC_NOISE = 0.25
_VALUE_NORM_SPREAD = 0.75


@dataclass(frozen=True)
class NeedleSpec:
    """Toy passkey-retrieval workload: one planted high-impact token.

    The needle key is a unit direction scaled by ``signal_gain``; background
    keys and values are Gaussian at ``noise_scale``. The trailing question
    rows and the next decode query lean toward the needle direction (plus a
    mild recency component), so the first decode step attends dominantly to
    the planted position.
    """

    s: int = 64
    d: int = 32
    needle_pos: int = 24
    signal_gain: float = 6.0
    noise_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.needle_pos < self.s:
            raise ConfigError(
                f"needle_pos {self.needle_pos} outside [0, {self.s})"
            )
        if self.signal_gain <= 0 or self.noise_scale < 0:
            raise ConfigError("signal_gain must be > 0 and noise_scale >= 0")

    @classmethod
    def default(cls, seed: int, s: int = 64, d: int = 32) -> "NeedleSpec":
        """Per-seed spec with the needle planted away from sinks and recents."""
        lo, hi = 4, max(5, s - 12)
        pos = int(rng(seed).integers(lo, hi))
        return cls(s=s, d=d, needle_pos=pos, seed=seed)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def gen_needle(spec: NeedleSpec) -> tuple[AttentionInstance, np.ndarray]:
    """Build the needle instance plus the first decode query.

    Draw order: needle key direction (d), needle value direction (d),
    background keys (s, d), background values (s, d), per-token value
    log-norm factors (s), prefill queries (s, d), decode-query noise (d).
    """
    g = rng(spec.seed)
    u_key = _unit(g.standard_normal(spec.d))
    u_val = _unit(g.standard_normal(spec.d))
    keys = spec.noise_scale * g.standard_normal((spec.s, spec.d))
    values = spec.noise_scale * g.standard_normal((spec.s, spec.d))
    values *= np.exp(g.normal(0.0, _VALUE_NORM_SPREAD, spec.s))[:, None]
    keys[spec.needle_pos] = spec.signal_gain * u_key
    values[spec.needle_pos] = spec.signal_gain * u_val

    queries = g.standard_normal((spec.s, spec.d))
    first_question = max(0, spec.s - _QUESTION_ROWS)
    for i in range(first_question, spec.s):
        queries[i] += _NEEDLE_PULL * u_key
        if i > 0:
            lo = max(0, i - _RECENCY_SPAN)
            queries[i] += _RECENCY_PULL * _unit(keys[lo:i].mean(axis=0))

    recent_dir = _unit(keys[max(0, spec.s - _RECENCY_SPAN) :].mean(axis=0))
    next_query = (
        _DEC_NEEDLE_PULL * u_key
        + _DEC_RECENCY_PULL * recent_dir
        + _DEC_NOISE * g.standard_normal(spec.d)
    )
    return run_attention(queries, keys, values), next_query


# Decode-stream constants, frozen after calibration runs. Half the tokens
# are near-duplicate "filler": their shared key direction soaks up attention
# while their almost-identical values make any one of them redundant. The
# rest are "content" tokens on latent topic directions with log-normal value
# norms; queries revisit the filler direction and the topics at the same
# rate, so hoarding filler wastes budget that content probes later miss.
_STREAM_TOPICS = 4
_STREAM_FILLER_P = 0.5
_STREAM_KEY_GAIN = 4.0
_STREAM_KEY_NOISE = 0.3
_STREAM_VALUE_SPREAD = 1.0
_STREAM_FILLER_VALUE_NOISE = 0.1


def gen_decode_stream(
    d: int, steps: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Structured (query, key, value) stream for decode-eviction runs.

    Draw order: filler key direction (d), topic directions (n_topics, d),
    filler value direction (d); then per step: filler coin, key topic index,
    key noise (d), query filler coin, query topic index, query noise (d),
    value log-norm, value direction (d), filler value noise (d, filler
    steps only).
    """
    if d < 1 or steps < 1:
        raise ShapeError(f"invalid dimensions d={d}, steps={steps}")
    g = rng(seed)
    filler_key = _unit(g.standard_normal(d))
    topics = np.stack([_unit(g.standard_normal(d)) for _ in range(_STREAM_TOPICS)])
    filler_value = _unit(g.standard_normal(d))
    stream = []
    for _ in range(steps):
        is_filler = g.random() < _STREAM_FILLER_P
        k_topic = int(g.integers(_STREAM_TOPICS))
        key_dir = filler_key if is_filler else topics[k_topic]
        key = _STREAM_KEY_GAIN * key_dir + _STREAM_KEY_NOISE * g.standard_normal(d)
        q_filler = g.random() < _STREAM_FILLER_P
        q_topic = int(g.integers(_STREAM_TOPICS))
        q_dir = filler_key if q_filler else topics[q_topic]
        query = _STREAM_KEY_GAIN * q_dir + _STREAM_KEY_NOISE * g.standard_normal(d)
        norm = float(np.exp(g.normal(0.0, _STREAM_VALUE_SPREAD)))
        direction = _unit(g.standard_normal(d))
        if is_filler:
            value = filler_value + _STREAM_FILLER_VALUE_NOISE * g.standard_normal(d)
        else:
            value = norm * direction
        stream.append((query, key, value))
    return stream


@dataclass(frozen=True)
class TraceHeader:
    """Shape and precision metadata for one trace file."""

    num_layers: int
    num_kv_heads: int
    num_q_heads: int
    d: int
    prompt_len: int
    decode_len: int = 0
    precision: str = "f64"
    endianness: str = "little"
    version: int = TRACE_VERSION
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.num_layers, self.num_kv_heads, self.num_q_heads, self.d) < 1:
            raise TraceShapeError("layer/head/dim counts must be positive")
        if self.prompt_len < 1 or self.decode_len < 0:
            raise TraceShapeError("prompt_len must be >= 1 and decode_len >= 0")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise TraceShapeError(
                f"num_q_heads {self.num_q_heads} is not a multiple of "
                f"num_kv_heads {self.num_kv_heads}"
            )
        if self.precision not in _PRECISIONS:
            raise TraceShapeError(f"precision must be one of {sorted(_PRECISIONS)}")
        if self.endianness != "little":
            raise TraceShapeError("only little-endian traces are supported")

    @property
    def total_len(self) -> int:
        return self.prompt_len + self.decode_len

    @property
    def dtype(self) -> np.dtype:
        return _PRECISIONS[self.precision]

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "num_layers": self.num_layers,
            "num_kv_heads": self.num_kv_heads,
            "num_q_heads": self.num_q_heads,
            "d": self.d,
            "prompt_len": self.prompt_len,
            "decode_len": self.decode_len,
            "precision": self.precision,
            "endianness": self.endianness,
            "extras": dict(self.extras),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TraceHeader":
        try:
            return cls(
                num_layers=int(data["num_layers"]),
                num_kv_heads=int(data["num_kv_heads"]),
                num_q_heads=int(data["num_q_heads"]),
                d=int(data["d"]),
                prompt_len=int(data["prompt_len"]),
                decode_len=int(data.get("decode_len", 0)),
                precision=str(data.get("precision", "f64")),
                endianness=str(data.get("endianness", "little")),
                version=int(data.get("version", TRACE_VERSION)),
                extras=dict(data.get("extras", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceShapeError(f"malformed trace header: {exc}") from exc


@dataclass(frozen=True)
class TraceTensors:
    """Per-layer projection tensors matching a TraceHeader."""

    queries: np.ndarray  # (L, Hq, T, d)
    keys: np.ndarray     # (L, Hkv, T, d)
    values: np.ndarray   # (L, Hkv, T, d)

    def check_against(self, header: TraceHeader) -> None:
        t = header.total_len
        expect_q = (header.num_layers, header.num_q_heads, t, header.d)
        expect_kv = (header.num_layers, header.num_kv_heads, t, header.d)
        if self.queries.shape != expect_q:
            raise TraceShapeError(
                f"queries shape {self.queries.shape} != header-implied {expect_q}"
            )
        if self.keys.shape != expect_kv or self.values.shape != expect_kv:
            raise TraceShapeError(
                f"key/value shapes {self.keys.shape}/{self.values.shape} "
                f"!= header-implied {expect_kv}"
            )


def gen_trace_tensors(header: TraceHeader, seed: int) -> TraceTensors:
    """Standard-normal tensors for a header, in its storage precision.

    Draw order: per layer, queries then keys then values, row-major.
    """
    g = rng(seed)
    t = header.total_len
    qs, ks, vs = [], [], []
    for _ in range(header.num_layers):
        qs.append(g.standard_normal((header.num_q_heads, t, header.d)))
        ks.append(g.standard_normal((header.num_kv_heads, t, header.d)))
        vs.append(g.standard_normal((header.num_kv_heads, t, header.d)))
    def cast(parts):
        return np.stack(parts).astype(header.dtype)

    return TraceTensors(queries=cast(qs), keys=cast(ks), values=cast(vs))


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".trace-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(path: str, header: TraceHeader, tensors: TraceTensors) -> None:
    """Serialize a trace; the write is atomic (temp file + rename)."""
    tensors.check_against(header)
    header_bytes = json.dumps(
        header.to_dict(), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    parts = [MAGIC, np.uint32(len(header_bytes)).tobytes(), header_bytes]
    dtype = header.dtype
    for layer in range(header.num_layers):
        for tensor in (tensors.queries, tensors.keys, tensors.values):
            parts.append(np.ascontiguousarray(tensor[layer], dtype=dtype).tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_trace(path: str) -> tuple[TraceHeader, TraceTensors]:
    """Parse a trace; round-trips :func:`write_trace` bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4:
        raise TraceTruncatedError(f"file is only {len(blob)} bytes")
    if blob[: len(MAGIC)] != MAGIC:
        raise TraceMagicError(f"bad magic {blob[:len(MAGIC)]!r}")
    header_len = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(MAGIC))[0])
    body_start = len(MAGIC) + 4
    if len(blob) < body_start + header_len:
        raise TraceTruncatedError("header extends past end of file")
    try:
        header_dict = json.loads(blob[body_start : body_start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceShapeError(f"header is not valid JSON: {exc}") from exc
    version = header_dict.get("version")
    if version != TRACE_VERSION:
        raise TraceVersionError(f"unsupported trace version {version!r}")
    header = TraceHeader.from_dict(header_dict)

    dtype = header.dtype
    t = header.total_len
    offset = body_start + header_len
    payload = blob[offset:]
    per_layer = (header.num_q_heads + 2 * header.num_kv_heads) * t * header.d
    expect_bytes = header.num_layers * per_layer * dtype.itemsize
    if len(payload) < expect_bytes:
        raise TraceTruncatedError(
            f"payload is {len(payload)} bytes, header implies {expect_bytes}"
        )
    if len(payload) > expect_bytes:
        raise TraceShapeError(
            f"{len(payload) - expect_bytes} trailing bytes after declared payload"
        )
    qs, ks, vs = [], [], []
    pos = 0
    flat = np.frombuffer(payload, dtype=dtype)
    for _ in range(header.num_layers):
        n_q = header.num_q_heads * t * header.d
        n_kv = header.num_kv_heads * t * header.d
        qs.append(flat[pos : pos + n_q].reshape(header.num_q_heads, t, header.d))
        pos += n_q
        ks.append(flat[pos : pos + n_kv].reshape(header.num_kv_heads, t, header.d))
        pos += n_kv
        vs.append(flat[pos : pos + n_kv].reshape(header.num_kv_heads, t, header.d))
        pos += n_kv
    return header, TraceTensors(
        queries=np.stack(qs), keys=np.stack(ks), values=np.stack(vs)
    )
