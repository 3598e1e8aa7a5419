"""Command-line harness: trace generation, scoring, recall and decode runs.

Commands: ``gen-trace``, ``score``, ``oracle-recall``, ``simulate-decode``.
Per-position data goes to CSV, aggregates to JSON validating against the
schema shipped in ``kvevict/schemas``. Every command is byte-reproducible
under a fixed seed: no timestamps, sorted JSON keys, shortest-round-trip
float formatting.

Option precedence is flag > config file > built-in default. Config files are
flat key/value tables in TOML or JSON; keys match the long flag names with
dashes replaced by underscores. Relative output paths land in ``--out-dir``
(default: the ``KVEVICT_OUT_DIR`` environment variable, else the current
directory).

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .attention import decode_step, run_attention
from .cache import KvCache
from .errors import ConfigError, IoError, KvEvictError
from .oracle import (
    OracleReport,
    PruneKind,
    PruneMode,
    PruneSemantics,
    exact_eviction_error,
    semantics_gap_summary,
    taylor_residual,
    topk_recall_reserved,
    true_eviction_error,
)
from .policy import PRESET_NAMES, PolicyConfig, decode_evict_loop, preset
from .saliency import Scorer, aggregate_group, scorer_fn
from .workload import (
    NeedleSpec,
    TraceHeader,
    atomic_write_bytes,
    gen_decode_stream,
    gen_needle,
    gen_random,
    gen_trace_tensors,
    read_trace,
    write_trace,
)

SCHEMA_VERSION = 1

_SCORER_CHOICES = ("value", "key", "joint", "attn_l1", "exact", "oracle")


def _fmt(x: float) -> str:
    """Shortest round-trip decimal form; reproducible across runs."""
    return repr(float(x))


def _out_path(path: str, out_dir: str) -> str:
    if os.path.isabs(path):
        return path
    return os.path.join(out_dir, path)


def _write_text(path: str, text: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_json(path: str, payload: dict) -> None:
    _write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _write_text(path, buf.getvalue())


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc}") from exc
    if path.endswith(".json"):
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    else:
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a flat key/value table")
    return data


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flag > config file > default for every known key."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults) - {"out_dir"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
        elif key in file_cfg:
            merged[key] = file_cfg[key]
        else:
            merged[key] = default
    out_dir = getattr(args, "out_dir", None) or file_cfg.get("out_dir")
    merged["out_dir"] = out_dir or os.environ.get("KVEVICT_OUT_DIR", ".")
    return merged


def _int_list(value, what: str) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    try:
        return [int(part) for part in str(value).split(",") if part != ""]
    except ValueError as exc:
        raise ConfigError(f"bad {what} list {value!r}") from exc


def _str_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _window_start(rows_token: str, q_len: int) -> int:
    """Translate a window-size token ('full' or row count) into 1-based w."""
    if str(rows_token).lower() == "full":
        return 1
    rows = int(rows_token)
    if rows < 1:
        raise ConfigError(f"window rows must be >= 1, got {rows}")
    return max(1, q_len - rows + 1)


# ---------------------------------------------------------------------------
# gen-trace


_GEN_TRACE_DEFAULTS = {
    "layers": 1,
    "kv_heads": 1,
    "q_heads": 1,
    "d": 32,
    "prompt_len": 64,
    "decode_len": 0,
    "precision": "f64",
    "seed": 0,
    "out": "trace.kvt",
}


def _cmd_gen_trace(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _GEN_TRACE_DEFAULTS)
    header = TraceHeader(
        num_layers=int(cfg["layers"]),
        num_kv_heads=int(cfg["kv_heads"]),
        num_q_heads=int(cfg["q_heads"]),
        d=int(cfg["d"]),
        prompt_len=int(cfg["prompt_len"]),
        decode_len=int(cfg["decode_len"]),
        precision=str(cfg["precision"]),
    )
    tensors = gen_trace_tensors(header, int(cfg["seed"]))
    path = _out_path(str(cfg["out"]), cfg["out_dir"])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_trace(path, header, tensors)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# score


_SCORE_DEFAULTS = {
    "trace": None,
    "instances": 4,
    "s": 64,
    "d": 32,
    "q_len": None,
    "seed": 0,
    "window_rows": "full",
    "out": "scores.csv",
}

_SCORE_COLUMNS = ("instance", "layer", "head", "position",
                  "value", "key", "joint", "attn_l1")

_ALL_SCORERS = (Scorer.VALUE, Scorer.KEY, Scorer.JOINT, Scorer.ATTN_L1)


def _score_rows_for_group(instances, w: int, group_size: int):
    """All four score families, aggregated over one KV head's query group."""
    per_scorer = {}
    for scorer in _ALL_SCORERS:
        vecs = [scorer_fn(scorer)(inst, w) for inst in instances]
        per_scorer[scorer] = aggregate_group(vecs, group_size)
    return per_scorer


def _cmd_score(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _SCORE_DEFAULTS)
    rows = []
    if cfg["trace"]:
        header, tensors = read_trace(str(cfg["trace"]))
        t = header.total_len
        w = _window_start(cfg["window_rows"], t)
        group = header.group_size
        for layer in range(header.num_layers):
            for kv_head in range(header.num_kv_heads):
                insts = []
                for member in range(group):
                    q_head = kv_head * group + member
                    insts.append(
                        run_attention(
                            tensors.queries[layer, q_head].astype(np.float64),
                            tensors.keys[layer, kv_head].astype(np.float64),
                            tensors.values[layer, kv_head].astype(np.float64),
                        )
                    )
                per_scorer = _score_rows_for_group(insts, w, group)
                for p in range(t):
                    rows.append(
                        (0, layer, kv_head, p)
                        + tuple(_fmt(per_scorer[sc].scores[p]) for sc in _ALL_SCORERS)
                    )
    else:
        s, d = int(cfg["s"]), int(cfg["d"])
        q_len = int(cfg["q_len"]) if cfg["q_len"] is not None else s
        w = _window_start(cfg["window_rows"], q_len)
        base_seed = int(cfg["seed"])
        for i in range(int(cfg["instances"])):
            inst = gen_random(s, d, q_len, base_seed + i)
            per_scorer = _score_rows_for_group([inst], w, 1)
            for p in range(s):
                rows.append(
                    (base_seed + i, 0, 0, p)
                    + tuple(_fmt(per_scorer[sc].scores[p]) for sc in _ALL_SCORERS)
                )
    path = _out_path(str(cfg["out"]), cfg["out_dir"])
    _write_csv(path, _SCORE_COLUMNS, rows)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# oracle-recall


_ORACLE_DEFAULTS = {
    "instances": 100,
    "s": 64,
    "d": 32,
    "k": "4",
    "window_rows": "1,4,16,64,full",
    "recent_reserve": "0,2",
    "scorers": "value,key,joint,attn_l1,exact",
    "taylor_samples": 2,
    "out": "oracle_recall.json",
}


def _candidate_scores(name: str, inst, w: int, true_err, exact_cache: dict):
    if name == "oracle":
        return true_err
    if name == "exact":
        if w not in exact_cache:
            mode = PruneMode(PruneKind.JOINT, PruneSemantics.ZERO_ROW)
            exact_cache[w] = np.array(
                [exact_eviction_error(inst, p, mode, w) for p in range(inst.s)]
            )
        return exact_cache[w]
    return scorer_fn(Scorer(name))(inst, w).scores


def _cmd_oracle_recall(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _ORACLE_DEFAULTS)
    n = int(cfg["instances"])
    s, d = int(cfg["s"]), int(cfg["d"])
    k_list = _int_list(cfg["k"], "k")
    window_tokens = _str_list(cfg["window_rows"])
    reserves = _int_list(cfg["recent_reserve"], "recent_reserve")
    scorers = _str_list(cfg["scorers"])
    for name in scorers:
        if name not in _SCORER_CHOICES:
            raise ConfigError(f"unknown scorer {name!r}; choose from {_SCORER_CHOICES}")
    for k in k_list:
        if not 1 <= k <= s:
            raise ConfigError(f"k={k} outside [1, s={s}]")

    # the exact-error matrices, gap stats and primary recall map use the
    # 16-row default window when it is in the sweep, else the first token
    primary_token = "16" if "16" in window_tokens else window_tokens[0]
    primary_w = _window_start(primary_token, s)
    zero_mode = PruneMode(PruneKind.JOINT, PruneSemantics.ZERO_ROW)
    remove_mode = PruneMode(PruneKind.JOINT, PruneSemantics.REMOVE_ROW)

    report = OracleReport()
    sums: dict[tuple, float] = {}
    gaps = []
    for seed in range(n):
        spec = NeedleSpec.default(seed, s=s, d=d)
        inst, next_query = gen_needle(spec)
        true_err = np.array(
            [true_eviction_error(inst, next_query, p) for p in range(s)]
        )
        exact_primary = np.array(
            [exact_eviction_error(inst, p, zero_mode, primary_w) for p in range(s)]
        )
        remove_primary = np.array(
            [exact_eviction_error(inst, p, remove_mode, primary_w) for p in range(s)]
        )
        gaps.extend(np.abs(remove_primary - exact_primary).tolist())
        report.true_errors.append(true_err.tolist())
        report.exact_errors.append(exact_primary.tolist())
        exact_cache = {primary_w: exact_primary}
        for token in window_tokens:
            w = _window_start(token, s)
            for name in scorers:
                cand = _candidate_scores(name, inst, w, true_err, exact_cache)
                for k in k_list:
                    for reserve in reserves:
                        if reserve > k:
                            continue
                        key = (token, name, k, reserve)
                        sums[key] = sums.get(key, 0.0) + topk_recall_reserved(
                            true_err, cand, k, reserve
                        )
        if seed < int(cfg["taylor_samples"]):
            pairs = taylor_residual(
                inst,
                spec.needle_pos,
                PruneMode(PruneKind.KEY, PruneSemantics.ZERO_ROW),
                primary_w,
                (1e-2, 1e-3, 1e-4),
            )
            report.taylor_ratios.extend(pairs)

    for (token, name, k, reserve), total in sums.items():
        block = {
            "window_rows": token,
            "window_start": _window_start(token, s),
            "scorer": name,
            "k": k,
            "reserve": reserve,
            "mean_recall": total / n,
        }
        report.sweeps.append(block)
    report.sweeps.sort(
        key=lambda b: (str(b["window_rows"]), b["scorer"], b["k"], b["reserve"])
    )
    for name in scorers:
        key = (primary_token, name, k_list[0], reserves[0])
        if key in sums:
            report.recall_at_k[name] = sums[key] / n
    report.semantics_gap = semantics_gap_summary(gaps)

    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "oracle_recall",
        "config": {
            "instances": n,
            "s": s,
            "d": d,
            "k": k_list,
            "window_rows": window_tokens,
            "recent_reserve": reserves,
            "scorers": scorers,
        },
        "report": report.to_dict(),
    }
    path = _out_path(str(cfg["out"]), cfg["out_dir"])
    _write_json(path, payload)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# simulate-decode


_SIMULATE_DEFAULTS = {
    "preset": "h2o",
    "budget": 16,
    "steps": 64,
    "d": 32,
    "seed": 6,
    "out": "decode.json",
    "out_csv": "decode_steps.csv",
    # optional preset-field overrides; None leaves the preset untouched
    "sink_count": None,
    "recent_window": None,
    "pool_kernel": None,
    "pool_stride": None,
    "scorer": None,
    "num_coming": None,
}

_SIM_COLUMNS = ("step", "cache_len", "num_evicted", "evicted_positions", "perturbation")


def _cmd_simulate_decode(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _SIMULATE_DEFAULTS)
    name = str(cfg["preset"])
    budget = int(cfg["budget"])
    steps = int(cfg["steps"])
    d = int(cfg["d"])
    seed = int(cfg["seed"])
    policy_cfg = preset(name, context=steps, budget=budget, phase="decode")
    overrides = {
        key: cfg[key]
        for key in ("sink_count", "recent_window", "pool_kernel", "pool_stride",
                    "scorer", "num_coming")
        if cfg[key] is not None
    }
    if overrides:
        merged = policy_cfg.to_dict()
        merged.update(overrides)
        policy_cfg = PolicyConfig.from_dict(merged)
    stream = gen_decode_stream(d, steps, seed)
    records = decode_evict_loop(stream, policy_cfg)

    reference = KvCache(d)
    perturbations = []
    rows = []
    for record, (q, k, v) in zip(records, stream):
        full = decode_step(reference, q, k, v)
        pert = float(np.linalg.norm(record.output - full.output))
        perturbations.append(pert)
        rows.append(
            (
                record.step_index,
                len(record.cache_positions),
                len(record.evicted_positions),
                ";".join(str(p) for p in record.evicted_positions),
                _fmt(pert),
            )
        )

    total_evictions = sum(len(r.evicted_positions) for r in records)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "simulate_decode",
        "config": {
            "preset": name,
            "steps": steps,
            "d": d,
            "seed": seed,
            "policy": policy_cfg.to_dict(),
        },
        "summary": {
            "mean_perturbation": float(np.mean(perturbations)),
            "max_perturbation": float(np.max(perturbations)),
            "total_evictions": int(total_evictions),
            "final_cache_len": len(records[-1].cache_positions) if records else 0,
        },
    }
    json_path = _out_path(str(cfg["out"]), cfg["out_dir"])
    csv_path = _out_path(str(cfg["out_csv"]), cfg["out_dir"])
    _write_json(json_path, payload)
    _write_csv(csv_path, _SIM_COLUMNS, rows)
    print(json_path)
    print(csv_path)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="TOML or JSON config file with flat keys")
    sub.add_argument(
        "--out-dir",
        dest="out_dir",
        help="directory for relative output paths (default: $KVEVICT_OUT_DIR or '.')",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvevict",
        description="KV-cache eviction scoring, recall and decode experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-trace", help="write a synthetic Q/K/V trace file")
    _add_common(p)
    p.add_argument("--layers", type=int)
    p.add_argument("--kv-heads", dest="kv_heads", type=int)
    p.add_argument("--q-heads", dest="q_heads", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--prompt-len", dest="prompt_len", type=int)
    p.add_argument("--decode-len", dest="decode_len", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gen_trace)

    p = subs.add_parser("score", help="score cached positions with all four families")
    _add_common(p)
    p.add_argument("--trace", help="score a trace file instead of generated instances")
    p.add_argument("--instances", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--q-len", dest="q_len", type=int,
                   help="query rows for generated instances (default: s)")
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--window-rows",
        dest="window_rows",
        help="perturbation window size in query rows, or 'full'",
    )
    p.add_argument("--out")
    p.set_defaults(func=_cmd_score)

    p = subs.add_parser(
        "oracle-recall", help="top-k recall of each scorer against the true-error oracle"
    )
    _add_common(p)
    p.add_argument("--instances", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k", help="comma-separated list of k values")
    p.add_argument(
        "--window-rows",
        dest="window_rows",
        help="comma-separated window sizes in rows; 'full' means every row",
    )
    p.add_argument(
        "--recent-reserve",
        dest="recent_reserve",
        help="comma-separated reserved-recent counts (spent from each candidate's k)",
    )
    p.add_argument("--scorers", help=f"comma-separated subset of {_SCORER_CHOICES}")
    p.add_argument("--taylor-samples", dest="taylor_samples", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_oracle_recall)

    p = subs.add_parser(
        "simulate-decode", help="per-step decode eviction vs a no-eviction reference"
    )
    _add_common(p)
    p.add_argument("--preset", choices=PRESET_NAMES)
    p.add_argument("--budget", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sink-count", dest="sink_count", type=int,
                   help="override the preset's sink count")
    p.add_argument("--recent-window", dest="recent_window", type=int,
                   help="override the preset's protected recent window")
    p.add_argument("--pool-kernel", dest="pool_kernel", type=int)
    p.add_argument("--pool-stride", dest="pool_stride", type=int)
    p.add_argument("--scorer", choices=[s.value for s in Scorer],
                   help="override the preset's score family")
    p.add_argument("--num-coming", dest="num_coming", type=int)
    p.add_argument("--out", help="aggregate JSON report path")
    p.add_argument("--out-csv", dest="out_csv", help="per-step CSV path")
    p.set_defaults(func=_cmd_simulate_decode)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KvEvictError as exc:
        print(f"kvevict: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kvevict: i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
