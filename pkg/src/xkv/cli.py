"""Command line front end.

Subcommands cover the full loop: ``synth`` writes a cache dump,
``analyze`` reports cross-layer similarity and rank curves, ``compress``
produces a compressed artifact, ``eval`` measures fidelity, ``report``
merges fidelity files into one CSV.  A JSON config file can supply any
long-option value; explicit flags win.  Every run writes a manifest with
the fully resolved configuration and nothing non-deterministic, so a
repeated invocation is byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import analysis
from .atteval import QuerySource, evaluate
from .compress import (
    CompressionPlan,
    compress,
    compression_rate,
    derive_value_rank,
    plan_storage_elements,
    rank_for_rate,
    read_compressed,
    stored_elements,
    write_compressed,
)
from .errors import ConfigError, IoFailure, XkvError
from .kvdump import (
    DTYPES,
    SynthConfig,
    read_dump,
    synth_dump,
    with_meta,
    write_dump,
)

RATE_CONTEXT_DEFAULT = 65536


def _write_json(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, indent=2, sort_keys=True))
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _write_lines(path, lines) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines))
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _manifest(args: argparse.Namespace) -> dict:
    skip = {"func"}
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    return {"tool": "xkv", "resolved": resolved}


def _matrix_csv_lines(mat: np.ndarray) -> list[str]:
    n = mat.shape[0]
    lines = ["layer," + ",".join(str(j) for j in range(n))]
    for i in range(n):
        lines.append(str(i) + "," + ",".join(repr(float(v)) for v in mat[i]))
    return lines


def _sides(which: str) -> tuple[str, ...]:
    return ("key", "value") if which == "both" else (which,)


def _require(args: argparse.Namespace, *names: str) -> None:
    """Paths may come from flags or the config file; both may omit them."""
    for name in names:
        if getattr(args, name) is None:
            flag = "--" + name.replace("_", "-")
            raise ConfigError(f"{args.command}: {flag} is required")


# --- subcommand implementations -------------------------------------------

def cmd_synth(args) -> int:
    _require(args, "out")
    cfg = SynthConfig(
        num_layers=args.num_layers,
        seq_len=args.seq_len,
        num_kv_heads=args.num_kv_heads,
        head_dim=args.head_dim,
        shared_rank=args.shared_rank,
        private_rank=args.private_rank,
        noise=args.noise,
        alignment=args.alignment,
        seed=args.seed,
        tail_len=args.tail_len,
        model_id=args.model_id,
    )
    dump = synth_dump(cfg)
    if args.dtype != "f32":
        dump = with_meta(dump, dtype=args.dtype)
    write_dump(dump, args.out)
    _write_json(args.out + ".manifest.json", _manifest(args))
    print(f"wrote {args.out}: {cfg.num_layers} layers, "
          f"{cfg.seq_len}+{cfg.tail_len} tokens, width {dump.meta.width}")
    return 0


def cmd_analyze(args) -> int:
    _require(args, "input", "out_dir")
    dump = read_dump(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    kinds = ("cosine", "cka", "rank") if args.kind == "all" else (args.kind,)
    for side in _sides(args.side):
        if "cosine" in kinds:
            sim = analysis.cosine_similarity_matrix(dump, side)
            _write_lines(os.path.join(args.out_dir, f"cosine_{side}.csv"),
                         _matrix_csv_lines(sim.values))
        if "cka" in kinds:
            sim = analysis.cka_matrix(dump, side)
            _write_lines(os.path.join(args.out_dir, f"cka_{side}.csv"),
                         _matrix_csv_lines(sim.values))
    if "rank" in kinds:
        sizes = tuple(int(s) for s in args.group_sizes.split(","))
        curve = analysis.rank_curve(dump, sizes, energy_fraction=args.energy_fraction)
        lines = ["group_size,key_rank_ratio,value_rank_ratio,dropped_layers"]
        for g, kr, vr in zip(curve.group_sizes, curve.key_ratio, curve.value_ratio):
            dropped = curve.dropped_layers.get(g, 0)
            lines.append(f"{g},{kr!r},{vr!r},{dropped}")
        _write_lines(os.path.join(args.out_dir, "rank_curve.csv"), lines)
    _write_json(os.path.join(args.out_dir, "manifest.json"), _manifest(args))
    print(f"analysis written to {args.out_dir}")
    return 0


def _plan_from_args(args, meta) -> CompressionPlan:
    method = args.method
    if method in ("none", "slerp"):
        return CompressionPlan(
            method=method,
            slerp_t=args.slerp_t,
            slerp_start_layer=args.slerp_start_layer,
        )
    group_size = args.group_size if method == "xkv" else 1
    if args.target_rate is not None:
        key_rank, value_rank = rank_for_rate(
            args.target_rate, meta, group_size,
            kv_rank_ratio=args.kv_rank_ratio,
            context_len=args.rate_context,
        )
    elif args.rank is not None:
        key_rank = args.rank
        value_rank = (args.value_rank if args.value_rank is not None
                      else derive_value_rank(args.rank, args.kv_rank_ratio))
    else:
        raise ConfigError(f"method {method!r} needs --rank or --target-rate")
    return CompressionPlan(
        method=method,
        group_size=group_size,
        key_rank=key_rank,
        value_rank=value_rank,
        kv_rank_ratio=args.kv_rank_ratio,
    )


def cmd_compress(args) -> int:
    _require(args, "input", "out")
    dump = read_dump(args.input)
    plan = _plan_from_args(args, dump.meta)
    cd = compress(dump, plan)
    write_compressed(cd, args.out)
    rate_now = compression_rate(plan, dump.meta)
    rate_ctx = compression_rate(plan, dump.meta, context_len=args.rate_context)
    summary = {
        "plan": asdict(plan),
        "rate_at_dump_len": rate_now,
        "rate_at_context": rate_ctx,
        "rate_context": args.rate_context,
        "stored_elements": stored_elements(cd),
        "planned_elements": plan_storage_elements(plan, dump.meta),
    }
    _write_json(args.out + ".summary.json", summary)
    _write_json(args.out + ".manifest.json", _manifest(args))
    print(f"wrote {args.out}: method={plan.method} rate={rate_now:.4g} "
          f"(at {args.rate_context} tokens: {rate_ctx:.4g})")
    return 0


def _plans_for_eval(args, meta) -> list[CompressionPlan]:
    if args.plans is not None:
        try:
            with open(args.plans, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read {args.plans}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.plans} is not valid JSON: {exc}") from exc
        if not isinstance(raw, list):
            raise ConfigError("plans file must hold a JSON list of plan objects")
        try:
            return [CompressionPlan(**entry) for entry in raw]
        except TypeError as exc:
            raise ConfigError(f"bad plan entry: {exc}") from exc
    return [_plan_from_args(args, meta)]


def cmd_eval(args) -> int:
    _require(args, "input", "out_dir")
    dump = read_dump(args.input)
    plans = _plans_for_eval(args, dump.meta)
    source = QuerySource(
        q_heads_per_kv=args.q_heads_per_kv,
        num_queries=args.num_queries,
        seed=args.queries_seed,
    )
    reports = evaluate(dump, plans, queries=source)
    os.makedirs(args.out_dir, exist_ok=True)
    _write_json(os.path.join(args.out_dir, "fidelity.json"),
                [r.to_dict() for r in reports])
    lines = ["method,group_size,key_rank,value_rank,rate,layer,"
             "key_rel_err,value_rel_err,attn_out_rel_err,attn_out_cos"]
    for r in reports:
        for lf in r.layers:
            lines.append(
                f"{r.method},{r.group_size},{r.key_rank},{r.value_rank},"
                f"{r.rate!r},{lf.layer},{lf.key_rel_err!r},{lf.value_rel_err!r},"
                f"{lf.attn_out_rel_err!r},{lf.attn_out_cos!r}"
            )
    _write_lines(os.path.join(args.out_dir, "fidelity.csv"), lines)
    _write_json(os.path.join(args.out_dir, "manifest.json"), _manifest(args))
    for r in reports:
        print(f"{r.method} g={r.group_size} rate={r.rate:.4g}: "
              f"attn_rel={r.mean_attn_rel_err:.3e} cos={r.mean_attn_cos:.6f}")
    return 0


def cmd_report(args) -> int:
    _require(args, "inputs", "out")
    rows = []
    for path in args.inputs:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                entries = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        for e in entries:
            rows.append((
                e["method"], e["group_size"], e["key_rank"], e["value_rank"],
                e["rate"], e["mean_key_rel_err"], e["mean_value_rel_err"],
                e["mean_attn_rel_err"], e["mean_attn_cos"],
            ))
    rows.sort(key=lambda r: (r[0], -r[4], r[1]))
    lines = ["method,group_size,key_rank,value_rank,rate,"
             "mean_key_rel_err,mean_value_rel_err,mean_attn_rel_err,mean_attn_cos"]
    for r in rows:
        lines.append(",".join([r[0]] + [repr(v) if isinstance(v, float) else str(v)
                                        for v in r[1:]]))
    _write_lines(args.out, lines)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def cmd_info(args) -> int:
    _require(args, "input")
    if args.input.endswith(".xkv"):
        cd = read_compressed(args.input)
        meta = cd.meta
        print(json.dumps({
            "kind": "compressed",
            "plan": asdict(cd.plan),
            "model_id": meta.model_id,
            "num_layers": meta.num_layers,
            "seq_len": meta.seq_len,
            "width": meta.width,
            "stored_elements": stored_elements(cd),
        }, indent=2, sort_keys=True))
    else:
        dump = read_dump(args.input)
        meta = dump.meta
        print(json.dumps({
            "kind": "dump",
            "model_id": meta.model_id,
            "num_layers": meta.num_layers,
            "num_kv_heads": meta.num_kv_heads,
            "head_dim": meta.head_dim,
            "seq_len": meta.seq_len,
            "tail_len": dump.tail_len,
            "dtype": meta.dtype,
            "keys_pre_rope": meta.keys_pre_rope,
            "has_queries": dump.queries is not None,
        }, indent=2, sort_keys=True))
    return 0


# --- parser ----------------------------------------------------------------

def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("xkv", "single_svd", "slerp", "none"),
                   default="xkv")
    p.add_argument("--group-size", type=int, default=4)
    rank = p.add_mutually_exclusive_group()
    rank.add_argument("--rank", type=int, help="key-side rank per group")
    rank.add_argument("--target-rate", type=float,
                      help="pick the largest ranks reaching this compression rate")
    p.add_argument("--value-rank", type=int,
                   help="override the ratio-derived value rank")
    p.add_argument("--kv-rank-ratio", type=float, default=1.5)
    p.add_argument("--slerp-t", type=float, default=0.5)
    p.add_argument("--slerp-start-layer", type=int, default=None)
    p.add_argument("--rate-context", type=int, default=RATE_CONTEXT_DEFAULT,
                   help="context length used for rate accounting")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="xkv",
        description="Cross-layer KV-cache compression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("synth", help="generate a synthetic cache dump")
    p.add_argument("--out")
    p.add_argument("--num-layers", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=512)
    p.add_argument("--num-kv-heads", type=int, default=1)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--shared-rank", type=int, default=8)
    p.add_argument("--private-rank", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--alignment", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tail-len", type=int, default=0)
    p.add_argument("--model-id", default="synth")
    p.add_argument("--dtype", choices=DTYPES, default="f32")
    p.set_defaults(func=cmd_synth)
    commands["synth"] = p

    p = sub.add_parser("analyze", help="similarity matrices and rank curves")
    p.add_argument("--input")
    p.add_argument("--out-dir")
    p.add_argument("--kind", choices=("cosine", "cka", "rank", "all"), default="all")
    p.add_argument("--side", choices=("key", "value", "both"), default="both")
    p.add_argument("--energy-fraction", type=float, default=0.95)
    p.add_argument("--group-sizes", default="1,2,4,8")
    p.set_defaults(func=cmd_analyze)
    commands["analyze"] = p

    p = sub.add_parser("compress", help="compress a dump to an XKV1 artifact")
    p.add_argument("--input")
    p.add_argument("--out")
    _add_plan_flags(p)
    p.set_defaults(func=cmd_compress)
    commands["compress"] = p

    p = sub.add_parser("eval", help="attention-level fidelity of plans")
    p.add_argument("--input")
    p.add_argument("--out-dir")
    p.add_argument("--plans", help="JSON file with a list of plan objects")
    p.add_argument("--num-queries", type=int, default=64)
    p.add_argument("--q-heads-per-kv", type=int, default=4)
    p.add_argument("--queries-seed", type=int, default=0)
    _add_plan_flags(p)
    p.set_defaults(func=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("report", help="merge fidelity.json files into a CSV")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    commands["report"] = p

    p = sub.add_parser("info", help="print header metadata of an artifact")
    p.add_argument("--input")
    p.set_defaults(func=cmd_info)
    commands["info"] = p

    for cp in commands.values():
        cp.add_argument("--config", help="JSON file supplying option defaults")
    return parser, commands


def _apply_config(argv: list[str], parser: argparse.ArgumentParser,
                  commands: dict) -> None:
    ns, _ = parser.parse_known_args(argv)
    if not getattr(ns, "config", None):
        return
    try:
        with open(ns.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read config {ns.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {ns.config} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    sub = commands[ns.command]
    known = {a.dest for a in sub._actions}
    bad = set(cfg) - known
    if bad:
        raise ConfigError(f"unknown config keys for {ns.command}: {sorted(bad)}")
    sub.set_defaults(**cfg)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    try:
        _apply_config(argv, parser, commands)
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except XkvError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
