"""Sweep compression rate against reconstruction/attention fidelity.

Generates (or loads) a cache dump, then evaluates grouped-SVD plans at a
grid of target rates and group sizes alongside the merge and passthrough
baselines.  Writes one CSV row per (plan, aggregate) and prints a small
table.

Example:
    python3 scripts/sweep_rates.py --out-dir runs/sweep --seed 3
    python3 scripts/sweep_rates.py --input caches/real.kvd --out-dir runs/real
"""

import argparse
import os

from xkv import (
    CompressionPlan,
    SynthConfig,
    Unachievable,
    compression_rate,
    evaluate,
    rank_for_rate,
    read_dump,
    synth_dump,
)


def build_plans(meta, group_sizes, targets, context_len):
    plans = [CompressionPlan(method="none"), CompressionPlan(method="slerp")]
    for g in group_sizes:
        if meta.num_layers % g:
            continue
        for target in targets:
            try:
                rk, rv = rank_for_rate(target, meta, g, context_len=context_len)
            except Unachievable:
                continue
            if rv > min(meta.seq_len, g * meta.width):
                continue
            plans.append(CompressionPlan(method="xkv", group_size=g,
                                         key_rank=rk, value_rank=rv))
    return plans


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", default=None, help="existing KVD dump")
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--alignment", type=float, default=0.85)
    ap.add_argument("--noise", type=float, default=0.02)
    ap.add_argument("--group-sizes", default="1,2,4")
    ap.add_argument("--targets", default="2.0,4.0,6.0,8.0")
    ap.add_argument("--rate-context", type=int, default=65536)
    args = ap.parse_args()

    if args.input:
        dump = read_dump(args.input)
    else:
        dump = synth_dump(SynthConfig(num_layers=8, seq_len=256,
                                      num_kv_heads=2, head_dim=32,
                                      alignment=args.alignment,
                                      noise=args.noise, seed=args.seed))
    groups = [int(g) for g in args.group_sizes.split(",")]
    targets = [float(t) for t in args.targets.split(",")]
    plans = build_plans(dump.meta, groups, targets, args.rate_context)
    reports = evaluate(dump, plans)

    os.makedirs(args.out_dir, exist_ok=True)
    rows = ["method,group_size,key_rank,value_rank,rate_at_context,"
            "mean_key_err,mean_value_err,mean_attn_err"]
    print(f"{'method':<11}{'G':>3}{'rk':>5}{'rv':>5}{'rate@ctx':>10}"
          f"{'key err':>11}{'val err':>11}{'attn err':>11}")
    for plan, rep in zip(plans, reports):
        at_ctx = compression_rate(plan, dump.meta, args.rate_context)
        cells = (plan.method, plan.group_size, plan.key_rank, plan.value_rank,
                 at_ctx, rep.mean_key_rel_err, rep.mean_value_rel_err,
                 rep.mean_attn_rel_err)
        rows.append(",".join(repr(c) if isinstance(c, float) else str(c)
                             for c in cells))
        print(f"{plan.method:<11}{plan.group_size:>3}{plan.key_rank:>5}"
              f"{plan.value_rank:>5}{at_ctx:>10.3f}{rep.mean_key_rel_err:>11.2e}"
              f"{rep.mean_value_rel_err:>11.2e}{rep.mean_attn_rel_err:>11.2e}")
    path = os.path.join(args.out_dir, "sweep.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"\nwrote {path}")


if __name__ == "__main__":
    main()
