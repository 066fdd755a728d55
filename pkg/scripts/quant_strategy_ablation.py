#!/usr/bin/env python3
"""Quantization strategy and group size ablation.

Holds the eviction side fixed (observation-window policy, 4x tokens at
4-bit) and varies the quantization strategy: per-token grouping for both
caches, per-channel grouping for keys, and each with the |v| > 6 outlier
sidecar. A second pass varies the group size. Reports retrieval accuracy
and the metadata-inclusive budget ratio so the memory cost of each
strategy is visible.
"""

import argparse
from pathlib import Path

import numpy as np

from kvtrade.sweep import SweepConfig, emit_csv, run_sweep


def summarize(rows, axis):
    print(f"{axis:>20} {'median acc':>10} {'ratio':>8} {'perturb':>10}")
    seen = []
    for row in rows:
        key = getattr(row, axis if axis != "strategy" else "layout")
        if key not in seen:
            seen.append(key)
    for key in seen:
        sel = [r for r in rows if getattr(r, axis if axis != "strategy" else "layout") == key]
        acc = float(np.median([r.accuracy for r in sel]))
        ratio = sel[0].budget_ratio_meta
        perturb = float(np.median([r.logit_perturb for r in sel]))
        print(f"{str(key):>20} {acc:>10.3f} {ratio:>8.3f} {perturb:>10.5f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="quant_strategy_ablation.csv")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()

    common = dict(
        task="recall",
        model="recall",
        seq_lens=(384,),
        seeds=tuple(range(args.seeds)),
        policies=("snapkv",),
        bits=(4,),
        token_multipliers=(4,),
        base_tokens=32,
        full_cache_tokens=384,
        num_pairs=12,
        filler_vocab=32,
    )

    strategy_cfg = SweepConfig(
        layouts=("per_token", "per_token_outlier", "per_channel", "per_channel_outlier"),
        **common,
    )
    strategy_rows, _ = run_sweep(strategy_cfg)
    print("strategy ablation (4x tokens @ 4-bit, group 64):")
    summarize(strategy_rows, "strategy")

    # per-channel keys give token-length grouping runs, so the group sizes
    # produce genuinely different group counts at this scale
    group_cfg = SweepConfig(group_sizes=(32, 64, 128), layouts=("per_channel",), **common)
    group_rows, _ = run_sweep(group_cfg)
    print("\ngroup size ablation (per-channel keys, 4x tokens @ 4-bit):")
    summarize(group_rows, "group_size")

    out = Path(args.out)
    emit_csv(strategy_rows + group_rows, out)
    print(f"\nwrote {len(strategy_rows) + len(group_rows)} rows to {out}")


if __name__ == "__main__":
    main()
