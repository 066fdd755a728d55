#!/usr/bin/env python3
"""Token-precision trade-off at fixed byte budgets.

Sweeps the three budget-matched configurations (1x tokens @ 16-bit,
2x @ 8-bit, 4x @ 4-bit) across several base budgets on the retrieval task,
for the observation-window and pyramid eviction policies. Prints median
retrieval accuracy per configuration and writes the full CSV.
"""

import argparse
from pathlib import Path

import numpy as np

from kvtrade.sweep import SweepConfig, emit_csv, run_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="budget_tradeoff.csv")
    ap.add_argument("--seq-len", type=int, default=512)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--budgets", type=int, nargs="+", default=[32, 64, 128])
    args = ap.parse_args()

    all_rows = []
    print(f"{'base':>6} {'policy':>10} {'config':>8} {'median acc':>10} {'ratio':>8}")
    for base in args.budgets:
        cfg = SweepConfig(
            task="recall",
            model="recall",
            seq_lens=(args.seq_len,),
            seeds=tuple(range(args.seeds)),
            policies=("snapkv", "pyramidkv"),
            bits=(16, 8, 4),
            token_multipliers=(1, 2, 4),
            paired_budget=True,
            base_tokens=base,
            full_cache_tokens=args.seq_len,
            num_pairs=16,
            filler_vocab=32,
        )
        rows, skips = run_sweep(cfg)
        all_rows.extend(rows)
        for skip in skips:
            print(f"  skipped: {skip.reason}")
        for policy in cfg.policies:
            for bits, mult in ((16, 1), (8, 2), (4, 4)):
                sel = [r for r in rows if r.policy == policy and r.bits == bits]
                if not sel:
                    continue
                acc = float(np.median([r.accuracy for r in sel]))
                ratio = sel[0].budget_ratio_meta
                print(f"{base:>6} {policy:>10} {mult}x@{bits:>2}b {acc:>10.3f} {ratio:>8.3f}")

    out = Path(args.out)
    emit_csv(all_rows, out)
    print(f"\nwrote {len(all_rows)} rows to {out}")


if __name__ == "__main__":
    main()
