#!/usr/bin/env python3
"""Layer-wise reconfiguration sweep.

Starting from a 4x-tokens @ 4-bit baseline on a 16-layer random model, each
run reconfigures one contiguous layer range to 2x @ 8-bit or 1x @ 16-bit
(byte-preserving swaps) and measures the logit perturbation of decode
against the uncompressed path. Ranges cover the initial and final layers in
4-layer steps and the intermediate layers in one 8-layer step.
"""

import argparse
from pathlib import Path

import numpy as np

from kvtrade.sweep import SweepConfig, emit_csv, run_sweep

RANGES = ["0-4", "4-8", "8-12", "12-16"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="layer_override_sweep.csv")
    ap.add_argument("--seeds", type=int, default=8)
    args = ap.parse_args()

    overrides = ["none"]
    overrides += [f"{r}@8x2" for r in RANGES]
    overrides += [f"{r}@16x1" for r in RANGES]

    cfg = SweepConfig(
        task="random_probe",
        model="random",
        seq_lens=(192,),
        seeds=tuple(range(args.seeds)),
        policies=("snapkv",),
        bits=(4,),
        token_multipliers=(4,),
        base_tokens=16,
        full_cache_tokens=192,
        probe_steps=4,
        layers=16,
        heads=2,
        d_model=32,
        vocab=64,
        context_limit=256,
        recent_window=8,
        overrides=tuple(overrides),
    )
    rows, skips = run_sweep(cfg)
    for skip in skips:
        print(f"skipped: {skip.reason}")

    base = [r for r in rows if r.override_id == "none"]
    base_perturb = float(np.median([r.logit_perturb for r in base]))
    print(f"baseline 4x@4-bit: median perturbation {base_perturb:.5f}\n")
    print(f"{'override':>12} {'median perturb':>14} {'delta vs base':>14} {'agree':>7}")
    for spec in overrides[1:]:
        sel = [r for r in rows if r.override_id == spec]
        if not sel:
            continue
        perturb = float(np.median([r.logit_perturb for r in sel]))
        agree = float(np.mean([r.accuracy for r in sel]))
        print(f"{spec:>12} {perturb:>14.5f} {perturb - base_perturb:>+14.5f} {agree:>7.2f}")

    out = Path(args.out)
    emit_csv(rows, out)
    print(f"\nwrote {len(rows)} rows to {out}")


if __name__ == "__main__":
    main()
