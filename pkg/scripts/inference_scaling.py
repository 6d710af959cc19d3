#!/usr/bin/env python3
"""Dense-vs-MoE inference-time scaling experiment.

Sweeps the dense feed-forward hidden dim (64..2048) against the expert
count of the MoE variant (2..32, one slot per expert) on a shared small
backbone, then prints the max/min time and parameter ratios.  Writes the
raw rows as CSV plus a JSON metadata sidecar for plotting.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stmoe.inference import SweepSpec, bench_inference, scaling_summary


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="bench.csv")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--windows", type=int, default=8)
    ap.add_argument("--expert-hidden", type=int, default=192)
    ap.add_argument("--multi-threaded", action="store_true")
    args = ap.parse_args()

    spec = SweepSpec(
        reps=args.reps,
        num_windows=args.windows,
        moe_expert_hidden=args.expert_hidden,
        multi_threaded=args.multi_threaded,
    )
    report = bench_inference(spec)
    out = Path(args.out)
    report.write_csv(out)
    report.write_metadata(out.with_suffix(".meta.json"))

    print(f"{'kind':<9} {'param':>6} {'total_params':>13} {'seconds':>9} {'preds/s':>9}")
    for r in report.rows:
        print(f"{r.kind:<9} {r.param:>6} {r.total_params:>13} {r.seconds:>9.4f} {r.preds_per_sec:>9.1f}")
    summary = scaling_summary(report)
    print()
    print(f"dense  time ratio (2048 vs 64):  {summary['dense_time_ratio']:.2f}x "
          f"at {summary['dense_param_ratio']:.1f}x params")
    print(f"softmoe time ratio (32 vs 2):    {summary['soft_moe_time_ratio']:.2f}x "
          f"at {summary['soft_moe_param_ratio']:.1f}x params")
    print(f"\nwrote {out} and {out.with_suffix('.meta.json')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
