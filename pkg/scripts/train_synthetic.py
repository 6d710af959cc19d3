#!/usr/bin/env python3
"""End-to-end demo: synthesize motion data, train a small model, evaluate,
and export attention/routing weights for inspection.

Equivalent to chaining the CLI:
    stmoe gen-data / train / eval / export-attn
but with desk-scale defaults that finish in a few minutes on one core.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stmoe.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/demo")
    ap.add_argument("--ffn", choices=["dense", "moe"], default="dense")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    ckpt = work / "ckpt"

    steps = [
        ["gen-data", "--out", str(data), "--sequences", "64", "--length", "72",
         "--joints", "8", "--seed", str(args.seed), "--window", "24"],
        ["train", "--data", str(data), "--ckpt-dir", str(ckpt), "--window", "24",
         "--embed", "8", "--hidden", "64", "--layers", "1", "--batch", "16",
         "--opt", "adam", "--lr", "0.002", "--dropout", "0.0", "--stride", "8",
         "--epochs", str(args.epochs), "--ffn", args.ffn, "--seed", str(args.seed)],
    ]
    for step in steps:
        print(f"\n$ stmoe {' '.join(step)}")
        rc = cli_main(step)
        if rc != 0:
            return rc

    latest = sorted(ckpt.glob("ckpt_epoch*.stmc"))[-1]
    for step in [
        ["eval", "--ckpt", str(latest), "--data", str(data), "--split", "test", "--degrees"],
        ["export-attn", "--ckpt", str(latest), "--in", str(data / "seq_00000.motn"),
         "--out-dir", str(work / "attn")],
    ]:
        print(f"\n$ stmoe {' '.join(step)}")
        rc = cli_main(step)
        if rc != 0:
            return rc
    print(f"\nartifacts under {work}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
