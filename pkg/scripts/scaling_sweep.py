"""Full attention scaling sweep: counts and timings for n = 256 .. 8192.

Writes bench.csv / bench.json / bench.svg plus a manifest into --out and
prints the fitted log-log exponents.

    python scripts/scaling_sweep.py --out runs/sweep
"""
import argparse
import sys

from visreformer.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    sys.exit(main([
        "bench", "--n", "256,512,1024,2048,4096,8192", "--variants", "dense,lsh",
        "--trials", str(args.trials), "--seed", str(args.seed), "--threads", str(args.threads),
        "--out", args.out,
    ]))
