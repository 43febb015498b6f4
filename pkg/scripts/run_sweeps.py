"""Ablation sweeps over lambda, token count and training-identity fraction.

Each sweep goes to its own directory with sweep.csv, sweep_curves.csv and SVGs.

    python scripts/run_sweeps.py --seeds 0,1,2 --workers 2
"""

import argparse
from pathlib import Path

from dcformer.config import default_config
from dcformer.sweep import run_sweep

SWEEPS = {
    "lambda": [0.0, 0.1, 0.5, 1.0, 2.0],
    "num_tokens": [1, 2, 3, 4, 6],
    "identity_fraction": [0.25, 0.5, 1.0],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axes", default=",".join(SWEEPS))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="runs/sweeps")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    base = default_config(optim__epochs=args.epochs)
    for axis in args.axes.split(","):
        rows = run_sweep(base, axis, SWEEPS[axis], seeds, out_dir=Path(args.out) / axis,
                         workers=args.workers)
        for r in rows:
            m = r.metrics
            print(f"{axis}={r.value:g} seed={r.seed} {r.status} "
                  + " ".join(f"{k}={m[k]:.4f}" for k in ("mAP", "max_nu", "token_cosine") if k in m),
                  flush=True)


if __name__ == "__main__":
    main()
