"""Train N=2 models with and without the similarity penalty and compare them.

Prints token cosine, per-token and concatenated mAP, and confusion for every
seed, then the medians. Run directories land under --out.

    python scripts/orthogonality.py --seeds 0,1,2,3,4 --out runs/orthogonality
"""

import argparse
from pathlib import Path

import numpy as np

from dcformer.config import default_config
from dcformer.reports import report_summary
from dcformer.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--lambdas", default="0,1")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="runs/orthogonality")
    args = ap.parse_args()

    table = {}
    for lam in args.lambdas.split(","):
        for seed in (int(s) for s in args.seeds.split(",")):
            cfg = default_config(loss__lambda=lam, seed=seed, optim__epochs=args.epochs)
            res = train(cfg, out_dir=Path(args.out) / f"lambda={lam}" / f"seed={seed}")
            s = report_summary(res.report)
            tokens = " ".join(f"{k}={r.mAP:.4f}" for k, r in res.report.rows.items())
            print(f"lambda={lam} seed={seed} cos={s['token_cosine']:.4f} {tokens} "
                  f"confusion={s['confusion']}", flush=True)
            table.setdefault(lam, []).append((s["token_cosine"], s["mAP"],
                                              res.report.best_single_token_map(), s["confusion"]))
    print("\nmedians        cosine   cat mAP  best single  confusion")
    for lam, rows in table.items():
        med = np.median(np.array(rows, dtype=float), axis=0)
        print(f"lambda={lam:<7} {med[0]:7.4f}  {med[1]:7.4f}  {med[2]:11.4f}  {med[3]:9.0f}")


if __name__ == "__main__":
    main()
