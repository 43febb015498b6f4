"""N=6 study of dynamic weight control: end-of-training pair similarity with and without it.

Also writes nu_trajectories.csv (epoch-mean max nu per run) for plotting.

    python scripts/dwc_study.py --epochs 20 --seeds 0,1,2,3,4
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from dcformer.config import default_config
from dcformer.plots import Series, line_plot
from dcformer.sweep import end_of_training_nu
from dcformer.train import train


def epoch_max_nu(history):
    by_epoch = {}
    for h in history:
        by_epoch.setdefault(h["epoch"], []).append([v for k, v in h.items() if k.startswith("nu_")])
    return [float(np.mean(by_epoch[e], axis=0).max()) for e in sorted(by_epoch)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/dwc")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    finals = {"on": [], "off": []}
    curves = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for tag, flag in (("on", "true"), ("off", "false")):
            cfg = default_config(model__num_tokens=args.tokens, loss__dwc=flag,
                                 optim__epochs=args.epochs, seed=seed)
            res = train(cfg, evaluate=False)
            nu = end_of_training_nu(res.history)
            finals[tag].append(float(nu.max()))
            curves.append((tag, seed, epoch_max_nu(res.history)))
            print(f"seed={seed} dwc={tag} max_nu={nu.max():.4f} mean_nu={nu.mean():.4f}", flush=True)

    with open(out / "nu_trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dwc", "seed", "epoch", "max_nu"])
        for tag, seed, ys in curves:
            w.writerows([tag, seed, e, repr(y)] for e, y in enumerate(ys))
    series = []
    for tag in ("on", "off"):
        runs = np.array([ys for t, _, ys in curves if t == tag])
        series.append(Series(f"DWC {tag} (median)", list(range(runs.shape[1])), list(np.median(runs, 0))))
    (out / "dwc_max_nu.svg").write_text(line_plot(series, f"max pair |cos|, N={args.tokens}",
                                                  "epoch", "max nu"))
    print(f"\nmedian end-of-training max nu: DWC on {np.median(finals['on']):.4f}, "
          f"off {np.median(finals['off']):.4f}")


if __name__ == "__main__":
    main()
