"""Ablation sweeps: one training run per (value, seed), merged in value order."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, apply_overrides
from .errors import ConfigError
from .plots import write_plots
from .reports import report_summary
from .train import train

log = logging.getLogger(__name__)

AXES = {
    "lambda": "loss.lambda",
    "num_tokens": "model.num_tokens",
    "dwc": "loss.dwc",
    "identity_fraction": "data.identity_fraction",
}
SWEEP_HEADER = ["axis", "value", "seed", "status", "mAP", "rank1", "final_sdc", "max_nu",
                "mean_nu", "token_cosine", "confusion", "error"]


def parse_value(axis: str, raw: str) -> float:
    """Numeric value for the CSV; dwc accepts on/off style booleans as 1/0."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(AXES)}")
    raw = raw.strip()
    if axis == "dwc":
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return 1.0
        if low in ("0", "false", "off", "no"):
            return 0.0
        raise ConfigError(f"dwc value must be a boolean, got {raw!r}")
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{axis} value must be numeric, got {raw!r}") from None
    if axis == "num_tokens" and (v != int(v) or v < 1):
        raise ConfigError(f"num_tokens must be a positive integer, got {raw!r}")
    return v


def _override_text(axis: str, value: float) -> str:
    if axis == "dwc":
        return "true" if value else "false"
    if axis == "num_tokens":
        return str(int(value))
    return repr(value)


def run_config_for(base: RunConfig, axis: str, value: float, seed: int) -> RunConfig:
    return apply_overrides(base, {AXES[axis]: _override_text(axis, value), "seed": str(seed)})


def end_of_training_nu(history: Sequence[dict]) -> np.ndarray:
    """Per-pair nu averaged over the optimizer steps of the last epoch."""
    if not history:
        return np.zeros(0)
    last = history[-1]["epoch"]
    keys = [k for k in history[-1] if k.startswith("nu_")]
    rows = [[h[k] for k in keys] for h in history if h["epoch"] == last]
    return np.asarray(rows, dtype=float).mean(axis=0) if keys else np.zeros(0)


def final_sdc(history: Sequence[dict]) -> float:
    last = history[-1]["epoch"]
    return float(np.mean([h["loss_sdc"] for h in history if h["epoch"] == last]))


@dataclass
class SweepRow:
    axis: str
    value: float
    seed: int
    status: str
    metrics: dict
    curve: list[float]
    error: str = ""

    def csv_row(self) -> list[str]:
        m = self.metrics
        nums = [m.get(k, math.nan) for k in ("mAP", "rank1", "final_sdc", "max_nu", "mean_nu",
                                             "token_cosine")]
        conf = m.get("confusion")
        return ([self.axis, repr(self.value), str(self.seed), self.status]
                + [repr(float(v)) for v in nums]
                + ["" if conf is None else str(int(conf)), self.error])


def run_one(base: RunConfig, axis: str, value: float, seed: int,
            out_dir: Optional[str], evaluate: bool = True) -> SweepRow:
    """Train one sweep cell. Failures are captured in the row, never raised."""
    try:
        cfg = run_config_for(base, axis, value, seed)
        res = train(cfg, out_dir=out_dir, evaluate=evaluate)
        nu = end_of_training_nu(res.history)
        metrics = {
            "final_sdc": final_sdc(res.history),
            "max_nu": float(nu.max()) if nu.size else 0.0,
            "mean_nu": float(nu.mean()) if nu.size else 0.0,
        }
        if res.report is not None:
            metrics.update(report_summary(res.report))
        curve = [h["loss_sdc"] for h in res.history]
        return SweepRow(axis, value, seed, "ok", metrics, curve)
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        log.error("sweep cell %s=%r seed=%d failed: %s", axis, value, seed, exc)
        return SweepRow(axis, value, seed, "failed", {}, [], f"{type(exc).__name__}: {exc}")


def _run_star(args) -> SweepRow:
    return run_one(*args)


def run_sweep(base: RunConfig, axis: str, values: Sequence[float], seeds: Sequence[int],
              out_dir=None, workers: int = 1, evaluate: bool = True) -> list[SweepRow]:
    """All (value, seed) cells; results come back sorted by value then seed."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    for v in values:
        run_config_for(base, axis, v, seeds[0])  # fail fast on invalid values
    jobs = []
    for v in values:
        for s in seeds:
            sub = None if out_dir is None else str(Path(out_dir) / f"{axis}={_override_text(axis, v)}" / f"seed={s}")
            jobs.append((base, axis, v, s, sub, evaluate))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_star, jobs))
    else:
        rows = [_run_star(j) for j in jobs]
    rows.sort(key=lambda r: (r.value, r.seed))
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: Sequence[SweepRow], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "sweep.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.csv_row())
    curves = out / "sweep_curves.csv"
    with open(curves, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "seed", "step", "loss_sdc"])
        for r in rows:
            for i, v in enumerate(r.curve):
                w.writerow([repr(r.value), str(r.seed), str(i), repr(float(v))])
    paths = {"summary": summary, "curves": curves}
    if any(r.status == "ok" and r.curve for r in rows):
        for svg in write_plots([summary, curves], out):
            paths[svg.stem] = svg
    return paths
