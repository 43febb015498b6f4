"""CSV serialisation of evaluation reports."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .evaluation import EvalReport

CMC_RANKS = (1, 5, 10)


def _f(v) -> str:
    return repr(float(v))


def metrics_rows(report: EvalReport) -> list[list[str]]:
    rows = [["embedding", "mAP"] + [f"rank{k}" for k in CMC_RANKS] + ["valid_queries", "excluded"]]
    for name, r in report.rows.items():
        rows.append([name, _f(r.mAP)] + [_f(r.rank(k)) for k in CMC_RANKS]
                    + [str(r.num_valid), str(len(r.excluded))])
    return rows


def write_eval_report(report: EvalReport, path) -> Path:
    """One file, several ``# block`` sections: metrics, token_cosine, histogram, summary."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write("# metrics\n")
        w.writerows(metrics_rows(report))
        fh.write("\n# token_cosine\n")
        n = report.token_cosine.shape[0]
        w.writerow(["token"] + [f"token{j + 1}" for j in range(n)])
        for i in range(n):
            w.writerow([f"token{i + 1}"] + [_f(v) for v in report.token_cosine[i]])
        fh.write("\n# distance_histogram\n")
        d = report.distances
        w.writerow(["bin_lo", "bin_hi", "positive", "negative"])
        for lo, hi, p, q in zip(d.edges[:-1], d.edges[1:], d.positive_hist, d.negative_hist):
            w.writerow([_f(lo), _f(hi), str(int(p)), str(int(q))])
        fh.write("\n# summary\n")
        w.writerow(["key", "value"])
        w.writerow(["confusion", str(report.confusion)])
        w.writerow(["num_queries", str(report.num_queries)])
        w.writerow(["excluded_queries", str(report.excluded_queries)])
        w.writerow(["positive_pairs", str(d.positive.size)])
        w.writerow(["negative_pairs_sampled", str(d.negative.size)])
        w.writerow(["negative_pairs_total", str(d.total_negatives)])
    return path


def read_blocks(path) -> dict[str, list[list[str]]]:
    """Parse a ``# block`` CSV file into {block name: rows (header first)}."""
    blocks: dict[str, list[list[str]]] = {}
    current = None
    with open(path, newline="", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# "):
                current = line[2:].strip()
                blocks[current] = []
            elif line.strip():
                if current is None:
                    raise ValueError(f"{path}:{n}: data before the first '# block' header")
                blocks[current].append(next(csv.reader([line])))
    return blocks


def write_distances(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "distance"])
        for v in report.distances.positive:
            w.writerow(["positive", _f(v)])
        for v in report.distances.negative:
            w.writerow(["negative", _f(v)])
    return path


def write_projection(report: EvalReport, path) -> Path | None:
    if report.projection is None:
        return None
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token", "pc1", "pc2"])
        coords = report.projection.coords
        for t, row in zip(report.projection_tokens, coords):
            w.writerow([str(int(t) + 1), _f(row[0]), _f(row[1] if len(row) > 1 else 0.0)])
    return path


def write_eval_artifacts(report: EvalReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": write_eval_report(report, out / "eval_report.csv"),
        "distances": write_distances(report, out / "distances.csv"),
    }
    proj = write_projection(report, out / "projection.csv")
    if proj is not None:
        paths["projection"] = proj
    return paths


def report_summary(report: EvalReport) -> dict[str, float]:
    out = {"mAP": report.mAP, "rank1": report.rows["cat"].rank(1), "confusion": report.confusion}
    n = report.token_cosine.shape[0]
    off = report.token_cosine[~np.eye(n, dtype=bool)]
    out["token_cosine"] = float(off.mean()) if off.size else 0.0
    out["token_cosine_max"] = float(off.max()) if off.size else 0.0
    return out
