"""Small dependency-free SVG charts: lines, scatter, and paired histograms.

Output is a pure function of the input data (fixed float formatting, no
timestamps or random ids), so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f")
WIDTH, HEIGHT = 480, 320
MARGIN = (56, 20, 36, 44)  # left, right, top, bottom


class PlotInputError(ValueError):
    """Input CSV does not match the schema a plot expects."""


@dataclass
class Series:
    label: str
    xs: Sequence[float]
    ys: Sequence[float]


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick_values(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * abs(hi):
        out.append(round(v, 12))
        v += step
    return out


def _bounds(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xr, yr):
        self.parts: list[str] = []
        self.xr, self.yr = xr, yr
        left, right, top, bottom = MARGIN
        self.x0, self.x1 = left, WIDTH - right
        self.y0, self.y1 = HEIGHT - bottom, top
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">'
        )
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(f'<text x="{WIDTH / 2}" y="16" text-anchor="middle" font-size="13">'
                          f'{escape(title)}</text>')
        self._axes(xlabel, ylabel)

    def sx(self, x: float) -> float:
        lo, hi = self.xr
        return self.x0 + (x - lo) / (hi - lo) * (self.x1 - self.x0)

    def sy(self, y: float) -> float:
        lo, hi = self.yr
        return self.y0 + (y - lo) / (hi - lo) * (self.y1 - self.y0)

    def _axes(self, xlabel: str, ylabel: str) -> None:
        p = self.parts
        p.append(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>')
        p.append(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>')
        for t in _tick_values(*self.xr):
            x = self.sx(t)
            p.append(f'<line x1="{_num(x)}" y1="{self.y0}" x2="{_num(x)}" y2="{self.y0 + 4}" stroke="black"/>')
            p.append(f'<text x="{_num(x)}" y="{self.y0 + 16}" text-anchor="middle">{t:g}</text>')
        for t in _tick_values(*self.yr):
            y = self.sy(t)
            p.append(f'<line x1="{self.x0 - 4}" y1="{_num(y)}" x2="{self.x0}" y2="{_num(y)}" stroke="black"/>')
            p.append(f'<text x="{self.x0 - 6}" y="{_num(y + 4)}" text-anchor="end">{t:g}</text>')
        p.append(f'<text x="{(self.x0 + self.x1) / 2}" y="{HEIGHT - 8}" text-anchor="middle">'
                 f'{escape(xlabel)}</text>')
        ymid = (self.y0 + self.y1) / 2
        p.append(f'<text x="14" y="{ymid}" text-anchor="middle" transform="rotate(-90 14 {ymid})">'
                 f'{escape(ylabel)}</text>')

    def legend(self, labels: Sequence[str]) -> None:
        for i, label in enumerate(labels):
            y = self.y1 + 12 + 14 * i
            color = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{self.x1 - 110}" y="{y - 8}" width="10" height="10" fill="{color}"/>')
            self.parts.append(f'<text x="{self.x1 - 96}" y="{y + 1}">{escape(label)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str,
              markers: bool = False) -> str:
    xs = [x for s in series for x in s.xs]
    ys = [y for s in series for y in s.ys if math.isfinite(y)]
    if not xs or not ys:
        raise PlotInputError("line plot needs at least one finite point")
    c = _Canvas(title, xlabel, ylabel, _bounds(xs), _bounds(ys))
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_num(c.sx(x))},{_num(c.sy(y))}" for x, y in zip(s.xs, s.ys)
                       if math.isfinite(y))
        c.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if markers:
            for x, y in zip(s.xs, s.ys):
                if math.isfinite(y):
                    c.parts.append(f'<circle cx="{_num(c.sx(x))}" cy="{_num(c.sy(y))}" r="3" fill="{color}"/>')
    c.legend([s.label for s in series])
    return c.render()


def scatter_plot(series: Sequence[Series], title: str, xlabel: str, ylabel: str) -> str:
    xs = [x for s in series for x in s.xs]
    ys = [y for s in series for y in s.ys]
    if not xs:
        raise PlotInputError("scatter plot needs at least one point")
    c = _Canvas(title, xlabel, ylabel, _bounds(xs), _bounds(ys))
    shapes = ("circle", "square")
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        for x, y in zip(s.xs, s.ys):
            px, py = c.sx(x), c.sy(y)
            if shapes[i % 2] == "circle":
                c.parts.append(f'<circle cx="{_num(px)}" cy="{_num(py)}" r="2.5" fill="{color}" fill-opacity="0.6"/>')
            else:
                c.parts.append(f'<rect x="{_num(px - 2.5)}" y="{_num(py - 2.5)}" width="5" height="5" '
                               f'fill="{color}" fill-opacity="0.6"/>')
    c.legend([s.label for s in series])
    return c.render()


def histogram_plot(edges: Sequence[float], counts: Sequence[Sequence[float]], labels: Sequence[str],
                   title: str, xlabel: str, ylabel: str = "pairs (fraction)") -> str:
    """Overlaid step histograms, each normalised to unit mass."""
    if len(edges) < 2:
        raise PlotInputError("histogram needs at least one bin")
    norm = []
    for cs in counts:
        total = float(sum(cs)) or 1.0
        norm.append([v / total for v in cs])
    top = max(max(n) for n in norm) or 1.0
    c = _Canvas(title, xlabel, ylabel, (edges[0], edges[-1]), (0.0, top * 1.05))
    for i, ns in enumerate(norm):
        color = PALETTE[i % len(PALETTE)]
        pts = [f"{_num(c.sx(edges[0]))},{_num(c.sy(0))}"]
        for lo, hi, v in zip(edges[:-1], edges[1:], ns):
            pts.append(f"{_num(c.sx(lo))},{_num(c.sy(v))}")
            pts.append(f"{_num(c.sx(hi))},{_num(c.sy(v))}")
        pts.append(f"{_num(c.sx(edges[-1]))},{_num(c.sy(0))}")
        c.parts.append(f'<polyline fill="{color}" fill-opacity="0.25" stroke="{color}" '
                       f'points="{" ".join(pts)}"/>')
    c.legend(list(labels))
    return c.render()


# ---------------------------------------------------------------------------
# CSV-driven entry points


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlotInputError(f"{path}: empty file")
    return rows[0], rows[1:]


def _floats(path, header, rows, cols) -> dict[str, list[float]]:
    idx = {}
    for col in cols:
        if col not in header:
            raise PlotInputError(f"{path}:1: missing column {col!r}")
        idx[col] = header.index(col)
    out = {c: [] for c in cols}
    for n, row in enumerate(rows, 2):
        if len(row) != len(header):
            raise PlotInputError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        for c, i in idx.items():
            try:
                out[c].append(float(row[i]))
            except ValueError:
                raise PlotInputError(f"{path}:{n}: column {c!r} is not a number: {row[i]!r}") from None
    return out


def plot_metrics(path) -> dict[str, str]:
    """Loss curves and pairwise similarity curves from a training metrics CSV."""
    header, rows = _read_csv(path)
    if not rows:
        raise PlotInputError(f"{path}: no data rows")
    loss_cols = [c for c in header if c.startswith("loss_") or c.startswith("id_")
                 or c.startswith("triplet_")]
    nu_cols = [c for c in header if c.startswith("nu_")]
    data = _floats(path, header, rows, ["step"] + loss_cols + nu_cols)
    steps = data["step"]
    out = {"losses": line_plot([Series(c, steps, data[c]) for c in loss_cols],
                               "training losses", "step", "loss")}
    if nu_cols:
        out["pair_similarity"] = line_plot([Series(c, steps, data[c]) for c in nu_cols],
                                           "pairwise |cos| of class tokens", "step", "nu")
    return out


def plot_distances(path) -> dict[str, str]:
    header, rows = _read_csv(path)
    if header != ["kind", "distance"]:
        raise PlotInputError(f"{path}:1: expected header kind,distance")
    pos, neg = [], []
    for n, row in enumerate(rows, 2):
        if len(row) != 2 or row[0] not in ("positive", "negative"):
            raise PlotInputError(f"{path}:{n}: expected positive|negative,<float>")
        try:
            (pos if row[0] == "positive" else neg).append(float(row[1]))
        except ValueError:
            raise PlotInputError(f"{path}:{n}: distance is not a number") from None
    if not pos or not neg:
        raise PlotInputError(f"{path}: need both positive and negative rows")
    lo, hi = min(pos + neg), max(pos + neg)
    hi = hi if hi > lo else lo + 1.0
    bins = 30
    edges = [lo + (hi - lo) * i / bins for i in range(bins + 1)]

    def hist(vals):
        counts = [0] * bins
        for v in vals:
            counts[min(int((v - lo) / (hi - lo) * bins), bins - 1)] += 1
        return counts

    return {"distances": histogram_plot(edges, [hist(pos), hist(neg)],
                                        ["positive pairs", "negative pairs"],
                                        "query-gallery distances", "euclidean distance")}


def plot_projection(path) -> dict[str, str]:
    header, rows = _read_csv(path)
    data = _floats(path, header, rows, ["token", "pc1", "pc2"])
    tokens = sorted(set(int(t) for t in data["token"]))
    series = []
    for t in tokens:
        sel = [i for i, v in enumerate(data["token"]) if int(v) == t]
        series.append(Series(f"token {t}", [data["pc1"][i] for i in sel], [data["pc2"][i] for i in sel]))
    return {"projection": scatter_plot(series, "class-token features (PCA)", "pc1", "pc2")}


def plot_sweep(path) -> dict[str, str]:
    """One figure per metric, one line per grouping value of the sweep CSV."""
    header, rows = _read_csv(path)
    if not rows:
        raise PlotInputError(f"{path}: no data rows")
    metrics = [c for c in ("mAP", "rank1", "final_sdc", "max_nu", "token_cosine") if c in header]
    data = _floats(path, header, [r for r in rows if len(r) == len(header) and r[header.index("status")] == "ok"]
                   if "status" in header else rows, ["value"] + metrics)
    values = sorted(set(data["value"]))
    out = {}
    for m in metrics:
        means = []
        for v in values:
            sel = [data[m][i] for i, x in enumerate(data["value"]) if x == v]
            means.append(sum(sel) / len(sel))
        if not any(math.isfinite(y) for y in means):
            continue  # e.g. mAP of a sweep run without evaluation
        out[m] = line_plot([Series(m, values, means)], f"{m} vs swept value",
                                      "value", m, markers=True)
    if not out:
        raise PlotInputError(f"{path}: no successful rows with finite metrics")
    return out


def plot_sweep_curves(path) -> dict[str, str]:
    """Seed-averaged SDC loss per step, one line per swept value."""
    header, rows = _read_csv(path)
    if not rows:
        raise PlotInputError(f"{path}: no data rows")
    data = _floats(path, header, rows, ["value", "seed", "step", "loss_sdc"])
    series = []
    for v in sorted(set(data["value"])):
        per_step: dict[float, list[float]] = {}
        for i, x in enumerate(data["value"]):
            if x == v:
                per_step.setdefault(data["step"][i], []).append(data["loss_sdc"][i])
        steps = sorted(per_step)
        series.append(Series(f"value={v:g}", steps, [sum(per_step[t]) / len(per_step[t]) for t in steps]))
    return {"sdc_curves": line_plot(series, "SDC loss during training", "step", "loss_sdc")}


def detect_and_plot(path) -> dict[str, str]:
    """Choose the figure type from the CSV header."""
    header, _ = _read_csv(path)
    if header == ["kind", "distance"]:
        return plot_distances(path)
    if header[:3] == ["token", "pc1", "pc2"]:
        return plot_projection(path)
    if "loss_total" in header:
        return plot_metrics(path)
    if header == ["value", "seed", "step", "loss_sdc"]:
        return plot_sweep_curves(path)
    if "value" in header and "mAP" in header:
        return plot_sweep(path)
    raise PlotInputError(f"{path}:1: unrecognised CSV header {header[:4]}")


def write_plots(paths: Sequence, out_dir) -> list[Path]:
    """Render every input; nothing is written unless all inputs parse."""
    rendered: dict[str, str] = {}
    for p in paths:
        stem = Path(p).stem
        for name, svg in detect_and_plot(p).items():
            rendered[f"{stem}_{name}.svg"] = svg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, svg in rendered.items():
        (out / name).write_text(svg, encoding="utf-8")
        written.append(out / name)
    return written
