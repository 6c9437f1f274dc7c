"""Static SVG line charts of cohort-mean trajectories.

The SVG text is assembled by hand with fixed number formatting, so the same
CSV always produces the same bytes.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

WIDTH, HEIGHT = 480, 320
MARGIN = (56, 20, 28, 44)  # left, right, top, bottom
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    s = f"{x:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw * (1 - 1e-12))
    start = step * int(lo // step)
    ticks, v = [], start
    while v <= hi + 1e-9 * step:
        if v >= lo - 1e-9 * step:
            ticks.append(round(v, 10))
        v += step
    return ticks


def line_chart(series: Mapping[str, Sequence[tuple[float, float]]], title: str,
               ylabel: str, xlabel: str = "year") -> str:
    """Render named (x, y) series as an SVG document string."""
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    yt = _nice_ticks(y0, y1)
    y0, y1 = min(y0, yt[0]), max(y1, yt[-1])
    if x1 == x0:
        x1 = x0 + 1.0
    l, r, t, b = MARGIN
    pw, ph = WIDTH - l - r, HEIGHT - t - b

    def px(x):
        return l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return t + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{_fmt(WIDTH / 2)}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>']
    for v in yt:
        y = _fmt(py(v))
        out.append(f'<line x1="{l}" y1="{y}" x2="{l + pw}" y2="{y}" stroke="#e0e0e0"/>')
        out.append(f'<text x="{l - 6}" y="{y}" text-anchor="end" dy="4">{_fmt(v)}</text>')
    for v in range(int(x0), int(x1) + 1):
        x = _fmt(px(v))
        out.append(f'<line x1="{x}" y1="{t + ph}" x2="{x}" y2="{t + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{t + ph + 16}" text-anchor="middle">{v}</text>')
    out.append(f'<polyline points="{l},{t} {l},{t + ph} {l + pw},{t + ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{_fmt(l + pw / 2)}" y="{HEIGHT - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text transform="translate(14 {_fmt(t + ph / 2)}) rotate(-90)" '
               f'text-anchor="middle">{_esc(ylabel)}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in s)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = t + 12 + 14 * k
        out.append(f'<line x1="{l + pw - 110}" y1="{ly}" x2="{l + pw - 92}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{l + pw - 88}" y="{ly}" dy="4">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def read_trajectories(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mean_series(rows: Sequence[dict], column: str, method: str | None = None):
    acc = defaultdict(list)
    for row in rows:
        if method is not None and row.get("method", method) != method:
            continue
        if row.get(column, "") == "":
            continue
        acc[int(row["t"])].append(float(row[column]))
    return [(float(t), sum(v) / len(v)) for t, v in sorted(acc.items())]


def plot_trajectories(csv_path, out_dir) -> list[Path]:
    """Write cognition.svg, information.svg and activity.svg into ``out_dir``."""
    rows = read_trajectories(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = sorted({r.get("method", "") for r in rows})
    V = sum(1 for c in (rows[0] if rows else {}) if c.startswith("I_"))
    cog = {"ground truth": mean_series(rows, "C_true", methods[0] if methods else None)}
    for m in methods:
        cog[f"{m or 'model'}"] = mean_series(rows, "C_pred", m)
    main = "rl" if "rl" in methods else (methods[0] if methods else None)
    info = {f"region {v + 1}": mean_series(rows, f"I_{v + 1}", main) for v in range(V)}
    act = {f"region {v + 1}": mean_series(rows, f"Y_{v + 1}", main) for v in range(V)}
    files = []
    for name, series, title, ylabel in (
            ("cognition.svg", cog, "Mean cognition", "C(t)"),
            ("information.svg", info, f"Mean information processing ({main})", "I(t)"),
            ("activity.svg", act, f"Mean activity ({main})", "Y(t)")):
        p = out / name
        p.write_text(line_chart(series, title, ylabel))
        files.append(p)
    return files
