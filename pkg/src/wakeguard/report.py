"""CSV tables and dependency-free SVG figures for attack and DET results."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class ReportInput:
    """Everything emit_report needs; each list may be empty but not all of them.

    accuracy rows: (method, arch, epsilon, mean_accuracy, std_accuracy, mean_snr_db)
    det curves:    name -> DetCurve
    histories:     name -> list of (step, accuracy, snr_db)
    noises:        name -> 2-D perturbation (frames x mels)
    """
    accuracy: list = field(default_factory=list)
    det: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    noises: dict = field(default_factory=dict)


def fmt(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# --- SVG -------------------------------------------------------------------

def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot(series, title, xlabel, ylabel, width=480, height=320, bands=None):
    """SVG text for named (x, y) series; `bands` maps name -> (lower, upper)."""
    left, right, top, bottom = 60, 130, 30, 45
    xs = [x for xs_, _ in series.values() for x in xs_]
    ys = [y for _, ys_ in series.values() for y in ys_ if math.isfinite(y)]
    for lo, hi in (bands or {}).values():
        ys += [v for v in list(lo) + list(hi) if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 15}" text-anchor="middle" '
                   f'font-size="10">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 5}" y="{py(t) + 3:.1f}" text-anchor="end" font-size="10">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
               f'font-size="11">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        if bands and name in bands:
            lo, hi = bands[name]
            poly = [(px(x), py(y)) for x, y in zip(sx, hi)] + [(px(x), py(y)) for x, y in zip(sx[::-1], lo[::-1])]
            out.append('<polygon points="' + " ".join(f"{a:.1f},{b:.1f}" for a, b in poly)
                       + f'" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = [(px(x), py(y)) for x, y in zip(sx, sy) if math.isfinite(y)]
        if pts:
            out.append('<polyline points="' + " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
                       + f'" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 8}" y1="{ly}" x2="{left + pw + 24}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 28}" y="{ly + 4}" font-size="10">{escape(name)}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def heatmap(values, title, cell=4):
    """SVG heatmap of a 2-D array; rows are drawn bottom-up (low mel at the bottom)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("heatmap needs a 2-D array")
    t, f = v.shape
    lim = float(np.abs(v).max()) or 1.0
    w, h = t * cell, f * cell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h + 20}" '
           f'viewBox="0 0 {w} {h + 20}">',
           f'<text x="2" y="13" font-size="11">{escape(title)} (max |v| {lim:.3g})</text>']
    for i in range(t):
        for j in range(f):
            a = v[i, j] / lim
            r, g, b = (255, int(255 * (1 - a)), int(255 * (1 - a))) if a >= 0 else \
                (int(255 * (1 + a)), int(255 * (1 + a)), 255)
            out.append(f'<rect x="{i * cell}" y="{20 + (f - 1 - j) * cell}" width="{cell}" '
                       f'height="{cell}" fill="rgb({r},{g},{b})"/>')
    out.append("</svg>\n")
    return "\n".join(out)


# --- report ----------------------------------------------------------------

def _slug(name):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(name))


def emit_report(results: ReportInput, out_dir):
    """Write CSVs and SVG figures; returns the sorted list of written paths."""
    if not (results.accuracy or results.det or results.histories or results.noises):
        raise ValueError("emit_report: nothing to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    if results.accuracy:
        rows = sorted(results.accuracy, key=lambda r: (r[0], r[1], r[2]))
        for method in sorted({r[0] for r in rows}):
            mrows = [r for r in rows if r[0] == method]
            path = out / f"accuracy_vs_eps_{_slug(method)}.csv"
            write_csv(path, ["method", "arch", "epsilon", "mean_accuracy", "std_accuracy", "mean_snr_db"], mrows)
            written.append(path)
            series, bands = {}, {}
            for arch in sorted({r[1] for r in mrows}):
                a = [r for r in mrows if r[1] == arch]
                xs = [r[2] for r in a]
                m = np.array([r[3] for r in a])
                s = np.array([r[4] for r in a])
                series[arch] = (xs, m.tolist())
                bands[arch] = ((m - s).tolist(), (m + s).tolist())
            path = out / f"accuracy_vs_eps_{_slug(method)}.svg"
            path.write_text(line_plot(series, f"{method}: test mask accuracy", "epsilon",
                                      "accuracy", bands=bands))
            written.append(path)
    if results.det:
        rows = []
        for name in sorted(results.det):
            c = results.det[name]
            rows += [(name, th, fa, raw, m) for th, fa, raw, m in
                     zip(c.thresholds, c.fa_per_hour, c.fa_per_hour_raw, c.miss_rate)]
        path = out / "det_points.csv"
        write_csv(path, ["name", "threshold", "fa_per_hour", "fa_per_hour_raw", "miss_rate"], rows)
        written.append(path)
        series = {n: (results.det[n].fa_per_hour.tolist(), results.det[n].miss_rate.tolist())
                  for n in sorted(results.det)}
        path = out / "det.svg"
        path.write_text(line_plot(series, "DET", "false alarms per hour", "miss rate"))
        written.append(path)
    for name in sorted(results.histories):
        path = out / f"history_{_slug(name)}.csv"
        write_csv(path, ["step", "accuracy", "snr_db"], results.histories[name])
        written.append(path)
    for name in sorted(results.noises):
        path = out / f"noise_{_slug(name)}.svg"
        path.write_text(heatmap(np.asarray(results.noises[name]), f"best noise {name}"))
        written.append(path)
    return sorted(written)
