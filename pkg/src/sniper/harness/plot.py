"""Self-contained SVG loss-curve charts (train and val panels side by side)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from ..trainer import ExperimentResult

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
PANEL_W, PANEL_H = 420, 300
MARGIN = dict(left=62, right=16, top=34, bottom=44)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    out, v = [], first
    while v <= hi + 1e-12 * abs(hi):
        out.append(round(v, 12))
        v += step
    return out


def _panel(series, attr: str, title: str, x0: float, log_y: bool) -> list[str]:
    xs = [r.epoch for _, res in series for r in res.rows]
    ys = [getattr(r, attr) for _, res in series for r in res.rows]
    tf = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    ty = [tf(v) for v in ys]
    xmin, xmax = min(xs), max(xs)
    ymin, ymax = min(ty), max(ty)
    if xmax == xmin:
        xmin, xmax = xmin - 1, xmax + 1
    if ymax == ymin:
        pad = abs(ymin) * 0.1 or 1.0
        ymin, ymax = ymin - pad, ymax + pad
    w = PANEL_W - MARGIN["left"] - MARGIN["right"]
    h = PANEL_H - MARGIN["top"] - MARGIN["bottom"]
    left, top = x0 + MARGIN["left"], MARGIN["top"]
    sx = lambda v: left + (v - xmin) / (xmax - xmin) * w
    sy = lambda v: top + h - (v - ymin) / (ymax - ymin) * h

    out = [f'<g class="panel" data-metric="{attr}">',
           f'<text x="{left + w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="none" stroke="#333"/>']
    for t in _ticks(xmin, xmax):
        out.append(f'<text x="{sx(t):.1f}" y="{top + h + 16}" text-anchor="middle" font-size="10">{t:g}</text>')
    for t in _ticks(ymin, ymax):
        label = f"{10 ** t:.3g}" if log_y else f"{t:.3g}"
        out.append(f'<line x1="{left}" x2="{left + w}" y1="{sy(t):.1f}" y2="{sy(t):.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 4}" y="{sy(t) + 3:.1f}" text-anchor="end" font-size="10">{label}</text>')
    out.append(f'<text x="{left + w / 2:.1f}" y="{PANEL_H - 8}" text-anchor="middle" font-size="12">epoch</text>')
    ylabel = f"{attr.replace('_', ' ')}{' (log)' if log_y else ''}"
    out.append(f'<text transform="translate({x0 + 14},{top + h / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle" font-size="12">{escape(ylabel)}</text>')
    for i, (label, res) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = [(sx(r.epoch), sy(tf(getattr(r, attr)))) for r in res.rows]
        if len(pts) == 1:
            out.append(f'<circle class="series" data-label="{escape(label)}" cx="{pts[0][0]:.2f}" '
                       f'cy="{pts[0][1]:.2f}" r="3" fill="{color}"/>')
        else:
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline class="series" data-label="{escape(label)}" points="{coords}" '
                       f'fill="none" stroke="{color}" stroke-width="1.5"/>')
    out.append("</g>")
    return out


def render_svg(series: list[tuple[str, ExperimentResult]], log_y: bool | None = None) -> str:
    """SVG text for labelled results; y is log-scaled when every loss is positive, unless overridden."""
    if not series:
        raise ValueError("nothing to plot")
    for label, res in series:
        if not res.rows:
            raise ValueError(f"series {label!r} has no rows")
    if log_y is None:
        log_y = all(r.train_loss > 0 and r.val_loss > 0 for _, res in series for r in res.rows)
    legend_h = 18 * len(series) + 10
    width, height = 2 * PANEL_W, PANEL_H + legend_h
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    parts += _panel(series, "train_loss", "training loss", 0, log_y)
    parts += _panel(series, "val_loss", "validation loss", PANEL_W, log_y)
    parts.append('<g class="legend">')
    for i, (label, _) in enumerate(series):
        y = PANEL_H + 12 + 18 * i
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<line x1="{MARGIN["left"]}" x2="{MARGIN["left"] + 24}" y1="{y}" y2="{y}" '
                     f'stroke="{color}" stroke-width="3"/>')
        parts.append(f'<text x="{MARGIN["left"] + 30}" y="{y + 4}" font-size="12">{escape(label)}</text>')
    parts.append("</g></svg>")
    return "\n".join(parts) + "\n"


def plot_csvs(csv_paths, out_svg) -> None:
    """One series per CSV, labelled by file stem."""
    paths = [Path(p) for p in csv_paths]
    if not paths:
        raise ValueError("no CSV files given")
    series = [(p.stem, ExperimentResult.from_csv(p)) for p in paths]
    Path(out_svg).write_text(render_svg(series))
