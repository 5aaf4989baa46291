"""Standalone SVG trajectory plots, no rendering dependency.

One polyline per task plus one for the overall improvement, all in percent
relative to the pre-update evaluation, so tasks with incommensurable units
share an axis.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .sync_metrics import NORM_EPS
from .trajectory_io import read_trajectory_csv

# metric name decides orientation; flips sign so up is always better
HIGHER_BETTER = {"miou": True, "rmse": False, "angular_deg": False}

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf")
OVERALL = "#000000"


def improvement_series(traj, metric_of) -> dict:
    """Percent improvement vs step 1 per task, plus their mean under
    "delta_ttt"."""
    out = {}
    for t in traj.tasks:
        y = traj.inner_series(t)
        if metric_of[t] not in HIGHER_BETTER:
            raise ValueError(f"unknown metric {metric_of[t]!r} for {t!r}")
        sign = 1.0 if HIGHER_BETTER[metric_of[t]] else -1.0
        out[t] = 100.0 * sign * (y - y[0]) / max(abs(y[0]), NORM_EPS)
    out["delta_ttt"] = np.mean([out[t] for t in traj.tasks], axis=0)
    return out


def render_plot(csv_path, width: int = 640, height: int = 420,
                title: str = "") -> str:
    traj, metric_of = read_trajectory_csv(csv_path)
    if not traj.records:
        raise ValueError(f"{csv_path}: trajectory is empty, nothing to plot")
    series = improvement_series(traj, metric_of)
    n_steps = len(series["delta_ttt"])

    left, right, top, bottom = 62, width - 130, 34, height - 48
    lo = min(float(np.min(v)) for v in series.values())
    hi = max(float(np.max(v)) for v in series.values())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.06 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(step):  # steps are 1-based
        if n_steps == 1:
            return (left + right) / 2
        return left + (right - left) * (step - 1) / (n_steps - 1)

    def sy(v):
        return bottom - (bottom - top) * (v - lo) / (hi - lo)

    def pts(vals):
        return " ".join(f"{sx(i + 1):.2f},{sy(v):.2f}"
                        for i, v in enumerate(vals))

    e = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
         f'height="{height}" viewBox="0 0 {width} {height}">',
         f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        e.append(f'<text x="{(left + right) / 2:.0f}" y="20" '
                 f'text-anchor="middle" font-size="13" '
                 f'font-family="sans-serif">{escape(title)}</text>')
    # axes
    e.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" '
             f'stroke="#333" stroke-width="1"/>')
    e.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" '
             f'stroke="#333" stroke-width="1"/>')
    if lo < 0.0 < hi:
        e.append(f'<line x1="{left}" y1="{sy(0):.2f}" x2="{right}" '
                 f'y2="{sy(0):.2f}" stroke="#bbb" stroke-width="1" '
                 f'stroke-dasharray="4 3"/>')
    # axis labels and extreme ticks
    e.append(f'<text x="{(left + right) / 2:.0f}" y="{height - 12}" '
             f'text-anchor="middle" font-size="12" '
             f'font-family="sans-serif">adaptation step</text>')
    e.append(f'<text x="16" y="{(top + bottom) / 2:.0f}" font-size="12" '
             f'font-family="sans-serif" text-anchor="middle" '
             f'transform="rotate(-90 16 {(top + bottom) / 2:.0f})">'
             f'improvement vs step 1 (%)</text>')
    for step in (1, n_steps):
        e.append(f'<text x="{sx(step):.2f}" y="{bottom + 16}" '
                 f'text-anchor="middle" font-size="10" '
                 f'font-family="sans-serif">{step}</text>')
    for v in (lo + pad, hi - pad):
        e.append(f'<text x="{left - 6}" y="{sy(v) + 3:.2f}" '
                 f'text-anchor="end" font-size="10" '
                 f'font-family="sans-serif">{v:.3g}</text>')

    names = list(traj.tasks) + ["delta_ttt"]
    for i, name in enumerate(names):
        overall = name == "delta_ttt"
        color = OVERALL if overall else PALETTE[i % len(PALETTE)]
        w = 2.5 if overall else 1.5
        e.append(f'<polyline points="{pts(series[name])}" fill="none" '
                 f'stroke="{color}" stroke-width="{w}"/>')
        ly = top + 16 * i
        e.append(f'<text x="{right + 12}" y="{ly}" font-size="11" '
                 f'font-family="sans-serif" fill="{color}">'
                 f'{escape(name)}</text>')
    e.append("</svg>")
    return "\n".join(e)
