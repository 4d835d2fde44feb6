"""A minimal SVG emitter: line, scatter, and histogram plots.

Deliberately tiny; CSV files are the canonical numeric output and these
figures are never parsed back. Everything is plain string assembly with
a fixed viewport and linear axes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _limits(vals, pad=0.05):
    vals = np.asarray(vals, dtype=float)
    if not np.any(np.isfinite(vals)):
        return 0.0, 1.0
    lo, hi = float(np.nanmin(vals)), float(np.nanmax(vals))
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _scale(v, lo, hi, out_lo, out_hi):
    return out_lo + (np.asarray(v, dtype=float) - lo) * (out_hi - out_lo) / (hi - lo)


def _ticks(lo, hi, n=5):
    raw = np.linspace(lo, hi, n)
    return [float(f"{v:.4g}") for v in raw]


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim):
        self.xlim, self.ylim = xlim, ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle">{xlabel}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{ylabel}</text>',
            f'<rect x="{MARGIN}" y="{MARGIN / 2 + 8}" width="{WIDTH - 2 * MARGIN}" '
            f'height="{HEIGHT - MARGIN - MARGIN / 2 - 8}" fill="none" stroke="#999"/>',
        ]
        self._axes()

    def x_px(self, v):
        return _scale(v, self.xlim[0], self.xlim[1], MARGIN, WIDTH - MARGIN)

    def y_px(self, v):
        return _scale(v, self.ylim[0], self.ylim[1], HEIGHT - MARGIN, MARGIN / 2 + 8)

    def _axes(self):
        for tv in _ticks(*self.xlim):
            px = self.x_px(tv)
            self.parts.append(
                f'<text x="{px:.1f}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
                f'fill="#444">{tv:g}</text>'
            )
        for tv in _ticks(*self.ylim):
            py = self.y_px(tv)
            self.parts.append(
                f'<text x="{MARGIN - 6}" y="{py + 4:.1f}" text-anchor="end" fill="#444">{tv:g}</text>'
            )

    def legend(self, labels):
        for i, lab in enumerate(labels):
            y = MARGIN / 2 + 24 + 16 * i
            self.parts.append(
                f'<rect x="{WIDTH - MARGIN - 130}" y="{y - 9}" width="10" height="10" '
                f'fill="{PALETTE[i % len(PALETTE)]}"/>'
                f'<text x="{WIDTH - MARGIN - 115}" y="{y}">{lab}</text>'
            )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_plot(xs, series, labels=None, title="", xlabel="", ylabel="", path=None) -> str:
    """Polyline plot of one or more y-series against shared x values."""
    xs = np.asarray(xs, dtype=float)
    series = [np.asarray(y, dtype=float) for y in series]
    cv = _Canvas(title, xlabel, ylabel, _limits(xs), _limits(np.concatenate(series)))
    for i, ys in enumerate(series):
        pts = " ".join(
            f"{cv.x_px(x):.2f},{cv.y_px(y):.2f}"
            for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y)
        )
        cv.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" '
            f'stroke-width="1.5"/>'
        )
    if labels:
        cv.legend(labels)
    return _finish(cv, path)


def scatter_plot(groups, labels=None, title="", xlabel="", ylabel="", path=None) -> str:
    """Scatter of one or more (n, 2) point groups."""
    groups = [np.atleast_2d(np.asarray(g, dtype=float)) for g in groups]
    allpts = np.concatenate(groups)
    cv = _Canvas(title, xlabel, ylabel, _limits(allpts[:, 0]), _limits(allpts[:, 1]))
    for i, g in enumerate(groups):
        color = PALETTE[i % len(PALETTE)]
        for x, y in g:
            cv.parts.append(
                f'<circle cx="{cv.x_px(x):.2f}" cy="{cv.y_px(y):.2f}" r="2" '
                f'fill="{color}" fill-opacity="0.5"/>'
            )
    if labels:
        cv.legend(labels)
    return _finish(cv, path)


def histogram(samples, bins=40, title="", xlabel="", ylabel="count", path=None,
              reference=None, labels=None) -> str:
    """Histogram of 1-d samples, optionally overlaid with a reference set."""
    samples = np.asarray(samples, dtype=float).ravel()
    sets = [samples] + ([np.asarray(reference, dtype=float).ravel()] if reference is not None else [])
    lo, hi = _limits(np.concatenate(sets), pad=0.02)
    edges = np.linspace(lo, hi, bins + 1)
    counts = [np.histogram(s, bins=edges)[0] for s in sets]
    cv = _Canvas(title, xlabel, ylabel, (lo, hi), (0.0, float(max(c.max() for c in counts)) * 1.05))
    for i, c in enumerate(counts):
        color = PALETTE[i % len(PALETTE)]
        for j, n in enumerate(c):
            if n == 0:
                continue
            x0, x1 = cv.x_px(edges[j]), cv.x_px(edges[j + 1])
            y0, y1 = cv.y_px(n), cv.y_px(0)
            cv.parts.append(
                f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" '
                f'height="{y1 - y0:.2f}" fill="{color}" fill-opacity="0.45"/>'
            )
    if labels:
        cv.legend(labels)
    return _finish(cv, path)


def _finish(cv: _Canvas, path) -> str:
    text = cv.render()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
