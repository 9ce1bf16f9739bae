"""
Result files: deterministic JSON, trajectory CSV and small hand-written SVG plots.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import DomainError


def clean(obj):
    """Recursively convert numpy scalars/arrays and tuples to JSON-ready values.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``
    so that the output stays strict JSON.
    """
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": clean(obj.real), "im": clean(obj.imag)}
    return obj


def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_matrix(path) -> np.ndarray:
    """Square matrix from a JSON file holding a nested list or ``{"matrix": [...]}``."""
    data = read_json(path)
    if isinstance(data, dict):
        if "matrix" not in data:
            raise DomainError(f"{path}: expected a 'matrix' entry")
        data = data["matrix"]
    try:
        M = np.array(data, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"{path}: matrix entries must be numbers ({exc})") from None
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError(f"{path}: expected a square matrix, got shape {M.shape}")
    return M


def write_trajectory_csv(path, traj) -> Path:
    """Columns ``t, x1, x2, v1, v2, energy``; floats in ``repr`` form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x1", "x2", "v1", "v2", "energy"])
        for t, x, v, e in zip(traj.t, traj.x, traj.v, traj.energy):
            w.writerow([repr(float(t)), repr(float(x[0])), repr(float(x[1])),
                        repr(float(v[0])), repr(float(v[1])), repr(float(e))])
    return path


# SVG -------------------------------------------------------------------------

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
_W, _H, _PAD = 480, 360, 50


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _frame(xmin, xmax, ymin, ymax):
    if xmax == xmin:
        xmin, xmax = xmin - 0.5, xmax + 0.5
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5

    def sx(x):
        return _PAD + (x - xmin) / (xmax - xmin) * (_W - 2 * _PAD)

    def sy(y):
        return _H - _PAD - (y - ymin) / (ymax - ymin) * (_H - 2 * _PAD)

    return sx, sy, (xmin, xmax, ymin, ymax)


def _svg(body: list, title: str, box, xlabel: str, ylabel: str, clip: bool = False,
         overlay: list = ()) -> str:
    xmin, xmax, ymin, ymax = box
    if clip:
        body = ([f'<clipPath id="frame"><rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" '
                 f'height="{_H - 2 * _PAD}"/></clipPath>', '<g clip-path="url(#frame)">']
                + body + ["</g>"])
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
        f'<text x="{_W / 2}" y="{_PAD / 2}" text-anchor="middle" font-size="14">'
        f"{escape(title)}</text>",
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle" font-size="12">'
        f"{escape(xlabel)}</text>",
        f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>',
        f'<text x="{_PAD}" y="{_H - _PAD + 14}" font-size="10">{_fmt(xmin)}</text>',
        f'<text x="{_W - _PAD}" y="{_H - _PAD + 14}" text-anchor="end" font-size="10">'
        f"{_fmt(xmax)}</text>",
        f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-size="10">{_fmt(ymin)}</text>',
        f'<text x="{_PAD - 4}" y="{_PAD + 10}" text-anchor="end" font-size="10">{_fmt(ymax)}</text>',
    ]
    return "\n".join(head + body + list(overlay) + ["</svg>"]) + "\n"


def _polyline(points, color, sx, sy, width=1.5, dots=False) -> list:
    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
    out = [f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>']
    if dots:
        out += [f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{color}"/>'
                for x, y in points]
    return out


def line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """SVG line chart of ``{label: (xs, ys)}`` with a legend."""
    finite = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)
              if math.isfinite(x) and math.isfinite(y)]
    if not finite:
        finite = [(0.0, 0.0)]
    xs, ys = zip(*finite)
    sx, sy, box = _frame(min(xs), max(xs), min(ys), max(ys))
    body = []
    for j, (label, (px, py)) in enumerate(series.items()):
        color = _COLORS[j % len(_COLORS)]
        pts = [(x, y) for x, y in zip(px, py) if math.isfinite(x) and math.isfinite(y)]
        body += _polyline(pts, color, sx, sy, dots=True)
        body.append(f'<text x="{_W - _PAD - 4}" y="{_PAD + 14 + 14 * j}" text-anchor="end" '
                    f'font-size="11" fill="{color}">{escape(str(label))}</text>')
    return _svg(body, title, box, xlabel, ylabel)


def _torus_pieces(points: np.ndarray) -> list:
    """Split a lifted curve into pieces drawn inside the unit square.

    A segment that crosses a cell boundary is drawn in both cells, so the
    clipping by the plot frame closes the gap.
    """
    pieces, cur, cell = [], [points[0]], np.floor(points[0])
    for p, q in zip(points[:-1], points[1:]):
        cur.append(q)
        if np.any(np.floor(q) != cell):
            pieces.append(np.asarray(cur) - cell)
            cur, cell = [p, q], np.floor(q)
    pieces.append(np.asarray(cur) - cell)
    return [pc for pc in pieces if len(pc) > 1]


def orbit_plot(curves: dict, torus: bool = True, title: str = "") -> str:
    """SVG of curves ``{label: (M, 2) points}``; on the torus they are drawn mod 1."""
    if torus:
        sx, sy, box = _frame(0.0, 1.0, 0.0, 1.0)
    else:
        allp = np.vstack([np.asarray(c, float) for c in curves.values()])
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        half = 0.55 * float(np.max(hi - lo)) or 0.5
        mid = 0.5 * (lo + hi)
        sx, sy, box = _frame(mid[0] - half, mid[0] + half, mid[1] - half, mid[1] + half)
    body, legend = [], []
    for j, (label, pts) in enumerate(curves.items()):
        color = _COLORS[j % len(_COLORS)]
        pts = np.asarray(pts, float)
        pieces = _torus_pieces(pts) if torus else [pts]
        for pc in pieces:
            body += _polyline(pc, color, sx, sy)
        legend.append(f'<text x="{_W - _PAD - 4}" y="{_PAD + 14 + 14 * j}" text-anchor="end" '
                      f'font-size="11" fill="{color}">{escape(str(label))}</text>')
    return _svg(body, title, box, "x1", "x2", clip=torus, overlay=legend)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
