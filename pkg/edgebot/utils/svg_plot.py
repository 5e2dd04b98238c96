"""
Minimal SVG trajectory overlay: one polyline per series plus axis ticks
"""
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

PALETTE = {
    "gt": "#222222",
    "pdr": "#1f77b4",
    "traditional": "#d62728",
    "robust": "#2ca02c",
    "edge": "#9467bd",
}
_FALLBACK = ["#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"]


def _nice_step(span: float, target_ticks: int = 6) -> float:
    raw = span / max(target_ticks, 1)
    if raw <= 0:
        return 1.0
    magnitude = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if m * magnitude >= raw:
            return m * magnitude
    return 10 * magnitude


def render_overlay(
    series: Dict[str, np.ndarray],
    title: str = "",
    size: Tuple[int, int] = (800, 600),
    aps: Optional[Sequence[Tuple[float, float]]] = None,
) -> str:
    """
    Render named (N, 2+) xy arrays on shared, equal-aspect axes

    Returns:
        SVG document text
    """
    width, height = size
    margin = 50
    pts = [np.asarray(xy, dtype=float)[:, :2] for xy in series.values() if len(xy)]
    if aps:
        pts.append(np.asarray(aps, dtype=float))
    allpts = np.vstack(pts) if pts else np.zeros((1, 2))
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    scale = min((width - 2 * margin) / span[0], (height - 2 * margin) / span[1])

    def sx(x: float) -> float:
        return margin + (x - lo[0]) * scale

    def sy(y: float) -> float:
        return height - margin - (y - lo[1]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>')

    # axes and ticks
    out.append(
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="#888"/>'
    )
    out.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="#888"/>')
    for axis in (0, 1):
        step = _nice_step(float(span[axis]))
        v = math.ceil(lo[axis] / step) * step
        while v <= hi[axis] + 1e-9:
            if axis == 0:
                px = sx(v)
                out.append(f'<line x1="{px:.1f}" y1="{height - margin}" x2="{px:.1f}" y2="{height - margin + 5}" stroke="#888"/>')
                out.append(f'<text x="{px:.1f}" y="{height - margin + 18}" text-anchor="middle" font-size="10">{v:g}</text>')
            else:
                py = sy(v)
                out.append(f'<line x1="{margin - 5}" y1="{py:.1f}" x2="{margin}" y2="{py:.1f}" stroke="#888"/>')
                out.append(f'<text x="{margin - 8}" y="{py + 3:.1f}" text-anchor="end" font-size="10">{v:g}</text>')
            v += step

    for k, (name, xy) in enumerate(series.items()):
        xy = np.asarray(xy, dtype=float)
        if not len(xy):
            continue
        color = PALETTE.get(name, _FALLBACK[k % len(_FALLBACK)])
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in xy[:, :2])
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{points}"/>')
        out.append(
            f'<text x="{width - margin + 5}" y="{margin + 14 * k}" font-size="11" fill="{color}">{escape(name)}</text>'
        )

    for x, y in aps or ():
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="orange" stroke="black"/>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_overlay(path, series: Dict[str, np.ndarray], **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_overlay(series, **kwargs))
    return path
