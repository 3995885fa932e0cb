"""Minimal SVG figures built from strings (no plotting dependency).

* deviation lines: one line per user over visit positions, coloured by label;
* deviation surface: a (window x position) heatmap for one user;
* label matrices: concordance between runs or recovery against ground truth.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .stats import BiasLabel

LABEL_COLORS = {
    BiasLabel.ANCHORING: "#2b6cb0",
    BiasLabel.RECENCY: "#c53030",
    BiasLabel.INCONCLUSIVE: "#38a169",
}


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _text(x, y, s, anchor="middle", size=12, extra="") -> str:
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}"{extra}>{escape(str(s))}</text>'


def _diverging(v: float, vmax: float) -> str:
    """Blue (negative) through white to red (positive)."""
    t = 0.0 if vmax <= 0 else float(np.clip(v / vmax, -1.0, 1.0))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t) + 48 * t), int(255 * (1 - t) + 48 * t)
    else:
        t = -t
        r, g, b = int(255 * (1 - t) + 43 * t), int(255 * (1 - t) + 108 * t), int(255 * (1 - t) + 176 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def deviation_lines(curves: Mapping[str, np.ndarray], labels: Mapping[str, BiasLabel],
                    title: str = "Deviation from the norm") -> str:
    W, H, L, R, T, B = 560, 360, 60, 130, 40, 45
    if not curves:
        return _svg(W, H, [_text(W / 2, H / 2, "no users")])
    m = len(next(iter(curves.values())))
    allv = np.concatenate([np.asarray(c, dtype=float) for c in curves.values()])
    lim = max(float(np.abs(allv).max()), 1e-12) * 1.05
    pw, ph = W - L - R, H - T - B

    def px(i):
        return L + (i / max(m - 1, 1)) * pw

    def py(v):
        return T + (1 - (v + lim) / (2 * lim)) * ph

    body = [_text(W / 2, 22, title, size=14),
            f'<line x1="{L}" y1="{py(0):.1f}" x2="{L + pw}" y2="{py(0):.1f}" stroke="#999" stroke-dasharray="4 3"/>',
            f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for i in range(m):
        body.append(_text(px(i), T + ph + 16, i + 1))
    body.append(_text(L + pw / 2, H - 8, "visit position in window"))
    for v in (-lim, 0.0, lim):
        body.append(_text(L - 6, py(v) + 4, f"{v:.3g}", anchor="end", size=10))
    for uid in sorted(curves):
        pts = " ".join(f"{px(i):.1f},{py(float(v)):.1f}" for i, v in enumerate(curves[uid]))
        color = LABEL_COLORS[BiasLabel(labels.get(uid, BiasLabel.INCONCLUSIVE))]
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-opacity="0.6" stroke-width="1.2">'
                    f'<title>{escape(uid)}</title></polyline>')
    for k, lab in enumerate((BiasLabel.ANCHORING, BiasLabel.INCONCLUSIVE, BiasLabel.RECENCY)):
        y = T + 14 + 18 * k
        n = sum(1 for u in curves if BiasLabel(labels.get(u, BiasLabel.INCONCLUSIVE)) is lab)
        body.append(f'<line x1="{L + pw + 12}" y1="{y - 4}" x2="{L + pw + 32}" y2="{y - 4}" '
                    f'stroke="{LABEL_COLORS[lab]}" stroke-width="2"/>')
        body.append(_text(L + pw + 36, y, f"{lab.value} ({n})", anchor="start", size=11))
    return _svg(W, H, body)


def deviation_surface(delta: np.ndarray, title: str = "Deviation surface") -> str:
    delta = np.asarray(delta, dtype=float)
    Wn, m = delta.shape
    cell = max(8, min(36, 420 // max(Wn, 1)))
    L, T = 70, 40
    width, height = L + m * 48 + 90, T + Wn * cell + 50
    vmax = float(np.abs(delta).max())
    body = [_text(width / 2, 22, title, size=14)]
    for w in range(Wn):
        for i in range(m):
            body.append(f'<rect x="{L + i * 48}" y="{T + w * cell}" width="48" height="{cell}" '
                        f'fill="{_diverging(delta[w, i], vmax)}" stroke="#fff" stroke-width="0.5">'
                        f'<title>window {w + 1}, visit {i + 1}: {delta[w, i]:.4g}</title></rect>')
        if Wn <= 30 or w % 5 == 0:
            body.append(_text(L - 6, T + w * cell + cell / 2 + 4, w + 1, anchor="end", size=10))
    for i in range(m):
        body.append(_text(L + i * 48 + 24, T + Wn * cell + 16, i + 1))
    body.append(_text(L + m * 24, T + Wn * cell + 36, "visit position in window"))
    body.append(_text(16, T + Wn * cell / 2, "window", extra=f' transform="rotate(-90 16 {T + Wn * cell / 2:.1f})"'))
    lx = L + m * 48 + 20
    for k, v in enumerate(np.linspace(vmax, -vmax, 9)):
        body.append(f'<rect x="{lx}" y="{T + k * 16}" width="16" height="16" fill="{_diverging(v, vmax)}"/>')
        if k in (0, 4, 8):
            body.append(_text(lx + 20, T + k * 16 + 12, f"{v:.2g}", anchor="start", size=10))
    return _svg(width, height, body)


def label_matrix(matrix: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str],
                 title: str, row_title: str = "", col_title: str = "", subtitle: str = "") -> str:
    matrix = np.asarray(matrix)
    r, c = matrix.shape
    cw, ch, L, T = 96, 40, 130, 70
    width, height = L + c * cw + 20, T + r * ch + 40
    peak = max(int(matrix.max()), 1)
    body = [_text(width / 2, 20, title, size=14)]
    if subtitle:
        body.append(_text(width / 2, 38, subtitle, size=11))
    if col_title:
        body.append(_text(L + c * cw / 2, T - 26, col_title, size=11))
    for j, lab in enumerate(col_labels):
        body.append(_text(L + j * cw + cw / 2, T - 8, lab, size=11))
    for i, lab in enumerate(row_labels):
        body.append(_text(L - 8, T + i * ch + ch / 2 + 4, lab, anchor="end", size=11))
        for j in range(c):
            v = int(matrix[i, j])
            shade = int(255 - 170 * v / peak)
            fill = f"#{shade:02x}{shade:02x}ff"
            body.append(f'<rect x="{L + j * cw}" y="{T + i * ch}" width="{cw}" height="{ch}" fill="{fill}" stroke="#333"/>')
            body.append(_text(L + j * cw + cw / 2, T + i * ch + ch / 2 + 5, v, size=13))
    if row_title:
        body.append(_text(L - 8, T + r * ch + 24, row_title, anchor="end", size=11))
    return _svg(width, height, body)


def save(path, svg: str) -> Path:
    path = Path(path)
    path.write_text(svg)
    return path
