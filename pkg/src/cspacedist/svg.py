"""Plain-text SVG rendering of 2-D distance fields: level sets plus a gradient quiver."""
from __future__ import annotations

import numpy as np
from contourpy import contour_generator

SIZE = 480
PAD = 30


def _to_px(bounds, P):
    (x0, x1), (y0, y1) = bounds
    span = SIZE - 2 * PAD
    X = PAD + (P[..., 0] - x0) / (x1 - x0) * span
    Y = SIZE - PAD - (P[..., 1] - y0) / (y1 - y0) * span
    return X, Y


def _polyline(X, Y, color, width=1.0):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(X, Y))
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def field_svg(axes, D, G=None, levels=(0.0, 0.25, 0.5, 1.0), title="", bounds=None, zero_eps=1e-9,
              quiver_stride=2) -> str:
    """Contours of ``D`` (indexed ``[i, j]`` over ``axes[0][i], axes[1][j]``) and optional arrows ``-G``.

    The zero level is drawn as the ``zero_eps`` contour so that a distance
    field that is exactly 0 inside obstacles still gets its boundary traced.
    """
    ax0, ax1 = (np.asarray(a, float) for a in axes)
    if bounds is None:
        bounds = ((ax0[0], ax0[-1]), (ax1[0], ax1[-1]))
    D = np.where(np.isfinite(D), D, np.nanmax(np.where(np.isfinite(D), D, np.nan)) + 1.0)
    gen = contour_generator(x=ax0, y=ax1, z=D.T)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
           f'viewBox="0 0 {SIZE} {SIZE}">',
           f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>',
           f'<rect x="{PAD}" y="{PAD}" width="{SIZE - 2 * PAD}" height="{SIZE - 2 * PAD}" '
           f'fill="none" stroke="#888"/>']
    if title:
        out.append(f'<text x="{PAD}" y="{PAD - 10}" font-family="monospace" font-size="12">{title}</text>')
    for lev in levels:
        color = "#c00" if lev == 0 else "#36c"
        width = 2.0 if lev == 0 else 1.0
        for line in gen.lines(max(lev, zero_eps)):
            X, Y = _to_px(bounds, np.asarray(line))
            out.append(_polyline(X, Y, color, width))
    if G is not None:
        Q = np.stack(np.meshgrid(ax0, ax1, indexing="ij"), -1)
        scale = 0.4 * min(ax0[1] - ax0[0], ax1[1] - ax1[0]) * quiver_stride
        for i in range(0, len(ax0), quiver_stride):
            for j in range(0, len(ax1), quiver_stride):
                g = G[i, j]
                if not np.all(np.isfinite(g)) or not np.any(g):
                    continue
                p0 = Q[i, j]
                p1 = p0 - scale * g
                X, Y = _to_px(bounds, np.stack([p0, p1]))
                out.append(f'<line x1="{X[0]:.2f}" y1="{Y[0]:.2f}" x2="{X[1]:.2f}" y2="{Y[1]:.2f}" '
                           f'stroke="#333" stroke-width="0.8"/>')
                out.append(f'<circle cx="{X[1]:.2f}" cy="{Y[1]:.2f}" r="1.2" fill="#333"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
