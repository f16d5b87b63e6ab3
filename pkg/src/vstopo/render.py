"""Deterministic SVG rendering of a fibre layout on the structured grid.

One group per element with id ``e<k>``: a unit cell shaded by density
(white void, black solid) and, for solid cells, a centered segment at
the filtered fibre angle.  All numbers are written with a fixed format
so identical inputs produce identical bytes.
"""

from __future__ import annotations

import numpy as np

from .fem import Mesh

__all__ = ["export_layout_svg"]

_SEGMENT_HALF = 0.42
_SOLID_THRESHOLD = 0.5


def _fmt(x: float) -> str:
    return f"{x:.4f}".rstrip("0").rstrip(".")


def export_layout_svg(mesh: Mesh, rho: np.ndarray, theta: np.ndarray, path,
                      scale: float = 8.0) -> None:
    """Write the layout SVG for densities ``rho`` and angles ``theta`` (radians)."""
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if rho.size != mesh.n_elements or theta.size != mesh.n_elements:
        raise ValueError("field lengths do not match the mesh")
    nx, ny = mesh.nx, mesh.ny
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(nx * scale)}" '
        f'height="{_fmt(ny * scale)}" viewBox="0 0 {nx} {ny}">',
        f'<rect x="0" y="0" width="{nx}" height="{ny}" fill="#ffffff"/>',
    ]
    for e in range(mesh.n_elements):
        i = e % nx
        j = e // nx
        y = ny - 1 - j  # svg y axis points down
        gray = int(round(255.0 * (1.0 - min(max(rho[e], 0.0), 1.0))))
        cell = (f'<rect x="{i}" y="{y}" width="1" height="1" '
                f'fill="rgb({gray},{gray},{gray})"/>')
        if rho[e] >= _SOLID_THRESHOLD:
            cx, cy = i + 0.5, y + 0.5
            dx = _SEGMENT_HALF * float(np.cos(theta[e]))
            dy = -_SEGMENT_HALF * float(np.sin(theta[e]))
            seg = (f'<line x1="{_fmt(cx - dx)}" y1="{_fmt(cy - dy)}" '
                   f'x2="{_fmt(cx + dx)}" y2="{_fmt(cy + dy)}" '
                   'stroke="#cc0000" stroke-width="0.12"/>')
            lines.append(f'<g id="e{e}">{cell}{seg}</g>')
        else:
            lines.append(f'<g id="e{e}">{cell}</g>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
