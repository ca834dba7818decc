"""CSV, summary and SVG writers.

Every file starts with a ``# config_hash=... seed=...`` comment line.  Floats
are written with ``repr`` so they round-trip exactly and identical runs give
identical bytes.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def header_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[Mapping], config_hash: str, seed: int) -> str:
    lines = [header_line(config_hash, seed), ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_csv(path, columns, rows, config_hash: str, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, config_hash, seed))
    return path


def read_csv(path) -> tuple[dict, list[dict]]:
    """Parse a file written by :func:`write_csv`; returns (header fields, rows)."""
    lines = Path(path).read_text().splitlines()
    head = dict(item.split("=", 1) for item in lines[0][1:].split())
    cols = lines[1].split(",")
    rows = []
    for line in lines[2:]:
        vals = line.split(",")
        rows.append({c: _parse(v) for c, v in zip(cols, vals)})
    return head, rows


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


FIELD_COLUMNS = ("node_id", "x", "y", "value")


def field_rows(xy: np.ndarray, values: np.ndarray):
    """Rows for a node-indexed field; node ids are already in row-major lattice order."""
    for k in range(len(values)):
        yield {"node_id": k, "x": float(xy[k, 0]), "y": float(xy[k, 1]), "value": float(values[k])}


def write_field_csv(path, grid, values, config_hash: str = "none", seed: int = 0) -> Path:
    return write_csv(path, FIELD_COLUMNS, field_rows(grid.xy, np.asarray(values)), config_hash, seed)


def summary_text(sections: Mapping[str, Mapping], config_hash: str, seed: int) -> str:
    """Structured text: ``[section]`` headers followed by ``key = value`` lines."""
    lines = [header_line(config_hash, seed)]
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for k, v in body.items():
            lines.append(f"{k} = {_fmt(v)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_plot(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
                  xlabel: str = "", ylabel: str = "", logx: bool = False, logy: bool = False,
                  width: int = 480, height: int = 320, comment: str | None = None) -> str:
    """Minimal polyline plot with axes, ticks at the data extremes and a legend."""
    tx = (lambda v: math.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: math.log10(v)) if logy else (lambda v: v)
    pts = {k: [(tx(a), ty(b)) for a, b in zip(*xy) if np.isfinite(a) and np.isfinite(b)
               and (not logx or a > 0) and (not logy or b > 0)] for k, xy in series.items()}
    allp = [p for v in pts.values() for p in v] or [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
    y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    L, R, T, B = 60, 20, 30, 45
    W, H = width - L - R, height - T - B

    def sx(v):
        return L + (v - x0) / (x1 - x0) * W

    def sy(v):
        return T + H - (v - y0) / (y1 - y0) * H

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if comment:
        out.append(f"<!-- {comment} -->")
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    out.append(f'<line x1="{L}" y1="{T + H}" x2="{L + W}" y2="{T + H}" stroke="black"/>')
    out.append(f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + H}" stroke="black"/>')
    fx = (lambda v: f"1e{v:.2g}") if logx else (lambda v: f"{v:.3g}")
    fy = (lambda v: f"1e{v:.2g}") if logy else (lambda v: f"{v:.3g}")
    out.append(f'<text x="{L}" y="{T + H + 15}" font-size="10" text-anchor="middle">{fx(x0)}</text>')
    out.append(f'<text x="{L + W}" y="{T + H + 15}" font-size="10" text-anchor="middle">{fx(x1)}</text>')
    out.append(f'<text x="{L - 4}" y="{T + H}" font-size="10" text-anchor="end">{fy(y0)}</text>')
    out.append(f'<text x="{L - 4}" y="{T + 8}" font-size="10" text-anchor="end">{fy(y1)}</text>')
    out.append(f'<text x="{L + W / 2}" y="{height - 8}" font-size="12" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{T + H / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {T + H / 2})">{ylabel}</text>')
    out.append(f'<text x="{width / 2}" y="18" font-size="13" text-anchor="middle">{title}</text>')
    for k, (name, p) in enumerate(pts.items()):
        color = _COLORS[k % len(_COLORS)]
        if p:
            path = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
            for a, b in p:
                out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{color}"/>')
        out.append(f'<text x="{L + W - 4}" y="{T + 14 + 14 * k}" font-size="11" fill="{color}" '
                   f'text-anchor="end">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
