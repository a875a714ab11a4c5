"""Deterministic CSV/JSON/SVG artifacts."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import UsageError


def _fmt(v) -> str:
    return repr(float(v))


def write_csv(path, header: Sequence[str], rows, footer: Optional[dict] = None) -> Path:
    """Header row, one line per row with shortest round-trip floats, then
    ``# key=value`` footer records."""
    path = Path(path)
    rows = np.atleast_2d(np.asarray(rows, float))
    if rows.size and rows.shape[1] != len(header):
        raise UsageError(f"{rows.shape[1]} columns for {len(header)} header fields")
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows if rows.size)
    for key, value in (footer or {}).items():
        lines.append(f"# {key}={value}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Returns ``(header, data, footer)``."""
    header, rows, footer = None, [], {}
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            footer[key] = value
        elif header is None:
            header = line.split(",")
        else:
            rows.append([float(v) for v in line.split(",")])
    data = np.array(rows, float).reshape(-1, len(header or []))
    return header, data, footer


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _names(prefix, d):
    return [f"{prefix}{i + 1}" for i in range(d)]


def state_header(d: int) -> list:
    return ["t"] + _names("x", d) + _names("p", d) + ["H"]


def write_local_curve(path, curve) -> Path:
    d = curve.x.shape[1]
    header = ["t"] + _names("xbar", d) + _names("pbar", d) + _names("x", d) + _names("p", d) + ["H"]
    rows = np.column_stack([curve.t, curve.xbar, curve.pbar, curve.x, curve.p, curve.H])
    footer = {"k": curve.k, "xi": " ".join(_fmt(v) for v in curve.xi), "sup_diff": _fmt(curve.sup_diff)}
    return write_csv(path, header, rows, footer)


def write_trajectory(path, traj) -> Path:
    d = traj.states.shape[1] // 2
    rows = np.column_stack([traj.times, traj.states, traj.H_values])
    footer = {"stop_reason": traj.stop_reason}
    if traj.stop_time is not None:
        footer["stop_time"] = _fmt(traj.stop_time)
    return write_csv(path, state_header(d), rows, footer)


def write_manifold(directory, manifold, stem: str = "curve") -> Path:
    """One CSV per curve plus ``manifest.json``."""
    directory = Path(directory)
    files = []
    for i, c in enumerate(manifold.curves):
        name = f"{stem}_{i:04d}.csv"
        rows = np.column_stack([c.t, c.x, c.p, c.H])
        footer = {"stop_reason": c.stop_reason, "xi": " ".join(_fmt(v) for v in c.xi)}
        write_csv(directory / name, state_header(c.x.shape[1]), rows, footer)
        files.append({"file": name, "xi": c.xi, "t_min": c.t_min, "stop_reason": c.stop_reason,
                      "n_samples": len(c.t), "max_abs_H": float(np.max(np.abs(c.H)))})
    manifest = {"method": manifold.method, "delta": manifold.delta, "h": manifold.h,
                "info": {k: v for k, v in manifold.info.items()}, "curves": files}
    return write_json(directory / "manifest.json", manifest)


def write_domain(path, domain) -> Path:
    """Boundary loops as ``loop, x1, x2`` rows, vertices in order."""
    rows = [[i, *v] for i, loop in enumerate(domain.boundary) for v in loop]
    footer = {"area": _fmt(domain.area), "n_points": domain.n_points}
    if domain.alpha is not None:
        footer["alpha"] = _fmt(domain.alpha)
    return write_csv(path, ["loop", "x1", "x2"], np.array(rows, float).reshape(-1, 3), footer)


def write_closed_loop(path, result) -> Path:
    d, m = result.x.shape[1], result.u.shape[1]
    rows = np.column_stack([result.t, result.x, result.u])
    return write_csv(path, ["t"] + _names("x", d) + _names("u", m), rows,
                     {"status": result.status, "final_norm": _fmt(result.final_norm)})


def revalidate_csv(path, prob) -> float:
    """Max deviation of the ``H`` column from ``H`` recomputed on the stored
    ``x``/``p`` columns."""
    header, data, _ = read_csv(path)
    if "H" not in header:
        raise UsageError(f"{path} has no H column")
    d = prob.d
    xi = [header.index(n) for n in _names("x", d)]
    pi = [header.index(n) for n in _names("p", d)]
    if data.shape[0] == 0:
        return 0.0
    H = prob.H(data[:, xi], data[:, pi])
    return float(np.max(np.abs(H - data[:, header.index("H")])))


# -- minimal SVG --------------------------------------------------------------

_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02")


class SvgPlot:
    """Line and polygon plotter with a fixed viewport and simple axes."""

    def __init__(self, width: int = 640, height: int = 480, margin: int = 50, title: str = "",
                 xlabel: str = "", ylabel: str = ""):
        self.width, self.height, self.margin = width, height, margin
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.items = []

    def line(self, x, y, color=None, label=None, dash=None):
        self.items.append(("polyline", np.asarray(x, float), np.asarray(y, float), color, label, dash))
        return self

    def polygon(self, xy, color=None, label=None, dash=None):
        xy = np.asarray(xy, float)
        self.items.append(("polygon", xy[:, 0], xy[:, 1], color, label, dash))
        return self

    def _bounds(self):
        xs = np.concatenate([it[1][np.isfinite(it[1])] for it in self.items] or [np.zeros(1)])
        ys = np.concatenate([it[2][np.isfinite(it[2])] for it in self.items] or [np.zeros(1)])
        lo = np.array([xs.min(), ys.min()]) if xs.size and ys.size else np.zeros(2)
        hi = np.array([xs.max(), ys.max()]) if xs.size and ys.size else np.ones(2)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        return lo, lo + span

    def render(self) -> str:
        W, Hh, m = self.width, self.height, self.margin
        lo, hi = self._bounds()

        def sx(v):
            return m + (v - lo[0]) / (hi[0] - lo[0]) * (W - 2 * m)

        def sy(v):
            return Hh - m - (v - lo[1]) / (hi[1] - lo[1]) * (Hh - 2 * m)

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" viewBox="0 0 {W} {Hh}">',
               f'<rect x="0" y="0" width="{W}" height="{Hh}" fill="white"/>',
               f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{Hh - 2 * m}" fill="none" stroke="black"/>']
        for frac in (0.0, 0.5, 1.0):
            xv = lo[0] + frac * (hi[0] - lo[0])
            yv = lo[1] + frac * (hi[1] - lo[1])
            out.append(f'<text x="{sx(xv):.2f}" y="{Hh - m + 16}" font-size="11" '
                       f'text-anchor="middle">{xv:.4g}</text>')
            out.append(f'<text x="{m - 6}" y="{sy(yv):.2f}" font-size="11" text-anchor="end">{yv:.4g}</text>')
        if self.title:
            out.append(f'<text x="{W / 2}" y="{m / 2}" font-size="14" text-anchor="middle">{self.title}</text>')
        if self.xlabel:
            out.append(f'<text x="{W / 2}" y="{Hh - 8}" font-size="12" text-anchor="middle">{self.xlabel}</text>')
        if self.ylabel:
            out.append(f'<text x="14" y="{Hh / 2}" font-size="12" text-anchor="middle" '
                       f'transform="rotate(-90 14 {Hh / 2})">{self.ylabel}</text>')
        for i, (kind, x, y, color, label, dash) in enumerate(self.items):
            color = color or _COLORS[i % len(_COLORS)]
            ok = np.isfinite(x) & np.isfinite(y)
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[ok], y[ok]))
            fill = ' fill="none"'
            style = f' stroke-dasharray="{dash}"' if dash else ""
            out.append(f'<{kind} points="{pts}"{fill} stroke="{color}" stroke-width="1.2"{style}/>')
        labels = [(it[3] or _COLORS[i % len(_COLORS)], it[4]) for i, it in enumerate(self.items) if it[4]]
        seen = []
        for color, label in labels:
            if label in [s for _, s in seen]:
                continue
            seen.append((color, label))
        for j, (color, label) in enumerate(seen):
            y = m + 14 + 16 * j
            out.append(f'<line x1="{W - m - 120}" y1="{y - 4}" x2="{W - m - 100}" y2="{y - 4}" stroke="{color}"/>')
            out.append(f'<text x="{W - m - 95}" y="{y}" font-size="11">{label}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path


def domain_svg(path, domains: Iterable, labels: Sequence[str], title: str = "projection domains") -> Path:
    plot = SvgPlot(title=title, xlabel="x1", ylabel="x2")
    dashes = (None, "6,3", "2,2", "8,2,2,2")
    for i, (dom, label) in enumerate(zip(domains, labels)):
        for loop in dom.boundary:
            plot.polygon(loop, _COLORS[i % len(_COLORS)], label, dashes[i % len(dashes)])
    return plot.save(path)
