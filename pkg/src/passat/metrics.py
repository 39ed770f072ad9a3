"""Latitude-weighted forecast verification: RMSE and anomaly correlation.

Weights are ``a_i = cos θ_i / mean_j(cos θ_j)``, averaged over every grid
cell so they have spatial mean one. Anomalies subtract the climatology and
then the plain (unweighted) spatial mean of what remains; the weights enter
only the outer sums of the correlation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridError, UndefinedMetricError
from .sphere_grid import Grid


@dataclass(frozen=True)
class Climatology:
    """Per-variable climatological mean fields in physical units, ``(n_vars, n_lat, n_lon)``."""

    values: np.ndarray
    variables: tuple

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[list(self.variables).index(name)]


def lat_weights(grid: Grid) -> np.ndarray:
    """Full ``(n_lat, n_lon)`` weight raster with spatial mean one."""
    cos = np.broadcast_to(grid.column(grid.cos_lat), grid.shape)
    return cos / cos.mean()


def _check(grid: Grid, *fields) -> None:
    for f in fields:
        if np.shape(f)[-2:] != grid.shape:
            raise GridError(f"field shape {np.shape(f)} does not match grid {grid.shape}")


def rmse(pred, obs, grid: Grid) -> float:
    """``sqrt(mean(a·(pred − obs)²))`` over the grid."""
    _check(grid, pred, obs)
    d = np.asarray(pred, dtype=np.float64) - np.asarray(obs, dtype=np.float64)
    return math.sqrt(float(np.mean(lat_weights(grid) * d * d)))


# Anomalies this small relative to the inputs are subtraction round-off.
_FLAT_ANOMALY_RTOL = 1e-13


def anomaly(field, clim) -> np.ndarray:
    x = np.asarray(field, dtype=np.float64) - np.asarray(clim, dtype=np.float64)
    return x - x.mean()


def acc(pred, obs, clim, grid: Grid) -> float:
    """Weighted correlation of forecast and observed anomalies.

    Raises :class:`~passat.errors.UndefinedMetricError` when either anomaly
    field is zero up to rounding of the inputs.
    """
    _check(grid, pred, obs, clim)
    a = lat_weights(grid)
    ap, ao = anomaly(pred, clim), anomaly(obs, clim)
    clim_size = float(np.abs(clim).max())
    for which, field, anom in (("forecast", pred, ap), ("observed", obs, ao)):
        size = max(float(np.abs(field).max()), clim_size)
        if float(np.abs(anom).max()) <= _FLAT_ANOMALY_RTOL * size:
            raise UndefinedMetricError(f"{which} anomaly has zero variance; correlation undefined")
    sp, so = float(np.sum(a * ap * ap)), float(np.sum(a * ao * ao))
    r = float(np.sum(a * ap * ao)) / math.sqrt(sp * so)
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class MetricRow:
    variable: str
    lead_time_hours: float
    rmse: float
    acc: float


def score_table(preds: dict, obs: dict, clim: Climatology, grid: Grid) -> list[MetricRow]:
    """Average RMSE and ACC over initial times.

    ``preds`` and ``obs`` map lead time (hours) to arrays
    ``(n_init, n_vars, n_lat, n_lon)`` in physical units. Undefined ACC
    values are skipped in the average (NaN if none remain).
    """
    rows = []
    for lead in sorted(preds):
        if lead not in obs:
            raise KeyError(f"no observations for lead time {lead} h")
        p, o = np.asarray(preds[lead]), np.asarray(obs[lead])
        for k, name in enumerate(clim.variables):
            rm, ac = [], []
            for n in range(p.shape[0]):
                rm.append(rmse(p[n, k], o[n, k], grid))
                try:
                    ac.append(acc(p[n, k], o[n, k], clim.values[k], grid))
                except UndefinedMetricError:
                    pass
            rows.append(MetricRow(name, float(lead), float(np.mean(rm)),
                                  float(np.mean(ac)) if ac else float("nan")))
    return rows


def write_csv(rows: list[MetricRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "lead_time_hours", "rmse", "acc"])
        for r in rows:
            w.writerow([r.variable, f"{r.lead_time_hours:g}", f"{r.rmse:.10g}", f"{r.acc:.10g}"])


def read_csv(path) -> list[MetricRow]:
    with open(Path(path), newline="") as fh:
        return [MetricRow(r["variable"], float(r["lead_time_hours"]), float(r["rmse"]), float(r["acc"]))
                for r in csv.DictReader(fh)]


def svg_chart(rows: list[MetricRow], metric: str, title: str | None = None,
              width: int = 480, height: int = 300) -> str:
    """Line chart of ``metric`` against lead time, one polyline per variable."""
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        y = getattr(r, metric)
        if math.isfinite(y):
            series.setdefault(r.variable, []).append((r.lead_time_hours, y))
    pad = 40
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    ys = [y for pts in series.values() for _, y in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle">{title or metric.upper()}</text>',
           f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">lead time (h)</text>',
           f'<text x="{pad}" y="{height - pad + 14}" font-size="10">{x0:g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 14}" font-size="10" text-anchor="end">{x1:g}</text>',
           f'<text x="{pad - 4}" y="{pad}" font-size="10" text-anchor="end">{y1:.3g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>']
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
