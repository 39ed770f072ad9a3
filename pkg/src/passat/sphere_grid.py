"""Latitude-longitude raster on the unit sphere and its difference operators.

Rows are cell-centred and never touch a pole, so ``cos(lat)`` is bounded away
from zero. Angles are radians throughout; degrees only appear at I/O.

All difference operators act on the trailing two axes ``(n_lat, n_lon)`` and
accept either ndarrays or :class:`~passat.autodiff.Tensor` objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, linear_op
from .errors import GridError

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True, eq=False)
class Grid:
    n_lat: int
    n_lon: int
    radius_km: float = EARTH_RADIUS_KM
    lat: np.ndarray = field(init=False, repr=False)
    lon: np.ndarray = field(init=False, repr=False)
    cos_lat: np.ndarray = field(init=False, repr=False)
    d_theta: float = field(init=False, repr=False)
    d_phi: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise GridError(f"grid needs at least one row and column, got {self.n_lat}x{self.n_lon}")
        d_theta = math.pi / self.n_lat
        d_phi = 2.0 * math.pi / self.n_lon
        lat = -math.pi / 2 + (np.arange(self.n_lat) + 0.5) * d_theta
        lon = np.arange(self.n_lon) * d_phi
        for name, val in [("lat", lat), ("lon", lon), ("d_theta", d_theta), ("d_phi", d_phi),
                          ("cos_lat", np.cos(lat))]:
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)

    def __eq__(self, other):
        return (isinstance(other, Grid) and self.n_lat == other.n_lat
                and self.n_lon == other.n_lon and self.radius_km == other.radius_km)

    def __hash__(self):
        return hash((self.n_lat, self.n_lon, self.radius_km))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def n_nodes(self) -> int:
        return self.n_lat * self.n_lon

    @property
    def resolution_deg(self) -> float:
        return 180.0 / self.n_lat

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(theta, phi) broadcast to the full ``(n_lat, n_lon)`` raster."""
        return np.meshgrid(self.lat, self.lon, indexing="ij")

    def column(self, per_row: np.ndarray) -> np.ndarray:
        """Reshape a per-latitude vector so it broadcasts over longitude."""
        return np.asarray(per_row)[:, None]

    @classmethod
    def from_resolution(cls, degrees: float) -> "Grid":
        n_lat = round(180.0 / degrees)
        return cls(n_lat, 2 * n_lat)


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray
    units: str = "normalized"

    def __post_init__(self):
        if self.values.shape[-2:] != self.grid.shape:
            raise GridError(f"values shape {self.values.shape} does not fit grid {self.grid.shape}")

    def ddtheta(self) -> "ScalarField":
        return ScalarField(self.grid, ddtheta(self.values, self.grid), f"{self.units}/rad")

    def ddphi(self) -> "ScalarField":
        return ScalarField(self.grid, ddphi(self.values, self.grid), f"{self.units}/rad")


def lat_lon_to_cartesian(theta, phi) -> np.ndarray:
    """Unit vector(s) ``(cos θ cos φ, cos θ sin φ, sin θ)``; stacks on the last axis."""
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=np.float64),
                                     np.asarray(phi, dtype=np.float64))
    c = np.cos(theta)
    return np.stack([c * np.cos(phi), c * np.sin(phi), np.sin(theta)], axis=-1)


def haversine(theta1, phi1, theta2, phi2):
    """Great-circle distance on the unit sphere, in radians.

    The half-angle argument is clipped to [0, 1] so rounding never produces
    NaN for antipodal points. Vectorizes over numpy broadcasting.
    """
    s_dlat = np.sin((np.asarray(theta2) - theta1) / 2.0)
    s_dlon = np.sin((np.asarray(phi2) - phi1) / 2.0)
    a = s_dlat * s_dlat + np.cos(theta1) * np.cos(theta2) * s_dlon * s_dlon
    return 2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


# -- finite differences --------------------------------------------------------

def _ddtheta_np(x: np.ndarray, d: float) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    out[..., 1:-1, :] = (x[..., 2:, :] - x[..., :-2, :]) / (2.0 * d)
    out[..., 0, :] = (x[..., 1, :] - x[..., 0, :]) / d
    out[..., -1, :] = (x[..., -1, :] - x[..., -2, :]) / d
    return out


def _ddtheta_adjoint(g: np.ndarray, d: float) -> np.ndarray:
    out = np.zeros_like(g)
    inner = g[..., 1:-1, :] / (2.0 * d)
    out[..., 2:, :] += inner
    out[..., :-2, :] -= inner
    out[..., 1, :] += g[..., 0, :] / d
    out[..., 0, :] -= g[..., 0, :] / d
    out[..., -1, :] += g[..., -1, :] / d
    out[..., -2, :] -= g[..., -1, :] / d
    return out


def _ddphi_np(x: np.ndarray, d: float) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    out[..., 1:-1] = x[..., 2:] - x[..., :-2]
    out[..., 0] = x[..., 1] - x[..., -1]
    out[..., -1] = x[..., 0] - x[..., -2]
    return out / (2.0 * d)


def _ddphi_adjoint(g: np.ndarray, d: float) -> np.ndarray:
    # Periodic central difference is antisymmetric.
    return -_ddphi_np(g, d)


def ddtheta(x, grid: Grid):
    """∂/∂θ: second-order central inside, first-order one-sided on edge rows."""
    if grid.n_lat < 3:
        raise GridError(f"ddtheta needs at least 3 latitude rows, grid has {grid.n_lat}")
    _check_shape(x, grid)
    d = grid.d_theta
    if isinstance(x, Tensor):
        return linear_op(x, lambda a: _ddtheta_np(a, d), lambda g: _ddtheta_adjoint(g, d))
    return _ddtheta_np(np.asarray(x, dtype=np.float64), d)


def ddphi(x, grid: Grid):
    """∂/∂φ: periodic second-order central difference."""
    _check_shape(x, grid)
    d = grid.d_phi
    if isinstance(x, Tensor):
        return linear_op(x, lambda a: _ddphi_np(a, d), lambda g: _ddphi_adjoint(g, d))
    return _ddphi_np(np.asarray(x, dtype=np.float64), d)


def _check_shape(x, grid: Grid) -> None:
    shape = x.shape if isinstance(x, Tensor) else np.shape(x)
    if tuple(shape[-2:]) != grid.shape:
        raise GridError(f"field shape {tuple(shape)} does not end in grid shape {grid.shape}")
