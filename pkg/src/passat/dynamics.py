"""Advection and simplified Navier-Stokes tendencies on the unit sphere.

Velocities are in model units: unit-sphere radians per hour, i.e. multiples
of 6371 km/h along the sphere. Geopotential enters the momentum equations in
place of the pressure-gradient force, after conversion from m²/s² to
(6371 km)²/h² with :attr:`DynamicsParams.geopotential_scale`.

Every function here works on ndarrays or autodiff tensors alike, over any
leading batch axes (typically one per weather variable).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import value
from .errors import GridError, NumericalError
from .sphere_grid import EARTH_RADIUS_KM, Grid, ddphi, ddtheta

OMEGA = 0.2618  # rad/h
GEOPOTENTIAL_SCALE = 3600.0**2 / (EARTH_RADIUS_KM * 1000.0) ** 2


@dataclass(frozen=True)
class VelocityField:
    v_theta: object
    v_phi: object

    def __post_init__(self):
        if tuple(self.v_theta.shape) != tuple(self.v_phi.shape):
            raise GridError(
                f"velocity components differ in shape: {self.v_theta.shape} vs {self.v_phi.shape}")

    @classmethod
    def zeros(cls, shape) -> "VelocityField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def solid_body(cls, grid: Grid, rate: float, shape=None) -> "VelocityField":
        """Rigid eastward rotation: v_θ = 0, v_φ = rate·cos θ."""
        shape = grid.shape if shape is None else shape
        v_phi = np.broadcast_to(rate * grid.column(grid.cos_lat), shape).copy()
        return cls(np.zeros(shape), v_phi)

    def scaled(self, alpha: float) -> "VelocityField":
        return VelocityField(self.v_theta * alpha, self.v_phi * alpha)


@dataclass(frozen=True)
class DynamicsParams:
    omega: float = OMEGA
    mu: float = 1e-4
    geopotential_scale: float = GEOPOTENTIAL_SCALE

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"friction coefficient mu must be >= 0, got {self.mu}")


def _geometry(grid: Grid) -> dict[str, np.ndarray]:
    col = grid.column
    cos = col(grid.cos_lat)
    return {
        "cos": cos,
        "sec": 1.0 / cos,
        "sin": col(np.sin(grid.lat)),
        "tan": col(np.tan(grid.lat)),
        "sec2": 1.0 / (cos * cos),
    }


def _check(grid: Grid, *fields) -> None:
    shapes = {tuple(f.shape) for f in fields}
    for s in shapes:
        if s[-2:] != grid.shape:
            raise GridError(f"field shape {s} does not end in grid shape {grid.shape}")


def _check_finite(**fields) -> None:
    for name, f in fields.items():
        if not np.all(np.isfinite(value(f))):
            raise NumericalError(f"non-finite values in input {name!r}", field=name)


def advective_derivative(u, v: VelocityField, grid: Grid):
    """v·∇u on the sphere: v_θ ∂u/∂θ + (v_φ / cos θ) ∂u/∂φ.

    The advection tendency of ``u`` is the negation of this.
    """
    _check(grid, u, v.v_theta, v.v_phi)
    sec = grid.column(1.0 / grid.cos_lat)
    return v.v_theta * ddtheta(u, grid) + (v.v_phi * sec) * ddphi(u, grid)


def to_planar(v: VelocityField, grid: Grid) -> VelocityField:
    """Spherical (v_θ, v_φ) to lat-lon-plane (v′_θ, v′_φ) = (v_θ, v_φ / cos θ)."""
    return VelocityField(v.v_theta, v.v_phi * grid.column(1.0 / grid.cos_lat))


def from_planar(v_planar: VelocityField, grid: Grid) -> VelocityField:
    return VelocityField(v_planar.v_theta, v_planar.v_phi * grid.column(grid.cos_lat))


def planar_advective_derivative(u, v_planar: VelocityField, grid: Grid):
    """v′_θ ∂u/∂θ + v′_φ ∂u/∂φ, the derivative as seen on the flat lat-lon raster."""
    _check(grid, u, v_planar.v_theta, v_planar.v_phi)
    return v_planar.v_theta * ddtheta(u, grid) + v_planar.v_phi * ddphi(u, grid)


def navier_stokes_terms(v: VelocityField, z, grid: Grid, params: DynamicsParams):
    """The labelled left-hand-side terms of each momentum equation.

    Returns two dicts, for the θ and φ components, keyed by
    ``advection_theta``, ``advection_phi`` (the two halves of v·∇),
    ``curvature``, ``pressure``, ``coriolis`` and ``friction``. Each value is
    the term exactly as it appears on the left-hand side, so the tendency is
    minus the sum. ``z`` is geopotential already in model units.
    """
    _check(grid, v.v_theta, v.v_phi, z)
    g = _geometry(grid)
    vt, vp = v.v_theta, v.v_phi
    two_omega_sin = 2.0 * params.omega * g["sin"]
    vp_sec = vp * g["sec"]
    theta_terms = {
        "advection_theta": vt * ddtheta(vt, grid),
        "advection_phi": vp_sec * ddphi(vt, grid),
        "curvature": vp * vp * g["tan"],
        "pressure": ddtheta(z, grid),
        "coriolis": two_omega_sin * vp,
        "friction": (params.mu * g["sec2"]) * vt,
    }
    phi_terms = {
        "advection_theta": vt * ddtheta(vp, grid),
        "advection_phi": vp_sec * ddphi(vp, grid),
        "curvature": -(vp * vt * g["tan"]),
        "pressure": g["sec"] * ddphi(z, grid),
        "coriolis": -(two_omega_sin * vt),
        "friction": (params.mu * g["sec2"]) * vp,
    }
    return theta_terms, phi_terms


def navier_stokes_tendency(v: VelocityField, z, grid: Grid, params: DynamicsParams):
    """(∂v_θ/∂t, ∂v_φ/∂t) from the simplified momentum equations.

    ∂v_θ/∂t = −v·∇v_θ − v_φ² tan θ − ∂z/∂θ − 2ω v_φ sin θ − μ v_θ / cos² θ
    ∂v_φ/∂t = −v·∇v_φ + v_φ v_θ tan θ − (1/cos θ) ∂z/∂φ + 2ω v_θ sin θ − μ v_φ / cos² θ
    """
    _check_finite(v_theta=v.v_theta, v_phi=v.v_phi, z=z)
    theta_terms, phi_terms = navier_stokes_terms(v, z, grid, params)
    return _neg_sum(theta_terms), _neg_sum(phi_terms)


def _neg_sum(terms: dict):
    total = None
    for term in terms.values():
        total = term if total is None else total + term
    return -total


def scalar_tendency(u, v: VelocityField, interaction, grid: Grid, planar: bool = False):
    """Total tendency of a transported variable: −v·∇u plus the interaction term."""
    if planar:
        adv = planar_advective_derivative(u, v, grid)
    else:
        adv = advective_derivative(u, v, grid)
    return interaction - adv


__all__ = [
    "OMEGA",
    "GEOPOTENTIAL_SCALE",
    "VelocityField",
    "DynamicsParams",
    "advective_derivative",
    "planar_advective_derivative",
    "to_planar",
    "from_planar",
    "navier_stokes_terms",
    "navier_stokes_tendency",
    "scalar_tendency",
]
