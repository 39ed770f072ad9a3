"""Euler time stepping of fields and their per-variable velocities.

One rollout:

* the velocity branch runs once on the initial fields, and its output is
  clamped to ``±velocity_clamp``;
* every hour the interaction branch runs once, and its tendency is held fixed
  for that hour;
* each hour is split into equal Euler substeps. Every substep advects all
  variables, and (unless velocities are frozen) evolves each variable's
  velocity under the momentum equations. The current z500 supplies the
  geopotential.

With physics disabled, the network instead predicts a whole-step field
increment and the dynamics are skipped.

All state may be plain arrays or autodiff tensors, so the same code serves
inference and backpropagation through the unrolled loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, value
from .dynamics import DynamicsParams, VelocityField, navier_stokes_tendency, scalar_tendency
from .errors import ConfigError, NumericalError, ShapeMismatchError
from .sphere_grid import Grid


@dataclass(frozen=True)
class IntegratorConfig:
    substep_hours: float = 0.2
    interaction_refresh_hours: float = 1.0
    lead_time_hours: float = 6.0
    velocity_clamp: float = 0.005
    physics_enabled: bool = True
    evolve_velocity: bool = True
    reclamp_each_substep: bool = False
    direct_step_hours: float = 6.0
    geopotential_index: int = 2

    def __post_init__(self):
        if self.substep_hours <= 0 or self.interaction_refresh_hours <= 0:
            raise ConfigError("step sizes must be positive")
        ratio = self.interaction_refresh_hours / self.substep_hours
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(
                f"refresh interval {self.interaction_refresh_hours} h is not a whole number "
                f"of {self.substep_hours} h substeps")
        step = self.interaction_refresh_hours if self.physics_enabled else self.direct_step_hours
        n = self.lead_time_hours / step
        if self.lead_time_hours <= 0 or abs(n - round(n)) > 1e-9:
            raise ConfigError(
                f"lead time {self.lead_time_hours} h is not a positive multiple of {step} h")
        if self.velocity_clamp <= 0:
            raise ConfigError("velocity_clamp must be positive")

    @property
    def substeps_per_refresh(self) -> int:
        return round(self.interaction_refresh_hours / self.substep_hours)

    @property
    def n_refreshes(self) -> int:
        return round(self.lead_time_hours / self.interaction_refresh_hours)

    @property
    def n_direct_steps(self) -> int:
        return round(self.lead_time_hours / self.direct_step_hours)

    def with_lead_time(self, hours: float) -> "IntegratorConfig":
        return replace(self, lead_time_hours=hours)


class ForecastModel(Protocol):
    def f_vel(self, u): ...  # -> (v_theta, v_phi), each shaped like u
    def f_int(self, u): ...  # -> interaction tendency per hour, shaped like u
    def f_direct(self, u): ...  # -> whole-step increment, shaped like u


@dataclass
class ForecastState:
    t: float
    fields: object  # (n_vars, n_lat, n_lon)
    velocities: VelocityField | None = None
    interaction: object | None = None


def _clamp(x, bound: float):
    if isinstance(x, Tensor):
        return ad.clip(x, -bound, bound)
    return np.clip(x, -bound, bound)


def _first_bad(name: str, arr) -> None:
    a = value(arr)
    bad = ~np.isfinite(a)
    if bad.any():
        # Worst cell: NaN outranks inf, otherwise the first in row-major order.
        nan = np.isnan(a)
        idx = np.unravel_index(int(np.argmax(nan if nan.any() else bad)), a.shape)
        raise NumericalError(f"non-finite tendency in {name} at {tuple(int(i) for i in idx)}",
                             field=name, cell=tuple(int(i) for i in idx))


def euler_step(state: ForecastState, tendencies: dict, dt: float) -> ForecastState:
    """``x ← x + dt·∂x/∂t`` for each prognostic field present in ``tendencies``.

    Keys are ``"fields"``, ``"v_theta"`` and ``"v_phi"``; absent keys hold
    their field fixed. Any non-finite tendency raises
    :class:`~passat.errors.NumericalError` naming the field and cell.
    """
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    current = {"fields": state.fields}
    if state.velocities is not None:
        current["v_theta"] = state.velocities.v_theta
        current["v_phi"] = state.velocities.v_phi
    for key, tend in tendencies.items():
        if key not in current:
            raise ConfigError(f"no prognostic field {key!r} in state")
        if tuple(tend.shape) != tuple(current[key].shape):
            raise ShapeMismatchError(
                f"tendency for {key} has shape {tuple(tend.shape)}, field {tuple(current[key].shape)}")
        _first_bad(key, tend)
    new = {k: (x + tend * dt if (tend := tendencies.get(k)) is not None else x)
           for k, x in current.items()}
    velocities = None
    if state.velocities is not None:
        velocities = VelocityField(new["v_theta"], new["v_phi"])
    return ForecastState(state.t + dt, new["fields"], velocities, state.interaction)


class Trajectory:
    """Snapshots at whole hours, optionally spilled to disk past ``keep_hours``.

    Indexing by position returns the field array (or tensor); :meth:`at`
    looks a snapshot up by hour.
    """

    def __init__(self, spill_dir: str | Path | None = None, keep_hours: float = 48.0):
        self.hours: list[float] = []
        self._items: list = []
        self._spill_dir = Path(spill_dir) if spill_dir is not None else None
        self._keep_hours = keep_hours
        self.calls = {"f_vel": 0, "f_int": 0, "f_direct": 0}
        self.euler_steps = 0
        self.initial_velocities: VelocityField | None = None

    def append(self, hour: float, fields) -> None:
        if self._spill_dir is not None and hour > self._keep_hours and not isinstance(fields, Tensor):
            self._spill_dir.mkdir(parents=True, exist_ok=True)
            path = self._spill_dir / f"snapshot_{hour:08.2f}h.npy"
            np.save(path, np.asarray(fields))
            fields = path
        self.hours.append(float(hour))
        self._items.append(fields)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        item = self._items[i]
        return np.load(item) if isinstance(item, Path) else item

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def at(self, hour: float):
        for h, i in zip(self.hours, range(len(self))):
            if abs(h - hour) < 1e-9:
                return self[i]
        raise KeyError(f"no snapshot at hour {hour}")

    def every(self, hours: float) -> list:
        """Snapshots whose time is a whole multiple of ``hours``."""
        return [self[i] for i, h in enumerate(self.hours)
                if abs(h / hours - round(h / hours)) < 1e-9]

    def stacked(self) -> np.ndarray:
        return np.stack([np.asarray(value(x)) for x in self])


def _velocity_tendency(v: VelocityField, u, grid: Grid, params: DynamicsParams,
                       cfg: IntegratorConfig, z_std: float):
    k = cfg.geopotential_index
    z = u[k:k + 1] * (z_std * params.geopotential_scale)
    return navier_stokes_tendency(v, z, grid, params)


def rollout(initial, model: ForecastModel, cfg: IntegratorConfig, grid: Grid,
            params: DynamicsParams | None = None, z_std: float = 1.0,
            spill_dir: str | Path | None = None) -> Trajectory:
    """Integrate ``initial`` (normalized fields ``(n_vars, n_lat, n_lon)``) to the lead time.

    ``z_std`` is the z500 normalization scale in m²/s², needed to turn the
    normalized geopotential back into a physical gradient. Returns hourly
    snapshots (one per direct step without physics).
    """
    params = params or DynamicsParams()
    if tuple(initial.shape[-2:]) != grid.shape:
        raise ShapeMismatchError(f"fields {tuple(initial.shape)} do not match grid {grid.shape}")
    traj = Trajectory(spill_dir)
    u = initial

    if not cfg.physics_enabled:
        for step in range(cfg.n_direct_steps):
            delta = model.f_direct(u)
            traj.calls["f_direct"] += 1
            state = euler_step(ForecastState(step * cfg.direct_step_hours, u), {"fields": delta}, 1.0)
            u = state.fields
            traj.append((step + 1) * cfg.direct_step_hours, u)
        return traj

    vt, vp = model.f_vel(u)
    traj.calls["f_vel"] += 1
    v = VelocityField(_clamp(vt, cfg.velocity_clamp), _clamp(vp, cfg.velocity_clamp))
    traj.initial_velocities = v
    state = ForecastState(0.0, u, v)
    dt = cfg.substep_hours
    for hour in range(cfg.n_refreshes):
        state.interaction = model.f_int(state.fields)
        traj.calls["f_int"] += 1
        for _ in range(cfg.substeps_per_refresh):
            v = state.velocities
            tend = {"fields": scalar_tendency(state.fields, v, state.interaction, grid)}
            if cfg.evolve_velocity:
                tend["v_theta"], tend["v_phi"] = _velocity_tendency(
                    v, state.fields, grid, params, cfg, z_std)
            state = euler_step(state, tend, dt)
            traj.euler_steps += 1
            if cfg.reclamp_each_substep:
                state.velocities = VelocityField(_clamp(state.velocities.v_theta, cfg.velocity_clamp),
                                                 _clamp(state.velocities.v_phi, cfg.velocity_clamp))
        # Snap the clock so rounding in repeated 0.2 h sums never drifts.
        state.t = float(hour + 1) * cfg.interaction_refresh_hours
        traj.append(state.t, state.fields)
    return traj


class ZeroModel:
    """A stand-in network whose branches all return zeros (or fixed velocities)."""

    def __init__(self, velocities: VelocityField | None = None):
        self.velocities = velocities

    def f_vel(self, u):
        if self.velocities is None:
            z = np.zeros(value(u).shape)
            return z, z.copy()
        return self.velocities.v_theta, self.velocities.v_phi

    def f_int(self, u):
        return np.zeros(value(u).shape)

    def f_direct(self, u):
        return np.zeros(value(u).shape)


def rk4_advect(u0: np.ndarray, v: VelocityField, grid: Grid, hours: float, dt: float) -> np.ndarray:
    """Reference integrator: classical fourth-order Runge-Kutta advection with frozen velocities."""
    n = hours / dt
    if abs(n - round(n)) > 1e-9:
        raise ConfigError(f"{hours} h is not a whole number of {dt} h steps")

    def f(x):
        return scalar_tendency(x, v, 0.0, grid)

    u = np.asarray(u0, dtype=np.float64)
    for _ in range(round(n)):
        k1 = f(u)
        k2 = f(u + 0.5 * dt * k1)
        k3 = f(u + 0.5 * dt * k2)
        k4 = f(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def euler_advect(u0: np.ndarray, v: VelocityField, grid: Grid, hours: float, dt: float) -> np.ndarray:
    """Frozen-velocity advection with plain Euler steps of ``dt`` hours."""
    cfg = IntegratorConfig(substep_hours=dt, lead_time_hours=hours, evolve_velocity=False,
                           velocity_clamp=math.inf)
    traj = rollout(u0, ZeroModel(v), cfg, grid)
    return np.asarray(traj[-1])


__all__ = [
    "IntegratorConfig",
    "ForecastState",
    "Trajectory",
    "euler_step",
    "rollout",
    "ZeroModel",
    "rk4_advect",
    "euler_advect",
]
