"""Datasets of gridded weather variables, normalization, and their file format.

Fields are stored in physical units and normalized on access with frozen
per-variable statistics. The synthetic generator stands in for reanalysis
data: random low-order harmonics carried eastward by a solid-body flow whose
geopotential is in balance with it, with slow mean-reverting amplitudes.

File layout (little-endian)::

    magic        8 bytes   b"PSDATA01"
    version      uint32
    n_time, n_vars, n_consts, n_lat, n_lon   uint32 x5
    cadence      float64   hours between records
    variables    per var:   uint16 len + utf-8 "name|units|level"
    constants    per const: uint16 len + utf-8 "name|units|level"
    stats        float64 mean[n_vars], std[n_vars], const_mean[n_consts], const_std[n_consts]
    times        int64[n_time]   hours since the dataset epoch
    fields       float32[n_time, n_vars, n_lat, n_lon]
    constants    float32[n_consts, n_lat, n_lon]

A JSON manifest next to the file repeats the grid, variables, stats and
cadence for humans and tools.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import GEOPOTENTIAL_SCALE, OMEGA
from .errors import DatasetError, ShapeMismatchError, ZeroStdError
from .sphere_grid import Grid

MAGIC = b"PSDATA01"
VERSION = 1
DATA_ROOT_ENV = "PASSAT_DATA_ROOT"


@dataclass(frozen=True)
class VariableInfo:
    name: str
    units: str
    level: str

    def encode(self) -> bytes:
        return f"{self.name}|{self.units}|{self.level}".encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> "VariableInfo":
        parts = raw.decode("utf-8").split("|")
        if len(parts) != 3:
            raise DatasetError(f"bad variable record {raw!r}")
        return cls(*parts)


WEATHER_VARIABLES = (
    VariableInfo("t2m", "K", "surface"),
    VariableInfo("t850", "K", "850hPa"),
    VariableInfo("z500", "m2/s2", "500hPa"),
    VariableInfo("u10", "m/s", "surface"),
    VariableInfo("v10", "m/s", "surface"),
)
STATIC_CONSTANTS = (
    VariableInfo("lsm", "1", "surface"),
    VariableInfo("orography", "m", "surface"),
)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise DatasetError("mean and std differ in length")

    @classmethod
    def of(cls, values: np.ndarray, axes=(0, 2, 3)) -> "NormStats":
        v = np.asarray(values, dtype=np.float64)
        return cls(v.mean(axis=axes), v.std(axis=axes))

    def check(self, names) -> None:
        for name, s in zip(names, self.std):
            if not np.isfinite(s) or s <= 0:
                raise ZeroStdError(f"variable {name!r} has non-positive std {s}")


@dataclass
class FieldSet:
    """Per-variable fields on one grid, tagged ``normalized`` or ``physical``."""

    values: object  # (n_vars, n_lat, n_lon)
    variables: tuple
    units: str = "normalized"

    @property
    def shape(self):
        return tuple(self.values.shape)

    def __getitem__(self, name: str):
        return self.values[list(self.variables).index(name)]


def _per_var(stats_vec: np.ndarray, ndim: int) -> np.ndarray:
    return stats_vec.reshape((-1,) + (1,) * (ndim - 1))


def normalize(fields, stats: NormStats):
    """``(x − mean) / std`` along the variable axis (first axis of the trailing three)."""
    if stats is None:
        raise DatasetError("normalization statistics are missing")
    x = np.asarray(fields, dtype=np.float64)
    if x.shape[-3] != stats.mean.size:
        raise ShapeMismatchError(f"{x.shape[-3]} variables but {stats.mean.size} stats")
    return (x - stats.mean[:, None, None]) / stats.std[:, None, None]


def denormalize(fields, stats: NormStats):
    if stats is None:
        raise DatasetError("normalization statistics are missing")
    x = np.asarray(fields, dtype=np.float64)
    if x.shape[-3] != stats.mean.size:
        raise ShapeMismatchError(f"{x.shape[-3]} variables but {stats.mean.size} stats")
    return x * stats.std[:, None, None] + stats.mean[:, None, None]


@dataclass
class Dataset:
    fields: np.ndarray  # float32 (n_time, n_vars, n_lat, n_lon), physical units
    constants: np.ndarray  # float32 (n_consts, n_lat, n_lon)
    times: np.ndarray  # int64 hours
    stats: NormStats
    const_stats: NormStats
    variables: tuple = WEATHER_VARIABLES
    constant_vars: tuple = STATIC_CONSTANTS
    cadence_hours: float = 6.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fields.ndim != 4:
            raise ShapeMismatchError(f"fields must be 4-D, got shape {self.fields.shape}")
        t, v, nl, nn = self.fields.shape
        if v != len(self.variables):
            raise ShapeMismatchError(f"{v} field channels for {len(self.variables)} variables")
        if self.constants.shape != (len(self.constant_vars), nl, nn):
            raise ShapeMismatchError(f"constants shape {self.constants.shape} does not fit grid")
        if self.times.shape != (t,):
            raise ShapeMismatchError(f"{self.times.shape[0]} timestamps for {t} records")
        self.stats.check(self.variable_names)
        self.const_stats.check([c.name for c in self.constant_vars])

    @property
    def grid(self) -> Grid:
        return Grid(self.fields.shape[2], self.fields.shape[3])

    @property
    def n_time(self) -> int:
        return self.fields.shape[0]

    @property
    def variable_names(self) -> tuple:
        return tuple(v.name for v in self.variables)

    def normalized(self, i: int) -> np.ndarray:
        return normalize(self.fields[i], self.stats)

    def fieldset(self, i: int, normalized: bool = True) -> FieldSet:
        if normalized:
            return FieldSet(self.normalized(i), self.variable_names, "normalized")
        return FieldSet(self.fields[i].astype(np.float64), self.variable_names, "physical")

    def normalized_constants(self) -> np.ndarray:
        return normalize(self.constants, self.const_stats)

    def n_samples(self, steps: int) -> int:
        return max(self.n_time - steps, 0)

    def sample(self, i: int, steps: int) -> tuple[np.ndarray, list[np.ndarray]]:
        """Normalized initial fields at record ``i`` and the next ``steps`` records."""
        if not 0 <= i < self.n_samples(steps):
            raise DatasetError(f"sample {i} with {steps} steps is outside {self.n_time} records")
        return self.normalized(i), [self.normalized(i + k) for k in range(1, steps + 1)]

    def climatology(self) -> np.ndarray:
        """Time mean per variable and cell, physical units."""
        return self.fields.astype(np.float64).mean(axis=0)

    def subset(self, start: int, stop: int) -> "Dataset":
        """Records ``[start, stop)`` with the same frozen statistics."""
        return Dataset(self.fields[start:stop], self.constants, self.times[start:stop], self.stats,
                       self.const_stats, self.variables, self.constant_vars, self.cadence_hours,
                       dict(self.meta))

    def manifest(self) -> dict:
        return {
            "format": "passat-dataset",
            "version": VERSION,
            "grid": {"n_lat": self.fields.shape[2], "n_lon": self.fields.shape[3]},
            "n_time": self.n_time,
            "cadence_hours": self.cadence_hours,
            "variables": [{"name": v.name, "units": v.units, "level": v.level,
                           "mean": float(m), "std": float(s)}
                          for v, m, s in zip(self.variables, self.stats.mean, self.stats.std)],
            "constants": [{"name": v.name, "units": v.units, "level": v.level,
                           "mean": float(m), "std": float(s)}
                          for v, m, s in zip(self.constant_vars, self.const_stats.mean,
                                             self.const_stats.std)],
            "meta": self.meta,
        }


def resolve_path(path) -> Path:
    """Relative paths resolve against ``$PASSAT_DATA_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(ds: Dataset, path) -> Path:
    path = resolve_path(path)
    t, v, nl, nn = ds.fields.shape
    c = ds.constants.shape[0]
    parts = [MAGIC, struct.pack("<6I", VERSION, t, v, c, nl, nn), struct.pack("<d", ds.cadence_hours)]
    for info in tuple(ds.variables) + tuple(ds.constant_vars):
        raw = info.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
    for vec in (ds.stats.mean, ds.stats.std, ds.const_stats.mean, ds.const_stats.std):
        parts.append(np.asarray(vec, dtype="<f8").tobytes())
    parts.append(np.asarray(ds.times, dtype="<i8").tobytes())
    parts.append(np.ascontiguousarray(ds.fields, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ds.constants, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    manifest_path(path).write_text(json.dumps(ds.manifest(), indent=2) + "\n")
    return path


def load_dataset(path, expected_grid: tuple[int, int] | None = None) -> Dataset:
    """Read a dataset file; checks magic, sizes, variable order and stats."""
    path = resolve_path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: no such dataset") from exc
    if raw[:8] != MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:8]!r}")
    try:
        version, t, v, c, nl, nn = struct.unpack_from("<6I", raw, 8)
        (cadence,) = struct.unpack_from("<d", raw, 32)
        if version != VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        off = 40
        infos = []
        for _ in range(v + c):
            (n,) = struct.unpack_from("<H", raw, off)
            infos.append(VariableInfo.decode(raw[off + 2:off + 2 + n]))
            off += 2 + n

        def take(dtype, count, shape):
            nonlocal off
            nbytes = np.dtype(dtype).itemsize * count
            if off + nbytes > len(raw):
                raise DatasetError(f"{path}: truncated file")
            arr = np.frombuffer(raw, dtype, count, off).reshape(shape)
            off += nbytes
            return arr.copy()

        mean, std = take("<f8", v, (v,)), take("<f8", v, (v,))
        cmean, cstd = take("<f8", c, (c,)), take("<f8", c, (c,))
        times = take("<i8", t, (t,))
        fields = take("<f4", t * v * nl * nn, (t, v, nl, nn))
        consts = take("<f4", c * nl * nn, (c, nl, nn))
    except struct.error as exc:
        raise DatasetError(f"{path}: corrupt header") from exc
    if off != len(raw):
        raise DatasetError(f"{path}: {len(raw) - off} trailing bytes")
    if expected_grid is not None and (nl, nn) != tuple(expected_grid):
        raise ShapeMismatchError(f"{path}: grid {nl}x{nn}, expected {expected_grid[0]}x{expected_grid[1]}")
    variables, constant_vars = tuple(infos[:v]), tuple(infos[v:])
    names = [x.name for x in variables]
    expected = [x.name for x in WEATHER_VARIABLES]
    if names != expected:
        missing = [n for n in expected if n not in names]
        raise DatasetError(f"{path}: variables {names}, expected {expected}"
                           + (f" (missing {missing})" if missing else ""))
    meta = {}
    mpath = manifest_path(path)
    if mpath.exists():
        meta = json.loads(mpath.read_text()).get("meta", {})
    return Dataset(fields, consts, times, NormStats(mean, std), NormStats(cmean, cstd),
                   variables, constant_vars, cadence, meta)


# -- synthetic data --------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator. Rates are in model units (rad/h)."""

    rotation_rate: float = 0.0045
    relaxation_hours: float = 10000.0
    max_zonal_wavenumber: int = 3
    max_meridional_order: int = 2
    cadence_hours: float = 6.0


# Physical base state per variable: mean, pole-to-equator contrast, anomaly scale.
_BASE = {
    "t2m": (278.0, 12.0, 10.0),
    "t850": (272.0, 9.0, 8.0),
    "u10": (0.0, 3.0, 4.0),
    "v10": (0.0, 1.0, 3.0),
}
_Z500_MEAN = 54000.0
_Z500_ANOMALY = 300.0


def _balanced_geopotential(grid: Grid, rate: float) -> np.ndarray:
    """Zonal z500 profile (m²/s²) in gradient balance with rigid rotation at ``rate``.

    With v_θ = 0 and v_φ = rate·cos θ the meridional momentum equation is
    steady when ∂z/∂θ = −(rate² + 2ω·rate)·sin θ·cos θ in model units.
    """
    z_model = -(rate * rate + 2.0 * OMEGA * rate) * 0.5 * np.sin(grid.lat) ** 2
    return z_model / GEOPOTENTIAL_SCALE


def synth_dataset(seed: int, grid: Grid, n_steps: int, cfg: SynthConfig | None = None) -> Dataset:
    """Harmonic anomalies rotating eastward at ``cfg.rotation_rate``.

    Each variable is a fixed zonal profile plus a sum of modes
    ``a_lm(t)·P_l(θ)·cos(m(φ − c t) + ψ_lm)`` whose amplitudes follow a
    stationary AR(1) process with time scale ``cfg.relaxation_hours``. The
    mode amplitudes are normalized so that ``Σ|a_lm|·m`` bounds the zonal
    derivative of the anomaly.
    """
    if n_steps < 2:
        raise DatasetError("a dataset needs at least two records")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    theta, phi = grid.mesh()
    m_max, l_max = cfg.max_zonal_wavenumber, cfg.max_meridional_order
    modes = [(l, m) for l in range(l_max + 1) for m in range(1, m_max + 1)]
    rho = np.exp(-cfg.cadence_hours / cfg.relaxation_hours)
    innovation = np.sqrt(1.0 - rho * rho)
    n_vars = len(WEATHER_VARIABLES)

    # Meridional shapes vanish smoothly toward the poles.
    def meridional(l):
        return np.cos(theta) * np.cos(l * theta)

    scales = np.array([_BASE[v.name][2] if v.name in _BASE else _Z500_ANOMALY
                       for v in WEATHER_VARIABLES])
    amp = rng.standard_normal((n_vars, len(modes))) / np.sqrt(len(modes))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_vars, len(modes)))

    profiles = np.empty((n_vars, grid.n_lat, grid.n_lon))
    for k, v in enumerate(WEATHER_VARIABLES):
        if v.name == "z500":
            profiles[k] = _Z500_MEAN + _balanced_geopotential(grid, cfg.rotation_rate)[:, None]
        else:
            mean, contrast, _ = _BASE[v.name]
            shape = np.cos(theta) ** 2 if v.name.startswith("t") else np.sin(2 * theta)
            profiles[k] = mean + contrast * (shape - shape.mean())

    fields = np.empty((n_steps, n_vars, grid.n_lat, grid.n_lon))
    for step in range(n_steps):
        t = step * cfg.cadence_hours
        shift = cfg.rotation_rate * t
        for k in range(n_vars):
            anomaly = np.zeros(grid.shape)
            for j, (l, m) in enumerate(modes):
                anomaly += amp[k, j] * meridional(l) * np.cos(m * (phi - shift) + phase[k, j])
            fields[step, k] = profiles[k] + scales[k] * anomaly
        amp = rho * amp + innovation * rng.standard_normal(amp.shape) / np.sqrt(len(modes))

    lsm = ((np.sin(2 * phi + 0.7) * np.cos(theta) + 0.3 * np.sin(3 * theta)) > 0.2).astype(float)
    orography = 800.0 * lsm * np.cos(theta) ** 2 + 200.0 * np.cos(theta) * (1 + np.sin(phi))
    constants = np.stack([lsm, orography])

    fields32 = fields.astype(np.float32)
    consts32 = constants.astype(np.float32)
    stats = NormStats.of(fields32)
    const_stats = NormStats.of(consts32[None])
    meta = {"generator": "solid-body harmonics", "seed": seed,
            "rotation_rate": cfg.rotation_rate, "relaxation_hours": cfg.relaxation_hours,
            "max_zonal_wavenumber": m_max, "max_meridional_order": l_max,
            "anomaly_scale": scales.tolist()}
    return Dataset(fields32, consts32, np.arange(n_steps, dtype=np.int64) * int(cfg.cadence_hours),
                   stats, const_stats, WEATHER_VARIABLES, STATIC_CONSTANTS, cfg.cadence_hours, meta)
