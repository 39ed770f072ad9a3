"""Losses, optimizer, learning-rate schedule and the autoregressive training loop.

A training sample is an initial state and the next ``T_a`` six-hourly
records. The model rolls out to ``6·T_a`` hours; the loss is the field MSE at
every six-hour mark plus a penalty on the magnitude and roughness of the
initial velocities. Gradients flow through the whole unrolled integrator.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, value
from .data_io import Dataset
from .dynamics import DynamicsParams, VelocityField
from .errors import ConfigError, NumericalError, ShapeMismatchError
from .gnn import GnnModel, ModelConfig, PassatNet, is_weight
from .integrator import IntegratorConfig, rollout
from .spherical_graph import SphericalGraph
from .sphere_grid import Grid, ddphi, ddtheta


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    autoregressive_steps: int = 4
    step_hours: float = 6.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.autoregressive_steps < 1:
            raise ConfigError("need at least one autoregressive step")

    @property
    def horizon_hours(self) -> float:
        return self.autoregressive_steps * self.step_hours


def loss_basic(pred, obs):
    """Mean squared error per grid point, averaged over steps and variables.

    ``pred`` and ``obs`` are sequences of ``(n_vars, n_lat, n_lon)`` fields
    aligned by horizon; ``pred`` entries may be tensors.
    """
    if len(pred) != len(obs):
        raise ShapeMismatchError(f"{len(pred)} predicted horizons vs {len(obs)} observed")
    if not pred:
        raise ShapeMismatchError("empty trajectories")
    total = None
    for p, o in zip(pred, obs):
        if tuple(p.shape) != tuple(np.shape(o)):
            raise ShapeMismatchError(f"prediction {tuple(p.shape)} vs observation {np.shape(o)}")
        d = p - o
        term = (d * d).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(pred))


def loss_velocity(v0: VelocityField, grid: Grid, cfg: LossConfig = LossConfig()):
    """Magnitude and smoothness penalty on the initial velocities, averaged over variables.

    Per variable: ``λ1/(2N)·Σ(v_θ²+v_φ²) + λ2/(2N)·Σ(∂θ v)² + λ3/(2N)·Σ(∂φ v)²``
    with ``N`` grid points.
    """
    vt, vp = v0.v_theta, v0.v_phi
    n_vars = vt.shape[0] if len(vt.shape) == 3 else 1
    scale = 1.0 / (2.0 * grid.n_nodes * n_vars)
    total = ((vt * vt).sum() + (vp * vp).sum()) * (cfg.lambda1 * scale)
    if cfg.lambda2:
        a, b = ddtheta(vt, grid), ddtheta(vp, grid)
        total = total + ((a * a).sum() + (b * b).sum()) * (cfg.lambda2 * scale)
    if cfg.lambda3:
        a, b = ddphi(vt, grid), ddphi(vp, grid)
        total = total + ((a * a).sum() + (b * b).sum()) * (cfg.lambda3 * scale)
    return total


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-3, lr_min: float = 3e-7) -> float:
    """Half-cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # Fixed summation order (insertion order of the parameter dict).
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Scale all gradients together so their global norm is at most ``max_norm``.

    Returns ``(grads, norm_before)``; gradients already within the bound are
    returned untouched.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    clipped = {k: g * scale for k, g in grads.items()}
    # Rounding can leave the result a hair above the bound.
    while global_norm(clipped) > max_norm:
        scale = np.nextafter(scale, 0.0)
        clipped = {k: g * scale for k, g in grads.items()}
    return clipped, norm


@dataclass
class OptimizerState:
    """Adam moments with decoupled weight decay."""

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kwargs) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kwargs)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, decay=is_weight) -> None:
    """One in-place update; ``decay(name)`` selects the parameters that get weight decay.

    Decay shrinks the parameter first, ``p ← p·(1 − lr·wd)``; then the
    bias-corrected moment step ``p ← p − lr·m̂/(√v̂ + eps)`` follows.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and decay(name):
            p *= 1.0 - lr * state.weight_decay
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"parameter {name} became non-finite", field=name)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 20
    batch_size: int = 1
    lr_max: float = 1e-3
    lr_min: float = 3e-7
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0
    substep_hours: float = 0.2
    mu: float = 1e-4
    evolve_velocity: bool = True

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(substep_hours=self.substep_hours,
                                lead_time_hours=self.loss.horizon_hours,
                                physics_enabled=self.model.physics,
                                evolve_velocity=self.evolve_velocity,
                                velocity_clamp=self.model.velocity_clamp,
                                direct_step_hours=self.loss.step_hours)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        return cls(model=model, loss=loss, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class SampleLoss:
    total: object
    basic: float
    velocity: float


def sample_loss(net: PassatNet, initial: np.ndarray, obs: list[np.ndarray], cfg: TrainConfig,
                z_std: float) -> SampleLoss:
    """Roll out from ``initial`` and score the six-hourly snapshots against ``obs``."""
    icfg = cfg.integrator()
    traj = rollout(initial, net, icfg, net.graph.grid, DynamicsParams(mu=cfg.mu), z_std)
    pred = traj.every(cfg.loss.step_hours)
    lb = loss_basic(pred, obs)
    total = lb
    lv = 0.0
    if cfg.model.physics:
        lv_t = loss_velocity(traj.initial_velocities, net.graph.grid, cfg.loss)
        total = total + lv_t
        lv = float(value(lv_t))
    return SampleLoss(total, float(value(lb)), lv)


@dataclass
class EpochStats:
    epoch: int
    loss_basic: float
    loss_velocity: float
    lr: float
    grad_norm_quantiles: tuple
    step_losses: list = field(default_factory=list)

    def csv_row(self) -> list:
        q = self.grad_norm_quantiles
        return [self.epoch, f"{self.loss_basic:.10g}", f"{self.loss_velocity:.10g}", f"{self.lr:.10g}",
                *(f"{x:.6g}" for x in q)]


CSV_HEADER = ["epoch", "loss_basic", "loss_velocity", "lr", "grad_norm_p10", "grad_norm_p50",
              "grad_norm_p90"]


def append_log(path, stats: EpochStats) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CSV_HEADER)
        w.writerow(stats.csv_row())


class Trainer:
    """Owns the model, optimizer state and schedule across epochs."""

    def __init__(self, model: GnnModel, graph: SphericalGraph, dataset: Dataset, cfg: TrainConfig,
                 samples: list[int] | None = None):
        if model.config != cfg.model:
            raise ConfigError("model architecture differs from the training config")
        self.model = model
        self.cfg = cfg
        self.dataset = dataset
        self.net = PassatNet(model, graph, dataset.normalized_constants())
        steps = cfg.loss.autoregressive_steps
        self.samples = list(range(dataset.n_samples(steps))) if samples is None else list(samples)
        if not self.samples:
            raise ConfigError("dataset has no training samples for this horizon")
        self.z_std = float(dataset.stats.std[list(dataset.variable_names).index("z500")])
        self.opt = OptimizerState.zeros_like(model.params, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.steps_per_epoch = math.ceil(len(self.samples) / cfg.batch_size)
        self.total_steps = max(cfg.epochs * self.steps_per_epoch, 1)
        self.global_step = 0

    def lr(self) -> float:
        step = min(self.global_step, self.total_steps)
        return cosine_lr(step, self.total_steps, self.cfg.lr_max, self.cfg.lr_min)

    def gradients(self, batch: list[int]) -> tuple[dict, float, float]:
        """Mean loss gradients over ``batch`` plus the mean basic and velocity losses."""
        leaves = self.net.track_gradients()
        steps = self.cfg.loss.autoregressive_steps
        total, lb, lv = None, 0.0, 0.0
        for i in batch:
            u0, obs = self.dataset.sample(i, steps)
            s = sample_loss(self.net, u0, obs, self.cfg, self.z_std)
            if not math.isfinite(float(value(s.total))):
                raise NumericalError(f"non-finite loss on sample {i}", sample=i)
            total = s.total if total is None else total + s.total
            lb += s.basic
            lv += s.velocity
        total = total * (1.0 / len(batch))
        if isinstance(total, Tensor) and total.requires_grad:
            total.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        self.net.refresh()
        return grads, lb / len(batch), lv / len(batch)

    def step(self, batch: list[int]) -> tuple[float, float, float]:
        grads, lb, lv = self.gradients(batch)
        grads, norm = clip_grad_norm(grads, self.cfg.clip_norm)
        lr = self.lr()
        adamw_step(self.model.params, grads, self.opt, lr)
        self.net.refresh()
        self.global_step += 1
        return lb, lv, norm

    def train_epoch(self, epoch: int) -> EpochStats:
        order = self.rng.permutation(self.samples)
        bs = self.cfg.batch_size
        lbs, lvs, norms = [], [], []
        lr = self.lr()
        for start in range(0, len(order), bs):
            lb, lv, norm = self.step([int(i) for i in order[start:start + bs]])
            lbs.append(lb)
            lvs.append(lv)
            norms.append(norm)
        q = tuple(float(x) for x in np.quantile(norms, [0.1, 0.5, 0.9]))
        return EpochStats(epoch, float(np.mean(lbs)), float(np.mean(lvs)), lr, q, lbs)

    def fit(self, log_path=None, epochs: int | None = None) -> list[EpochStats]:
        history = []
        for epoch in range(self.cfg.epochs if epochs is None else epochs):
            stats = self.train_epoch(epoch)
            history.append(stats)
            if log_path is not None:
                append_log(log_path, stats)
        return history


def train_epoch(trainer: Trainer, epoch: int = 0) -> EpochStats:
    return trainer.train_epoch(epoch)


def overfit(model: GnnModel, graph: SphericalGraph, dataset: Dataset, cfg: TrainConfig,
            sample: int = 0, steps: int = 500, lr: float | None = None) -> list[float]:
    """Repeat one sample for ``steps`` updates; returns L_basic per step.

    With ``lr`` the rate is held fixed, otherwise the config's cosine schedule
    runs over the ``steps`` updates.
    """
    if lr is not None:
        cfg = replace(cfg, lr_max=lr, lr_min=lr)
    trainer = Trainer(model, graph, dataset, replace(cfg, epochs=1), samples=[sample])
    trainer.total_steps = steps
    return [trainer.step([sample])[0] for _ in range(steps)]


def forecast(model: GnnModel, graph: SphericalGraph, dataset: Dataset, initial: np.ndarray,
             lead_hours: float, cfg: TrainConfig | None = None, spill_dir=None):
    """Inference rollout of a trained model; returns the trajectory of normalized fields."""
    cfg = cfg or TrainConfig(model=model.config)
    net = PassatNet(model, graph, dataset.normalized_constants())
    icfg = cfg.integrator().with_lead_time(lead_hours)
    z_std = float(dataset.stats.std[list(dataset.variable_names).index("z500")])
    traj = rollout(initial, net, icfg, graph.grid, DynamicsParams(mu=cfg.mu), z_std, spill_dir)
    return traj
