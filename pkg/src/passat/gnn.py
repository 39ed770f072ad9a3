"""Spherical graph neural network: embedding, basic blocks, two branches.

A basic block runs three concatenate-then-project steps, each a dense layer
followed by a leaky rectifier:

1. edge update   ``e ← act([e, h_i, h_j] W_e + b_e)``
2. node update   ``h ← act([h, Σ_incident e] W_n + b_n)``
3. aggregation   ``h ← act([h, A h] W_a + b_a)``

The backbone feeds a velocity branch (per-variable v_θ, v_φ, clamped to
±0.005) and an interaction branch (per-variable tendency, normalized units
per hour). Edge states are threaded through every block.

Both heads are scaled by fixed output units (``velocity_scale``,
``interaction_scale``) so that unit-sized head activations correspond to
physically sized velocities and tendencies.

Gradients come from :mod:`passat.autodiff`; parameters are plain arrays
stored by name in :class:`GnnModel`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (ConfigError, DatasetError, NoForwardCacheError, NumericalError,
                     ShapeMismatchError)
from .spherical_graph import SphericalGraph, aggregate

VARIABLES = ("t2m", "t850", "z500", "u10", "v10")
CONSTANTS = ("lsm", "orography")


@dataclass(frozen=True)
class ModelConfig:
    n_vars: int = len(VARIABLES)
    n_constants: int = len(CONSTANTS)
    edge_in: int = 3
    embed_width: int = 48
    backbone_widths: tuple = (48, 48)
    velocity_widths: tuple = (48,)
    interaction_widths: tuple = (48, 48, 24)
    negative_slope: float = 0.01
    velocity_clamp: float = 0.005
    smooth_clamp: bool = False
    physics: bool = True
    velocity_scale: float = 0.005
    interaction_scale: float = 0.01
    direct_step_hours: float = 6.0

    def __post_init__(self):
        for name in ("backbone_widths", "velocity_widths", "interaction_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if not self.interaction_widths:
            raise ConfigError("interaction branch needs at least one block")

    @classmethod
    def full(cls, physics: bool = True) -> "ModelConfig":
        return cls(physics=physics)

    @classmethod
    def toy(cls, physics: bool = True) -> "ModelConfig":
        return cls(embed_width=16, backbone_widths=(16, 16), velocity_widths=(16,),
                   interaction_widths=(16, 16, 8), physics=physics)

    @property
    def n_inputs(self) -> int:
        return self.n_vars + self.n_constants

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _block_shapes(prefix: str, d_in: int, e_in: int, width: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}.edge.W", (e_in + 2 * d_in, width)),
        (f"{prefix}.edge.b", (width,)),
        (f"{prefix}.node.W", (d_in + width, width)),
        (f"{prefix}.node.b", (width,)),
        (f"{prefix}.agg.W", (2 * width, width)),
        (f"{prefix}.agg.b", (width,)),
    ]


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered parameter names and shapes for ``config``."""
    shapes: list[tuple[str, tuple]] = [
        ("embed.W", (config.n_inputs, config.embed_width)),
        ("embed.b", (config.embed_width,)),
    ]
    d, e = config.embed_width, config.edge_in
    for k, w in enumerate(config.backbone_widths):
        shapes += _block_shapes(f"backbone.{k}", d, e, w)
        d = e = w
    trunk_d, trunk_e = d, e
    if config.physics:
        for k, w in enumerate(config.velocity_widths):
            shapes += _block_shapes(f"velocity.{k}", d, e, w)
            d = e = w
        shapes += [("velocity.head.W", (d, 2 * config.n_vars)),
                   ("velocity.head.b", (2 * config.n_vars,))]
    d, e = trunk_d, trunk_e
    for k, w in enumerate(config.interaction_widths):
        shapes += _block_shapes(f"interaction.{k}", d, e, w)
        d = e = w
    shapes += [("interaction.head.W", (d, config.n_vars)),
               ("interaction.head.b", (config.n_vars,))]
    return dict(shapes)


def count_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def is_weight(name: str) -> bool:
    return name.endswith(".W")


@dataclass
class GnnModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "GnnModel":
        """Glorot-uniform dense layers, zero biases, zero output heads.

        Zeroed heads start the model at v = 0 and zero interaction, inside the
        clamp interval where gradients flow.
        """
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if len(shape) == 1 or ".head." in name:
                params[name] = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "GnnModel":
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "GnnModel":
        return GnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeMismatchError(f"parameter names differ: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeMismatchError(
                    f"{name}: shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise NumericalError(f"non-finite values in parameter {name}", field=name)


@dataclass
class NodeEdgeState:
    node_states: object  # (n_nodes, d)
    edge_states: object  # (n_edges, d_e)


def init_states(fields, constants, graph: SphericalGraph, units: str = "normalized") -> NodeEdgeState:
    """Initial node states (variables then constants) and geometric edge states.

    ``fields`` is ``(n_vars, n_lat, n_lon)`` and ``constants`` is
    ``(n_constants, n_lat, n_lon)``, both already normalized.
    """
    if hasattr(fields, "units"):  # FieldSet
        units, fields = fields.units, fields.values
    if hasattr(constants, "units"):
        if constants.units != "normalized":
            raise ConfigError(f"node states need normalized constants, got units {constants.units!r}")
        constants = constants.values
    if units != "normalized":
        raise ConfigError(f"node states need normalized fields, got units {units!r}")
    shape = tuple(fields.shape)
    if shape[-2:] != (graph.n_lat, graph.n_lon):
        raise ShapeMismatchError(f"fields {shape} do not match graph {graph.n_lat}x{graph.n_lon}")
    n = graph.n_nodes
    nodes_u = fields.reshape(shape[0], n).T
    consts = np.asarray(constants, dtype=np.float64).reshape(-1, n).T
    if isinstance(nodes_u, Tensor):
        node_states = ad.concat([nodes_u, consts], axis=1)
    else:
        node_states = np.concatenate([np.asarray(nodes_u, dtype=np.float64), consts], axis=1)
    return NodeEdgeState(node_states, graph.edge_features)


def _dense(x, W, b, slope: float | None):
    y = x @ W + b
    return y if slope is None else ad.leaky_relu(y, slope)


def basic_block(state: NodeEdgeState, graph: SphericalGraph, params: dict, prefix: str = "",
                slope: float = 0.01) -> NodeEdgeState:
    """One node-edge connection plus node-node aggregation step.

    ``params`` maps ``{prefix}edge.W`` etc. to arrays or tensors.
    """
    p = lambda name: params[f"{prefix}{name}"]  # noqa: E731
    h, e = ad.as_tensor(state.node_states), ad.as_tensor(state.edge_states)
    if h.shape[0] != graph.n_nodes or e.shape[0] != graph.n_edges:
        raise ShapeMismatchError(
            f"state ({h.shape[0]} nodes, {e.shape[0]} edges) does not fit graph "
            f"({graph.n_nodes}, {graph.n_edges})")
    W_e = p("edge.W")
    if W_e.shape[0] != e.shape[1] + 2 * h.shape[1]:
        raise ShapeMismatchError(
            f"{prefix}edge.W expects {W_e.shape[0]} inputs, got {e.shape[1]} + 2x{h.shape[1]}")
    first, second = graph.endpoint_selectors
    e = _dense(ad.concat([e, ad.spmm(first, h), ad.spmm(second, h)], axis=1),
               W_e, p("edge.b"), slope)
    incident = ad.spmm(graph.incidence, e)
    h = _dense(ad.concat([h, incident], axis=1), p("node.W"), p("node.b"), slope)
    h = _dense(ad.concat([h, aggregate(graph, h)], axis=1), p("agg.W"), p("agg.b"), slope)
    return NodeEdgeState(h, e)


def _run_blocks(state, graph, params, prefix, n_blocks, slope):
    for k in range(n_blocks):
        state = basic_block(state, graph, params, f"{prefix}.{k}.", slope)
    return state


def _clamp(x, config: ModelConfig):
    c = config.velocity_clamp
    if config.smooth_clamp:
        return ad.tanh(x * (1.0 / c)) * c
    return ad.clip(x, -c, c)


def backbone(params, state: NodeEdgeState, graph: SphericalGraph, config: ModelConfig):
    slope = config.negative_slope
    h = _dense(ad.as_tensor(state.node_states), params["embed.W"], params["embed.b"], slope)
    return _run_blocks(NodeEdgeState(h, state.edge_states), graph, params, "backbone",
                       len(config.backbone_widths), slope)


def velocity_branch(params, trunk: NodeEdgeState, graph, config: ModelConfig):
    s = _run_blocks(trunk, graph, params, "velocity", len(config.velocity_widths),
                    config.negative_slope)
    raw = _dense(s.node_states, params["velocity.head.W"], params["velocity.head.b"], None)
    return _clamp(raw * config.velocity_scale, config)


def interaction_branch(params, trunk: NodeEdgeState, graph, config: ModelConfig):
    s = _run_blocks(trunk, graph, params, "interaction", len(config.interaction_widths),
                    config.negative_slope)
    raw = _dense(s.node_states, params["interaction.head.W"], params["interaction.head.b"], None)
    return raw * config.interaction_scale


@dataclass
class ForwardResult:
    velocity_out: Tensor | None  # (n_nodes, 2 * n_vars), channel 2k = v_θ, 2k+1 = v_φ
    interaction_out: Tensor  # (n_nodes, n_vars)
    inputs: Tensor
    leaves: dict[str, Tensor]


def forward(model: GnnModel, state: NodeEdgeState, graph: SphericalGraph,
            record: bool = True) -> ForwardResult:
    """Embed, run the backbone, then both branches.

    With ``record`` the parameters and node inputs become gradient leaves and
    the result can be passed to :func:`backward`.
    """
    model.validate()
    leaves = model.tensors(requires_grad=record)
    inputs = Tensor(ad.value(state.node_states), requires_grad=record, name="inputs")
    if inputs.shape[1] != model.config.n_inputs:
        raise ShapeMismatchError(
            f"node states have {inputs.shape[1]} channels, model expects {model.config.n_inputs}")
    trunk = backbone(leaves, NodeEdgeState(inputs, state.edge_states), graph, model.config)
    vel = velocity_branch(leaves, trunk, graph, model.config) if model.config.physics else None
    inter = interaction_branch(leaves, trunk, graph, model.config)
    return ForwardResult(vel, inter, inputs, leaves if record else {})


def backward(result: ForwardResult | None, output_grads: dict) -> tuple[dict, np.ndarray]:
    """Parameter and input gradients of ``Σ <grad, output>`` over the given outputs.

    ``output_grads`` maps ``"velocity"`` and/or ``"interaction"`` to arrays
    shaped like the corresponding outputs.
    """
    if result is None or not result.leaves:
        raise NoForwardCacheError("backward() needs a recorded forward pass")
    for t in list(result.leaves.values()) + [result.inputs]:
        t.grad = None
    seed = None
    for key, out in (("velocity", result.velocity_out), ("interaction", result.interaction_out)):
        if key in output_grads and out is not None:
            g = np.asarray(output_grads[key], dtype=np.float64)
            if g.shape != out.shape:
                raise ShapeMismatchError(f"{key} grad shape {g.shape} != output {out.shape}")
            term = (out * g).sum()
            seed = term if seed is None else seed + term
    if seed is not None:
        seed.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in result.leaves.items()}
    g_in = result.inputs.grad if result.inputs.grad is not None else np.zeros_like(result.inputs.data)
    return grads, g_in


class PassatNet:
    """A model bound to a graph and static constants, exposing the two branches.

    ``f_vel`` and ``f_int`` take normalized fields ``(n_vars, n_lat, n_lon)``
    (arrays or tensors) and return fields of the same layout. Call counts are
    kept in :attr:`calls`.
    """

    def __init__(self, model: GnnModel, graph: SphericalGraph, constants: np.ndarray):
        model.validate()
        n_const = model.config.n_constants
        constants = np.asarray(constants, dtype=np.float64)
        if constants.shape != (n_const, graph.n_lat, graph.n_lon):
            raise ShapeMismatchError(
                f"constants shape {constants.shape}, expected {(n_const, graph.n_lat, graph.n_lon)}")
        self.model = model
        self.graph = graph
        self.constants = constants
        self.params: dict[str, Tensor] = model.tensors(requires_grad=False)
        self.calls = {"f_vel": 0, "f_int": 0, "f_direct": 0}

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def track_gradients(self) -> dict[str, Tensor]:
        """Fresh parameter leaves that record gradients for the next forward passes."""
        self.params = self.model.tensors(requires_grad=True)
        return self.params

    def refresh(self) -> None:
        """Re-read parameter values after an in-place update, without gradients."""
        self.params = self.model.tensors(requires_grad=False)

    def reset_calls(self) -> None:
        for k in self.calls:
            self.calls[k] = 0

    def _trunk(self, u):
        shape = tuple(u.shape)
        if shape != (self.config.n_vars, self.graph.n_lat, self.graph.n_lon):
            raise ShapeMismatchError(f"fields shape {shape} does not match model/graph")
        state = init_states(u, self.constants, self.graph)
        return backbone(self.params, state, self.graph, self.config)

    def _to_grid(self, out):
        n_ch = out.shape[1]
        return out.T.reshape(n_ch, self.graph.n_lat, self.graph.n_lon)

    def f_vel(self, u):
        """Initial velocities ``(v_θ, v_φ)``, each ``(n_vars, n_lat, n_lon)``."""
        if not self.config.physics:
            raise ConfigError("model was built without a velocity branch")
        self.calls["f_vel"] += 1
        out = velocity_branch(self.params, self._trunk(u), self.graph, self.config)
        v = self._to_grid(out).reshape(self.config.n_vars, 2, self.graph.n_lat, self.graph.n_lon)
        return v[:, 0], v[:, 1]

    def f_int(self, u):
        """Interaction tendency, normalized units per hour."""
        self.calls["f_int"] += 1
        return self._to_grid(interaction_branch(self.params, self._trunk(u), self.graph, self.config))

    def f_direct(self, u):
        """End-to-end field increment over one model step (physics-off variant)."""
        self.calls["f_direct"] += 1
        out = interaction_branch(self.params, self._trunk(u), self.graph, self.config)
        return self._to_grid(out * self.config.direct_step_hours)


# -- checkpoint format ---------------------------------------------------------
#
# <path>       little-endian: b"PSCKPT01", uint32 version, uint32 n_tensors, then per
#              tensor: uint16 name length, utf-8 name, uint8 ndim, uint64 dims[ndim],
#              float64 values (row-major)
# <path>.json  {"format", "version", "config", "tensors": [{"name", "shape"}], ...}

_CKPT_MAGIC = b"PSCKPT01"


def _manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: GnnModel, path, extra: dict | None = None) -> None:
    path = Path(path)
    names = list(param_shapes(model.config))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", 1, len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)) + raw_name)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    manifest = {
        "format": "passat-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "n_parameters": model.n_parameters,
    }
    if extra:
        manifest.update(extra)
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> GnnModel:
    path = Path(path)
    try:
        manifest = json.loads(_manifest_path(path).read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: checkpoint manifest missing") from exc
    config = ModelConfig.from_dict(manifest["config"])
    raw = path.read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise DatasetError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != 1:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
            offset += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(raw, "<f8", size, offset).reshape(shape).astype(np.float64)
            offset += 8 * size
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"{path}: truncated checkpoint") from exc
    if offset != len(raw):
        raise DatasetError(f"{path}: {len(raw) - offset} trailing bytes")
    listed = {t["name"]: tuple(t["shape"]) for t in manifest["tensors"]}
    for name, arr in params.items():
        if listed.get(name) != arr.shape:
            raise ShapeMismatchError(f"{name}: file shape {arr.shape}, manifest {listed.get(name)}")
    model = GnnModel(config, params)
    model.validate()
    return model
