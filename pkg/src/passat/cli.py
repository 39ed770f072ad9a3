"""Command-line entry point: ``passat <command> [options]``.

Commands: ``synth``, ``graph-build``, ``train``, ``simulate``, ``evaluate``.
Every command that writes a directory also writes ``run_manifest.json``
with its arguments, seed, thread cap and input hashes.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import value
from .data_io import Dataset, denormalize, load_dataset, resolve_path, save_dataset, synth_dataset
from .errors import ConfigError, DatasetError, GraphDisconnectedError, NumericalError, ShapeMismatchError
from .gnn import GnnModel, ModelConfig, load_checkpoint, save_checkpoint
from .metrics import Climatology, score_table, svg_chart, write_csv
from .sphere_grid import Grid
from .spherical_graph import (HAVERSINE, DEFAULT_KERNEL_GAIN, DEFAULT_PRUNE_THRESHOLD, PLANAR, build_graph,
                              calibrate_threshold, save_graph, scaled_kernel_gain)
from .training import TrainConfig, Trainer, forecast

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
MAX_LEAD_HOURS = 144


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    arguments: dict
    seed: int | None
    threads: int
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    version: str = __version__

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = file_digest(path)
            side = path.with_name(path.name + ".json")
            if side.is_file():
                self.inputs[str(side)] = file_digest(side)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def graph_for(grid: Grid, metric: str = HAVERSINE):
    """The graph used for a grid: default constants at 5.625°, calibrated otherwise."""
    if metric == HAVERSINE and grid.shape == (32, 64):
        return build_graph(grid, DEFAULT_KERNEL_GAIN, DEFAULT_PRUNE_THRESHOLD)
    gain = scaled_kernel_gain(grid)
    target = 5 if metric == HAVERSINE else 3
    thr = calibrate_threshold(grid, target, kernel_gain=gain, metric=metric)
    return build_graph(grid, gain, thr, metric=metric)


def _grid_from_args(args) -> Grid:
    if args.resolution is not None:
        return Grid.from_resolution(args.resolution)
    if args.n_lat is None or args.n_lon is None:
        raise ConfigError("give --resolution or both --n-lat and --n-lon")
    return Grid(args.n_lat, args.n_lon)


def _threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    grid = _grid_from_args(args)
    ds = synth_dataset(args.seed, grid, args.steps)
    path = save_dataset(ds, args.out)
    print(f"wrote {path} records={ds.n_time} grid={grid.n_lat}x{grid.n_lon}")
    return 0


def cmd_graph_build(args) -> int:
    grid = _grid_from_args(args)
    metric = PLANAR if args.planar else HAVERSINE
    if args.kernel_gain is not None:
        gain = args.kernel_gain
    elif grid.shape == (32, 64):
        gain = DEFAULT_KERNEL_GAIN
    else:
        gain = scaled_kernel_gain(grid)
    if args.threshold == "calibrate":
        target = args.min_degree or (3 if args.planar else 5)
        thr = calibrate_threshold(grid, target, kernel_gain=gain, metric=metric)
    elif args.threshold is None:
        if grid.shape == (32, 64) and gain == DEFAULT_KERNEL_GAIN and not args.planar:
            thr = DEFAULT_PRUNE_THRESHOLD
        else:
            thr = calibrate_threshold(grid, args.min_degree or (3 if args.planar else 5),
                                      kernel_gain=gain, metric=metric)
    else:
        thr = float(args.threshold)
    graph = build_graph(grid, gain, thr, metric=metric)
    s = graph.summary()
    print(f"nodes={s['nodes']} edges={s['edges']} min_degree={s['min_degree']} "
          f"max_degree={s['max_degree']} threshold={thr:.6g} kernel_gain={gain:.6g}")
    if args.out:
        save_graph(graph, args.out)
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    model_cfg = replace(cfg.model, physics=not args.no_physics) if args.no_physics else cfg.model
    cfg = replace(cfg, model=model_cfg)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metric = PLANAR if args.planar_graph else HAVERSINE
    graph = graph_for(ds.grid, metric)
    stop = args.train_records or ds.n_time
    train = ds.subset(0, stop)
    model = GnnModel.init(cfg.model, seed=cfg.seed)
    log = out / "train_log.csv"
    if log.exists():
        log.unlink()
    if cfg.epochs > 0:
        Trainer(model, graph, train, cfg).fit(log)
    cfg.save(out / "train_config.json")
    extra = {"graph_metric": metric, "grid": list(ds.grid.shape), "train": cfg.to_dict(),
             "train_records": stop}
    save_checkpoint(model, out / "model.ckpt", extra)
    manifest = RunManifest("train", vars_for_manifest(args), cfg.seed, args.threads,
                           outputs=["model.ckpt", "model.ckpt.json", "train_log.csv", "train_config.json"])
    manifest.add_input(resolve_path(args.dataset))
    if args.config:
        manifest.add_input(args.config)
    manifest.write(out)
    print(f"wrote {out / 'model.ckpt'} parameters={model.n_parameters} epochs={cfg.epochs}")
    return 0


def cmd_simulate(args) -> int:
    if not 0 < args.lead_time <= MAX_LEAD_HOURS or args.lead_time % 6:
        raise ConfigError(f"lead time must be a multiple of 6 h in (0, {MAX_LEAD_HOURS}]")
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    meta = json.loads(Path(str(args.checkpoint) + ".json").read_text())
    if args.no_physics and model.config.physics:
        raise ConfigError("--no-physics needs a checkpoint trained without physics")
    if not args.no_physics and not model.config.physics:
        raise ConfigError("checkpoint was trained without physics; pass --no-physics")
    metric = PLANAR if args.planar_graph else HAVERSINE
    if meta.get("graph_metric", HAVERSINE) != metric:
        raise ConfigError(f"checkpoint was trained on the {meta.get('graph_metric')} graph")
    trained_on = tuple(meta.get("grid", ds.grid.shape))
    if trained_on != ds.grid.shape:
        raise ShapeMismatchError(f"checkpoint was trained on a {trained_on[0]}x{trained_on[1]} grid, "
                                 f"dataset is {ds.grid.n_lat}x{ds.grid.n_lon}")
    graph = graph_for(ds.grid, metric)
    cfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig(model=model.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = args.init_start if args.init_start is not None else 0
    stop = args.init_stop if args.init_stop is not None else ds.n_time
    written = []
    for i in range(start, min(stop, ds.n_time), args.init_every):
        traj = forecast(model, graph, ds, ds.normalized(i), args.lead_time, cfg)
        six = [np.asarray(value(traj.at(h))) for h in range(6, args.lead_time + 1, 6)]
        phys = denormalize(np.stack(six), ds.stats)
        init_hour = int(ds.times[i])
        times = init_hour + np.arange(6, args.lead_time + 1, 6, dtype=np.int64)
        pred = Dataset(phys.astype(np.float32), ds.constants, times, ds.stats, ds.const_stats,
                       ds.variables, ds.constant_vars, 6.0,
                       {"init_hour": init_hour, "lead_hours": list(range(6, args.lead_time + 1, 6))})
        name = f"forecast_{init_hour:08d}.psd"
        save_dataset(pred, out / name)
        written.append(name)
    manifest = RunManifest("simulate", vars_for_manifest(args), None, args.threads, outputs=written)
    manifest.add_input(resolve_path(args.dataset))
    manifest.add_input(args.checkpoint)
    manifest.write(out)
    print(f"wrote {len(written)} forecasts of {args.lead_time // 6} snapshots to {out}")
    return 0


def cmd_evaluate(args) -> int:
    obs = load_dataset(args.obs)
    clim_src = load_dataset(args.climatology) if args.climatology else obs
    clim = Climatology(clim_src.climatology(), obs.variable_names)
    files = sorted(Path(args.pred).glob("forecast_*.psd"))
    if not files:
        raise DatasetError(f"no forecast files in {args.pred}")
    index = {int(t): k for k, t in enumerate(obs.times)}
    preds: dict[float, list] = {}
    truth: dict[float, list] = {}
    for f in files:
        pred = load_dataset(f, expected_grid=obs.grid.shape)
        init = int(pred.meta.get("init_hour", pred.times[0] - 6))
        for k, t in enumerate(pred.times):
            if int(t) not in index:
                continue
            lead = float(int(t) - init)
            preds.setdefault(lead, []).append(pred.fields[k].astype(np.float64))
            truth.setdefault(lead, []).append(obs.fields[index[int(t)]].astype(np.float64))
    if not preds:
        raise DatasetError("no forecast snapshot matches an observation time")
    rows = score_table({k: np.stack(v) for k, v in preds.items()},
                       {k: np.stack(v) for k, v in truth.items()}, clim, obs.grid)
    write_csv(rows, args.out)
    if args.plot:
        base = Path(args.out).with_suffix("")
        for metric in ("rmse", "acc"):
            Path(f"{base}_{metric}.svg").write_text(svg_chart(rows, metric))
    for r in rows:
        print(f"{r.variable},{r.lead_time_hours:g},{r.rmse:.6g},{r.acc:.6g}")
    return 0


def vars_for_manifest(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="passat", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def grid_args(sp):
        sp.add_argument("--resolution", type=float, help="grid spacing in degrees (n_lon = 2 n_lat)")
        sp.add_argument("--n-lat", type=int)
        sp.add_argument("--n-lon", type=int)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    grid_args(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=84)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("graph-build", help="build and report the spherical graph")
    grid_args(s)
    s.add_argument("--threshold", help="pruning threshold, or 'calibrate'")
    s.add_argument("--kernel-gain", type=float)
    s.add_argument("--min-degree", type=int, help="calibration target")
    s.add_argument("--planar", action="store_true", help="Euclidean lat-lon distance, no wraparound")
    s.add_argument("--out")
    s.set_defaults(func=cmd_graph_build)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--train-records", type=int, help="use records [0, N) for training")
    s.add_argument("--no-physics", action="store_true")
    s.add_argument("--planar-graph", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="forecast from every initial time")
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--lead-time", type=int, default=24)
    s.add_argument("--init-start", type=int)
    s.add_argument("--init-stop", type=int)
    s.add_argument("--init-every", type=int, default=1)
    s.add_argument("--no-physics", action="store_true")
    s.add_argument("--planar-graph", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="latitude-weighted RMSE and ACC per lead time")
    s.add_argument("--pred", required=True, help="directory of forecast files")
    s.add_argument("--obs", required=True)
    s.add_argument("--climatology", help="dataset whose time mean is the climatology")
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true", help="also write SVG charts")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except (ConfigError, ValueError) as exc:
        code = EXIT_CONFIG
        if isinstance(exc, (ShapeMismatchError, GraphDisconnectedError)):
            code = EXIT_DATA
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (DatasetError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
