import json

import numpy as np
import pytest

from passat.cli import EXIT_CONFIG, EXIT_DATA, RunManifest, graph_for, main
from passat.data_io import Dataset, NormStats, load_dataset, save_dataset, synth_dataset
from passat.gnn import GnnModel, ModelConfig, load_checkpoint, save_checkpoint
from passat.metrics import read_csv
from passat.sphere_grid import Grid


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_graph_build_standard_grid(capsys, tmp_path):
    code, out, _ = run(capsys, "graph-build", "--resolution", 5.625, "--out", tmp_path / "g.bin")
    assert code == 0
    assert "nodes=2048" in out and "edges=9152" in out and "min_degree=5" in out
    assert (tmp_path / "g.bin").stat().st_size > 0


def test_graph_build_toy_and_calibrated(capsys):
    code, out, _ = run(capsys, "graph-build", "--n-lat", 8, "--n-lon", 16)
    assert code == 0 and "nodes=128" in out and "min_degree=5" in out
    code, out, _ = run(capsys, "graph-build", "--resolution", 5.625, "--threshold", "calibrate")
    assert code == 0 and "min_degree=5" in out
    code, out, _ = run(capsys, "graph-build", "--n-lat", 8, "--n-lon", 16, "--planar")
    assert code == 0 and "min_degree=3" in out


def test_graph_build_errors(capsys):
    code, _, err = run(capsys, "graph-build", "--n-lat", 8)
    assert code == EXIT_CONFIG and "error" in err
    code, _, err = run(capsys, "graph-build", "--resolution", 5.625, "--threshold", "0.99")
    assert code == EXIT_DATA


def test_synth_then_train_zero_epochs(capsys, tmp_path):
    data = tmp_path / "d.psd"
    assert run(capsys, "synth", "--n-lat", 8, "--n-lon", 16, "--steps", 8, "--out", data)[0] == 0
    code, out, _ = run(capsys, "train", "--dataset", data, "--epochs", 0, "--seed", 4, "--out", tmp_path / "r")
    assert code == 0 and "parameters=10063" in out
    ckpt = load_checkpoint(tmp_path / "r" / "model.ckpt")
    init = GnnModel.init(ModelConfig.toy(), seed=4)
    assert all(np.array_equal(ckpt.params[k], init.params[k]) for k in init.params)
    manifest = json.loads((tmp_path / "r" / "run_manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["threads"] == 1
    assert str(data) in manifest["inputs"] and len(manifest["inputs"][str(data)]) == 64


def test_train_is_deterministic(capsys, tmp_path):
    data = tmp_path / "d.psd"
    save_dataset(synth_dataset(0, Grid(8, 16), 7), data)
    for name in ("a", "b"):
        assert run(capsys, "train", "--dataset", data, "--epochs", 1, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,loss_basic") and len(log) == 2


def flat_geopotential_dataset(path):
    """Synthetic data whose z500 varies in time only, so the pressure gradient vanishes."""
    ds = synth_dataset(0, Grid(8, 16), 6)
    fields = ds.fields.copy()
    fields[:, 2] = (54000.0 + 10.0 * np.arange(6))[:, None, None]
    ds = Dataset(fields, ds.constants, ds.times, NormStats.of(fields), ds.const_stats)
    save_dataset(ds, path)
    return ds


def test_simulate_zero_model_is_identity(capsys, tmp_path):
    ds = flat_geopotential_dataset(tmp_path / "d.psd")
    save_checkpoint(GnnModel.zeros(ModelConfig.toy()), tmp_path / "zero.ckpt")
    code, _, _ = run(capsys, "simulate", "--dataset", tmp_path / "d.psd", "--checkpoint",
                     tmp_path / "zero.ckpt", "--lead-time", 6, "--init-stop", 2, "--out", tmp_path / "f")
    assert code == 0
    for i in range(2):
        pred = load_dataset(tmp_path / "f" / f"forecast_{6 * i:08d}.psd")
        assert pred.times.tolist() == [6 * i + 6] and pred.meta["init_hour"] == 6 * i
        assert np.allclose(pred.fields[0], ds.fields[i], rtol=1e-6, atol=0)


def test_simulate_long_lead_and_no_physics(capsys, tmp_path):
    save_dataset(synth_dataset(0, Grid(8, 16), 4), tmp_path / "d.psd")
    save_checkpoint(GnnModel.init(ModelConfig.toy(physics=False), seed=1), tmp_path / "np.ckpt")
    code, out, _ = run(capsys, "simulate", "--dataset", tmp_path / "d.psd", "--checkpoint",
                       tmp_path / "np.ckpt", "--lead-time", 144, "--init-stop", 1, "--no-physics",
                       "--out", tmp_path / "f")
    assert code == 0 and "24 snapshots" in out
    pred = load_dataset(tmp_path / "f" / "forecast_00000000.psd")
    assert pred.n_time == 24 and pred.times[-1] == 144
    # Heads start at zero, so the direct-step model is persistence.
    assert np.allclose(pred.fields[-1], pred.fields[0], rtol=1e-6)


def test_simulate_errors(capsys, tmp_path):
    save_dataset(synth_dataset(0, Grid(8, 16), 4), tmp_path / "d.psd")
    save_checkpoint(GnnModel.init(ModelConfig.toy()), tmp_path / "m.ckpt", {"grid": [8, 16]})
    base = ["simulate", "--dataset", tmp_path / "d.psd", "--checkpoint", tmp_path / "m.ckpt",
            "--out", tmp_path / "f"]
    assert run(capsys, *base, "--lead-time", 150)[0] == EXIT_CONFIG
    assert run(capsys, *base, "--lead-time", 9)[0] == EXIT_CONFIG
    assert run(capsys, *base, "--no-physics")[0] == EXIT_CONFIG
    assert run(capsys, *base, "--planar-graph")[0] == EXIT_CONFIG
    save_dataset(synth_dataset(0, Grid(4, 8), 4), tmp_path / "small.psd")
    base[2] = tmp_path / "small.psd"
    assert run(capsys, *base)[0] == EXIT_DATA
    base[2] = tmp_path / "missing.psd"
    assert run(capsys, *base)[0] == EXIT_DATA


def write_forecasts(ds, out_dir, make):
    out_dir.mkdir()
    for i in range(ds.n_time - 4):
        fields = np.stack([make(i, k) for k in range(1, 5)]).astype(np.float32)
        times = ds.times[i] + 6 * np.arange(1, 5)
        pred = Dataset(fields, ds.constants, times, ds.stats, ds.const_stats, meta={"init_hour": int(ds.times[i])})
        save_dataset(pred, out_dir / f"forecast_{int(ds.times[i]):08d}.psd")


def test_evaluate_examples(capsys, tmp_path):
    ds = synth_dataset(2, Grid(8, 16), 30)
    save_dataset(ds, tmp_path / "obs.psd")
    write_forecasts(ds, tmp_path / "perfect", lambda i, k: ds.fields[i + k])
    code, _, _ = run(capsys, "evaluate", "--pred", tmp_path / "perfect", "--obs", tmp_path / "obs.psd",
                     "--out", tmp_path / "perfect.csv", "--plot")
    assert code == 0
    rows = read_csv(tmp_path / "perfect.csv")
    assert len(rows) == 20 and all(r.rmse == 0 for r in rows)
    assert all(abs(r.acc - 1) < 1e-9 for r in rows)
    assert (tmp_path / "perfect_rmse.svg").exists() and (tmp_path / "perfect_acc.svg").exists()

    write_forecasts(ds, tmp_path / "shifted", lambda i, k: ds.fields[i + k] + 2.0)
    run(capsys, "evaluate", "--pred", tmp_path / "shifted", "--obs", tmp_path / "obs.psd",
        "--out", tmp_path / "shifted.csv")
    assert all(r.rmse == pytest.approx(2.0, rel=1e-4) for r in read_csv(tmp_path / "shifted.csv"))

    write_forecasts(ds, tmp_path / "persist", lambda i, k: ds.fields[i])
    run(capsys, "evaluate", "--pred", tmp_path / "persist", "--obs", tmp_path / "obs.psd",
        "--out", tmp_path / "persist.csv")
    rows = read_csv(tmp_path / "persist.csv")
    for var in ds.variable_names:
        series = [r.rmse for r in rows if r.variable == var]
        assert series == sorted(series)


def test_evaluate_missing_snapshots(capsys, tmp_path):
    save_dataset(synth_dataset(0, Grid(8, 16), 4), tmp_path / "obs.psd")
    (tmp_path / "empty").mkdir()
    assert run(capsys, "evaluate", "--pred", tmp_path / "empty", "--obs", tmp_path / "obs.psd",
               "--out", tmp_path / "m.csv")[0] == EXIT_DATA


def test_manifest_and_graph_helper(tmp_path):
    f = tmp_path / "x.bin"
    f.write_bytes(b"abc")
    m = RunManifest("synth", {"seed": 1}, 1, 1)
    m.add_input(f)
    assert m.inputs[str(f)] == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert json.loads(m.write(tmp_path).read_text())["command"] == "synth"
    assert graph_for(Grid(32, 64)).n_edges == 9152
