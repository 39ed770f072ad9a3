import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import acc_loops, weighted_rmse_loops

from passat.errors import GridError, UndefinedMetricError
from passat.metrics import (Climatology, MetricRow, acc, anomaly, lat_weights, read_csv, rmse,
                            score_table, svg_chart, write_csv)
from passat.sphere_grid import Grid


def test_lat_weights(standard_grid):
    w = lat_weights(standard_grid)
    assert w.shape == (32, 64)
    assert abs(w.mean() - 1.0) <= 1e-12
    lat = standard_grid.lat
    assert w[16, 0] / w[3, 0] == pytest.approx(math.cos(lat[16]) / math.cos(lat[3]), rel=1e-15)
    assert w[15, 0] == w.max() == w[16, 5]
    # two-pass oracle: cosines, then their mean
    cos = [math.cos(t) for t in lat]
    mean = sum(cos) / len(cos)
    assert np.allclose(w[:, 7], [c / mean for c in cos], rtol=1e-14, atol=0)


def test_single_row_weights_are_one():
    g = Grid(1, 8)
    assert np.array_equal(lat_weights(g), np.ones((1, 8)))


def test_rmse_examples(rng, toy_grid):
    obs = rng.standard_normal(toy_grid.shape)
    assert rmse(obs, obs, toy_grid) == 0.0
    for c in [0.5, -3.0, 1e3]:
        assert rmse(obs + c, obs, toy_grid) == pytest.approx(abs(c), rel=1e-12)
    with pytest.raises(GridError):
        rmse(np.zeros((4, 4)), np.zeros((4, 4)), toy_grid)


def test_rmse_and_acc_match_loops(rng):
    for shape in [(4, 4), (8, 16)]:
        g = Grid(*shape)
        p, o, c = (rng.standard_normal(shape) for _ in range(3))
        lat = list(g.lat)
        assert rmse(p, o, g) == pytest.approx(weighted_rmse_loops(p.tolist(), o.tolist(), lat), rel=1e-12)
        assert acc(p, o, c, g) == pytest.approx(acc_loops(p.tolist(), o.tolist(), c.tolist(), lat),
                                                rel=1e-12, abs=1e-12)


def test_acc_examples(rng, toy_grid):
    clim = rng.standard_normal(toy_grid.shape)
    obs = clim + rng.standard_normal(toy_grid.shape)
    assert acc(obs, obs, clim, toy_grid) == pytest.approx(1.0, abs=1e-15)
    mirrored = clim - (obs - clim)
    assert acc(mirrored, obs, clim, toy_grid) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        acc(clim + 2.0, obs, clim, toy_grid)  # constant anomaly centres to zero
    with pytest.raises(UndefinedMetricError):
        acc(obs, clim, clim, toy_grid)


def test_anomaly_uses_plain_mean():
    field = np.array([[1.0, 2.0], [3.0, 6.0]])
    assert np.array_equal(anomaly(field, np.zeros((2, 2))), field - 3.0)


fields = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).standard_normal((3, 8, 16)))


@given(fields, st.floats(-50, 50), st.floats(0.01, 100))
@settings(max_examples=40, deadline=None)
def test_acc_invariances(data, shift, scale):
    g = Grid(8, 16)
    p, o, c = data
    base = acc(p, o, c, g)
    assert acc(p + shift, o, c, g) == pytest.approx(base, abs=1e-12)
    assert acc(c + scale * (p - c), o, c, g) == pytest.approx(base, abs=1e-12)


@given(fields, st.floats(0.01, 100))
@settings(max_examples=40, deadline=None)
def test_rmse_scaling_and_symmetry(data, alpha):
    g = Grid(8, 16)
    p, o, _ = data
    assert rmse(alpha * p, alpha * o, g) == pytest.approx(alpha * rmse(p, o, g), rel=1e-12)
    assert rmse(p, o, g) == rmse(o, p, g)


def test_score_table_and_csv(rng, toy_grid, tmp_path):
    names = ("a", "b")
    clim = Climatology(rng.standard_normal((2, *toy_grid.shape)), names)
    obs = {6: rng.standard_normal((3, 2, *toy_grid.shape)), 12: rng.standard_normal((3, 2, *toy_grid.shape))}
    preds = {6: obs[6] + 1.0, 12: obs[12].copy()}
    preds[12][1, 0] = clim.values[0] + 5.0  # undefined ACC for one init is skipped
    rows = score_table(preds, obs, clim, toy_grid)
    assert [(r.variable, r.lead_time_hours) for r in rows] == [("a", 6), ("b", 6), ("a", 12), ("b", 12)]
    assert rows[0].rmse == pytest.approx(1.0, rel=1e-12)
    assert rows[3].rmse == 0.0 and rows[3].acc == pytest.approx(1.0)
    assert np.array_equal(clim["b"], clim.values[1])
    write_csv(rows, tmp_path / "m.csv")
    back = read_csv(tmp_path / "m.csv")
    assert [r.variable for r in back] == [r.variable for r in rows]
    assert all(abs(a.rmse - b.rmse) <= 1e-9 * max(1, abs(b.rmse)) for a, b in zip(back, rows))
    with pytest.raises(KeyError):
        score_table({18: obs[6]}, obs, clim, toy_grid)


def test_svg_chart():
    rows = [MetricRow("t2m", 6, 1.0, 0.9), MetricRow("t2m", 12, 1.5, 0.8),
            MetricRow("z500", 6, 2.0, float("nan"))]
    svg = svg_chart(rows, "rmse")
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    assert svg_chart(rows, "acc").count("<polyline") == 1
