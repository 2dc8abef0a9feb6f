import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malflow.errors import InvalidArgument, OutOfRange
from malflow.paths import (SeedSpec, TimeGrid, bridge_value, make_grid, refine_path, sample_increments,
                           sample_path, write_path_csv)


def test_grid_basics():
    g = make_grid(0.0, 1.0, 8)
    assert g.dt == 0.125
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert g.index_of(0.5) == 4
    with pytest.raises(OutOfRange):
        g.index_of(0.51)
    assert g.refined().n_steps == 16


@pytest.mark.parametrize("args", [(0.0, 0.0, 4), (1.0, 0.5, 4), (0.0, 1.0, 0), (-1.0, 1.0, 4),
                                  (0.0, float("inf"), 4)])
def test_grid_rejects_bad_input(args):
    with pytest.raises(InvalidArgument):
        TimeGrid(*args)


def test_path_starts_at_zero_and_is_deterministic():
    g = make_grid(0.0, 1.0, 64)
    a = sample_path(SeedSpec(7, 3), g, 2)
    b = sample_path(SeedSpec(7, 3), g, 2)
    assert np.array_equal(a.increments, b.increments)
    assert np.all(a.values[0] == 0.0)
    assert a.values.shape == (65, 2)
    assert not np.array_equal(a.increments, sample_path(SeedSpec(7, 4), g, 2).increments)


def test_batch_matches_single_paths():
    g = make_grid(0.0, 1.0, 16)
    batch = sample_increments(11, g, 1, 5, 3)
    for i in range(3):
        assert np.array_equal(batch[i], sample_path(SeedSpec(11, 5 + i), g).increments)


def test_increment_statistics():
    g = make_grid(0.0, 2.0, 8)
    inc = sample_increments(1, g, 1, 0, 20000)[..., 0]
    # per-step variance dt, terminal variance T
    assert abs(inc.var() / g.dt - 1) < 0.03
    assert abs(inc.sum(axis=1).var() / 2.0 - 1) < 0.05


def test_bridge_value_interpolates():
    g = make_grid(0.0, 1.0, 4)
    p = sample_path(SeedSpec(2), g)
    assert np.array_equal(bridge_value(p, 0.5), p.values[2])
    mid = bridge_value(p, 0.125)
    assert np.allclose(mid, 0.5 * (p.values[0] + p.values[1]))
    with pytest.raises(OutOfRange):
        bridge_value(p, 1.5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**63), level=st.integers(1, 3))
def test_refinement_keeps_coarse_nodes(seed, level):
    g = make_grid(0.0, 1.0, 8)
    p = sample_path(SeedSpec(seed), g)
    r = refine_path(p, level)
    assert r.grid.n_steps == 8 * 2**level
    assert np.allclose(r.values[:: 2**level], p.values, atol=1e-13)


def test_refinement_midpoint_variance():
    # conditional variance of a bridge midpoint over a step of length h is h/4
    g = make_grid(0.0, 1.0, 2)
    dev = []
    for i in range(4000):
        p = sample_path(SeedSpec(3, i), g)
        r = refine_path(p, 1)
        dev.append(r.values[1, 0] - 0.5 * p.values[1, 0])
    assert abs(np.var(dev) / (0.5 / 4) - 1) < 0.08


def test_write_csv(tmp_path):
    p = sample_path(SeedSpec(1), make_grid(0.0, 1.0, 4), 2)
    f = tmp_path / "p.csv"
    write_path_csv(p, f)
    rows = list(csv.reader(f.open()))
    assert rows[0] == ["t", "b1", "b2"]
    assert len(rows) == 6
    assert float(rows[-1][1]) == p.values[-1, 0]
