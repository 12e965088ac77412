import csv

import numpy as np
import pytest

from lcepc.sim import (StudyConfig, curve_data, draw_sample, monte_carlo, parse_config, population_cell,
                       population_fit, relative_bias, replication_seed, true_parameters,
                       write_curves, write_monte_carlo_tables, write_population_tables)


def test_parse_config():
    cfg = parse_config("""
        # study
        lambda_levels = 0.5, 0.8
        psi_levels = -0.5, 0.5
        sample_sizes = 128
        replications = 3
        seed = 9
        pair = 2-4
        conditions = 0.5:0.5, 0.8:-0.5
    """)
    assert cfg.lambda_levels == (0.5, 0.8)
    assert cfg.sample_sizes == (128,)
    assert cfg.pair == (2, 4)
    assert cfg.grid() == [(0.5, 0.5), (0.8, -0.5)]


@pytest.mark.parametrize("text", ["replications 3", "colour = red", "seed = x"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError, match="line 1"):
        parse_config(text)


def test_default_grid_size():
    assert len(StudyConfig().grid()) == 14


def test_true_parameters():
    th = true_parameters(0.8, -0.2)
    assert th.alpha[0] == 0.2
    np.testing.assert_allclose(th.lam, 0.8)
    assert th.values[th.spec.psi_index((1, 2))] == -0.2


def test_draw_sample_reproducible():
    th = true_parameters(0.5, 0.2)
    a = draw_sample(th, 500, replication_seed(1, 2, 3))
    b = draw_sample(th, 500, replication_seed(1, 2, 3))
    c = draw_sample(th, 500, replication_seed(1, 2, 4))
    assert a.N == 500
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)


def test_population_cell_values():
    c = population_cell(0.5, -0.5)
    assert c.epc_l == pytest.approx(-0.374, abs=0.002)
    assert c.epc_gs == pytest.approx(-0.403, abs=0.002)
    assert c.bias_l == pytest.approx(relative_bias(c.epc_l, -0.5))


def test_population_null_condition():
    c = population_cell(0.8, 0.0)
    assert abs(c.epc_l) < 1e-6 and abs(c.epc_gs) < 1e-6
    assert np.isnan(c.bias_l)
    assert population_fit(0.8, 0.0).converged


def test_relative_bias():
    assert relative_bias(0.6, 0.5) == pytest.approx(20.0)
    assert np.isnan(relative_bias(0.1, 0.0))


def test_curve_data():
    rows = curve_data(0.5, 0.5, grid=[0.0])
    assert {r["y_other"] for r in rows} == {0, 1}
    p = {r["y_other"]: r["prob"] for r in rows}
    assert p[1] == pytest.approx(1 / (1 + np.exp(-1.0)))
    assert p[0] == pytest.approx(1 / (1 + np.exp(1.0)))
    rows = curve_data(0.8, 0.0)
    assert len(rows) == 82
    with pytest.raises(ValueError):
        curve_data(0.5, 0.5, coding="polar")


def test_small_monte_carlo_and_writers(tmp_path):
    cfg = StudyConfig(sample_sizes=(256,), replications=6, conditions=((0.8, 0.2),))
    cells = monte_carlo(cfg)
    assert len(cells) == 1 and cells[0].failures + cells[0].epc_l.size == 6
    again = monte_carlo(cfg)
    np.testing.assert_array_equal(cells[0].epc_l, again[0].epc_l)
    pop = [population_cell(0.8, 0.2, cfg)]
    paths = write_monte_carlo_tables(cells, tmp_path, pop)
    rows = list(csv.reader(open(paths[0])))
    assert rows[0] == ["N", "psi=0.2;lambda=0.8"]
    assert rows[-1][0] == "population"
    paths = write_population_tables(pop, tmp_path)
    assert (tmp_path / "population_epc_gs.csv").exists()
    out = write_curves(curve_data(0.5, 0.2), tmp_path / "c" / "curves.csv")
    assert out.read_text().startswith("lambda,psi,xi,y_other,prob")
