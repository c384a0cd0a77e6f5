import dataclasses

import numpy as np
import pytest

from decbilevel.metrics import (
    CSV_COLUMNS,
    c_bias,
    convergence_metric,
    potential,
    potential_weight,
)
from decbilevel.optimizers import AlgoConfig, init_state, run
from decbilevel.problems import SyntheticQuadratic, scalar_instance
from decbilevel.topology import build_consensus_matrix, complete_graph


def scalar_state(xs, ys=None):
    p = scalar_instance(m=len(xs))
    s = init_state(p, AlgoConfig("interact", 0.1, 0.1, T=0))
    x = np.array(xs, dtype=float)[:, None]
    y = x.copy() if ys is None else np.array(ys, dtype=float)[:, None]
    return p, dataclasses.replace(s, x=x, y=y)


def test_scalar_example():
    p, s = scalar_state([1.0, 3.0])
    rec = convergence_metric(s, p)
    assert rec.consensus == pytest.approx(2.0, abs=1e-15)
    assert rec.consensus_normalized == pytest.approx(1.0, abs=1e-15)
    assert rec.stationarity == pytest.approx(16.0, abs=1e-13)
    assert rec.lower_error == 0.0
    assert rec.metric_total == rec.stationarity + rec.consensus + rec.lower_error
    assert np.isnan(rec.potential)


def test_lower_error_measures_inner_gap():
    p, s = scalar_state([1.0, 3.0], ys=[0.0, 5.0])
    assert convergence_metric(s, p).lower_error == pytest.approx(1.0 + 4.0)


def test_potential_reduces_to_outer_loss_at_consensus_optimum():
    p, s = scalar_state([0.7, 0.7])
    s = dataclasses.replace(s, u=np.full_like(s.u, 0.3))
    assert potential(s, p, alpha=0.1, r=0.05, lam=1 / 3, L_y=1.0) == pytest.approx(p.ell(np.array([0.7])))


def test_zero_alpha_drops_tracking_term():
    p, s = scalar_state([0.0, 2.0], ys=[1.0, 1.0])
    s = dataclasses.replace(s, u=np.array([[5.0], [-5.0]]))
    lower = convergence_metric(s, p).lower_error
    expected = p.ell(np.array([1.0])) + potential_weight(0.05, 1 / 3, 1.0) * lower + 2.0
    assert potential(s, p, alpha=0.0, r=0.05, lam=1 / 3, L_y=1.0) == pytest.approx(expected)
    assert potential(s, p, alpha=0.5, r=0.05, lam=1 / 3, L_y=1.0) == pytest.approx(expected + 0.5 * 50.0)


def test_potential_weight_fallback():
    assert potential_weight(0.1, 0.5, 0.0) == 1.0
    assert potential_weight(1.0, 0.5, 1.0) == pytest.approx(0.5 / 64)
    with pytest.raises(ValueError):
        potential(scalar_state([1.0])[1], scalar_instance(), 0.1, 0.0, 0.5, 1.0)


def test_c_bias_vanishes_without_bias():
    assert c_bias(0.1, 0.05, 1 / 3, 1.0, 0.0) == 0.0
    # alpha / 2 is the binding denominator here
    assert c_bias(0.01, 0.5, 0.0, 0.001, 2.0) == pytest.approx(2 * 0.01 * 4 / 0.005)


def test_run_records_are_consistent():
    p = SyntheticQuadratic.generate(4, 5, 6, 3, 3)
    cm = build_consensus_matrix(complete_graph(5))
    recs = run(p, cm, AlgoConfig("interact", 0.05, 0.3, T=60))
    totals = np.array([r.metric_total for r in recs])
    for r in recs:
        assert r.metric_total == r.stationarity + r.consensus + r.lower_error
        assert r.is_finite()
    assert np.all(np.diff(np.minimum.accumulate(totals)) <= 0)
    assert [r.comm_rounds for r in recs] == list(range(61))
    assert len(recs[0].csv_row()) == len(CSV_COLUMNS)


def test_csv_row_is_locale_free_and_round_trips():
    p, s = scalar_state([1.0, 3.0])
    row = convergence_metric(s, p, alpha=0.1, r=0.05, lam=1 / 3, L_y=1.0).csv_row()
    assert row[0] == "0"
    for cell in row[1:]:
        assert "," not in cell
        float(cell)
