import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from geocontact.data import SyntheticFamily, synthesize_task
from geocontact.evaluation import (EvalReport, TaskResult, derivative, evaluate_tasks, fit_ratio,
                                   fit_ratio_derivative, nmse, rms, rms_rel)

signals = arrays(np.float64, st.integers(3, 50), elements=st.floats(-1e3, 1e3)).filter(
    lambda f: np.ptp(f) > 1e-3)


def test_nmse_examples():
    F = np.array([0.0, 1.0, 2.0])
    assert nmse(F, F) == 0.0
    assert nmse(F, np.full(3, F.mean())) == 1.0
    assert nmse(F, np.zeros(3)) == 2.5
    with pytest.raises(ValueError):
        nmse(np.ones(4), np.zeros(4))
    with pytest.raises(ValueError):
        nmse([1.0], [1.0])
    with pytest.raises(ValueError):
        nmse([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(signals)
def test_fit_identities(F):
    assert fit_ratio(F, F) == 100.0
    assert fit_ratio(F, np.full_like(F, F.mean())) == pytest.approx(0.0, abs=1e-9)


def test_fit_derivative_examples():
    t = np.linspace(0, 1, 40)
    F = np.sin(3 * t)
    assert fit_ratio_derivative(F, F, t[1]) == 100.0
    assert fit_ratio_derivative(F, F + 4.0, t[1]) == pytest.approx(100.0, abs=1e-9)
    lin = 2.0 * t
    assert fit_ratio_derivative(lin + 0.1 * t ** 2, lin - 3.0 + 0.1 * t ** 2, t[1]) == \
        pytest.approx(100.0, abs=1e-9)
    with pytest.raises(ValueError):
        fit_ratio_derivative([0.0, 1.0], [0.0, 1.0], 0.1)


def test_derivative_stencils():
    d = derivative(np.array([0.0, 1.0, 4.0, 9.0]), 1.0)
    assert np.array_equal(d, [1.0, 2.0, 4.0, 5.0])


def test_rms_examples():
    assert rms([1.0, -1.0], [0.0, 0.0]) == 1.0 and rms_rel([1.0, -1.0], [0.0, 0.0]) == 1.0
    assert rms([3.0, 2.0], [3.0, 2.0]) == 0.0 and rms_rel([3.0, 2.0], [3.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        rms_rel([0.0, 0.0], [1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(signals, st.sampled_from([0.5, 2.0, 4.0, 0.25, 1024.0]))
def test_rms_scaling(F, k):
    F_hat = F[::-1].copy()
    assert rms(k * F, k * F_hat) == k * rms(F, F_hat)
    assert rms_rel(k * F, k * F_hat) == rms_rel(F, F_hat)


def _report():
    return EvalReport([TaskResult("a", "train", 99.5, 90.25, 0.125, 0.01, 1e-3),
                       TaskResult("b", "test", 80.0, 70.0, 0.5, 0.05),
                       TaskResult("c", "test", 60.0, 50.0, 1 / 3, 0.1, 2e-3)])


def test_report_round_trip(tmp_path):
    r = _report()
    r.to_csv(tmp_path / "r.csv")
    back = EvalReport.from_csv(tmp_path / "r.csv")
    assert repr(back.rows) == repr(r.rows)
    agg = r.aggregates()
    assert agg["test"]["fit_F"] == 70.0 and agg["train"]["rms"] == 0.125
    assert "[test] mean FIT(F) 70.00 %" in r.summary()


def test_ground_truth_report_is_perfect_and_order_preserving():
    fam = SyntheticFamily(repeats=2)
    tasks = [synthesize_task(fam, g, n_points=32, T=64, split=s)
             for g, s in ((4.0, "train"), (8.0, "test"), (12.0, "val"))]
    report = evaluate_tasks(tasks, ground_truth=True)
    assert [r.task for r in report.rows] == ["pin4", "pin8", "pin12"]
    assert all(r.fit_F == 100.0 and r.fit_dF == 100.0 and r.rms == 0.0 for r in report.rows)
    rev = evaluate_tasks(tasks[::-1], ground_truth=True)
    assert repr(rev.rows) == repr(report.rows[::-1])
