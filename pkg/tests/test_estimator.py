import csv

import numpy as np
import pytest

from confounded_pg.bridge import BridgeHyper, eval_bridge
from confounded_pg.env import ContinuousChainSpec, TabularBanditSpec, sample_continuous, sample_tabular
from confounded_pg.errors import InputError, NumericError
from confounded_pg.estimator import (AscentTrace, GradientEstimate, estimate_gradient,
                                     gradient_ascent, select_output, write_trace_csv)
from confounded_pg.policy import (LogLinearPolicy, PolicyParams, SignIndicatorFeatures,
                                  TabularIndicatorFeatures)

TAB = LogLinearPolicy(TabularIndicatorFeatures())
SIGN = LogLinearPolicy(SignIndicatorFeatures(horizon=2))


@pytest.fixture(scope="module")
def cont():
    return sample_continuous(ContinuousChainSpec(), 300, 3)


def test_zero_rewards_exact_zero(cont):
    ds = cont.with_rewards(np.zeros_like(cont.rewards))
    est = estimate_gradient(ds, SIGN, PolicyParams(np.linspace(-1, 1, 8), (4, 4)))
    np.testing.assert_array_equal(est.grad, 0.0)
    assert est.value == 0.0


@pytest.mark.parametrize("c", [-2.5, 0.3, 7.0])
def test_reward_scaling(cont, c):
    p = PolicyParams(np.linspace(-1, 1, 8), (4, 4))
    a = estimate_gradient(cont, SIGN, p)
    b = estimate_gradient(cont.with_rewards(c * cont.rewards), SIGN, p)
    assert np.abs(b.grad - c * a.grad).max() <= 1e-10 * max(1.0, np.abs(c * a.grad).max())
    assert abs(b.value - c * a.value) <= 1e-10 * max(1.0, abs(c * a.value))


def test_plug_in_matches_bridge_evaluation(cont):
    p = PolicyParams(np.linspace(-1, 1, 8), (4, 4))
    est = estimate_gradient(cont, SIGN, p, keep_stages=True)
    first = est.stages[0]
    manual = sum(eval_bridge(first, a, cont.obs[:, 0]) for a in (0, 1)).mean(axis=0)
    np.testing.assert_allclose(est.grad, manual[:8], atol=1e-10)
    assert est.value == pytest.approx(manual[8], abs=1e-10)
    assert [d["stage"] for d in est.diagnostics] == [1, 2]


def test_estimate_tracks_oracle_on_tabular():
    from confounded_pg.tabular import normalized_error, oracle_gradient
    spec = TabularBanditSpec()
    est = estimate_gradient(sample_tabular(spec, 8000, 1), TAB, TAB.zero_params())
    assert normalized_error(est.grad, oracle_gradient(spec, TAB, TAB.zero_params())) < 0.1


def test_ascent_update_rule(cont):
    trace = gradient_ascent(cont, SIGN, SIGN.zero_params(), steps=[0.5, 0.25, 0.1], iterations=3)
    assert len(trace.iterates) == 4 and len(trace.estimates) == 4
    for k, eta in enumerate([0.5, 0.25, 0.1]):
        np.testing.assert_array_equal(trace.iterates[k + 1].theta,
                                      trace.iterates[k].theta + eta * trace.estimates[k].grad)


def test_ascent_single_step(cont):
    trace = gradient_ascent(cont, SIGN, SIGN.zero_params(), 0.5, 1)
    assert len(trace.iterates) == 2
    direct = estimate_gradient(cont, SIGN, SIGN.zero_params())
    np.testing.assert_array_equal(trace.estimates[0].grad, direct.grad)


def test_ascent_zero_reward_stays(cont):
    ds = cont.with_rewards(np.zeros_like(cont.rewards))
    theta0 = PolicyParams(np.full(8, 0.3), (4, 4))
    trace = gradient_ascent(ds, SIGN, theta0, 0.5, 3)
    for p in trace.iterates:
        np.testing.assert_array_equal(p.theta, theta0.theta)


def test_ascent_improves_estimated_value(cont):
    trace = gradient_ascent(cont, SIGN, SIGN.zero_params(), 0.5, 5)
    assert trace.values()[-1] > trace.values()[0]


def test_ascent_validation(cont):
    with pytest.raises(InputError):
        gradient_ascent(cont, SIGN, SIGN.zero_params(), 0.5, 0)
    with pytest.raises(InputError):
        gradient_ascent(cont, SIGN, SIGN.zero_params(), -1.0, 2)
    with pytest.raises(InputError):
        gradient_ascent(cont, SIGN, SIGN.zero_params(), [0.1], 2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts(cont):
    bad = cont.rewards.copy()
    bad[0, 0] = np.inf
    with pytest.raises(NumericError):
        gradient_ascent(cont.with_rewards(bad), SIGN, SIGN.zero_params(), 0.5, 2)
    with pytest.raises(NumericError):
        GradientEstimate(np.array([np.nan]), 0.0)


def _trace(values):
    iterates = [PolicyParams([float(i), 0, 0, 0], (4,)) for i in range(len(values))]
    ests = [GradientEstimate(np.zeros(4), v) for v in values]
    return AscentTrace(iterates, ests, [0.5] * (len(values) - 1))


def test_select_output_modes():
    trace = _trace([0.1, 0.5, 0.3])
    assert select_output(trace, "best_estimated_value").theta[0] == 1.0
    assert select_output(trace, "last").theta[0] == 2.0
    picks = {select_output(trace, "uniform_random", seed=s).theta[0] for s in range(30)}
    assert picks <= {0.0, 1.0}
    assert select_output(trace, "uniform_random", seed=4).theta[0] == \
        select_output(trace, "uniform_random", seed=4).theta[0]
    with pytest.raises(InputError):
        select_output(AscentTrace([], [], []), "last")
    with pytest.raises(InputError):
        select_output(trace, "median")


def test_trace_csv(tmp_path, cont):
    trace = gradient_ascent(cont, SIGN, SIGN.zero_params(), 0.5, 2)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["k", "value_estimate", "grad_norm"] + [f"theta_{i}" for i in range(8)]
    assert len(rows) == 4
    assert float(rows[2][3]) == pytest.approx(trace.iterates[1].theta[0], rel=1e-11)


def test_cross_validated_ascent_freezes_hyper(cont):
    trace = gradient_ascent(cont, SIGN, SIGN.zero_params(), 0.5, 1, cross_validate=True)
    assert isinstance(trace.hyper, BridgeHyper)
    assert trace.hyper.lam in (1e-3, 1e-2, 1e-1)
