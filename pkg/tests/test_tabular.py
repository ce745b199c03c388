import numpy as np
import pytest

from confounded_pg.env import OfflineDataset, TabularBanditSpec, sample_tabular
from confounded_pg.errors import InputError
from confounded_pg.policy import LogLinearPolicy, PolicyParams, TabularIndicatorFeatures
from confounded_pg.tabular import (EmpiricalTables, estimate_tables, identify_gradient_tabular,
                                   identify_value_tabular, normalized_error, oracle_gradient,
                                   oracle_value, population_tables)

R1 = 0.9640275800758169
POL = LogLinearPolicy(TabularIndicatorFeatures())
POL2 = LogLinearPolicy(TabularIndicatorFeatures(horizon=2))


def uniform_gradient_closed_form(spec):
    """Gradient at theta=0 for T=1: coordinate (a, o) equals
    0.5 * sum_s p(s) p(o | s) r(s, a), because r(s, -a) = -r(s, a)."""
    p_s1 = spec.p_s1 * spec.p_s1_eq_s0 + (1 - spec.p_s1) * (1 - spec.p_s1_eq_s0)
    r = np.tanh(spec.reward_slope / 2)
    out = []
    for a in (1, -1):
        for o in (1, -1):
            total = 0.0
            for s, ps in ((1, p_s1), (-1, 1 - p_s1)):
                po = spec.p_obs_correct if o == s else 1 - spec.p_obs_correct
                total += ps * po * r * s * a
            out.append(0.5 * total)
    return np.array(out)


def test_oracle_gradient_uniform_frozen():
    g = oracle_gradient(TabularBanditSpec(), POL, POL.zero_params())
    expected = 0.15 * R1 * np.array([1.0, -1.0, -1.0, 1.0])
    np.testing.assert_allclose(g, expected, atol=1e-14)
    np.testing.assert_allclose(g, uniform_gradient_closed_form(TabularBanditSpec()), atol=1e-14)


def test_oracle_symmetry_and_zero_slope():
    g = oracle_gradient(TabularBanditSpec(), POL, POL.zero_params())
    assert g[0] == pytest.approx(-g[1]) and g[0] == pytest.approx(-g[2]) and g[0] == pytest.approx(g[3])
    p = PolicyParams([0.3, -1, 2, 0.1], (4,))
    spec0 = TabularBanditSpec(reward_slope=0.0)
    np.testing.assert_array_equal(oracle_gradient(spec0, POL, p), 0.0)
    assert oracle_value(spec0, POL, p) == 0.0


def test_oracle_value_examples():
    assert oracle_value(TabularBanditSpec(), POL, POL.zero_params()) == pytest.approx(0.0, abs=1e-15)
    greedy = PolicyParams([60.0, 0, 0, 60.0], (4,))  # a=+1 at o=+1, a=-1 at o=-1
    assert oracle_value(TabularBanditSpec(p_obs_correct=1.0), POL, greedy) == pytest.approx(R1, abs=1e-12)


@pytest.mark.parametrize("policy,horizon", [(POL, 1), (POL2, 2)])
def test_oracle_gradient_finite_differences(rng, policy, horizon):
    spec = TabularBanditSpec(horizon=horizon)
    for _ in range(5):
        p = PolicyParams(rng.uniform(-2, 2, 4 * horizon), (4,) * horizon)
        g = oracle_gradient(spec, policy, p)
        h = 1e-5
        fd = np.array([(oracle_value(spec, policy, p.with_theta(p.theta + h * e))
                        - oracle_value(spec, policy, p.with_theta(p.theta - h * e))) / (2 * h)
                       for e in np.eye(p.dim)])
        assert np.linalg.norm(g - fd) <= 1e-8 * max(np.linalg.norm(g), 1e-3)


def test_population_identification_exact(rng):
    spec = TabularBanditSpec()
    tables = population_tables(spec)
    for _ in range(50):
        p = PolicyParams(rng.uniform(-2, 2, 4), (4,))
        assert normalized_error(identify_gradient_tabular(tables, POL, p),
                                oracle_gradient(spec, POL, p)) <= 1e-10
        assert identify_value_tabular(tables, POL, p) == pytest.approx(oracle_value(spec, POL, p),
                                                                       abs=1e-12)


def test_population_tables_normalized():
    t = population_tables(TabularBanditSpec())
    np.testing.assert_allclose(t.p_ro_given_o0a.sum(axis=(1, 2)), 1.0, atol=1e-12)
    np.testing.assert_allclose(t.p_o1.sum(), 1.0, atol=1e-12)
    assert np.all((t.p_ro_given_o0a >= 0) & (t.p_ro_given_o0a <= 1))


def test_identity_proxy_hand_instance():
    # P(O1 | O0, a) = I; supports ordered (-1, +1); P(r=1 | o, a) as below
    p_r1 = {(0, -1): 0.4, (0, 1): 0.7, (1, -1): 0.9, (1, 1): 0.2}
    p_ro = np.zeros((2, 2, 2, 2))
    for (a, o), q in p_r1.items():
        oi = int(o > 0)
        p_ro[a, 1, oi, oi] = q
        p_ro[a, 0, oi, oi] = 1 - q
    vals = np.array([-1.0, 1.0])
    tables = EmpiricalTables(vals, vals, vals, p_ro, p_ro.sum(axis=1), np.array([0.4, 0.6]),
                             np.zeros((2, 2), bool))
    g = identify_gradient_tabular(tables, POL, POL.zero_params())
    np.testing.assert_allclose(g, [0.15, -0.1, -0.15, 0.1], atol=1e-14)


def test_zero_rewards_zero_gradient():
    ds = sample_tabular(TabularBanditSpec(), 300, 2)
    ds = ds.with_rewards(np.zeros_like(ds.rewards))
    p = PolicyParams([0.5, -0.2, 0.1, 0.3], (4,))
    np.testing.assert_array_equal(identify_gradient_tabular(estimate_tables(ds), POL, p), 0.0)


def test_single_record_tables(caplog):
    ds = OfflineDataset([[1.0]], [[1.0]], [[0]], [[R1]])
    t = estimate_tables(ds)
    assert t.p_ro_given_o0a[0].sum() == pytest.approx(1.0)
    assert t.empty_cells[1].all()
    np.testing.assert_array_equal(t.p_ro_given_o0a[1], 0.0)
    assert "empty conditioning cells" in caplog.text


def test_deterministic_emission_tables():
    spec = TabularBanditSpec(p_obs_correct=1.0, p_o0_correct=1.0, p_s1_eq_s0=1.0)
    t = estimate_tables(sample_tabular(spec, 2000, 5))
    for a in range(2):
        np.testing.assert_allclose(t.p_o1_given_o0a[a], np.eye(2), atol=0)


def test_empirical_marginal_large_n():
    t = estimate_tables(sample_tabular(TabularBanditSpec(), 10**6, 13))
    assert abs(t.p_o1[t.o1_values == 1.0][0] - 0.5) < 0.003
    np.testing.assert_allclose(t.p_ro_given_o0a.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_rejects_non_discrete_and_multistage():
    rng = np.random.default_rng(0)
    ds = OfflineDataset(rng.normal(size=(40, 1)), rng.normal(size=(40, 1)),
                        np.zeros((40, 1), int), rng.normal(size=(40, 1)))
    with pytest.raises(InputError):
        estimate_tables(ds)
    with pytest.raises(InputError):
        estimate_tables(sample_tabular(TabularBanditSpec(horizon=2), 50, 1))


def test_rank_deficient_warns():
    spec = TabularBanditSpec(p_obs_correct=0.5)
    with pytest.warns(RuntimeWarning):
        identify_gradient_tabular(population_tables(spec), POL, POL.zero_params())


def test_empirical_error_shrinks():
    spec = TabularBanditSpec()
    truth = oracle_gradient(spec, POL, POL.zero_params())
    med = [np.median([normalized_error(identify_gradient_tabular(
        estimate_tables(sample_tabular(spec, n, s)), POL, POL.zero_params()), truth)
        for s in range(1, 21)]) for n in (500, 2000, 8000)]
    assert med[0] > med[1] > med[2]
    assert med[2] < 0.06
