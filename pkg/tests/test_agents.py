from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capeq.agents import (AgentProblemError, RiskParams, cvar, reliability_credits, risk_measure, solve_collective,
                          solve_consumer, solve_generator, solve_portfolio, solve_risk_sharing, tail_weights,
                          value_at_risk)
from capeq.dispatch import dispatch_all

from conftest import make_set
from oracles import cvar_by_enumeration, portfolio_lp


def random_distribution(rng):
    n = int(rng.integers(1, 51))
    u = rng.normal(0.0, 100.0, n)
    if rng.random() < 0.3:
        u = np.round(u / 50.0) * 50.0   # repeated atoms
    p = rng.dirichlet(np.ones(n))
    return u, p, float(rng.uniform(0.01, 1.0))


def cvar_oracle_error(n: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        u, p, alpha = random_distribution(rng)
        worst = max(worst, abs(cvar(u, p, alpha) - cvar_by_enumeration(u, p, alpha)))
    return worst


def test_cvar_matches_enumeration():
    assert cvar_oracle_error(300, seed=5) <= 1e-9


def test_cvar_simple_values():
    assert cvar([1.0, 2.0, 3.0, 4.0], [0.25] * 4, 0.5) == pytest.approx(1.5)
    assert cvar([1.0, 2.0, 3.0, 4.0], [0.25] * 4, 1.0) == pytest.approx(2.5)
    # partial atom in the tail
    assert cvar([0.0, 10.0], [0.5, 0.5], 0.7) == pytest.approx((0.5 * 0 + 0.2 * 10) / 0.7)


def test_single_scenario_cvar_is_the_value():
    for alpha in (0.1, 0.7, 1.0):
        assert risk_measure([5.0], [1.0], RiskParams(alpha, 0.3)) == 5.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=30), st.floats(-1e3, 1e3), st.floats(0.05, 1.0))
def test_cvar_translation_equivariant(u, c, alpha):
    u = np.array(u)
    p = np.full(u.size, 1.0 / u.size)
    assert cvar(u + c, p, alpha) == pytest.approx(cvar(u, p, alpha) + c, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30),
       st.floats(0.0, 1.0), st.floats(0.05, 1.0))
def test_cvar_concave_and_below_mean(pairs, lam, alpha):
    u = np.array([a for a, _ in pairs])
    w = np.array([b for _, b in pairs])
    p = np.full(u.size, 1.0 / u.size)
    mix = cvar(lam * u + (1 - lam) * w, p, alpha)
    assert mix >= lam * cvar(u, p, alpha) + (1 - lam) * cvar(w, p, alpha) - 1e-7
    assert cvar(u, p, alpha) <= p @ u + 1e-9


def test_tail_weights_and_var():
    u = np.array([3.0, 1.0, 2.0, 4.0])
    p = np.full(4, 0.25)
    q = tail_weights(u, p, 0.5)
    np.testing.assert_allclose(q, [0.0, 0.5, 0.5, 0.0])
    assert value_at_risk(u, p, 0.5) == 2.0


def test_risk_params_validation():
    with pytest.raises(ValueError):
        RiskParams(0.0, 0.5)
    with pytest.raises(ValueError):
        RiskParams(0.5, 1.5)


def _random_portfolio(rng, n=12, k=3):
    base = rng.normal(0, 100, n)
    payouts = rng.normal(0, 10, (k, n))
    p = rng.dirichlet(np.ones(n))
    prices = payouts @ p + rng.normal(0, 1, k)
    return base, payouts, prices, p


@pytest.mark.parametrize("seed", range(6))
def test_portfolio_matches_generic_solver(seed):
    rng = np.random.default_rng(seed)
    base, payouts, prices, p = _random_portfolio(rng)
    params = RiskParams(0.3, 0.4)
    lo, hi = -np.full(3, 5.0), np.full(3, 8.0)
    dec = solve_portfolio(base, payouts, prices, p, params, lo, hi)
    ref, _ = portfolio_lp(base, payouts, prices, p, 0.3, 0.4, lo, hi)
    assert dec.rho == pytest.approx(ref, rel=1e-6, abs=1e-6)
    assert np.all(dec.volumes >= lo - 1e-9) and np.all(dec.volumes <= hi + 1e-9)
    # the reported objective is the risk measure of the reported surplus
    assert dec.rho == pytest.approx(risk_measure(dec.surplus, p, params), rel=1e-12)
    assert dec.tail_dual.sum() == pytest.approx(1 - params.beta, abs=1e-6)


def test_penalty_pulls_toward_balance():
    rng = np.random.default_rng(3)
    base, payouts, prices, p = _random_portfolio(rng, k=1)
    params = RiskParams(0.5, 0.5)
    free = solve_portfolio(base, payouts, prices, p, params, [-100.0], [100.0])
    damped = solve_portfolio(base, payouts, prices, p, params, [-100.0], [100.0], gamma=50.0, others=[0.0])
    assert abs(damped.volumes[0]) <= abs(free.volumes[0]) + 1e-9
    assert damped.penalty == pytest.approx(25.0 * damped.volumes[0] ** 2)


def test_risk_neutral_takes_the_favourable_bound():
    payouts = np.array([[10.0, 30.0]])
    p = np.array([0.5, 0.5])
    buy = solve_portfolio(np.zeros(2), payouts, [15.0], p, RiskParams(0.7, 1.0), [-2.0], [3.0])
    sell = solve_portfolio(np.zeros(2), payouts, [25.0], p, RiskParams(0.7, 1.0), [-2.0], [3.0])
    assert buy.volumes[0] == 3.0 and sell.volumes[0] == -2.0
    # fair price with a penalty: the penalty alone sets the position
    fair = solve_portfolio(np.zeros(2), payouts, [20.0], p, RiskParams(0.7, 1.0), [-2.0], [3.0],
                           gamma=1.0, others=[0.5])
    assert fair.volumes[0] == pytest.approx(-0.5)


def test_unbounded_volumes_rejected():
    with pytest.raises(ValueError, match="finite"):
        solve_portfolio(np.zeros(2), [[1.0, 2.0]], [1.5], [0.5, 0.5], RiskParams(0.5, 0.5), [-np.inf], [1.0])


def _sharing_problem(seed, k=2, n=20, agents=3):
    rng = np.random.default_rng(seed)
    payouts = rng.normal(0, 10, (k, n))
    p = rng.dirichlet(np.ones(n))
    # a producer long the payouts and consumers short them, so trade is worthwhile
    bases = [rng.normal(0, 30, n) + s * payouts.sum(axis=0) for s in np.linspace(-1, 1, agents)]
    params = [RiskParams(0.5, b) for b in np.linspace(0.2, 0.8, agents)]
    lower = [np.full(k, -50.0)] * agents
    upper = [np.full(k, 50.0)] * agents
    return bases, payouts, p, params, lower, upper


@pytest.mark.parametrize("seed", range(4))
def test_risk_sharing_clears_and_each_agent_is_optimal(seed):
    bases, payouts, p, params, lower, upper = _sharing_problem(seed)
    prices, decisions = solve_risk_sharing(bases, payouts, p, params, lower, upper)
    np.testing.assert_allclose(sum(d.volumes for d in decisions), 0.0, atol=1e-6)
    for b, prm, lo, hi, d in zip(bases, params, lower, upper, decisions):
        alone = solve_portfolio(b, payouts, prices, p, prm, lo, hi)
        assert d.rho == pytest.approx(alone.rho, rel=1e-7, abs=1e-6)
        assert d.rho == pytest.approx(risk_measure(d.surplus, p, prm), rel=1e-12)


def test_risk_sharing_with_fixed_prices_is_separable():
    bases, payouts, p, params, lower, upper = _sharing_problem(1)
    fixed = payouts @ p + 0.5
    prices, decisions = solve_risk_sharing(bases, payouts, p, params, lower, upper, fixed)
    np.testing.assert_array_equal(prices, fixed)
    for b, prm, lo, hi, d in zip(bases, params, lower, upper, decisions):
        alone = solve_portfolio(b, payouts, fixed, p, prm, lo, hi)
        assert d.rho == pytest.approx(alone.rho, rel=1e-7, abs=1e-6)


def test_risk_sharing_infeasible_bounds():
    bases, payouts, p, params, _, _ = _sharing_problem(0)
    lower = [np.full(2, 1.0)] * 3
    upper = [np.full(2, 5.0)] * 3
    with pytest.raises(AgentProblemError):
        solve_risk_sharing(bases, payouts, p, params, lower, upper)


def test_no_trade_between_seller_and_buyer_bounds():
    # seller may not buy, buyer may not sell: only v = 0 clears
    bases, payouts, p, params, _, _ = _sharing_problem(2, k=1, agents=2)
    prices, decisions = solve_risk_sharing(bases, payouts, p, params, [[-10.0], [0.0]], [[0.0], [10.0]])
    assert np.isfinite(prices).all()
    assert sum(d.volumes[0] for d in decisions) == pytest.approx(0.0, abs=1e-6)


def test_wrappers_and_credits(two_tech_set):
    x = np.array([60.0, 70.0])
    batch = dispatch_all(x, two_tech_set)
    p = two_tech_set.probabilities
    op = batch.operating_profit_per_mw()
    gen = solve_generator(op[:, 0], x[0], two_tech_set.inv_costs[0], np.zeros((0, p.size)), [], p,
                          RiskParams(0.7, 0.5))
    np.testing.assert_allclose(gen.surplus, (op[:, 0] - two_tech_set.inv_costs[0]) * x[0])
    con = solve_consumer(batch, np.zeros((0, p.size)), [], RiskParams(0.7, 0.7))
    assert con.volumes.size == 0
    dec, psi = solve_collective(x, op, two_tech_set.inv_costs, np.zeros((0, p.size)), [], p, RiskParams(0.7, 0.4))
    w = dec.implied_measure(p, 0.4)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(psi, w @ ((op - two_tech_set.inv_costs) * x))
    with pytest.raises(ValueError, match="scarcity"):
        reliability_credits(dispatch_all([300.0, 300.0], two_tech_set))


def test_reliability_credit_is_scarcity_weighted_availability():
    scen = make_set([10.0, 30.0], [100.0, 50.0],
                    [("peak", 1.0, [50.0], 1.0, "peaker"), ("var", 1.0, [0.0], [[0.1, 0.9]], "variable")],
                    voll=1000.0)
    batch = dispatch_all([60.0, 30.0], scen)  # block 0: 60 + 3 < 100 is scarce, block 1 is not
    np.testing.assert_allclose(reliability_credits(batch), [1.0, 0.1])
