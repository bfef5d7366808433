"""Risk-averse agent problems.

Every agent maximizes ``beta * E[u] + (1 - beta) * CVaR_alpha(u)`` of its scenario surplus

    u = base + sum_k v_k * (eta_k - phi_k)

over contract volumes ``v`` (positive = purchase) inside box bounds, optionally minus
``gamma / 2 * sum_k (v_k + others_k)**2``. The CVaR is written in its
Rockafellar-Uryasev epigraph form and the resulting QP is handed to Clarabel after
scaling surpluses and volumes to order one.
"""
from __future__ import annotations

from dataclasses import dataclass

import clarabel
import numpy as np
import scipy.sparse as sp

from .dispatch import DispatchBatch


class AgentProblemError(RuntimeError):
    """The agent subproblem could not be solved."""


@dataclass(frozen=True)
class RiskParams:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")

    @property
    def risk_neutral(self) -> bool:
        return self.beta == 1.0 or self.alpha == 1.0


def _check(u, p) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if u.size == 0:
        raise ValueError("empty outcome set")
    if u.shape != p.shape:
        raise ValueError("outcomes and probabilities must have the same shape")
    return u, p


def tail_weights(u, p, alpha: float) -> np.ndarray:
    """Weights q (summing to one, q <= p / alpha) that put the worst alpha-tail of ``u`` at full weight."""
    u, p = _check(u, p)
    order = np.argsort(u, kind="stable")
    cum = np.cumsum(p[order])
    prev = cum - p[order]
    w = np.clip(np.minimum(cum, alpha) - prev, 0.0, None) / alpha
    q = np.empty_like(w)
    q[order] = w
    return q


def cvar(u, p, alpha: float) -> float:
    """Mean of the worst ``alpha`` probability mass of ``u``."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    u, p = _check(u, p)
    return float(tail_weights(u, p, alpha) @ u)


def value_at_risk(u, p, alpha: float) -> float:
    """Lower alpha-quantile of ``u``, a maximizer of the Rockafellar-Uryasev objective."""
    u, p = _check(u, p)
    order = np.argsort(u, kind="stable")
    cum = np.cumsum(p[order])
    k = min(int(np.searchsorted(cum, alpha - 1e-12)), u.size - 1)
    return float(u[order][k])


def risk_measure(u, p, params: RiskParams) -> float:
    u, p = _check(u, p)
    expected = float(p @ u)
    if params.beta == 1.0:
        return expected
    return params.beta * expected + (1.0 - params.beta) * cvar(u, p, params.alpha)


@dataclass(frozen=True)
class AgentDecision:
    """Optimal trading decision of one agent.

    ``rho`` is the agent objective (risk value minus the imbalance penalty). ``tail_dual``
    holds the multipliers of the CVaR tail constraints; ``lower_dual`` and ``upper_dual``
    those of the volume bounds ($/MW).
    """

    volumes: np.ndarray
    var: float
    surplus: np.ndarray
    tail: np.ndarray
    tail_dual: np.ndarray
    rho: float
    risk: float
    penalty: float
    lower_dual: np.ndarray
    upper_dual: np.ndarray

    def implied_measure(self, p, beta: float) -> np.ndarray:
        """Scenario weights tau + beta * p the agent effectively prices with."""
        return self.tail_dual + beta * np.asarray(p)


_SETTINGS = dict(tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10, tol_ktratio=1e-8,
                 max_iter=400, verbose=False)


def _finite_bounds(lower, upper, k: int):
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (k,)).copy()
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (k,)).copy()
    if np.any(lo > hi):
        raise ValueError("volume lower bound exceeds upper bound")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("contract volume bounds must be finite: an unbounded direction may be profitable")
    return lo, hi


def _finish(v, var, base, m, p, params, gamma, others, tau, lo_dual, hi_dual) -> AgentDecision:
    u = base + m @ v
    risk = risk_measure(u, p, params)
    penalty = 0.5 * gamma * float(np.sum((v + others) ** 2)) if v.size else 0.0
    tail = np.maximum(0.0, var - u)
    return AgentDecision(v, float(var), u, tail, tau, risk - penalty, risk, penalty, lo_dual, hi_dual)


def _solve_neutral(base, m, p, params, lo, hi, gamma, others, tol) -> AgentDecision:
    k = m.shape[1]
    slope = p @ m
    if gamma > 0:
        v = np.clip(slope / gamma - others, lo, hi)
    else:
        v = np.where(slope > tol, hi, np.where(slope < -tol, lo, np.clip(0.0, lo, hi)))
    grad = slope - gamma * (v + others)
    lo_dual = np.where(v <= lo, np.maximum(0.0, -grad), 0.0)
    hi_dual = np.where(v >= hi, np.maximum(0.0, grad), 0.0)
    u = base + m @ v
    if params.beta < 1.0:
        tau = (1.0 - params.beta) * np.asarray(p, dtype=float)
        var = float(u.max())
    else:
        tau = np.zeros_like(u)
        var = value_at_risk(u, p, params.alpha)
    return _finish(v.astype(float), var, base, m, p, params, gamma, others, tau,
                   lo_dual if k else np.zeros(0), hi_dual if k else np.zeros(0))


def solve_portfolio(base, payouts, prices, p, params: RiskParams, lower=(), upper=(), gamma: float = 0.0,
                    others=None) -> AgentDecision:
    """Optimal contract portfolio for surplus ``base`` (N,), payouts (K, N) and prices (K,)."""
    base = np.asarray(base, dtype=float)
    p = np.asarray(p, dtype=float)
    payouts = np.asarray(payouts, dtype=float).reshape(-1, base.size)
    prices = np.asarray(prices, dtype=float).reshape(-1)
    n, k = base.size, payouts.shape[0]
    if prices.size != k:
        raise ValueError("one price per contract required")
    others = np.zeros(k) if others is None else np.asarray(others, dtype=float).reshape(k)
    lo, hi = _finite_bounds(lower, upper, k)
    m = (payouts - prices[:, None]).T  # (N, K)

    if k == 0:
        var = value_at_risk(base, p, params.alpha)
        q = tail_weights(base, p, params.alpha)
        tau = np.zeros(n) if params.beta == 1.0 else (1.0 - params.beta) * q
        return _finish(np.zeros(0), var, base, m, p, params, 0.0, others, tau, np.zeros(0), np.zeros(0))

    sv = max(float(np.max(np.abs(np.concatenate([lo, hi])))), 1e-12)
    su = max(float(np.max(np.abs(base))), float(np.max(np.abs(m))) * sv, 1e-12)
    if params.risk_neutral:
        return _solve_neutral(base, m, p, params, lo, hi, gamma, others, 1e-12 * su / sv)

    beta, alpha = params.beta, params.alpha
    ms = m * (sv / su)
    bs = base / su
    gs = gamma * sv * sv / su
    nv = k + 1 + n
    q = np.concatenate([-beta * (p @ ms) + gs * others / sv, [-(1.0 - beta)], (1.0 - beta) / alpha * p])
    P = sp.csc_matrix((np.full(k, gs), (np.arange(k), np.arange(k))), shape=(nv, nv)) if gs > 0 \
        else sp.csc_matrix((nv, nv))
    eye_n = sp.identity(n, format="csr")
    eye_k = sp.identity(k, format="csr")
    A = sp.vstack([
        sp.hstack([sp.csr_matrix(-ms), sp.csr_matrix(np.ones((n, 1))), -eye_n]),
        sp.hstack([sp.csr_matrix((n, k + 1)), -eye_n]),
        sp.hstack([eye_k, sp.csr_matrix((k, 1 + n))]),
        sp.hstack([-eye_k, sp.csr_matrix((k, 1 + n))]),
    ]).tocsc()
    rhs = np.concatenate([bs, np.zeros(n), hi / sv, -lo / sv])
    settings = clarabel.DefaultSettings()
    for key, val in _SETTINGS.items():
        setattr(settings, key, val)
    solver = clarabel.DefaultSolver(P, q, A, rhs, [clarabel.NonnegativeConeT(A.shape[0])], settings)
    sol = solver.solve()
    status = str(sol.status)
    if status not in ("Solved", "AlmostSolved"):
        raise AgentProblemError(f"agent QP failed: {status}")
    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    v = np.clip(x[:k] * sv, lo, hi)
    var = float(x[k] * su)
    tau = np.clip(z[:n], 0.0, None)
    hi_dual = z[2 * n:2 * n + k] * su / sv
    lo_dual = z[2 * n + k:] * su / sv
    return _finish(v, var, base, m, p, params, gamma, others, tau, lo_dual, hi_dual)


def solve_risk_sharing(bases, payouts, p, params, lower, upper,
                       fixed_prices=None) -> tuple[np.ndarray, list[AgentDecision]]:
    """Clearing prices and agent decisions for fixed surpluses, from one joint program.

    With capacities fixed, a competitive contract equilibrium maximizes the sum of the
    agents' risk measures subject to sum_a v_a = 0; the prices are the multipliers of
    that constraint, and each agent's block of the solution is optimal for its own
    problem at those prices. ``bases``, ``params``, ``lower`` and ``upper`` are per-agent
    sequences. Contracts with a finite entry in ``fixed_prices`` trade at that price and
    are not required to clear.
    """
    payouts = np.asarray(payouts, dtype=float)
    p = np.asarray(p, dtype=float)
    bases = [np.asarray(b, dtype=float) for b in bases]
    k, n = payouts.shape
    fixed = np.full(k, np.nan) if fixed_prices is None else np.asarray(fixed_prices, dtype=float).reshape(k)
    clear = ~np.isfinite(fixed)
    n_clear = int(clear.sum())
    bounds = [_finite_bounds(lo, hi, k) for lo, hi in zip(lower, upper)]
    if k == 0:
        empty = np.zeros((n, 0))
        return np.zeros(0), [solve_portfolio(b, empty.T, [], p, prm) for b, prm in zip(bases, params)]
    sv = max(max(float(np.max(np.abs(np.concatenate(b)))) for b in bounds), 1e-12)
    su = max(max(float(np.max(np.abs(b))) for b in bases), float(np.max(np.abs(payouts))) * sv, 1e-12)
    es = payouts.T * (sv / su)                                     # (N, K)
    cost = np.where(clear, 0.0, fixed) * (sv / su)

    # variable layout per agent: v (K), then VaR and N tail slacks for risk-averse agents
    offsets, q_parts = [], []
    nv = 0
    for prm in params:
        offsets.append(nv)
        qa = [cost - prm.beta * (p @ es)] if not prm.risk_neutral else [cost - (p @ es)]
        if not prm.risk_neutral:
            qa += [[-(1.0 - prm.beta)], (1.0 - prm.beta) / prm.alpha * p]
        q_parts.append(np.concatenate(qa))
        nv += q_parts[-1].size
    q = np.concatenate(q_parts)

    eq = sp.lil_matrix((n_clear, nv))
    rows, rhs, row_at = [], [], []
    n_rows = n_clear
    for a, (prm, off) in enumerate(zip(params, offsets)):
        for i, j in enumerate(np.flatnonzero(clear)):
            eq[i, off + j] = 1.0
        lo, hi = bounds[a]
        box = sp.lil_matrix((2 * k, nv))
        for j in range(k):
            box[j, off + j] = 1.0
            box[k + j, off + j] = -1.0
        rows.append(box.tocsr())
        rhs.append(np.concatenate([hi / sv, -lo / sv]))
        row_at.append(n_rows)
        n_rows += 2 * k
        if prm.risk_neutral:
            continue
        tail = sp.lil_matrix((2 * n, nv))
        tail[:n, off:off + k] = -es
        tail[:n, off + k] = 1.0
        for i in range(n):
            tail[i, off + k + 1 + i] = -1.0
            tail[n + i, off + k + 1 + i] = -1.0
        rows.append(tail.tocsr())
        rhs.append(np.concatenate([bases[a] / su, np.zeros(n)]))
        n_rows += 2 * n
    ineq = sp.vstack(rows)
    A = sp.vstack([eq.tocsr(), ineq]).tocsc()
    b = np.concatenate([np.zeros(n_clear)] + rhs)
    settings = clarabel.DefaultSettings()
    for key, val in _SETTINGS.items():
        setattr(settings, key, val)
    cones = [clarabel.ZeroConeT(n_clear), clarabel.NonnegativeConeT(ineq.shape[0])]
    if n_clear == 0:
        cones = cones[1:]
    sol = clarabel.DefaultSolver(sp.csc_matrix((nv, nv)), q, A, b, cones, settings).solve()
    if str(sol.status) not in ("Solved", "AlmostSolved"):
        raise AgentProblemError(f"risk-sharing program failed: {sol.status}")
    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    prices = fixed.copy()
    prices[clear] = z[:n_clear] * su / sv
    m = (payouts - prices[:, None]).T
    decisions = []
    for a, (prm, off, r) in enumerate(zip(params, offsets, row_at)):
        lo, hi = bounds[a]
        v = np.clip(x[off:off + k] * sv, lo, hi)
        hi_dual = z[r:r + k] * su / sv
        lo_dual = z[r + k:r + 2 * k] * su / sv
        u = bases[a] + m @ v
        if prm.risk_neutral:
            tau = (1.0 - prm.beta) * p if prm.beta < 1.0 else np.zeros(n)
            var = float(u.max()) if prm.beta < 1.0 else value_at_risk(u, p, prm.alpha)
        else:
            tau = np.clip(z[r + 2 * k:r + 2 * k + n], 0.0, None)
            var = float(x[off + k] * su)
        decisions.append(_finish(v, var, bases[a], m, p, prm, 0.0, np.zeros(k), tau, lo_dual, hi_dual))
    return prices, decisions


def generator_base(operating_profit_per_mw, capacity: float, inv_cost: float) -> np.ndarray:
    """Scenario profit before trading: (sum_t L pi A - C_inv) * x."""
    return (np.asarray(operating_profit_per_mw, dtype=float) - inv_cost) * capacity


def solve_generator(operating_profit_per_mw, capacity: float, inv_cost: float, payouts, prices, p,
                    params: RiskParams, lower=(), upper=(), gamma: float = 0.0, others=None) -> AgentDecision:
    """Risk-adjusted profit maximization of one technology's representative investor.

    ``operating_profit_per_mw`` is sum_t L_t * pi_gt * A_gt per scenario; ``others`` is the
    net volume of every other agent, used only in the imbalance penalty.
    """
    if capacity < 0:
        raise ValueError("capacity must be nonnegative")
    base = generator_base(operating_profit_per_mw, capacity, inv_cost)
    return solve_portfolio(base, payouts, prices, p, params, lower, upper, gamma, others)


def consumer_base(dispatch: DispatchBatch) -> np.ndarray:
    """Value of consumption minus spot payments for energy, per scenario ($)."""
    curve = dispatch.scenarios.curve
    value = dispatch.d_fix + dispatch.d_res
    if curve.responsive > 0:
        value = value - dispatch.d_res**2 / (2.0 * curve.responsive)
    payments = dispatch.price * dispatch.consumption()
    return (curve.voll * value - payments) @ curve.lengths


def solve_consumer(dispatch: DispatchBatch, payouts, prices, params: RiskParams, lower=(), upper=(),
                   gamma: float = 0.0, others=None) -> AgentDecision:
    """Risk-adjusted utility maximization of the representative consumer (no penalty by default)."""
    base = consumer_base(dispatch)
    p = dispatch.scenarios.probabilities
    return solve_portfolio(base, payouts, prices, p, params, lower, upper, gamma, others)


def solve_collective(capacities, operating_profit_per_mw, inv_costs, payouts, prices, p, params: RiskParams,
                     lower=(), upper=(), gamma: float = 0.0, others=None) -> tuple[AgentDecision, np.ndarray]:
    """One seller owning every technology. Also returns psi_g, the risk-adjusted profit of
    each technology weighted by the seller's implied measure tau + beta * p."""
    x = np.asarray(capacities, dtype=float)
    op = np.asarray(operating_profit_per_mw, dtype=float)  # (N, G)
    c = np.asarray(inv_costs, dtype=float)
    per_tech = (op - c[None, :]) * x[None, :]
    decision = solve_portfolio(per_tech.sum(axis=1), payouts, prices, p, params, lower, upper, gamma, others)
    weights = decision.implied_measure(p, params.beta)
    return decision, weights @ per_tech


def reliability_credits(dispatch: DispatchBatch, peaker: int | None = None) -> np.ndarray:
    """Availability of each technology averaged over scarcity blocks (price above the peaker's cost).

    Raises ValueError if no block is scarce.
    """
    scen = dispatch.scenarios
    if peaker is None:
        peaker = scen.role_index("peaker")
    peak_cost = scen.fuel_costs()[:, peaker]                     # (N,)
    scarce = dispatch.price > peak_cost[:, None]                 # (N, T)
    weight = scarce * scen.curve.lengths[None, :]
    total = weight.sum()
    if total <= 0:
        raise ValueError("no scarcity blocks: reliability credit undefined")
    avail = scen.availability()                                  # (N, G, T)
    return np.einsum("ngt,nt->g", avail, weight) / total


def reliability_credit(g: int, dispatch: DispatchBatch, peaker: int | None = None) -> float:
    return float(reliability_credits(dispatch, peaker)[g])
