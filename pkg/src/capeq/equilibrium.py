"""Capacity and contract-price equilibrium.

The outer loop moves capacities along risk-adjusted profits,
``x_g <- max(0, x_g + eps1 * rho_g / C_inv_g)``. For fixed capacities the contract
market is cleared by one joint risk-sharing program whose multipliers are the prices;
if that fails the inner loop adjusts prices, ``phi_k <- phi_k + eps2 * sum_a v_a^k``,
until every contract clears. Regimes differ only in the contract menu, who sells (one agent per technology
or a collective seller) and the volume bounds.

The complete-trading benchmark maximizes the pooled risk measure of welfare net of
investment cost directly, either by a cutting-plane method on the merit-order dispatch
or as one conic program over capacities and every block's dispatch.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .agents import (AgentDecision, AgentProblemError, RiskParams, consumer_base, generator_base,
                     reliability_credits, risk_measure, solve_portfolio, solve_risk_sharing)
from .contracts import Contract, ContractKind, arrow_debreu_menu, payout_matrix
from .dispatch import DispatchBatch, dispatch_all
from .scenario import ScenarioSet

logger = logging.getLogger(__name__)

CONSUMER = "consumer"
COLLECTIVE = "collective"


class ClearingError(RuntimeError):
    """The inner price loop failed to clear the contract market."""


class ClearingInfeasible(ValueError):
    """Volume bounds make market clearing impossible."""


class RegimeKind(str, Enum):
    UNRESTRICTED3 = "unrestricted3"
    MANDATORY_OPTION = "mandatory_option"
    OPTIONS_ONLY_SEP = "options_only_sep"
    OPTIONS_ONLY_COL = "options_only_col"
    SFPFC_SEP = "sfpfc_sep"
    SFPFC_COL = "sfpfc_col"
    SFPFC_MANDATORY = "sfpfc_mandatory"
    COMPLETE_TRADING = "complete_trading"
    ARROW_DEBREU = "arrow_debreu"


MANDATORY_KINDS = (RegimeKind.MANDATORY_OPTION, RegimeKind.SFPFC_MANDATORY)


@dataclass(frozen=True)
class ContractTerms:
    """Reference prices used to build contract menus ($/MWh)."""

    strike: float = 1000.0
    future_price: float = 50.0
    unit_contingent_price: float = 50.0
    sfpfc_price: float = 50.0
    arrow_debreu_scale: float | None = None
    # default mandatory SFPFC purchase, as a multiple of average fixed load
    sfpfc_floor_share: float = 1.1


@dataclass(frozen=True)
class Regime:
    """Contract menu plus trading rules.

    ``floor`` maps a contract name to the consumer's minimum purchase (MW).
    ``rc_capped`` lists contracts whose sales by technology g are limited to rc_g * x_g.
    With ``sell_only`` generators may only sell contracts and the consumer only buy them.
    """

    kind: RegimeKind
    menu: tuple[Contract, ...]
    collective: bool = False
    floor: tuple[tuple[str, float], ...] = ()
    rc_capped: tuple[str, ...] = ()
    sell_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", RegimeKind(self.kind))
        names = [c.name for c in self.menu]
        if len(set(names)) != len(names):
            raise ValueError("contract names must be unique")
        if self.kind is RegimeKind.MANDATORY_OPTION:
            for c in self.menu:
                if c.kind in (ContractKind.FUTURE, ContractKind.UNIT_CONTINGENT) and not c.capped:
                    raise ValueError("mandatory option regime needs capped futures and unit-contingent contracts")
        for name, _ in self.floor:
            if name not in names:
                raise ValueError(f"floor refers to unknown contract {name!r}")
        if not self.menu and self.kind is not RegimeKind.COMPLETE_TRADING:
            raise ValueError(f"{self.kind.value}: contract menu is empty")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.menu]

    @property
    def mandatory(self) -> bool:
        return self.kind in MANDATORY_KINDS


def build_regime(kind, scenarios: ScenarioSet, terms: ContractTerms = ContractTerms(), *,
                 floor: float | None = None, variable: str | None = None, sell_only: bool = False) -> Regime:
    """Standard regimes. ``floor`` is the consumer's minimum purchase for mandatory regimes;
    for the mandatory option it normally comes from :func:`reliability_floor`. ``sell_only``
    is ignored for Arrow-Debreu securities, which must trade both ways to complete the market."""
    kind = RegimeKind(kind)
    if variable is None:
        try:
            variable = scenarios.technologies[scenarios.role_index("variable")].name
        except KeyError:
            variable = None
    option = Contract("option", ContractKind.CALL_OPTION, terms.strike)
    future = Contract("future", ContractKind.FUTURE, terms.future_price)
    sfpfc = Contract("sfpfc", ContractKind.SFPFC, terms.sfpfc_price)
    three = [option, future]
    if variable is not None:
        three.append(Contract("unit_contingent", ContractKind.UNIT_CONTINGENT, terms.unit_contingent_price,
                              technology=variable))
    if kind is RegimeKind.UNRESTRICTED3:
        return Regime(kind, tuple(three), sell_only=sell_only)
    if kind is RegimeKind.MANDATORY_OPTION:
        if floor is None:
            raise ValueError("mandatory option regime needs a purchase floor from an unrestricted run")
        menu = (option,) + tuple(c.capped_at(terms.strike) for c in three[1:])
        return Regime(kind, menu, floor=(("option", float(floor)),), rc_capped=("option",), sell_only=sell_only)
    if kind is RegimeKind.OPTIONS_ONLY_SEP:
        return Regime(kind, (option,), sell_only=sell_only)
    if kind is RegimeKind.OPTIONS_ONLY_COL:
        return Regime(kind, (option,), collective=True, sell_only=sell_only)
    if kind is RegimeKind.SFPFC_SEP:
        return Regime(kind, (sfpfc,), sell_only=sell_only)
    if kind is RegimeKind.SFPFC_COL:
        return Regime(kind, (sfpfc,), collective=True, sell_only=sell_only)
    if kind is RegimeKind.SFPFC_MANDATORY:
        if floor is None:
            floor = terms.sfpfc_floor_share * float(scenarios.curve.energy / scenarios.curve.hours)
        return Regime(kind, (sfpfc,), collective=True, floor=(("sfpfc", float(floor)),), sell_only=sell_only)
    if kind is RegimeKind.ARROW_DEBREU:
        scale = terms.arrow_debreu_scale
        if scale is None:
            scale = 0.01 * scenarios.curve.voll * scenarios.curve.hours
        return Regime(kind, arrow_debreu_menu(scenarios.n_scenarios, scale))
    return Regime(kind, ())


@dataclass(frozen=True)
class AlgorithmParams:
    """Step sizes and tolerances.

    ``sigma`` is the clearing tolerance (MW). ``delta`` is the zero-profit tolerance as a
    fraction of investment cost: |rho_g| <= delta * C_inv_g * max(x_g, active_share * sum(x)).
    ``gamma`` ($/MW^2 per year) damps the generators' response; ``eps_price`` defaults to gamma divided by the number of agents.
    With ``joint_start`` each inner loop starts from the prices and volumes of the joint
    risk-sharing program, so the price iteration only has to certify clearing.
    """

    eps_capacity: float = 0.5
    eps_price: float | None = None
    sigma: float = 1.0
    delta: float = 1e-3
    gamma: float | None = None
    gamma_scale: float = 1.0
    max_outer: int = 400
    max_inner: int = 1000
    oscillation_window: int = 50
    eps_price_floor: float = 1e-6
    active_share: float = 1e-3
    bound_factor: float = 2.0
    max_step: float = 0.05
    consumer_penalty: bool = True
    joint_start: bool = True
    threads: int = 1

    def __post_init__(self):
        for name in ("eps_capacity", "sigma", "delta", "gamma_scale", "eps_price_floor", "active_share",
                     "bound_factor", "max_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("eps_price", "gamma"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer < 1 or self.max_inner < 1 or self.threads < 1:
            raise ValueError("iteration limits and thread count must be at least 1")

    def resolved_gamma(self, scenarios: ScenarioSet) -> float:
        if self.gamma is not None:
            return self.gamma
        try:
            ref = scenarios.inv_costs[scenarios.role_index("peaker")]
        except KeyError:
            ref = float(scenarios.inv_costs.min())
        return self.gamma_scale * ref / max(scenarios.curve.peak, 1.0)


@dataclass(frozen=True)
class RiskSettings:
    consumer: RiskParams = RiskParams(0.7, 0.7)
    generator: RiskParams = RiskParams(0.7, 0.7)

    def pooled(self) -> RiskParams:
        return pooled_risk([self.consumer, self.generator])


def pooled_risk(params) -> RiskParams:
    """Risk measure whose risk set is the intersection of the agents' risk sets.

    Each agent's set is {q : beta p <= q <= (beta + (1 - beta) / alpha) p}; the intersection
    is again of this form.
    """
    lo = max(p.beta for p in params)
    hi = min(p.beta + (1.0 - p.beta) / p.alpha for p in params)
    if lo >= 1.0 or hi <= lo:
        return RiskParams(1.0, 1.0) if lo >= 1.0 else RiskParams(1.0, lo)
    return RiskParams(min(1.0, (1.0 - lo) / (hi - lo)), lo)


@dataclass
class MarketState:
    capacities: np.ndarray
    prices: np.ndarray
    volumes: dict[str, np.ndarray]
    rho: dict[str, float]
    outer_iterations: int = 0
    inner_iterations: int = 0
    clearing_residual: float = 0.0
    profit_residual: float = 0.0


@dataclass
class EquilibriumResult:
    regime: Regime
    scenarios: ScenarioSet
    risk: RiskSettings
    params: AlgorithmParams
    state: MarketState
    dispatch: DispatchBatch
    payouts: np.ndarray
    decisions: dict[str, AgentDecision]
    converged: bool
    proximity: float
    history: list[dict] = field(default_factory=list)
    psi: np.ndarray | None = None
    credits: np.ndarray | None = None
    config_hash: str = ""
    seed: int = 0
    label: str = ""

    @property
    def capacities(self) -> np.ndarray:
        return self.state.capacities

    @property
    def total_surplus(self) -> float:
        return float(sum(self.state.rho.values()))

    @property
    def gamma(self) -> float:
        return self.params.resolved_gamma(self.scenarios)


def agent_names(regime: Regime, scenarios: ScenarioSet) -> list[str]:
    if regime.collective:
        return [CONSUMER, COLLECTIVE]
    return [CONSUMER] + scenarios.names


def proximity(rho, capacities, inv_costs, active_share: float = 1e-3) -> float:
    """Largest |rho_g| / (C_inv_g * x_g) over technologies holding at least ``active_share``
    of total capacity, in percent."""
    x = np.asarray(capacities, dtype=float)
    rho = np.asarray(rho, dtype=float)
    total = x.sum()
    if total <= 0:
        return 0.0
    active = x >= active_share * total
    return float(100.0 * np.max(np.abs(rho[active]) / (np.asarray(inv_costs)[active] * x[active])))


def _profit_ok(rho, x, inv, params: AlgorithmParams) -> bool:
    scale = inv * np.maximum(x, params.active_share * max(x.sum(), 1e-12))
    if x.sum() <= 0:
        scale = inv * params.active_share
    active = x > 0
    ok_active = np.abs(rho[active]) <= params.delta * scale[active]
    ok_idle = rho[~active] <= params.delta * scale[~active]
    return bool(np.all(ok_active) and np.all(ok_idle))


def reliability_floor(reference: EquilibriumResult | dict) -> float:
    """Consumer option floor sum_g rc_g * x_g from an unrestricted reference run or state dict."""
    if isinstance(reference, EquilibriumResult):
        credits, x = reference.credits, reference.capacities
        if credits is None:
            credits = reliability_credits(reference.dispatch)
    else:
        if reference.get("credits") is None:
            raise ValueError("reference state has no reliability credits (no scarcity in the reference run)")
        credits, x = np.asarray(reference["credits"]), np.asarray(reference["capacities"])
    return float(np.dot(credits, x))


def mandatory_bounds(regime: Regime, reference, credits, capacities, names: list[str],
                     base_bound: float) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-agent (lower, upper) volume bounds.

    The consumer buys at least the floor of each floored contract. Technology g sells at
    most rc_g * x_g of each rc-capped contract. ``reference`` must be given for regimes
    whose floor is derived from an unrestricted run (pass the floor already resolved into
    the regime, or an unrestricted result to check the workflow).
    """
    if regime.kind is RegimeKind.MANDATORY_OPTION and not regime.floor and reference is None:
        raise ValueError("mandatory option regime needs an unrestricted reference run: run it first, "
                         "then pass its state file as the reference")
    k = len(regime.menu)
    bounds = {}
    floors = dict(regime.floor)
    for agent in names:
        lo = np.full(k, -base_bound)
        hi = np.full(k, base_bound)
        if regime.sell_only:
            if agent == CONSUMER:
                lo[:] = 0.0
            else:
                hi[:] = 0.0
        for i, c in enumerate(regime.menu):
            if agent == CONSUMER and c.name in floors:
                lo[i] = floors[c.name]
                hi[i] = max(hi[i], floors[c.name])
            if agent not in (CONSUMER, COLLECTIVE) and c.name in regime.rc_capped:
                g = names.index(agent) - 1
                lo[i] = -credits[g] * capacities[g]
            if agent == COLLECTIVE and c.name in regime.rc_capped:
                lo[i] = -float(np.dot(credits, capacities))
        bounds[agent] = (lo, hi)
    return bounds


@dataclass
class _Context:
    """Everything the inner loop needs for fixed capacities."""

    names: list[str]
    bases: dict[str, np.ndarray]
    payouts: np.ndarray
    p: np.ndarray
    risk: dict[str, RiskParams]
    bounds: dict[str, tuple[np.ndarray, np.ndarray]]
    gamma: dict[str, float]


def _solve_all(ctx: _Context, prices, volumes: dict[str, np.ndarray]) -> dict[str, AgentDecision]:
    """Gauss-Seidel sweep: each agent sees the latest volumes of the others."""
    total = sum(volumes.values())
    out = {}
    for a in ctx.names:
        others = total - volumes[a]
        lo, hi = ctx.bounds[a]
        d = solve_portfolio(ctx.bases[a], ctx.payouts, prices, ctx.p, ctx.risk[a], lo, hi, ctx.gamma[a], others)
        total = others + d.volumes
        volumes[a] = d.volumes
        out[a] = d
    return out


def _check_clearable(ctx: _Context, sigma: float):
    # a gap below the clearing tolerance cannot be told apart from a cleared market
    lo = sum(b[0] for b in ctx.bounds.values())
    hi = sum(b[1] for b in ctx.bounds.values())
    tol = sigma
    bad = np.flatnonzero((lo > tol) | (hi < -tol))
    if bad.size:
        k = int(bad[0])
        raise ClearingInfeasible(
            f"contract {k}: volume bounds cannot clear (sum of lower bounds {lo[k]:.6g} MW, "
            f"sum of upper bounds {hi[k]:.6g} MW)")


def _joint_bounds(ctx: _Context):
    # bounds that miss clearing by less than sigma are made exactly clearable by moving the
    # tightest bound, otherwise the joint program is infeasible
    lower = [ctx.bounds[a][0].copy() for a in ctx.names]
    upper = [ctx.bounds[a][1].copy() for a in ctx.names]
    over = np.sum(lower, axis=0)
    under = np.sum(upper, axis=0)
    for k in np.flatnonzero(over > 0):
        i = int(np.argmax([lo[k] for lo in lower]))
        lower[i][k] -= over[k]
    for k in np.flatnonzero(under < 0):
        i = int(np.argmin([hi[k] for hi in upper]))
        upper[i][k] -= under[k]
    return lower, upper


def clear_contracts(ctx: _Context, prices, volumes, params: AlgorithmParams, eps_price: float):
    """Inner loop: adjust prices until the contract market clears.

    Returns (decisions, prices, volumes, iterations, eps_price). The price step is halved
    whenever the residual is no lower than it was ``oscillation_window`` iterations ago.
    """
    _check_clearable(ctx, params.sigma)
    prices = np.array(prices, dtype=float)
    volumes = {a: np.array(v, dtype=float) for a, v in volumes.items()}
    if params.joint_start:
        try:
            lower, upper = _joint_bounds(ctx)
            joint_prices, joint = solve_risk_sharing([ctx.bases[a] for a in ctx.names], ctx.payouts, ctx.p,
                                                     [ctx.risk[a] for a in ctx.names], lower, upper)
        except AgentProblemError as exc:
            logger.warning("joint start failed (%s); iterating from the previous prices", exc)
        else:
            prices = joint_prices
            volumes = {a: d.volumes for a, d in zip(ctx.names, joint)}
            resid = sum(volumes.values())
            # each block of the joint optimum is the agent's own optimum at these prices
            if resid.size == 0 or float(np.max(np.abs(resid))) <= params.sigma:
                return dict(zip(ctx.names, joint)), prices, volumes, 0, eps_price
    window = params.oscillation_window
    trace: list[float] = []
    for it in range(1, params.max_inner + 1):
        decisions = _solve_all(ctx, prices, volumes)
        resid = sum(volumes.values())
        size = float(np.max(np.abs(resid))) if resid.size else 0.0
        if size <= params.sigma:
            return decisions, prices, volumes, it, eps_price
        trace.append(size)
        if len(trace) > window and size >= trace[-window - 1]:
            eps_price *= 0.5
            trace.clear()
            logger.debug("inner loop stalled at %.4g MW, price step halved to %.3g", size, eps_price)
            if eps_price < params.eps_price_floor:
                raise ClearingError(f"contract market failed to clear: residual {size:.4g} MW, "
                                    f"price step below floor {params.eps_price_floor:g}")
        prices = prices + eps_price * resid
    return decisions, prices, volumes, params.max_inner, eps_price


def _pinned(ctx: _Context, sigma: float) -> np.ndarray:
    """Contracts whose lower volume bounds leave no room to trade: everyone sits at a bound."""
    lo = sum(b[0] for b in ctx.bounds.values())
    return np.flatnonzero(lo >= -sigma)


def _net_demand(ctx: _Context, k: int, price: float, prices) -> float:
    fixed = np.full(len(prices), np.nan)
    fixed[k] = price
    lower, upper = _joint_bounds(ctx)
    _, decisions = solve_risk_sharing([ctx.bases[a] for a in ctx.names], ctx.payouts, ctx.p,
                                      [ctx.risk[a] for a in ctx.names], lower, upper, fixed)
    return float(sum(d.volumes[k] for d in decisions))


def corner_price(ctx: _Context, k: int, prices, sigma: float) -> float:
    """Lowest price of pinned contract ``k`` at which every agent still sits at its bound.

    Above it the price is not determined by clearing: raising it only moves money from
    buyers to sellers.
    """
    hi = float(prices[k])
    gap = max(abs(hi), 1.0)
    lo = hi - gap
    for _ in range(60):
        if _net_demand(ctx, k, lo, prices) > 0.5 * sigma:
            break
        gap *= 2.0
        lo = hi - gap
    else:
        return lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _net_demand(ctx, k, mid, prices) > 0.5 * sigma:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * max(1.0, abs(hi)):
            break
    return hi


def _reprice(ctx: _Context, decisions: dict[str, AgentDecision], k: int, shift: float):
    # a price change on a contract nobody can move shifts each surplus by a constant, so
    # volumes, tail sets and multipliers stay optimal
    out = {}
    for a, d in decisions.items():
        delta = -shift * float(d.volumes[k])
        u = d.surplus + delta
        risk = risk_measure(u, ctx.p, ctx.risk[a])
        out[a] = replace(d, surplus=u, var=d.var + delta, risk=risk, rho=risk - d.penalty)
    return out


def _select_corner_prices(ctx: _Context, pinned, prices, decisions, tech_names, x, inv, params):
    """Pick the prices of pinned contracts so the generators come as close to zero profit as possible.

    On a pinned contract every seller's volume is fixed, so a price change of ``d`` shifts
    generator g's objective by ``d * sold_g`` exactly. The shift is chosen by weighted
    least squares on the zero-profit conditions and kept above the corner price.
    Returns the prices, the decisions at those prices and whether any price sits strictly
    above its corner price, in which case capacities should stay on the boundary.
    """
    prices = np.array(prices, dtype=float)
    volumes = {a: d.volumes for a, d in decisions.items()}
    held = False
    scale = inv * np.maximum(x, params.active_share * max(x.sum(), 1e-12))
    for k in pinned:
        rho = np.array([decisions[n].rho for n in tech_names])
        sold = np.array([-volumes[n][k] for n in tech_names])
        w = 1.0 / scale**2
        den = float(np.sum(w * sold * sold))
        if den <= 0:
            continue
        shift = -float(np.sum(w * rho * sold)) / den
        clipped = False
        if shift < 0:
            floor_price = corner_price(ctx, int(k), prices, params.sigma)
            if shift < floor_price - prices[k]:
                shift, clipped = floor_price - prices[k], True
        prices[k] += shift
        held = held or not clipped
        decisions = _reprice(ctx, decisions, int(k), shift)
    return prices, decisions, held


def _floor_slack(x, scenarios: ScenarioSet, floor_total: float, threads: int, fallback):
    batch = dispatch_all(x, scenarios, threads)
    try:
        rc = reliability_credits(batch)
    except ValueError:
        rc = fallback
    return float(rc @ x) - floor_total, rc


def _restore_floor(x, scenarios: ScenarioSet, floor_total: float, sigma: float, threads: int, rc0,
                   hold: bool):
    """Move ``x`` along the reliability-credit direction until sum_g rc_g x_g - floor lies in [0, sigma].

    Only done if the floor is violated, or when ``hold`` is set and the slack exceeds sigma.
    Credits jump when blocks enter or leave scarcity, so the band may be unreachable; the
    closest feasible point found is returned then.
    """
    s, rc = _floor_slack(x, scenarios, floor_total, threads, rc0)
    if 0.0 <= s <= sigma or (s > sigma and not hold):
        return x
    d = rc / max(float(rc @ rc), 1e-12)

    def at(t):
        return np.maximum(0.0, x + t * d)

    t_lo, s_lo, t_hi = 0.0, s, None
    t = -s
    for _ in range(40):
        st, _ = _floor_slack(at(t), scenarios, floor_total, threads, rc)
        if 0.0 <= st <= sigma:
            return at(t)
        if (st > 0) != (s > 0):
            t_hi = t
            break
        t_lo, s_lo = t, st
        t = t - st if abs(st) > 0 else 2.0 * t
    if t_hi is None:
        return x
    # keep the feasible end of the bracket
    for _ in range(60):
        mid = 0.5 * (t_lo + t_hi)
        sm, _ = _floor_slack(at(mid), scenarios, floor_total, threads, rc)
        if 0.0 <= sm <= sigma:
            return at(mid)
        if (sm > 0) == (s_lo > 0):
            t_lo, s_lo = mid, sm
        else:
            t_hi = mid
        if abs(t_hi - t_lo) <= 1e-9 * max(1.0, float(np.abs(x).max())):
            break
    return at(t_lo) if s_lo >= 0 else at(t_hi)


def _bases(names, scenarios: ScenarioSet, batch: DispatchBatch, x) -> tuple[dict, np.ndarray]:
    op = batch.operating_profit_per_mw()
    inv = scenarios.inv_costs
    bases = {CONSUMER: consumer_base(batch)}
    per_tech = (op - inv[None, :]) * x[None, :]
    if COLLECTIVE in names:
        bases[COLLECTIVE] = per_tech.sum(axis=1)
    else:
        for g, name in enumerate(scenarios.names):
            bases[name] = generator_base(op[:, g], x[g], inv[g])
    return bases, per_tech


def _risk_map(names, risk: RiskSettings) -> dict[str, RiskParams]:
    return {a: (risk.consumer if a == CONSUMER else risk.generator) for a in names}


def evaluate_state(regime: Regime, scenarios: ScenarioSet, risk: RiskSettings, params: AlgorithmParams,
                   capacities, prices, volumes: dict[str, np.ndarray]) -> dict[str, float]:
    """Agent objectives for given capacities, prices and volumes (no optimization)."""
    x = np.asarray(capacities, dtype=float)
    names = agent_names(regime, scenarios)
    batch = dispatch_all(x, scenarios, params.threads)
    bases, _ = _bases(names, scenarios, batch, x)
    eta = payout_matrix(regime.menu, batch)
    m = (eta - np.asarray(prices)[:, None]).T
    gamma = params.resolved_gamma(scenarios)
    total = sum(np.asarray(volumes[a]) for a in names)
    out = {}
    for a in names:
        v = np.asarray(volumes[a], dtype=float)
        u = bases[a] + m @ v
        g = gamma if (a != CONSUMER or params.consumer_penalty) else 0.0
        pen = 0.5 * g * float(np.sum(total**2)) if v.size else 0.0
        out[a] = risk_measure(u, scenarios.probabilities, _risk_map(names, risk)[a]) - pen
    return out


def find_equilibrium(scenarios: ScenarioSet, regime: Regime, risk: RiskSettings = RiskSettings(),
                     params: AlgorithmParams = AlgorithmParams(), start=None, *, prices=None,
                     reference_credits=None, config_hash: str = "", seed: int = 0,
                     label: str = "") -> EquilibriumResult:
    """Iterate capacity and price updates to a near-equilibrium.

    ``start`` defaults to the complete-trading planner capacities. Each capacity step is
    limited to ``max_step`` times max(x_g, 5% of total capacity).
    ``reference_credits`` are used when the current dispatch has no scarcity block.
    """
    if regime.kind is RegimeKind.COMPLETE_TRADING:
        return complete_trading_result(scenarios, risk, params, config_hash=config_hash, seed=seed)
    names = agent_names(regime, scenarios)
    inv = scenarios.inv_costs
    n_g = inv.size
    if start is None:
        start = solve_complete_trading(scenarios, risk.pooled(), threads=params.threads).capacities
    x = np.array(start, dtype=float)
    if x.shape != (n_g,) or np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("start capacities must be finite, nonnegative, one per technology")
    gamma = params.resolved_gamma(scenarios)
    gammas = {a: (gamma if (a != CONSUMER or params.consumer_penalty) else 0.0) for a in names}
    eps_price = params.eps_price if params.eps_price is not None else gamma / len(names)
    risk_map = _risk_map(names, risk)
    p = scenarios.probabilities
    k = len(regime.menu)
    volumes = {a: np.zeros(k) for a in names}
    credits = None if reference_credits is None else np.asarray(reference_credits, dtype=float)
    steps = np.full(n_g, params.eps_capacity)
    last_sign = np.zeros(n_g)
    streak = np.zeros(n_g, dtype=int)
    history: list[dict] = []
    phi = None if prices is None else np.array(prices, dtype=float)
    best = None
    total_inner = 0
    prev_fair = None

    x_feasible = None
    backtracks = 0
    floors = dict(regime.floor)
    capped_floors = [floors[c] for c in regime.rc_capped if c in floors]
    floor_total = float(sum(capped_floors)) if capped_floors else None
    for outer in range(1, params.max_outer + 1):
        batch = dispatch_all(x, scenarios, params.threads)
        eta = payout_matrix(regime.menu, batch)
        bases, per_tech = _bases(names, scenarios, batch, x)
        try:
            credits = reliability_credits(batch)
        except ValueError:
            if regime.rc_capped and credits is None:
                raise ClearingInfeasible("no scarcity block in the current dispatch and no reference "
                                         "reliability credits to cap option sales") from None
        base_bound = params.bound_factor * (x.max() if x.max() > 0 else scenarios.curve.peak)
        bounds = mandatory_bounds(regime, None, credits, x, names, base_bound)
        ctx = _Context(names, bases, eta, p, risk_map, bounds, gammas)
        try:
            _check_clearable(ctx, params.sigma)
        except ClearingInfeasible:
            # a capacity step left the mandated contract unclearable: step back toward the last
            # capacities at which it cleared
            if x_feasible is None or backtracks >= 40:
                raise
            backtracks += 1
            x = 0.5 * (x + x_feasible)
            continue
        fair = eta @ p
        if phi is None:
            phi = fair
        elif prev_fair is not None:
            # keep risk premia when payouts move with capacities
            phi = phi + fair - prev_fair
        prev_fair = fair
        decisions, phi, volumes, inner, _ = clear_contracts(ctx, phi, volumes, params, eps_price)
        x_feasible = x.copy()
        backtracks = 0
        hold = False
        if floor_total is not None:
            pinned = _pinned(ctx, params.sigma)
            if pinned.size:
                phi, decisions, hold = _select_corner_prices(ctx, pinned, phi, decisions, scenarios.names,
                                                             x, inv, params)
        total_inner += inner
        rho = {a: decisions[a].rho for a in names}
        psi = None
        if regime.collective:
            weights = decisions[COLLECTIVE].implied_measure(p, risk.generator.beta)
            psi = weights @ per_tech
            drive = psi
        else:
            drive = np.array([rho[n] for n in scenarios.names])
        resid = float(np.max(np.abs(sum(volumes.values())))) if k else 0.0
        prox = proximity(drive, x, inv, params.active_share)
        cleared = resid <= params.sigma
        ok = cleared and _profit_ok(drive, x, inv, params)
        history.append({"outer": outer, "inner": inner, "capacities": x.tolist(), "prices": phi.tolist(),
                        "clearing_residual": resid, "proximity": prox, "drive": np.asarray(drive).tolist()})
        logger.debug("outer %d: x=%s inner=%d resid=%.3g proximity=%.4g%%", outer, np.round(x, 1), inner,
                     resid, prox)
        state = MarketState(x.copy(), phi.copy(), {a: v.copy() for a, v in volumes.items()}, rho, outer,
                            total_inner, resid, prox)
        snapshot = (state, batch, eta, decisions, psi, None if credits is None else credits.copy())
        if cleared and (best is None or prox < best[0].profit_residual):
            best = snapshot
        if ok:
            best = snapshot
            break
        # capacity update with per-technology step backoff on sign changes
        sign = np.sign(drive)
        flipped = (sign * last_sign) < 0
        streak = np.where(flipped, 0, streak + 1)
        steps = np.where(flipped, 0.5 * steps, np.where(streak >= 4, 1.5 * steps, steps))
        steps = np.clip(steps, params.eps_capacity / 4096, 64 * params.eps_capacity)
        streak = np.where(streak >= 4, 0, streak)
        last_sign = np.where(sign != 0, sign, last_sign)
        move = steps * np.asarray(drive) / inv
        limit = params.max_step * np.maximum(x, 0.05 * max(x.sum(), scenarios.curve.peak))
        x = np.maximum(0.0, x + np.clip(move, -limit, limit))
        if floor_total is not None:
            x = _restore_floor(x, scenarios, floor_total, params.sigma, params.threads, credits, hold)
    if best is None:
        best = snapshot
    state, batch, eta, decisions, psi, credits = best
    converged = bool(state.clearing_residual <= params.sigma and _profit_ok(
        psi if psi is not None else np.array([state.rho[n] for n in scenarios.names]),
        state.capacities, inv, params))
    return EquilibriumResult(regime, scenarios, risk, params, state, batch, eta, decisions, converged,
                             state.profit_residual, history, psi, credits, config_hash, seed, label)


def default_start(scenarios: ScenarioSet) -> np.ndarray:
    avail = np.array([t.availability.mean() for t in scenarios.technologies])
    return 1.2 * scenarios.curve.peak / avail.size / np.maximum(avail, 0.05)


def multi_start(scenarios: ScenarioSet, regime: Regime, starts, risk: RiskSettings = RiskSettings(),
                params: AlgorithmParams = AlgorithmParams(), **kwargs) -> tuple[list[EquilibriumResult], dict]:
    """Run from several starting capacities; returns the results and a diff report."""
    starts = [np.asarray(s, dtype=float) for s in starts]
    if not starts:
        raise ValueError("need at least one start")
    results = [find_equilibrium(scenarios, regime, risk, params, s, label=f"start_{i}", **kwargs)
               for i, s in enumerate(starts)]
    caps = np.array([r.capacities for r in results])
    surplus = np.array([r.total_surplus for r in results])
    report = {
        "labels": [r.label for r in results],
        "capacities": caps.tolist(),
        "total_surplus": surplus.tolist(),
        "capacity_spread": (caps.max(axis=0) - caps.min(axis=0)).tolist(),
        "surplus_spread": float(surplus.max() - surplus.min()),
        "converged": [r.converged for r in results],
    }
    return results, report


# ---------------------------------------------------------------------------
# complete trading benchmark


@dataclass
class PlannerSolution:
    capacities: np.ndarray
    objective: float
    welfare: np.ndarray   # H_n - C x per scenario
    risk: RiskParams
    iterations: int = 0
    gap: float = 0.0


def _planner_value(x, scenarios, risk, threads=1):
    batch = dispatch_all(x, scenarios, threads)
    u = batch.welfare - scenarios.inv_costs @ x
    grad_h = batch.operating_profit_per_mw()  # dH_n/dx_g
    return risk_measure(u, scenarios.probabilities, risk), u, grad_h, batch


def solve_complete_trading(scenarios: ScenarioSet, beta_pool: float | RiskParams, alpha: float = 0.7, *,
                           method: str = "cutting-plane", tol: float = 1e-9, max_iter: int = 500,
                           threads: int = 1, x_max=None) -> PlannerSolution:
    """Planner capacities maximizing the pooled risk measure of H_n(x) - C x.

    ``method="cutting-plane"`` uses multi-cut outer linearization of H_n with merit-order
    dispatch and subgradients sum_t L pi A. ``method="direct"`` solves the joint program over
    capacities and all blocks' dispatch with an interior-point conic solver.
    """
    risk = beta_pool if isinstance(beta_pool, RiskParams) else RiskParams(alpha, float(beta_pool))
    if method == "direct":
        return _planner_direct(scenarios, risk)
    if method != "cutting-plane":
        raise ValueError(f"unknown method {method!r}")
    inv = scenarios.inv_costs
    n_g, n = inv.size, scenarios.n_scenarios
    p = scenarios.probabilities
    if x_max is None:
        avail = np.array([t.availability.max() for t in scenarios.technologies])
        need = scenarios.curve.peak + max(0.0, scenarios.net_shift.max()) + scenarios.curve.responsive
        x_max = 3.0 * need / np.maximum(avail, 1e-3)
    x_max = np.broadcast_to(np.asarray(x_max, dtype=float), (n_g,))
    scale_x = float(x_max.max())
    x = default_start(scenarios)
    neutral = risk.risk_neutral
    beta = 1.0 if neutral else risk.beta
    alpha = risk.alpha
    # scaled master: x' = x / scale_x, theta_n = m + su * theta'_n, VaR = m + su * VaR', w = su * w'
    _, u0, _, _ = _planner_value(x, scenarios, risk, threads)
    m = float(p @ (u0 + inv @ x))
    su = max(float(inv @ x), 1.0)
    kx = scale_x / su
    nv = n_g + n + (0 if neutral else 1 + n)
    c = np.zeros(nv)
    c[:n_g] = inv * kx
    c[n_g:n_g + n] = -beta * p
    if not neutral:
        c[n_g + n] = -(1.0 - beta)
        c[n_g + n + 1:] = (1.0 - beta) / alpha * p
    tail_rows = None
    if not neutral:
        j = np.arange(n)
        tail_rows = sp.csr_matrix((np.concatenate([np.ones(n), -np.ones(n), -np.ones(n)]),
                                   (np.tile(j, 3), np.concatenate([np.full(n, n_g + n), n_g + j, n_g + n + 1 + j]))),
                                  shape=(n, nv))
    var_bounds = [(0.0, float(xm) / scale_x) for xm in x_max] + [(None, None)] * n
    if not neutral:
        var_bounds += [(None, None)] + [(0.0, None)] * n
    # keep the master inside the region where every must-serve shift can be met
    shift = scenarios.net_shift
    need = shift > 0
    if need.any():
        avail_nt = np.transpose(scenarios.availability()[need], (0, 2, 1)).reshape(-1, n_g)
        feas = sp.hstack([sp.csr_matrix(-avail_nt * scale_x / shift[need].repeat(scenarios.curve.n_blocks)[:, None]),
                          sp.csr_matrix((avail_nt.shape[0], nv - n_g))]).tocsr()
        cut_blocks, cut_rhs = [feas], [-np.ones(avail_nt.shape[0])]
    else:
        cut_blocks, cut_rhs = [], []
    best_val, best = -np.inf, None
    gap = np.inf
    for it in range(1, max_iter + 1):
        val, u, grad_h, _ = _planner_value(x, scenarios, risk, threads)
        if val > best_val:
            best_val, best = val, (x.copy(), u)
        h = u + inv @ x
        # theta'_n - (g_n * scale_x / su) . x' <= (h_n - g_n . x - m) / su
        j = np.arange(n)
        coef = -grad_h * kx
        cut_blocks.append(sp.csr_matrix((np.concatenate([coef.ravel(), np.ones(n)]),
                                         (np.concatenate([np.repeat(j, n_g), j]),
                                          np.concatenate([np.tile(np.arange(n_g), n), n_g + j]))), shape=(n, nv)))
        cut_rhs.append((h - grad_h @ x - m) / su)
        A = sp.vstack(cut_blocks + ([tail_rows] if tail_rows is not None else [])).tocsr()
        rhs = np.concatenate(cut_rhs + ([np.zeros(n)] if tail_rows is not None else []))
        res = linprog(c, A_ub=A, b_ub=rhs, bounds=var_bounds, method="highs")
        if res.status != 0:
            raise RuntimeError(f"planner master problem failed: {res.message}")
        upper = m - res.fun * su
        gap = (upper - best_val) / su
        if gap <= tol:
            break
        x_new = res.x[:n_g] * scale_x
        if np.max(np.abs(x_new - x)) <= 1e-10 * scale_x:
            break
        x = x_new
    xb, ub = best
    return PlannerSolution(xb, best_val, ub, risk, it, float(gap))


def _planner_direct(scenarios: ScenarioSet, risk: RiskParams) -> PlannerSolution:
    """Joint program over capacities, every block's dispatch, VaR and tail slacks.

    Variables are scaled (MW by peak demand, $ by B times energy). The responsive-demand
    quadratic of each scenario is moved into an epigraph variable s_n held by a rotated
    second-order cone, so the objective is linear.
    """
    curve = scenarios.curve
    inv = scenarios.inv_costs
    n_g, n, n_t = inv.size, scenarios.n_scenarios, curve.n_blocks
    p = scenarios.probabilities
    costs = scenarios.fuel_costs()          # (N, G)
    avail = scenarios.availability()        # (N, G, T)
    shift = scenarios.net_shift
    L = curve.lengths
    B, R = curve.voll, curve.responsive
    neutral = risk.risk_neutral
    beta = 1.0 if neutral else risk.beta
    alpha = risk.alpha
    sx = max(curve.peak, 1.0)
    su = B * max(curve.energy, 1.0)
    k = sx / su
    nb = n * n_t
    # layout: x(G) | y(N*T*G) | dfix(NT) | dres(NT) | s(N) | VaR | w(N)
    ix, iy = 0, n_g
    idf = iy + nb * n_g
    idr = idf + nb
    i_s = idr + nb
    iv = i_s + n
    iw = iv + 1
    nv = iw + (0 if neutral else n)
    if neutral:
        nv = iv
    blk = np.arange(nb)
    scen_of = blk // n_t
    t_of = blk % n_t
    y_ix = iy + blk[:, None] * n_g + np.arange(n_g)[None, :]      # (NT, G)

    # u_n as a sparse linear form: U (N x nv), u' = U z
    u_rows = np.concatenate([scen_of, scen_of, np.repeat(scen_of, n_g), np.arange(n), np.repeat(np.arange(n), n_g)])
    u_cols = np.concatenate([idf + blk, idr + blk, y_ix.ravel(), i_s + np.arange(n), np.tile(ix + np.arange(n_g), n)])
    u_vals = np.concatenate([
        B * L[t_of] * k, B * L[t_of] * k,
        (-L[t_of][:, None] * costs[scen_of]).ravel() * k,
        -np.ones(n),
        np.tile(-inv * k, n),
    ])
    U = sp.csr_matrix((u_vals, (u_rows, u_cols)), shape=(n, nv))

    q = -(beta * (p @ U))
    q = np.asarray(q).ravel()
    if not neutral:
        q[iv] -= (1.0 - beta)
        q[iw:iw + n] += (1.0 - beta) / alpha * p

    blocks = []
    rhs = []
    # balance (zero cone): dfix + dres - sum y = -shift
    eq = sp.csr_matrix((np.concatenate([np.ones(nb), np.ones(nb), -np.ones(nb * n_g)]),
                        (np.concatenate([blk, blk, np.repeat(blk, n_g)]),
                         np.concatenate([idf + blk, idr + blk, y_ix.ravel()]))), shape=(nb, nv))
    blocks.append(eq)
    rhs.append(-shift[scen_of] / sx)
    n_zero = nb
    # y - A x <= 0
    cap_rows = np.arange(nb * n_g)
    a_vals = avail[scen_of][:, :, :]                                  # (NT, G, T)
    a_bt = a_vals[blk, :, t_of]                                       # (NT, G)
    cap = sp.csr_matrix((np.concatenate([np.ones(nb * n_g), -a_bt.ravel()]),
                         (np.concatenate([cap_rows, cap_rows]),
                          np.concatenate([y_ix.ravel(), np.tile(ix + np.arange(n_g), nb)]))), shape=(nb * n_g, nv))
    blocks.append(cap)
    rhs.append(np.zeros(nb * n_g))
    # simple bounds: -z <= 0 for x, y, dfix, dres; dfix <= D; dres <= R
    nonneg = np.arange(0, i_s)
    blocks.append(sp.csr_matrix((-np.ones(nonneg.size), (np.arange(nonneg.size), nonneg)), shape=(nonneg.size, nv)))
    rhs.append(np.zeros(nonneg.size))
    blocks.append(sp.csr_matrix((np.ones(nb), (np.arange(nb), idf + blk)), shape=(nb, nv)))
    rhs.append(curve.fixed[t_of] / sx)
    blocks.append(sp.csr_matrix((np.ones(nb), (np.arange(nb), idr + blk)), shape=(nb, nv)))
    rhs.append(np.full(nb, R / sx))
    if not neutral:
        # VaR - u_n - w_n <= 0 ; -w <= 0
        tail = sp.csr_matrix((np.concatenate([np.ones(n), -np.ones(n)]),
                              (np.concatenate([np.arange(n), np.arange(n)]),
                               np.concatenate([np.full(n, iv), iw + np.arange(n)]))), shape=(n, nv)) - U
        blocks.append(tail)
        rhs.append(np.zeros(n))
        blocks.append(sp.csr_matrix((-np.ones(n), (np.arange(n), iw + np.arange(n))), shape=(n, nv)))
        rhs.append(np.zeros(n))
    n_nonneg = sum(b.shape[0] for b in blocks) - n_zero
    # rotated cones: s_n >= sum_t c_t dres_t^2, as (s + 1/2, s - 1/2, sqrt(2 c_t) dres_t) in SOC
    cones = [clarabel.ZeroConeT(n_zero), clarabel.NonnegativeConeT(n_nonneg)]
    c_t = (L * B / (2.0 * R)) * sx * sx / su if R > 0 else np.zeros(n_t)
    for j in range(n):
        dim = 2 + n_t
        rr = np.concatenate([[0, 1], 2 + np.arange(n_t)])
        cc = np.concatenate([[i_s + j, i_s + j], idr + j * n_t + np.arange(n_t)])
        vv = np.concatenate([[-1.0, -1.0], -np.sqrt(2.0 * c_t)])
        blocks.append(sp.csr_matrix((vv, (rr, cc)), shape=(dim, nv)))
        rhs.append(np.concatenate([[0.5, -0.5], np.zeros(n_t)]))
        cones.append(clarabel.SecondOrderConeT(dim))
    A = sp.vstack(blocks).tocsc()
    b = np.concatenate(rhs)
    sol = _clarabel(sp.csc_matrix((nv, nv)), q, A, b, cones)
    x = np.maximum(np.asarray(sol.x)[ix:ix + n_g] * sx, 0.0)
    val, u, _, _ = _planner_value(x, scenarios, risk)
    return PlannerSolution(x, val, u, risk, int(sol.iterations), 0.0)


def _clarabel(P, q, A, b, cones):
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.max_iter = 500
    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    sol = solver.solve()
    if str(sol.status) not in ("Solved", "AlmostSolved"):
        raise RuntimeError(f"planner conic program failed: {sol.status}")
    return sol


def complete_trading_result(scenarios: ScenarioSet, risk: RiskSettings = RiskSettings(),
                            params: AlgorithmParams = AlgorithmParams(), *, method: str = "cutting-plane",
                            config_hash: str = "", seed: int = 0) -> EquilibriumResult:
    """Package the planner solution as an equilibrium result with a single planner agent."""
    sol = solve_complete_trading(scenarios, risk.pooled(), method=method, threads=params.threads)
    batch = dispatch_all(sol.capacities, scenarios, params.threads)
    regime = Regime(RegimeKind.COMPLETE_TRADING, ())
    state = MarketState(sol.capacities.copy(), np.zeros(0), {"planner": np.zeros(0)},
                        {"planner": sol.objective}, sol.iterations, 0, 0.0, 0.0)
    credits = None
    try:
        credits = reliability_credits(batch)
    except ValueError:
        pass
    return EquilibriumResult(regime, scenarios, risk, params, state, batch, np.zeros((0, scenarios.n_scenarios)),
                             {}, True, 0.0, [], None, credits, config_hash, seed, "complete_trading")


# ---------------------------------------------------------------------------
# state files

STATE_VERSION = 1


def _floats(values) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=float).ravel()]


def state_dict(result: EquilibriumResult, extra: dict | None = None) -> dict:
    """Everything needed to restart a run or to serve as the reference of a mandatory run.

    Holds no timestamps or paths, so identical runs give identical files.
    """
    st = result.state
    out = {
        "version": STATE_VERSION,
        "label": result.label,
        "regime": result.regime.kind.value,
        "contracts": result.regime.names,
        "floor": {name: float(v) for name, v in result.regime.floor},
        "sell_only": result.regime.sell_only,
        "technologies": result.scenarios.names,
        "seed": int(result.seed),
        "config_hash": result.config_hash,
        "risk": {"consumer": [result.risk.consumer.alpha, result.risk.consumer.beta],
                 "generator": [result.risk.generator.alpha, result.risk.generator.beta]},
        "converged": bool(result.converged),
        "proximity": float(result.proximity),
        "capacities": _floats(st.capacities),
        "prices": _floats(st.prices),
        "volumes": {a: _floats(v) for a, v in st.volumes.items()},
        "rho": {a: float(v) for a, v in st.rho.items()},
        "total_surplus": result.total_surplus,
        "credits": None if result.credits is None else _floats(result.credits),
        "psi": None if result.psi is None else _floats(result.psi),
        "outer_iterations": int(st.outer_iterations),
        "inner_iterations": int(st.inner_iterations),
        "clearing_residual": float(st.clearing_residual),
        "profit_residual": float(st.profit_residual),
        "history": result.history,
    }
    if extra:
        out.update(extra)
    return out


def save_state(result: EquilibriumResult, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state_dict(result, extra), indent=1, sort_keys=True) + "\n")
    return path


def load_state(path) -> dict:
    path = Path(path)
    data = json.loads(path.read_text())
    if data.get("version") != STATE_VERSION:
        raise ValueError(f"{path}: unsupported state file version {data.get('version')!r}")
    return data
