"""Per-scenario economic dispatch by merit order.

The dispatch problem has no intertemporal constraints, so every block is an
independent concave program: a supply stack of generator steps meets a demand stack
made of must-serve exogenous shifts, fixed demand valued at ``voll`` and a linear
price-responsive segment ``voll * (1 - d_res / D_res)``. The clearing price is read off
the intersection; operating margins are ``max(0, price - cost)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .scenario import DemandCurve, ScenarioSet


class DispatchInfeasible(ValueError):
    """Exogenous net demand exceeds the available capacity in some block."""

    def __init__(self, scenario: tuple[int, int, int] | None, block: int):
        where = f"scenario (f, r, s)={scenario}, " if scenario is not None else ""
        super().__init__(f"{where}block {block}: must-serve demand shift exceeds available capacity")
        self.scenario = scenario
        self.block = block


def clear_blocks(costs: np.ndarray, caps: np.ndarray, fixed: np.ndarray, shift: np.ndarray,
                 responsive: float, voll: float):
    """Clear M independent blocks at once.

    ``costs`` and ``caps`` have shape (M, G); ``fixed`` and ``shift`` shape (M,).
    Returns ``(y, d_fix, d_res, price, infeasible)`` where ``infeasible`` is a boolean mask.
    Equal-cost generators share the marginal step pro rata to available capacity.
    """
    costs = np.asarray(costs, dtype=float)
    caps = np.asarray(caps, dtype=float)
    m, n_g = caps.shape
    fixed = np.broadcast_to(np.asarray(fixed, dtype=float), (m,))
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (m,))
    base = fixed + shift

    order = np.argsort(costs, axis=1, kind="stable")
    c = np.take_along_axis(costs, order, axis=1)
    k = np.take_along_axis(caps, order, axis=1)
    at_or_below = c[:, None, :] <= c[:, :, None]
    below = c[:, None, :] < c[:, :, None]
    s_at = np.einsum("mjh,mh->mj", at_or_below, k)
    s_below = np.einsum("mjh,mh->mj", below, k)
    demand_at = base[:, None] + responsive * (1.0 - c / voll)

    hit = demand_at <= s_at
    any_hit = hit.any(axis=1)
    j = np.argmax(hit, axis=1)
    rows = np.arange(m)
    cj = c[rows, j]
    sb = s_below[rows, j]
    qj = demand_at[rows, j]
    total = k.sum(axis=1)

    price = np.empty(m)
    d_fix = fixed.copy()
    d_res = np.zeros(m)
    # share of each sorted step that is dispatched
    frac = np.zeros((m, n_g))

    # marginal step sets the price
    on_step = any_hit & (qj >= sb)
    # price on the responsive demand segment between two steps
    between = any_hit & ~on_step
    # supply exhausted before reaching the responsive segment end
    short = ~any_hit

    if on_step.any():
        idx = np.flatnonzero(on_step)
        price[idx] = cj[idx]
        d_res[idx] = responsive * (1.0 - cj[idx] / voll)
        group_cap = s_at[idx, j[idx]] - sb[idx]
        share = np.divide(qj[idx] - sb[idx], group_cap, out=np.zeros(idx.size), where=group_cap > 0)
        share = np.clip(share, 0.0, 1.0)
        lower = c[idx] < cj[idx, None]
        same = c[idx] == cj[idx, None]
        frac[idx] = np.where(lower, 1.0, np.where(same, share[:, None], 0.0))

    if between.any():
        idx = np.flatnonzero(between)
        d_res[idx] = np.clip(sb[idx] - base[idx], 0.0, responsive)
        price[idx] = voll * (1.0 - d_res[idx] / responsive) if responsive > 0 else cj[idx]
        frac[idx] = (c[idx] < cj[idx, None]).astype(float)

    infeasible = np.zeros(m, dtype=bool)
    if short.any():
        idx = np.flatnonzero(short)
        frac[idx] = 1.0
        tot = total[idx]
        slack = tot - base[idx]
        res_side = slack >= 0
        if responsive > 0:
            d_res[idx] = np.where(res_side, np.clip(slack, 0.0, responsive), 0.0)
            price[idx] = np.where(res_side, voll * (1.0 - d_res[idx] / responsive), voll)
        else:
            price[idx] = voll
        d_fix[idx] = np.where(res_side, fixed[idx], tot - shift[idx])
        infeasible[idx] = tot < shift[idx] - 1e-9 * np.maximum(1.0, np.abs(shift[idx]))
        d_fix[idx] = np.clip(d_fix[idx], 0.0, fixed[idx])

    empty = (base + responsive) <= 0
    if empty.any():
        price[empty] = 0.0
        d_res[empty] = 0.0
        frac[empty] = 0.0
        d_fix[empty] = fixed[empty]

    y = np.empty((m, n_g))
    np.put_along_axis(y, order, frac * k, axis=1)
    return y, d_fix, d_res, price, infeasible


@dataclass(frozen=True)
class BlockDispatch:
    y: np.ndarray
    d_fix: float
    d_res: float
    price: float
    margin: np.ndarray


@dataclass(frozen=True)
class DispatchResult:
    """Dispatch of one scenario: arrays over blocks (generation has shape (G, T))."""

    scenario: tuple[int, int, int]
    y: np.ndarray
    d_fix: np.ndarray
    d_res: np.ndarray
    price: np.ndarray
    margin: np.ndarray
    welfare: float
    unserved: float

    def block(self, t: int) -> BlockDispatch:
        return BlockDispatch(self.y[:, t].copy(), float(self.d_fix[t]), float(self.d_res[t]),
                             float(self.price[t]), self.margin[:, t].copy())


@dataclass(frozen=True)
class DispatchBatch:
    """Dispatch of every scenario; leading axis is the flat scenario index."""

    scenarios: ScenarioSet
    capacities: np.ndarray
    y: np.ndarray          # (N, G, T)
    d_fix: np.ndarray      # (N, T)
    d_res: np.ndarray      # (N, T)
    price: np.ndarray      # (N, T)
    margin: np.ndarray     # (N, G, T)
    welfare: np.ndarray    # (N,)
    unserved: np.ndarray   # (N,) MWh

    def __len__(self) -> int:
        return self.price.shape[0]

    def __getitem__(self, n: int) -> DispatchResult:
        return DispatchResult(self.scenarios.scenario(n), self.y[n], self.d_fix[n], self.d_res[n],
                              self.price[n], self.margin[n], float(self.welfare[n]), float(self.unserved[n]))

    def operating_profit_per_mw(self) -> np.ndarray:
        """Sum over blocks of L * margin * availability, shape (N, G) in $/MW-yr."""
        avail = self.scenarios.availability()
        return np.einsum("ngt,ngt,t->ng", self.margin, avail, self.scenarios.curve.lengths)

    def operating_profit(self) -> np.ndarray:
        """Operating profit of the installed fleet, shape (N, G) in $."""
        return self.operating_profit_per_mw() * self.capacities[None, :]

    def consumption(self) -> np.ndarray:
        """Energy paid for at spot, d_fix + d_res + D+ - D-, shape (N, T) in MW."""
        return self.d_fix + self.d_res + self.scenarios.net_shift[:, None]


def _welfare(curve: DemandCurve, y, d_fix, d_res, costs) -> np.ndarray:
    value = d_fix + d_res
    if curve.responsive > 0:
        value = value - d_res**2 / (2.0 * curve.responsive)
    gross = curve.voll * value - np.einsum("...gt,...g->...t", y, costs)
    return gross @ curve.lengths


def _dispatch_chunk(scen: ScenarioSet, x: np.ndarray, idx: np.ndarray):
    curve = scen.curve
    n, n_g, n_t = idx.size, len(scen.technologies), curve.n_blocks
    costs = scen.fuel_costs()[idx]                             # (n, G)
    caps = scen.availability()[idx] * x[None, :, None]         # (n, G, T)
    shift = scen.net_shift[idx]
    flat_costs = np.repeat(costs[:, None, :], n_t, axis=1).reshape(-1, n_g)
    flat_caps = np.transpose(caps, (0, 2, 1)).reshape(-1, n_g)
    y, d_fix, d_res, price, bad = clear_blocks(flat_costs, flat_caps, np.tile(curve.fixed, n),
                                               np.repeat(shift, n_t), curve.responsive, curve.voll)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DispatchInfeasible(scen.scenario(int(idx[i // n_t])), i % n_t)
    y = np.transpose(y.reshape(n, n_t, n_g), (0, 2, 1))
    d_fix = d_fix.reshape(n, n_t)
    d_res = d_res.reshape(n, n_t)
    price = price.reshape(n, n_t)
    margin = np.maximum(0.0, price[:, None, :] - costs[:, :, None])
    welfare = _welfare(curve, y, d_fix, d_res, costs)
    unserved = (curve.fixed[None, :] - d_fix) @ curve.lengths
    return y, d_fix, d_res, price, margin, welfare, np.maximum(unserved, 0.0)


def dispatch_all(capacities, scenarios: ScenarioSet, threads: int = 1) -> DispatchBatch:
    """Dispatch every scenario. Chunks are independent, so the result does not depend on ``threads``."""
    x = np.asarray(capacities, dtype=float)
    if np.any(x < 0):
        raise ValueError("capacities must be nonnegative")
    n = scenarios.n_scenarios
    chunks = np.array_split(np.arange(n), max(1, min(threads, n)))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda idx: _dispatch_chunk(scenarios, x, idx), chunks))
    else:
        parts = [_dispatch_chunk(scenarios, x, idx) for idx in chunks]
    arrays = [np.concatenate([p[i] for p in parts]) for i in range(7)]
    return DispatchBatch(scenarios, x.copy(), *arrays)


def solve_block(t: int, capacities, scenario: tuple[int, int, int], curve: DemandCurve,
                technologies, shift: float = 0.0) -> BlockDispatch:
    """Dispatch a single block ``t`` of scenario ``(f, r, s)``.

    ``shift`` is the exogenous net demand shift D+_s - D-_f for that scenario.
    """
    f, r, _ = scenario
    x = np.asarray(capacities, dtype=float)
    costs = np.array([tech.fuel_cost[f] for tech in technologies])
    caps = np.array([tech.availability[r, t] for tech in technologies]) * x
    y, d_fix, d_res, price, bad = clear_blocks(costs[None], caps[None], curve.fixed[t:t + 1],
                                               np.array([shift]), curve.responsive, curve.voll)
    if bad[0]:
        raise DispatchInfeasible(scenario, t)
    margin = np.maximum(0.0, price[0] - costs)
    return BlockDispatch(y[0], float(d_fix[0]), float(d_res[0]), float(price[0]), margin)


def solve_scenario(capacities, scenario: tuple[int, int, int], scenarios: ScenarioSet) -> DispatchResult:
    f, r, s = scenario
    n = int(np.ravel_multi_index((f, r, s), scenarios.shape))
    batch = _dispatch_chunk(scenarios, np.asarray(capacities, dtype=float), np.array([n]))
    y, d_fix, d_res, price, margin, welfare, unserved = (a[0] for a in batch)
    return DispatchResult((f, r, s), y, d_fix, d_res, price, margin, float(welfare), float(unserved))


def unserved_energy(result: DispatchResult, curve: DemandCurve) -> float:
    """Curtailed fixed demand in MWh."""
    return float(max(0.0, (curve.fixed - result.d_fix) @ curve.lengths))
