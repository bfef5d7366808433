"""Contract definitions and per-scenario payouts ($/MW-yr)."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dispatch import DispatchBatch, DispatchResult
from .scenario import ScenarioSet


class ContractKind(str, Enum):
    CALL_OPTION = "call_option"
    FUTURE = "future"
    UNIT_CONTINGENT = "unit_contingent"
    SFPFC = "sfpfc"
    ARROW_DEBREU = "arrow_debreu"


@dataclass(frozen=True)
class Contract:
    """A tradable instrument.

    ``price`` is the strike (options) or settlement price ($/MWh). A capped contract
    settles on ``min(spot, cap)`` so that scarcity rents above the cap are sold only
    through the option. Arrow-Debreu securities pay ``scale`` in scenario ``scenario``.
    """

    name: str
    kind: ContractKind
    price: float = 0.0
    technology: str | None = None
    capped: bool = False
    cap: float | None = None
    scenario: int | None = None
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ContractKind(self.kind))
        if self.price < 0:
            raise ValueError(f"{self.name}: reference price must be nonnegative")
        if self.kind is ContractKind.UNIT_CONTINGENT and not self.technology:
            raise ValueError(f"{self.name}: unit-contingent contract needs a technology")
        if self.capped:
            if self.kind not in (ContractKind.FUTURE, ContractKind.UNIT_CONTINGENT):
                raise ValueError(f"{self.name}: only futures and unit-contingent contracts can be capped")
            if self.cap is None or self.cap < 0:
                raise ValueError(f"{self.name}: capped contract needs a nonnegative cap")
        if self.kind is ContractKind.ARROW_DEBREU and self.scenario is None:
            raise ValueError(f"{self.name}: Arrow-Debreu security needs a scenario index")

    def capped_at(self, cap: float) -> "Contract":
        return Contract(self.name, self.kind, self.price, self.technology, True, cap, self.scenario, self.scale)


def sfpfc_weights(scenarios: ScenarioSet, n: int | None = None) -> np.ndarray:
    """Load-shaped weights w_t per scenario, shape (N, T) (or (T,) for one scenario).

    Weights follow fixed load plus shifts, served or not, and satisfy sum_t L_t w_t = sum_t L_t.
    """
    curve = scenarios.curve
    net = curve.fixed[None, :] + scenarios.net_shift[:, None]
    total = net @ curve.lengths
    if np.any(total <= 0):
        bad = int(np.flatnonzero(total <= 0)[0])
        raise ValueError(f"SFPFC shape undefined: zero fixed demand in scenario {scenarios.scenario(bad)}")
    w = curve.hours * net / total[:, None]
    return w if n is None else w[n]


def _settle(contract: Contract, price: np.ndarray) -> np.ndarray:
    if contract.capped:
        return np.minimum(price, contract.cap)
    return price


def payout_vector(contract: Contract, dispatch: DispatchBatch) -> np.ndarray:
    """Payout of one contract in every scenario, shape (N,)."""
    scen = dispatch.scenarios
    lengths = scen.curve.lengths
    price = dispatch.price
    kind = contract.kind
    if kind is ContractKind.CALL_OPTION:
        return np.maximum(0.0, price - contract.price) @ lengths
    if kind is ContractKind.FUTURE:
        return (_settle(contract, price) - contract.price) @ lengths
    if kind is ContractKind.UNIT_CONTINGENT:
        g = scen.index_of(contract.technology)
        avail = scen.technologies[g].availability[scen.r_index]  # (N, T)
        return (avail * (_settle(contract, price) - contract.price)) @ lengths
    if kind is ContractKind.SFPFC:
        w = sfpfc_weights(scen)
        return (w * (price - contract.price)) @ lengths
    if kind is ContractKind.ARROW_DEBREU:
        out = np.zeros(len(dispatch))
        out[contract.scenario] = contract.scale
        return out
    raise ValueError(f"unknown contract kind {kind}")


def payout_matrix(menu, dispatch: DispatchBatch) -> np.ndarray:
    """Payouts of a contract menu, shape (K, N)."""
    if not menu:
        return np.zeros((0, len(dispatch)))
    return np.array([payout_vector(c, dispatch) for c in menu])


def payout(contract: Contract, result: DispatchResult, scenarios: ScenarioSet) -> float:
    """Payout of ``contract`` for a single scenario dispatch ($/MW-yr)."""
    f, r, s = result.scenario
    n = int(np.ravel_multi_index((f, r, s), scenarios.shape))
    lengths = scenarios.curve.lengths
    price = result.price
    kind = contract.kind
    if kind is ContractKind.CALL_OPTION:
        return float(np.maximum(0.0, price - contract.price) @ lengths)
    if kind is ContractKind.FUTURE:
        return float((_settle(contract, price) - contract.price) @ lengths)
    if kind is ContractKind.UNIT_CONTINGENT:
        avail = scenarios.technologies[scenarios.index_of(contract.technology)].availability[r]
        return float((avail * (_settle(contract, price) - contract.price)) @ lengths)
    if kind is ContractKind.SFPFC:
        return float((sfpfc_weights(scenarios, n) * (price - contract.price)) @ lengths)
    if kind is ContractKind.ARROW_DEBREU:
        return contract.scale if n == contract.scenario else 0.0
    raise ValueError(f"unknown contract kind {kind}")


def risk_premium(price: float, payouts, probabilities) -> float:
    """Clearing price minus the expected payout; positive means sellers are paid for risk."""
    return float(price - np.dot(probabilities, payouts))


def arrow_debreu_menu(n_scenarios: int, scale: float) -> tuple[Contract, ...]:
    return tuple(Contract(f"ad_{n}", ContractKind.ARROW_DEBREU, scenario=n, scale=scale)
                 for n in range(n_scenarios))
