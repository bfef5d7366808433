"""Run metrics and comparison tables.

Prices are consumption weighted: per scenario, spot payments (and, for the hedged price,
the consumer's net contract cash flow) divided by energy paid for at spot. Averages and
volatilities across scenarios use the scenario probabilities.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import CONSUMER, EquilibriumResult

logger = logging.getLogger(__name__)


class ComparisonError(ValueError):
    """Runs with different inputs cannot be compared."""


@dataclass
class MetricsTable:
    label: str
    regime: str
    beta_consumer: float
    beta_generator: float
    config_hash: str
    converged: bool
    capacity_gw: dict[str, float]
    spot_price: float
    hedged_price: float
    spot_volatility: float
    hedged_volatility: float
    eue_gwh: float
    proximity: float
    total_surplus: float
    volumes_gw: dict[str, dict[str, float]] = field(default_factory=dict)
    risk_premia: dict[str, float] = field(default_factory=dict)
    surplus_change: float | None = None   # $M/yr against a reference run

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsTable":
        return cls(**data)


def fingerprint(result: EquilibriumResult) -> str:
    """The run's config hash, or a hash of its scenario data and risk settings when it has none."""
    if result.config_hash:
        return result.config_hash
    scen = result.scenarios
    h = hashlib.sha256()
    for arr in (scen.curve.lengths, scen.curve.fixed, scen.probabilities, scen.net_shift,
                scen.fuel_costs(), scen.availability(), scen.inv_costs):
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    h.update(np.array([scen.curve.responsive, scen.curve.voll]).tobytes())
    for rp in (result.risk.consumer, result.risk.generator):
        h.update(np.array([rp.alpha, rp.beta]).tobytes())
    return "data:" + h.hexdigest()[:16]


def consumer_cash_flow(result: EquilibriumResult) -> np.ndarray:
    """Consumer's net contract payment per scenario, sum_k v^k (phi^k - eta^k), in $."""
    n = len(result.dispatch)
    v = result.state.volumes.get(CONSUMER)
    if v is None or v.size == 0:
        return np.zeros(n)
    return (result.state.prices[:, None] - result.payouts).T @ v


def consumption_weighted_prices(result: EquilibriumResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spot and hedged price per scenario ($/MWh), plus the mask of scenarios with consumption."""
    batch = result.dispatch
    lengths = batch.scenarios.curve.lengths
    q = batch.consumption()
    energy = q @ lengths
    payments = (batch.price * q) @ lengths
    ok = energy > 0
    if not ok.all():
        logger.warning("%d scenario(s) without consumption left out of price averages", int((~ok).sum()))
    safe = np.where(ok, energy, 1.0)
    spot = np.where(ok, payments / safe, np.nan)
    hedged = np.where(ok, (payments + consumer_cash_flow(result)) / safe, np.nan)
    return spot, hedged, ok


def _moments(values, p, mask) -> tuple[float, float]:
    w = p[mask] / p[mask].sum()
    x = values[mask]
    mean = float(w @ x)
    return mean, float(np.sqrt(max(0.0, w @ (x - mean) ** 2)))


def expected_unserved_energy(result: EquilibriumResult) -> float:
    """Probability-weighted curtailed fixed demand, GWh per year."""
    return float(result.scenarios.probabilities @ result.dispatch.unserved) / 1e3


def metrics(result: EquilibriumResult) -> MetricsTable:
    p = result.scenarios.probabilities
    spot, hedged, ok = consumption_weighted_prices(result)
    spot_mean, spot_vol = _moments(spot, p, ok)
    hedged_mean, hedged_vol = _moments(hedged, p, ok)
    names = result.scenarios.names
    caps = {n: float(x) / 1e3 for n, x in zip(names, result.capacities)}
    contracts = result.regime.names
    volumes = {a: {c: float(v) / 1e3 for c, v in zip(contracts, vol)} for a, vol in result.state.volumes.items()
               if a != "planner"}
    premia = {}
    if contracts:
        premia = {c: float(phi - e) for c, phi, e in zip(contracts, result.state.prices, result.payouts @ p)}
    return MetricsTable(
        label=result.label or result.regime.kind.value,
        regime=result.regime.kind.value,
        beta_consumer=result.risk.consumer.beta,
        beta_generator=result.risk.generator.beta,
        config_hash=fingerprint(result),
        converged=bool(result.converged),
        capacity_gw=caps,
        spot_price=spot_mean,
        hedged_price=hedged_mean,
        spot_volatility=spot_vol,
        hedged_volatility=hedged_vol,
        eue_gwh=expected_unserved_energy(result),
        proximity=float(result.proximity),
        total_surplus=result.total_surplus,
        volumes_gw=volumes,
        risk_premia=premia,
    )


def _check_comparable(a: MetricsTable, b: MetricsTable):
    if a.config_hash != b.config_hash:
        raise ComparisonError(f"config hash mismatch ({a.config_hash} vs {b.config_hash}): "
                              "runs use different inputs or risk parameters")


def compare_metrics(table: MetricsTable, reference: MetricsTable) -> MetricsTable:
    _check_comparable(table, reference)
    out = MetricsTable.from_dict(table.to_dict())
    out.surplus_change = (table.total_surplus - reference.total_surplus) / 1e6
    return out


def compare_runs(result: EquilibriumResult, reference: EquilibriumResult) -> MetricsTable:
    """Metrics of ``result`` with the change in total surplus against ``reference`` ($M/yr)."""
    return compare_metrics(metrics(result), metrics(reference))


# ---------------------------------------------------------------------------
# rendering


def _rows(tables: list[MetricsTable]) -> list[tuple[str, list, str]]:
    """(row name, values per table, human format) in a fixed order."""
    techs = sorted({t for m in tables for t in m.capacity_gw}, key=lambda t: _first_index(tables, t))
    rows = [("regime", [m.regime for m in tables], "s"),
            ("beta_consumer", [m.beta_consumer for m in tables], ".2f"),
            ("beta_generator", [m.beta_generator for m in tables], ".2f")]
    rows += [(f"capacity_gw.{t}", [m.capacity_gw.get(t, 0.0) for m in tables], ".1f") for t in techs]
    rows += [("spot_price", [m.spot_price for m in tables], ".2f"),
             ("hedged_price", [m.hedged_price for m in tables], ".2f"),
             ("spot_volatility", [m.spot_volatility for m in tables], ".2f"),
             ("hedged_volatility", [m.hedged_volatility for m in tables], ".2f"),
             ("eue_gwh", [m.eue_gwh for m in tables], ".2f"),
             ("proximity_pct", [m.proximity for m in tables], ".3f"),
             ("surplus_change_musd", [m.surplus_change for m in tables], ".1f")]
    contracts = []
    for m in tables:
        contracts += [c for c in m.risk_premia if c not in contracts]
    rows += [(f"risk_premium.{c}", [m.risk_premia.get(c) for m in tables], ".0f") for c in contracts]
    agents = []
    for m in tables:
        agents += [a for a in m.volumes_gw if a not in agents]
    for a in agents:
        for c in contracts:
            rows.append((f"volume_gw.{a}.{c}", [m.volumes_gw.get(a, {}).get(c) for m in tables], ".1f"))
    rows.append(("converged", [m.converged for m in tables], "s"))
    return rows


def _first_index(tables, tech):
    for m in tables:
        names = list(m.capacity_gw)
        if tech in names:
            return names.index(tech)
    return 0


def _human(value, fmt: str) -> str:
    if value is None:
        return "-"
    if fmt == "s":
        return str(value)
    return format(value, fmt)


def render_table(tables: list[MetricsTable]) -> str:
    header = ["metric"] + [m.label for m in tables]
    body = [[name] + [_human(v, fmt) for v in vals] for name, vals, fmt in _rows(tables)]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + body]
    return "\n".join(lines) + "\n"


def render_delimited(tables: list[MetricsTable]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + [m.label for m in tables])
    for name, vals, _ in _rows(tables):
        writer.writerow([name] + ["" if v is None else repr(v) if isinstance(v, float) else v for v in vals])
    return buf.getvalue()


def render_structured(tables: list[MetricsTable]) -> str:
    return json.dumps([m.to_dict() for m in tables], indent=1, sort_keys=True) + "\n"


FORMATS = {"table": (render_table, "txt"), "delimited": (render_delimited, "csv"),
           "structured": (render_structured, "json")}


def render(tables, fmt: str = "table", out: str | Path | None = None, name: str = "report") -> str:
    """Render one or more metric tables; write ``<out>/<name>.<ext>`` if ``out`` is given."""
    tables = [tables] if isinstance(tables, MetricsTable) else list(tables)
    if not tables:
        raise ValueError("nothing to render")
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose from {sorted(FORMATS)}")
    writer, ext = FORMATS[fmt]
    text = writer(tables)
    if out is not None:
        path = Path(out) / f"{name}.{ext}"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text
