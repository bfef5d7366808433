"""Run configuration: one TOML file with demand, scenario, technology, risk, algorithm and
regime sections. Relative file paths are resolved against the config file's directory;
``package:`` paths point into the shipped data directory."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .agents import RiskParams
from .equilibrium import AlgorithmParams, ContractTerms, RiskSettings
from .scenario import (DemandCurve, ScenarioConfig, ScenarioSet, TechnologySpec, aggregate_blocks,
                       build_scenario_set, _parse_demand_lines)


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


DATA = "package:"


def data_path(name: str) -> Path:
    return Path(str(resources.files("capeq") / "data" / name))


@dataclass
class DemandSection:
    file: str = DATA + "synthetic_load.txt"
    blocks: int = 48
    mode: str = "graded"
    ratio: float = 1.3
    responsive_share: float = 0.05
    voll: float = 10_000.0


@dataclass
class RunConfig:
    demand: DemandSection
    scenario: ScenarioConfig
    technologies: list[TechnologySpec]
    risk: RiskSettings
    algorithm: AlgorithmParams
    terms: ContractTerms
    regime: str = "unrestricted3"
    sell_only: bool = True
    source: Path | None = None
    hourly: np.ndarray | None = field(default=None, repr=False)

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def with_overrides(self, *, beta: float | None = None, seed: int | None = None,
                       regime: str | None = None) -> "RunConfig":
        cfg = self
        if beta is not None:
            gen = RiskParams(self.risk.generator.alpha, beta)
            cfg = replace(cfg, risk=replace(cfg.risk, generator=gen))
        if seed is not None:
            cfg = replace(cfg, scenario=replace(cfg.scenario, seed=seed))
        if regime is not None:
            cfg = replace(cfg, regime=regime)
        return cfg

    def demand_curve(self) -> DemandCurve:
        d = self.demand
        lengths, load = aggregate_blocks(self.hourly, d.blocks, d.mode, d.ratio)
        return DemandCurve(lengths, load, responsive=d.responsive_share * load.max(), voll=d.voll)

    def scenario_set(self) -> ScenarioSet:
        return build_scenario_set(self.scenario, self.demand_curve(), self.technologies)

    def hash_payload(self) -> dict:
        """Inputs that make two runs comparable: demand, scenarios, technologies and risk."""
        d = self.demand
        return {
            "demand": {"hourly_sha256": hashlib.sha256(np.ascontiguousarray(self.hourly).tobytes()).hexdigest(),
                       "blocks": d.blocks, "mode": d.mode, "ratio": d.ratio,
                       "responsive_share": d.responsive_share, "voll": d.voll},
            "scenarios": {f.name: _plain(getattr(self.scenario, f.name)) for f in fields(self.scenario)},
            "technologies": [{f.name: _plain(getattr(t, f.name)) for f in fields(t)} for t in self.technologies],
            "risk": {"consumer": [self.risk.consumer.alpha, self.risk.consumer.beta],
                     "generator": [self.risk.generator.alpha, self.risk.generator.beta]},
        }

    def config_hash(self) -> str:
        text = json.dumps(self.hash_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _plain(value):
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _resolve(path: str, base: Path | None) -> Path:
    if path.startswith(DATA):
        return data_path(path[len(DATA):])
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = base / p
    return p


def _section(raw: dict, name: str, cls, base=None):
    section = raw.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    kwargs = dict(base or {})
    kwargs.update(section)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(raw: dict, source: Path | None = None) -> RunConfig:
    base_dir = source.parent if source is not None else None
    allowed = {"seed", "demand", "scenarios", "technologies", "risk", "algorithm", "contracts", "regime"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    demand = _section(raw, "demand", DemandSection)
    scen = _section(raw, "scenarios", ScenarioConfig)
    scen = replace(scen, shift_up=tuple(scen.shift_up), shift_down=tuple(scen.shift_down),
                   correlations=list(scen.correlations))
    if "seed" in raw:
        scen = replace(scen, seed=int(raw["seed"]))

    techs_raw = raw.get("technologies")
    if not techs_raw or not isinstance(techs_raw, list):
        raise ConfigError("need at least one [[technologies]] entry")
    techs = []
    for i, t in enumerate(techs_raw):
        try:
            spec = TechnologySpec(**t)
        except TypeError as exc:
            raise ConfigError(f"technology {i}: {exc}") from None
        spec.fuel_cost = list(spec.fuel_cost)
        techs.append(spec)

    risk_raw = raw.get("risk", {})
    try:
        alpha = float(risk_raw.get("alpha", 0.7))
        consumer = RiskParams(float(risk_raw.get("consumer_alpha", alpha)), float(risk_raw.get("consumer_beta", 0.7)))
        generator = RiskParams(float(risk_raw.get("generator_alpha", alpha)),
                               float(risk_raw.get("generator_beta", 0.7)))
    except ValueError as exc:
        raise ConfigError(f"[risk]: {exc}") from None
    algorithm = _section(raw, "algorithm", AlgorithmParams)
    terms = _section(raw, "contracts", ContractTerms)

    regime_raw = raw.get("regime", {})
    regime = str(regime_raw.get("name", "unrestricted3"))
    sell_only = bool(regime_raw.get("sell_only", True))

    path = _resolve(demand.file, base_dir)
    try:
        hourly = _parse_demand_lines(path.read_text().splitlines())
    except OSError as exc:
        raise ConfigError(f"cannot read demand file {path}: {exc}") from None
    return RunConfig(demand, scen, techs, RiskSettings(consumer, generator), algorithm, terms, regime,
                     sell_only, source, hourly)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path) if not str(path).startswith(DATA) else _resolve(str(path), None)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path)


def default_config() -> RunConfig:
    return load_config(data_path("default.toml"))


def desk_config() -> RunConfig:
    return load_config(data_path("desk.toml"))
