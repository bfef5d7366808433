"""Demand curves, technologies and the (fuel, availability, demand) scenario set."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

HOURS_PER_YEAR = 8760


class DemandFileError(ValueError):
    """Raised for unreadable hourly demand files; ``row`` is 1-based (None if the file is empty)."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ScenarioError(ValueError):
    """Raised when a scenario configuration cannot produce a valid scenario set."""


@dataclass(frozen=True)
class DemandCurve:
    """Block-aggregated demand.

    ``lengths`` are block lengths in hours, ``fixed`` the baseline non-price-responsive
    demand per block (MW). ``responsive`` is the size of the price-responsive demand (MW)
    and ``voll`` the value of non-price-responsive load ($/MWh).
    """

    lengths: np.ndarray
    fixed: np.ndarray
    responsive: float = 0.0
    voll: float = 1000.0

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=float)
        fixed = np.asarray(self.fixed, dtype=float)
        if lengths.ndim != 1 or lengths.shape != fixed.shape or lengths.size == 0:
            raise ValueError("lengths and fixed must be nonempty 1-d arrays of equal size")
        if np.any(lengths <= 0):
            raise ValueError("block lengths must be positive")
        if np.any(fixed < 0):
            raise ValueError("fixed demand must be nonnegative")
        if self.responsive < 0:
            raise ValueError("responsive demand must be nonnegative")
        if self.voll <= 0:
            raise ValueError("value of lost load must be positive")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "fixed", fixed)

    @property
    def n_blocks(self) -> int:
        return self.lengths.size

    @property
    def hours(self) -> float:
        return float(self.lengths.sum())

    @property
    def energy(self) -> float:
        """Total fixed energy (MWh)."""
        return float(self.lengths @ self.fixed)

    @property
    def peak(self) -> float:
        return float(self.fixed.max())


@dataclass(frozen=True)
class Technology:
    """A generation technology.

    ``fuel_cost`` has one entry per fuel scenario ($/MWh); ``availability`` has shape
    (profiles, blocks) with values in [0, 1].
    """

    name: str
    inv_cost: float
    fuel_cost: np.ndarray
    availability: np.ndarray
    role: str = "dispatchable"

    def __post_init__(self):
        fuel = np.atleast_1d(np.asarray(self.fuel_cost, dtype=float))
        avail = np.atleast_2d(np.asarray(self.availability, dtype=float))
        if self.inv_cost <= 0:
            raise ValueError(f"{self.name}: investment cost must be positive")
        if np.any(fuel < 0):
            raise ValueError(f"{self.name}: marginal cost must be nonnegative")
        if np.any(avail < 0) or np.any(avail > 1):
            raise ValueError(f"{self.name}: availability must lie in [0, 1]")
        object.__setattr__(self, "fuel_cost", fuel)
        object.__setattr__(self, "availability", avail)


@dataclass(frozen=True)
class ScenarioSet:
    """Product of fuel scenarios F, availability profiles R and demand shifts S.

    Scenarios are flattened in C order over (f, r, s); ``prob`` has shape (F, R, S).
    """

    curve: DemandCurve
    technologies: tuple[Technology, ...]
    shift_up: np.ndarray
    shift_down: np.ndarray
    prob: np.ndarray
    n_profiles: int
    f_index: np.ndarray = field(init=False, repr=False)
    r_index: np.ndarray = field(init=False, repr=False)
    s_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        up = np.atleast_1d(np.asarray(self.shift_up, dtype=float))
        down = np.atleast_1d(np.asarray(self.shift_down, dtype=float))
        n_f, n_r, n_s = down.size, self.n_profiles, up.size
        prob = np.asarray(self.prob, dtype=float).reshape(n_f, n_r, n_s)
        if np.any(prob <= 0) or abs(prob.sum() - 1.0) > 1e-12:
            raise ScenarioError("scenario probabilities must be positive and sum to one")
        for tech in self.technologies:
            if tech.fuel_cost.size != n_f:
                raise ScenarioError(f"{tech.name}: expected {n_f} fuel costs, got {tech.fuel_cost.size}")
            if tech.availability.shape != (n_r, self.curve.n_blocks):
                raise ScenarioError(
                    f"{tech.name}: availability shape {tech.availability.shape} "
                    f"!= ({n_r}, {self.curve.n_blocks})"
                )
            if np.any(tech.fuel_cost >= self.curve.voll):
                raise ScenarioError(f"{tech.name}: marginal cost must stay below the value of lost load")
        net = self.curve.fixed[None, None, :] + up[None, :, None] - down[:, None, None]
        bad = np.argwhere(net < 0)
        if bad.size:
            f, s, t = (int(i) for i in bad[0])
            raise ScenarioError(f"negative net fixed demand at (f={f}, s={s}, t={t})")
        f_idx, r_idx, s_idx = np.unravel_index(np.arange(n_f * n_r * n_s), (n_f, n_r, n_s))
        object.__setattr__(self, "shift_up", up)
        object.__setattr__(self, "shift_down", down)
        object.__setattr__(self, "prob", prob)
        object.__setattr__(self, "f_index", f_idx)
        object.__setattr__(self, "r_index", r_idx)
        object.__setattr__(self, "s_index", s_idx)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.prob.shape

    @property
    def n_scenarios(self) -> int:
        return self.prob.size

    @property
    def probabilities(self) -> np.ndarray:
        """Flat scenario probabilities, shape (N,)."""
        return self.prob.reshape(-1)

    @property
    def net_shift(self) -> np.ndarray:
        """D+_s - D-_f per flat scenario, shape (N,)."""
        return self.shift_up[self.s_index] - self.shift_down[self.f_index]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.technologies]

    @property
    def inv_costs(self) -> np.ndarray:
        return np.array([t.inv_cost for t in self.technologies])

    def fuel_costs(self) -> np.ndarray:
        """Marginal cost per flat scenario and technology, shape (N, G)."""
        costs = np.array([t.fuel_cost for t in self.technologies])  # (G, F)
        return costs[:, self.f_index].T

    def availability(self) -> np.ndarray:
        """Availability per flat scenario, technology and block, shape (N, G, T)."""
        avail = np.stack([t.availability for t in self.technologies])  # (G, R, T)
        return np.transpose(avail[:, self.r_index, :], (1, 0, 2))

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def role_index(self, role: str) -> int:
        for g, tech in enumerate(self.technologies):
            if tech.role == role:
                return g
        raise KeyError(f"no technology with role {role!r}")

    def scenario(self, n: int) -> tuple[int, int, int]:
        return int(self.f_index[n]), int(self.r_index[n]), int(self.s_index[n])


def _parse_demand_lines(lines: Sequence[str]) -> np.ndarray:
    values = []
    for row, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").replace(";", " ").split()
        if len(parts) not in (1, 2):
            raise DemandFileError(f"expected 1 or 2 columns, got {len(parts)}", row)
        try:
            value = float(parts[-1])
        except ValueError:
            raise DemandFileError(f"not a number: {parts[-1]!r}", row) from None
        if not np.isfinite(value):
            raise DemandFileError("demand must be finite", row)
        if value < 0:
            raise DemandFileError(f"negative demand {value}", row)
        values.append(value)
    if not values:
        raise DemandFileError("demand file is empty")
    return np.array(values)


def _graded_bounds(hours: int, n_blocks: int, ratio: float) -> np.ndarray:
    """Block boundaries whose lengths grow geometrically by ``ratio`` (at least one hour each)."""
    weights = ratio ** np.arange(n_blocks)
    ends = np.round(hours * np.cumsum(weights) / weights.sum()).astype(int)
    for i in range(n_blocks):
        ends[i] = max(ends[i], (ends[i - 1] if i else 0) + 1)
    for i in range(n_blocks - 1, -1, -1):
        ends[i] = min(ends[i], hours - (n_blocks - 1 - i))
    return ends


def aggregate_blocks(hourly: np.ndarray, n_blocks: int | None = None,
                     mode: str = "chronological", ratio: float = 1.3) -> tuple[np.ndarray, np.ndarray]:
    """Split an hourly series into ``n_blocks`` contiguous blocks.

    ``chronological`` keeps hour order. ``duration`` sorts hours by decreasing demand first,
    so blocks are slices of the load duration curve. ``graded`` does the same with block
    lengths growing geometrically by ``ratio``, which keeps the peak finely resolved.
    Block demand is the block mean, so total energy is preserved.
    """
    hourly = np.asarray(hourly, dtype=float)
    n_blocks = hourly.size if n_blocks is None else int(n_blocks)
    if not 1 <= n_blocks <= hourly.size:
        raise ValueError(f"block count must be in [1, {hourly.size}], got {n_blocks}")
    if mode in ("duration", "graded"):
        hourly = np.sort(hourly)[::-1]
    elif mode != "chronological":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if mode == "graded":
        if ratio < 1.0:
            raise ValueError("graded block ratio must be at least 1")
        chunks = np.split(hourly, _graded_bounds(hourly.size, n_blocks, ratio)[:-1])
    else:
        chunks = np.array_split(hourly, n_blocks)
    lengths = np.array([c.size for c in chunks], dtype=float)
    demand = np.array([c.sum() / c.size for c in chunks])
    return lengths, demand


def load_demand_curve(path: str | Path, aggregation: int | None = None, *, mode: str = "chronological",
                      responsive: float = 0.0, voll: float = 1000.0, ratio: float = 1.3) -> DemandCurve:
    """Read an hourly demand file (one value per line, or ``hour, MW`` pairs)."""
    text = Path(path).read_text()
    hourly = _parse_demand_lines(text.splitlines())
    lengths, demand = aggregate_blocks(hourly, aggregation, mode, ratio)
    return DemandCurve(lengths, demand, responsive=responsive, voll=voll)


def synthetic_hourly_load(seed: int = 7, mean_mw: float = 90_000.0, hours: int = HOURS_PER_YEAR) -> np.ndarray:
    """Stylized one-year hourly load with summer and winter peaks, a daily cycle,
    weekends and AR(1) noise. Used to build the shipped demand file."""
    rng = np.random.default_rng(seed)
    h = np.arange(hours)
    day, hour = h // 24, h % 24
    seasonal = 1.0 + 0.13 * np.cos(2 * np.pi * (day - 200) / 365) + 0.05 * np.cos(4 * np.pi * (day - 20) / 365)
    daily = 1.0 + 0.16 * np.sin(2 * np.pi * (hour - 10) / 24) + 0.04 * np.sin(4 * np.pi * (hour - 4) / 24)
    weekly = np.where(day % 7 >= 5, 0.93, 1.0)
    noise = np.empty(hours)
    noise[0] = 0.0
    shocks = rng.normal(0.0, 0.012, hours)
    for i in range(1, hours):
        noise[i] = 0.97 * noise[i - 1] + shocks[i]
    load = seasonal * daily * weekly * (1.0 + noise)
    return np.round(load * mean_mw / load.mean(), 1)


def _weighted_corr(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    w = w / w.sum()
    da, db = a - w @ a, b - w @ b
    denom = np.sqrt((w @ da**2) * (w @ db**2))
    return float((w @ (da * db)) / denom) if denom > 0 else 0.0


def _recentre(profile: np.ndarray, weights: np.ndarray, mean: float) -> np.ndarray:
    w = weights / weights.sum()
    for _ in range(200):
        gap = mean - w @ profile
        if abs(gap) < 1e-13:
            break
        profile = np.clip(profile + gap, 0.0, 1.0)
    return profile


def make_availability_profiles(curve: DemandCurve, mean: float, correlations: Sequence[float],
                               seed: int = 0, concentration: float = 2.0, retries: int = 8,
                               tol: float = 1e-2) -> np.ndarray:
    """Availability profiles (R, T) with a given L-weighted mean and correlation with fixed load.

    A Beta-distributed base profile is rank-reordered against a mix of the load ranking
    and noise; the mixing weight is bisected until the measured correlation hits the target.
    """
    correlations = [float(c) for c in correlations]
    if not 0.0 < mean <= 1.0:
        raise ScenarioError(f"availability mean must be in (0, 1], got {mean}")
    if not correlations:
        raise ScenarioError("need at least one availability profile")
    if any(b <= a for a, b in zip(correlations, correlations[1:])):
        raise ScenarioError("correlation targets must be strictly increasing")
    n_t = curve.n_blocks
    if mean == 1.0:
        return np.ones((len(correlations), n_t))
    weights = curve.lengths
    load_rank = np.argsort(np.argsort(curve.fixed, kind="stable"), kind="stable").astype(float)
    load_z = (load_rank - load_rank.mean()) / (load_rank.std() or 1.0)
    rng = np.random.default_rng(seed)
    a = mean * concentration
    b = (1.0 - mean) * concentration

    profiles = []
    for r, target in enumerate(correlations):
        best = None
        for _ in range(retries):
            base = np.sort(rng.beta(a, b, n_t))
            noise = rng.standard_normal(n_t)

            def build(mix: float) -> tuple[np.ndarray, float]:
                score = mix * load_z + np.sqrt(max(0.0, 1.0 - mix * mix)) * noise
                prof = np.empty(n_t)
                prof[np.argsort(score, kind="stable")] = base
                prof = _recentre(prof, weights, mean)
                return prof, _weighted_corr(prof, curve.fixed, weights)

            lo, hi = -1.0, 1.0
            prof_lo, c_lo = build(lo)
            prof_hi, c_hi = build(hi)
            if not c_lo - tol <= target <= c_hi + tol:
                continue
            cand = min(((prof_lo, c_lo), (prof_hi, c_hi)), key=lambda pc: abs(pc[1] - target))
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                prof, c = build(mid)
                if abs(c - target) < abs(cand[1] - target):
                    cand = (prof, c)
                if c < target:
                    lo = mid
                else:
                    hi = mid
            if best is None or abs(cand[1] - target) < abs(best[1] - target):
                best = cand
            if abs(best[1] - target) <= tol:
                break
        if best is None or abs(best[1] - target) > tol:
            raise ScenarioError(f"availability profile {r}: cannot reach mean {mean} with correlation {target}")
        logger.debug("profile %d: target corr %.3f, achieved %.4f", r, target, best[1])
        profiles.append(best[0])
    return np.array(profiles)


def _grid(lo: float, hi: float, n: int) -> np.ndarray:
    if n == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, n)


@dataclass
class TechnologySpec:
    """Technology parameters before scenario expansion."""

    name: str
    inv_cost: float
    fuel_cost: tuple[float, float] | list[float]
    availability_mean: float = 1.0
    role: str = "dispatchable"


@dataclass
class ScenarioConfig:
    n_fuel: int = 1
    n_profiles: int = 1
    n_demand: int = 1
    shift_up: tuple[float, float] = (0.0, 0.0)
    shift_down: tuple[float, float] = (0.0, 0.0)
    correlations: list[float] = field(default_factory=lambda: [0.0])
    concentration: float = 2.0
    seed: int = 0


def fuel_cost_levels(spec: TechnologySpec, n_fuel: int) -> np.ndarray:
    """Either an explicit list of ``n_fuel`` costs or a [low, high] range spread over ``n_fuel`` levels."""
    costs = list(spec.fuel_cost)
    if len(costs) == n_fuel and n_fuel != 2:
        return np.array(costs, dtype=float)
    if len(costs) == 2:
        return _grid(costs[0], costs[1], n_fuel)
    if len(costs) == 1:
        return np.full(n_fuel, float(costs[0]))
    raise ScenarioError(f"{spec.name}: need {n_fuel} fuel costs or a [low, high] range")


def build_scenario_set(config: ScenarioConfig, curve: DemandCurve,
                       technologies: Sequence[TechnologySpec]) -> ScenarioSet:
    """Expand the scenario configuration into an immutable scenario set.

    Fuel levels and downward shifts both rise with the fuel index, so the downward demand
    shift is positively correlated with fuel cost. Availability profiles are drawn once
    per technology with an availability mean below one.
    """
    n_f, n_r, n_s = config.n_fuel, config.n_profiles, config.n_demand
    if min(n_f, n_r, n_s) < 1:
        raise ScenarioError("scenario counts must be at least 1")
    correlations = list(config.correlations)
    if len(correlations) != n_r:
        raise ScenarioError(f"need {n_r} correlation targets, got {len(correlations)}")
    shift_up = _grid(*config.shift_up, n_s)
    shift_down = _grid(*config.shift_down, n_f)
    if np.any(shift_up < 0) or np.any(shift_down < 0):
        raise ScenarioError("demand shifts must be nonnegative magnitudes")

    techs = []
    for g, spec in enumerate(technologies):
        if spec.availability_mean >= 1.0:
            avail = np.ones((n_r, curve.n_blocks))
        else:
            avail = make_availability_profiles(curve, spec.availability_mean, correlations,
                                               seed=config.seed + 7919 * g, concentration=config.concentration)
        techs.append(Technology(spec.name, spec.inv_cost, fuel_cost_levels(spec, n_f), avail, spec.role))

    prob = np.full((n_f, n_r, n_s), 1.0 / (n_f * n_r * n_s))
    net = curve.fixed[None, None, :] + shift_up[None, :, None] - shift_down[:, None, None]
    bad = np.argwhere(net < 0)
    if bad.size:
        f, s, t = (int(i) for i in bad[0])
        raise ScenarioError(
            f"net fixed demand negative at (f={f}, s={s}, t={t}): "
            f"{curve.fixed[t]:.1f} + {shift_up[s]:.1f} - {shift_down[f]:.1f} < 0"
        )
    return ScenarioSet(curve, tuple(techs), shift_up, shift_down, prob, n_r)
