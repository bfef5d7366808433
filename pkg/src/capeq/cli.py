"""Command line interface.

    capeq run --config cfg.toml --regime unrestricted3 --beta 0.2 --out runs/
    capeq run --config cfg.toml --regime mandatory_option --beta 0.2 --reference runs/unrestricted3_b0.2.json
    capeq sweep --config cfg.toml --beta 0.2,0.8 --regime unrestricted3,mandatory_option --out runs/
    capeq compare runs/mandatory_option_b0.2.json runs/unrestricted3_b0.2.json
    capeq inspect runs/unrestricted3_b0.2.json

Exit codes: 0 converged, 2 not converged, 3 infeasible, 4 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .config import ConfigError, RunConfig, default_config, load_config
from .dispatch import DispatchInfeasible
from .equilibrium import (ClearingError, ClearingInfeasible, EquilibriumResult, RegimeKind, build_regime,
                          find_equilibrium, load_state, multi_start, reliability_floor, save_state,
                          solve_complete_trading)
from .scenario import DemandFileError, ScenarioError

logger = logging.getLogger("capeq")

EXIT_OK, EXIT_UNCONVERGED, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 2, 3, 4
NEEDS_REFERENCE = (RegimeKind.MANDATORY_OPTION,)


class UsageError(ValueError):
    pass


def _betas(text: str | None) -> list[float | None]:
    if not text:
        return [None]
    try:
        return [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--beta expects comma separated numbers, got {text!r}") from None


def _regimes(text: str | None, cfg: RunConfig) -> list[RegimeKind]:
    names = text.split(",") if text else [cfg.regime]
    try:
        return [RegimeKind(n.strip()) for n in names if n.strip()]
    except ValueError as exc:
        raise UsageError(f"{exc}; choose from {[k.value for k in RegimeKind]}") from None


def _label(kind: RegimeKind, cfg: RunConfig) -> str:
    return f"{kind.value}_b{cfg.risk.generator.beta:g}"


def _starts(scenarios, n: int, seed: int, threads: int, risk) -> list[np.ndarray]:
    base = solve_complete_trading(scenarios, risk.pooled(), threads=threads).capacities
    rng = np.random.default_rng(seed)
    starts = [base]
    for _ in range(n - 1):
        starts.append(base * rng.uniform(0.7, 1.3, base.size))
    return starts


def run_one(cfg: RunConfig, kind: RegimeKind, reference: dict | None = None, starts: int = 1,
            seed: int | None = None) -> list[EquilibriumResult]:
    scenarios = cfg.scenario_set()
    params = cfg.algorithm
    floor = None
    start = None
    credits = None
    if kind in NEEDS_REFERENCE:
        if reference is None:
            raise UsageError(f"{kind.value} needs the state file of an unrestricted run at the same settings "
                             "(--reference); run the unrestricted regime first")
        if reference.get("config_hash") != cfg.config_hash():
            raise UsageError("reference state was produced with different inputs or risk parameters")
        floor = reliability_floor(reference)
        start = np.asarray(reference["capacities"], dtype=float)
        credits = reference.get("credits")
    regime = build_regime(kind, scenarios, cfg.terms, floor=floor, sell_only=cfg.sell_only)
    label = _label(kind, cfg)
    kwargs = dict(reference_credits=credits, config_hash=cfg.config_hash(), seed=cfg.seed)
    if starts <= 1 or kind is RegimeKind.COMPLETE_TRADING:
        res = find_equilibrium(scenarios, regime, cfg.risk, params, start, label=label, **kwargs)
        return [res]
    seeds = _starts(scenarios, starts, cfg.seed if seed is None else seed, params.threads, cfg.risk)
    if start is not None:
        seeds[0] = start
    results, _ = multi_start(scenarios, regime, seeds, cfg.risk, params, **kwargs)
    for i, r in enumerate(results):
        r.label = f"{label}_start{i}"
    return results


def _write(result: EquilibriumResult, out: Path | None, table: report.MetricsTable) -> Path | None:
    if out is None:
        return None
    return save_state(result, out / f"{result.label}.json", {"metrics": table.to_dict()})


def _exit_code(results) -> int:
    return EXIT_OK if all(r.converged for r in results) else EXIT_UNCONVERGED


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else None
    reference = load_state(args.reference) if args.reference else None
    tables, results = [], []
    for beta in _betas(args.beta):
        c = cfg.with_overrides(beta=beta)
        for kind in _regimes(args.regime, cfg):
            for res in run_one(c, kind, reference, args.starts, args.seed):
                table = report.metrics(res)
                if reference is not None and reference.get("metrics") and \
                        reference["metrics"]["config_hash"] == table.config_hash:
                    table = report.compare_metrics(table, report.MetricsTable.from_dict(reference["metrics"]))
                _write(res, out, table)
                tables.append(table)
                results.append(res)
    sys.stdout.write(report.render(tables, args.format, out, "run"))
    return _exit_code(results)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else None
    kinds = _regimes(args.regime, cfg)
    betas = _betas(args.beta)
    tables, results = [], []
    for beta in betas:
        c = cfg.with_overrides(beta=beta)
        baseline = run_one(c, RegimeKind.UNRESTRICTED3)[0]
        base_table = report.metrics(baseline)
        base_state = {"capacities": baseline.capacities.tolist(), "config_hash": baseline.config_hash,
                      "credits": None if baseline.credits is None else baseline.credits.tolist()}
        for kind in kinds:
            if kind is RegimeKind.UNRESTRICTED3:
                res, table = baseline, base_table
            else:
                res = run_one(c, kind, base_state)[0]
                table = report.compare_metrics(report.metrics(res), base_table)
            _write(res, out, table)
            tables.append(table)
            results.append(res)
    sys.stdout.write(report.render(tables, args.format, out, "sweep"))
    return _exit_code(results)


def cmd_compare(args) -> int:
    result, reference = load_state(args.state), load_state(args.reference_state)
    try:
        table = report.MetricsTable.from_dict(result["metrics"])
        ref = report.MetricsTable.from_dict(reference["metrics"])
    except KeyError:
        raise UsageError("state files carry no metrics; they were not written by this tool") from None
    try:
        delta = report.compare_metrics(table, ref)
    except report.ComparisonError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(report.render([ref, delta], args.format, Path(args.out) if args.out else None, "compare"))
    return EXIT_OK if result.get("converged") and reference.get("converged") else EXIT_UNCONVERGED


def cmd_inspect(args) -> int:
    state = load_state(args.state)
    history = state.get("history", [])
    cols = ("outer", "inner", "clearing_residual", "proximity")
    if args.format == "structured":
        import json
        sys.stdout.write(json.dumps([{c: h[c] for c in cols} for h in history], indent=1) + "\n")
    elif args.format == "delimited":
        sys.stdout.write(",".join(cols) + "\n")
        for h in history:
            sys.stdout.write(",".join(repr(h[c]) for c in cols) + "\n")
    else:
        sys.stdout.write(f"{state['label']}  converged={state['converged']}  proximity={state['proximity']:.4f}%\n")
        sys.stdout.write(f"{'outer':>6} {'inner':>6} {'residual MW':>12} {'proximity %':>12}\n")
        for h in history:
            sys.stdout.write(f"{h['outer']:>6d} {h['inner']:>6d} {h['clearing_residual']:>12.4g} "
                             f"{h['proximity']:>12.4g}\n")
    return EXIT_OK if state.get("converged") else EXIT_UNCONVERGED


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "threads", None):
        cfg = replace(cfg, algorithm=replace(cfg.algorithm, threads=args.threads))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capeq", description="Risk-averse capacity equilibria under contract regimes")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--format", choices=sorted(report.FORMATS), default="table")
        p.add_argument("--out", help="output directory for state files and reports")
        if runs:
            p.add_argument("--config", help="TOML config (default: shipped default config)")
            p.add_argument("--regime", help="regime name, or a comma separated list")
            p.add_argument("--beta", help="generator beta, or a comma separated list")
            p.add_argument("--seed", type=int, help="scenario seed override")
            p.add_argument("--threads", type=int, help="worker threads for scenario dispatch")

    p = sub.add_parser("run", help="solve one regime")
    common(p)
    p.add_argument("--starts", type=int, default=1, help="number of starting points")
    p.add_argument("--reference", help="state file of the unrestricted run (mandatory option regime)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="beta grid x regimes, each compared with the unrestricted run")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="compare two state files")
    common(p, runs=False)
    p.add_argument("state")
    p.add_argument("reference_state", metavar="reference")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="show the residual history of a state file")
    common(p, runs=False)
    p.add_argument("state")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DemandFileError, ScenarioError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (ClearingInfeasible, DispatchInfeasible) as exc:
        logger.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    except ClearingError as exc:
        logger.error("%s", exc)
        return EXIT_UNCONVERGED
    except (OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
