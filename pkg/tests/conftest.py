from __future__ import annotations

import numpy as np
import pytest

from capeq.scenario import DemandCurve, ScenarioSet, Technology


def make_set(lengths, fixed, techs, *, responsive=0.0, voll=1000.0, shift_up=(0.0,), shift_down=(0.0,),
             n_profiles=1, prob=None) -> ScenarioSet:
    """Small hand-built scenario set. ``techs`` holds (name, inv_cost, fuel_costs, availability, role)."""
    curve = DemandCurve(np.asarray(lengths, float), np.asarray(fixed, float), responsive, voll)
    t = curve.n_blocks
    built = []
    for name, inv, fuel, avail, role in techs:
        a = np.broadcast_to(np.asarray(avail, float), (n_profiles, t)).copy()
        built.append(Technology(name, inv, np.atleast_1d(np.asarray(fuel, float)), a, role))
    n = len(shift_down) * n_profiles * len(shift_up)
    if prob is None:
        prob = np.full(n, 1.0 / n)
    return ScenarioSet(curve, tuple(built), np.asarray(shift_up, float), np.asarray(shift_down, float),
                       np.asarray(prob, float), n_profiles)


@pytest.fixture
def two_tech_set():
    # two blocks, two fuel scenarios, two demand scenarios
    return make_set([100.0, 900.0], [120.0, 60.0],
                    [("base", 200_000.0, [10.0, 20.0], 1.0, "baseload"),
                     ("peak", 50_000.0, [60.0, 90.0], 1.0, "peaker")],
                    responsive=10.0, voll=5000.0, shift_up=(0.0, 10.0), shift_down=(0.0, 5.0))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
