from __future__ import annotations

import numpy as np
import pytest

from capeq.contracts import (Contract, ContractKind, arrow_debreu_menu, payout, payout_matrix, payout_vector,
                             risk_premium, sfpfc_weights)
from capeq.dispatch import dispatch_all

from conftest import make_set


@pytest.fixture
def scarce_set():
    # block 0 is scarce (price = voll) when capacity is short
    return make_set([10.0, 90.0], [100.0, 40.0],
                    [("base", 100_000.0, [20.0], 1.0, "baseload"),
                     ("var", 50_000.0, [0.0], [[0.2, 0.8], [0.6, 0.4]], "variable")],
                    voll=3000.0, n_profiles=2, prob=[0.25, 0.75])


def test_call_option_pays_above_strike(scarce_set):
    batch = dispatch_all([50.0, 10.0], scarce_set)
    opt = Contract("o", ContractKind.CALL_OPTION, 1000.0)
    expected = np.maximum(batch.price - 1000.0, 0.0) @ scarce_set.curve.lengths
    np.testing.assert_allclose(payout_vector(opt, batch), expected)
    # scarcity in block 0 only: 10 h * (3000 - 1000)
    assert payout_vector(opt, batch)[0] == pytest.approx(20_000.0)


def test_future_and_capped_future(scarce_set):
    batch = dispatch_all([50.0, 10.0], scarce_set)
    fut = Contract("f", ContractKind.FUTURE, 50.0)
    capped = fut.capped_at(1000.0)
    lengths = scarce_set.curve.lengths
    np.testing.assert_allclose(payout_vector(fut, batch), (batch.price - 50.0) @ lengths)
    np.testing.assert_allclose(payout_vector(capped, batch), (np.minimum(batch.price, 1000.0) - 50.0) @ lengths)
    # option plus capped future replicates the uncapped future when strike equals the cap
    opt = Contract("o", ContractKind.CALL_OPTION, 1000.0)
    np.testing.assert_allclose(payout_vector(opt, batch) + payout_vector(capped, batch), payout_vector(fut, batch))


def test_unit_contingent_follows_profile(scarce_set):
    batch = dispatch_all([50.0, 10.0], scarce_set)
    uc = Contract("u", ContractKind.UNIT_CONTINGENT, 30.0, technology="var")
    lengths = scarce_set.curve.lengths
    avail = scarce_set.technologies[1].availability
    for n in range(len(batch)):
        r = scarce_set.scenario(n)[1]
        assert payout_vector(uc, batch)[n] == pytest.approx((avail[r] * (batch.price[n] - 30.0)) @ lengths)


def test_sfpfc_weights_normalized(two_tech_set):
    w = sfpfc_weights(two_tech_set)
    lengths = two_tech_set.curve.lengths
    np.testing.assert_allclose(w @ lengths, lengths.sum())
    # shape follows fixed load plus shifts
    net = two_tech_set.curve.fixed[None, :] + two_tech_set.net_shift[:, None]
    np.testing.assert_allclose(w / w[:, :1], net / net[:, :1])


def test_sfpfc_zero_demand_rejected():
    scen = make_set([1.0], [0.0], [("a", 1.0, [1.0], 1.0, "x")])
    with pytest.raises(ValueError, match="SFPFC"):
        sfpfc_weights(scen)


def test_arrow_debreu_pays_in_own_scenario(two_tech_set):
    batch = dispatch_all([60.0, 70.0], two_tech_set)
    menu = arrow_debreu_menu(two_tech_set.n_scenarios, 7.0)
    np.testing.assert_array_equal(payout_matrix(menu, batch), 7.0 * np.eye(two_tech_set.n_scenarios))


def test_single_scenario_payout_matches_vector(two_tech_set):
    batch = dispatch_all([60.0, 70.0], two_tech_set)
    menu = [Contract("o", ContractKind.CALL_OPTION, 100.0), Contract("f", ContractKind.FUTURE, 40.0),
            Contract("s", ContractKind.SFPFC, 40.0), Contract("c", ContractKind.FUTURE, 40.0, capped=True, cap=70.0)]
    mat = payout_matrix(menu, batch)
    for n in range(len(batch)):
        for k, c in enumerate(menu):
            assert payout(c, batch[n], two_tech_set) == pytest.approx(mat[k, n])


def test_risk_premium():
    assert risk_premium(12.0, [10.0, 20.0], [0.5, 0.5]) == pytest.approx(-3.0)


@pytest.mark.parametrize("kwargs", [dict(kind=ContractKind.UNIT_CONTINGENT),
                                    dict(kind=ContractKind.CALL_OPTION, capped=True, cap=1.0),
                                    dict(kind=ContractKind.FUTURE, capped=True),
                                    dict(kind=ContractKind.ARROW_DEBREU),
                                    dict(kind=ContractKind.FUTURE, price=-1.0)])
def test_invalid_contracts(kwargs):
    with pytest.raises(ValueError):
        Contract("bad", **kwargs)
