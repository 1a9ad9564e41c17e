"""Client quorum rules, staleness handling, and corruption-schedule checks."""

import pytest

from bmsim.adversary import CorruptionEntry, validate_schedule
from bmsim.errors import ScenarioValidationError
from bmsim.node import Behavior
from bmsim.scenario import long_range_scenario
from bmsim.simulation import run_scenario


def entry(node, at_time=None, retired=False):
    return CorruptionEntry(
        node=node,
        behaviors=(Behavior.STALE_QUORUM,),
        at_time=at_time,
        after_retirement=retired,
    )


# -- schedule validation ---------------------------------------------------------


def test_two_of_four_current_members_rejected():
    configs = [("n0", "n1", "n2", "n3")]
    with pytest.raises(ScenarioValidationError) as err:
        validate_schedule([entry("n0", at_time=5.0), entry("n1", at_time=5.0)], configs)
    assert "f=1" in str(err.value)


def test_one_of_four_accepted():
    configs = [("n0", "n1", "n2", "n3")]
    validate_schedule([entry("n0", at_time=5.0)], configs)


def test_full_old_config_after_retirement_accepted():
    configs = [
        ("n0", "n1", "n2", "n3"),
        ("n1", "n2", "n3", "m0"),
        ("n2", "n3", "m0", "m1"),
        ("n3", "m0", "m1", "m2"),
        ("m0", "m1", "m2", "m3"),
    ]
    entries = [entry(f"n{i}", retired=True) for i in range(4)]
    validate_schedule(entries, configs)


def test_bypass_disables_validation():
    configs = [("n0", "n1", "n2", "n3")]
    validate_schedule(
        [entry("n0", at_time=1.0), entry("n1", at_time=1.0)], configs, bypass=True
    )


# -- long-range scenario generation -------------------------------------------------


def test_generator_refuses_unpublishable_turnover():
    with pytest.raises(ScenarioValidationError) as err:
        long_range_scenario(leaves_per_publish=2)
    assert "unpublishable" in str(err.value)


def test_generator_produces_full_turnover():
    sc = long_range_scenario(mode="with_bms", seed=1)
    ops = [(op.op, op.node) for op in sc.churn]
    assert ops[:4] == [("join", f"m{i}") for i in range(4)]
    assert ops[4:] == [("leave", f"n{i}") for i in range(4)]
    assert len(sc.corruption) == 4


# -- end-to-end attack behavior -------------------------------------------------------


def test_with_registry_client_rejects_forged_quorum():
    result = run_scenario(long_range_scenario(mode="with_bms", seed=11))
    assert result.completed
    assert result.forged_accepted == 0
    assert result.honest_accepted >= 1
    # final configuration is fully disjoint from genesis
    final = result.configs[-1]
    assert set(final.members) == {"m0", "m1", "m2", "m3"}


def test_control_client_accepts_forged_quorum():
    result = run_scenario(long_range_scenario(mode="no_bms", seed=11))
    assert result.completed
    assert result.forged_accepted == 1
    outcome = result.client_outcomes[0]
    assert set(outcome.signers) <= {"n0", "n1", "n2", "n3"}


def test_partial_turnover_below_quorum_still_safe():
    # only one original member retires and is corrupted: a stale client still
    # finds an honest quorum in its cached configuration
    sc = long_range_scenario(mode="no_bms", seed=7)
    sc.churn = sc.churn[:1] + [op for op in sc.churn if op.op == "leave"][:1]
    sc.corruption = sc.corruption[:1]
    sc.validate()
    result = run_scenario(sc)
    assert result.completed
    assert result.forged_accepted == 0
    assert result.honest_accepted == 1
