import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camel import aet
from camel.aet import ActionKind, AdaptAction, TunerState, decide, significant_degradation, update_utilization
from camel.errors import ConfigError
from camel.model import StreamSpec, StreamSystem, add_private_expert


def warm(state, accs=(0.9,) * 5):
    for a in accs:
        state.record(a)
    return state


@pytest.mark.parametrize("drift,degraded,cooling", list(itertools.product([False, True], repeat=3)))
def test_add_gate_truth_table(drift, degraded, cooling):
    state = warm(TunerState(tau_util=0.1))
    state.cooldown_remaining = 1 if cooling else 0
    acc = 0.5 if degraded else 0.9
    # one healthy expert: pruning cannot interfere
    action = decide(state, drift, acc, [(0, 0.9, 10)])
    expected = ActionKind.ADD if (drift and degraded and not cooling) else ActionKind.NONE
    assert action.kind is expected


def test_degradation_needs_full_history():
    state = TunerState(tau_util=0.1)
    warm(state, [0.9] * 4)
    assert not significant_degradation(state, 0.0)
    state.record(0.9)
    assert significant_degradation(state, 0.85)
    assert not significant_degradation(state, 0.855)  # exactly 0.95 * 0.9 is not below


def test_drift_without_degradation_does_not_add():
    state = warm(TunerState(tau_util=0.1))
    assert decide(state, True, 0.9, [(0, 0.9, 10)]) == aet.NONE


def test_cooldown_blocks_two_windows_after_action():
    state = warm(TunerState(tau_util=0.1))
    assert decide(state, True, 0.1, [(0, 0.9, 10)]).kind is ActionKind.ADD
    assert decide(state, True, 0.1, [(0, 0.9, 10), (1, 0.0, 0)]) == aet.NONE
    assert decide(state, True, 0.1, [(0, 0.9, 10), (1, 0.0, 0)]) == aet.NONE
    assert decide(state, True, 0.05, [(0, 0.9, 10), (1, 0.9, 3)]).kind is ActionKind.ADD


def test_prune_lowest_utilization_past_grace():
    state = TunerState(tau_util=0.1)
    action = decide(state, False, 0.9, [(0, 0.05, 10), (1, 0.02, 1), (2, 0.03, 5), (3, 0.5, 5)])
    # expert 1 is still in its grace period
    assert action == aet.prune(2)
    assert state.cooldown_remaining == 2


def test_prune_ties_go_to_oldest():
    state = TunerState(tau_util=0.1)
    assert decide(state, False, 0.9, [(4, 0.05, 3), (2, 0.05, 8), (7, 0.5, 9)]) == aet.prune(2)


def test_never_prunes_last_expert():
    state = TunerState(tau_util=0.1)
    assert decide(state, False, 0.9, [(0, 0.0, 50)]) == aet.NONE


def test_add_outranks_prune():
    state = warm(TunerState(tau_util=0.1))
    assert decide(state, True, 0.1, [(0, 0.01, 10), (1, 0.99, 10)]).kind is ActionKind.ADD


def test_history_always_records():
    state = TunerState(tau_util=0.1, cooldown_remaining=2)
    decide(state, False, 0.7, [(0, 0.9, 1)])
    assert list(state.perf_history) == [0.7]
    with pytest.raises(ConfigError):
        state.record(1.5)


def test_action_round_trip_through_text():
    for a in (aet.NONE, aet.ADD, aet.prune(3)):
        assert AdaptAction.parse(str(a)) == a
    assert str(aet.prune(3)) == "prune:3"
    assert not aet.NONE.structural and aet.ADD.structural


def test_invalid_tuner_settings():
    with pytest.raises(ConfigError):
        TunerState(tau_util=0.0)
    with pytest.raises(ConfigError):
        TunerState(tau_util=0.1, lookback=0)
    with pytest.raises(ConfigError):
        decide(TunerState(tau_util=0.1), False, 0.5, [])


def test_utilization_is_running_mean_and_ignores_assist_slot():
    s = StreamSystem(StreamSpec(0, 3, 2), 4, 4, 1, hidden=4)
    update_utilization(s.pool, [0.9, 0.1])
    assert s.pool[0].utilization == pytest.approx(0.1)
    update_utilization(s.pool, [0.7, 0.3])
    assert s.pool[0].utilization == pytest.approx(0.2)
    add_private_expert(s)
    assert s.pool[1].utilization == pytest.approx(1 / 3)
    update_utilization(s.pool, [0.2, 0.2, 0.6])
    assert s.pool[0].utilization == pytest.approx((0.2 * 2 + 0.2) / 3)
    assert s.pool[1].utilization == pytest.approx(0.6)
    with pytest.raises(ConfigError):
        update_utilization(s.pool, [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0, 1), st.lists(st.floats(0, 1), min_size=1, max_size=4)),
                min_size=1, max_size=30))
def test_structural_actions_are_spaced_and_pool_stays_positive(steps):
    state = TunerState(tau_util=0.1)
    pool = [[0, 0.5, 0]]  # id, utilization, birth
    next_id, last_action = 1, None
    for t, (drift, acc, utils) in enumerate(steps):
        for e, u in zip(pool, utils):
            e[1] = u
        action = decide(state, drift, acc, [(e[0], e[1], t - e[2]) for e in pool])
        if action.structural:
            assert last_action is None or t - last_action > 2
            last_action = t
        if action.kind is ActionKind.ADD:
            pool.append([next_id, 1 / (len(pool) + 2), t])
            next_id += 1
        elif action.kind is ActionKind.PRUNE:
            pool = [e for e in pool if e[0] != action.expert_id]
        assert len(pool) >= 1


def test_tuners_are_independent():
    a, b = warm(TunerState(tau_util=0.1)), warm(TunerState(tau_util=0.1))
    decide(a, True, 0.1, [(0, 0.9, 10)])
    assert b.cooldown_remaining == 0 and len(b.perf_history) == 5
