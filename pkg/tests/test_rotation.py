import dataclasses

import numpy as np
import pytest

from boundary import Spending, Stopping, solve_boundaries
from rotation import (
    BernoulliTester,
    Candidate,
    ColumnMarkerStream,
    RotationConfig,
    RotationConfigError,
    ScenarioMarkerStream,
    estimate_operating_probs,
    expected_evaluated,
    expected_rejected,
    expected_true_validated,
    simulate_rotation,
)
from scenario import CaseControlData
from seqtest import Decision, MarkerNotEvaluableError, TestConfig


class ScriptedTester:
    """Replays fixed stage-1 decisions; exceptions in the script are raised."""

    min_per_stratum = 0

    def __init__(self, stage1_script, stage2_decision=Decision.ACCEPT_FINAL, useful=False):
        self.stage1_script = list(stage1_script)
        self.stage2_decision = stage2_decision
        self.useful = useful

    def next_marker(self, data, rng):
        return Candidate(data, self.useful)

    def stage1(self, candidate, ids, rng):
        step = self.stage1_script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step

    def stage2(self, candidate, rng):
        return self.stage2_decision

    def fixed(self, candidate, ids, rng):
        return Decision.ACCEPT_FINAL


def _participants(per_stratum=6):
    labels = np.r_[np.ones(per_stratum, dtype=int), np.zeros(per_stratum, dtype=int)]
    return CaseControlData(markers=np.zeros((labels.size, 1)), labels=labels)


def _group_charges(outcome, kappa):
    charges = np.zeros(kappa, dtype=int)
    for entry in outcome.ledger_history:
        charges += np.asarray(entry.units_by_group)
    return charges


def test_unfundable_continuation_ends_rotation():
    tester = ScriptedTester([Decision.ACCEPT] * 4 + [Decision.CONTINUE])
    config = RotationConfig(V=2, kappa=3, tester=tester)
    outcome = simulate_rotation(_participants(), config, np.random.default_rng(0))

    assert outcome.n_star == 4
    assert outcome.incomplete == 1
    assert outcome.fixed_sample_tests == 2
    assert outcome.n_evaluated_total == 6
    assert np.all(outcome.units_remaining == 0)
    assert [e.outcome for e in outcome.ledger_history][-3:] == [
        "incomplete",
        "accept_final",
        "accept_final",
    ]
    incomplete, retest, tail = outcome.ledger_history[-3:]
    assert retest.group == incomplete.group
    assert retest.stage_reached == 0
    assert retest.units_by_group == (0, 0, 0)
    assert tail.group == -1
    assert tail.stage_reached == 0


def test_without_tail_phase_units_are_left():
    tester = ScriptedTester([Decision.ACCEPT] * 4 + [Decision.CONTINUE])
    config = RotationConfig(V=2, kappa=3, tester=tester, tail_phase=False)
    outcome = simulate_rotation(_participants(), config, np.random.default_rng(0))
    assert outcome.fixed_sample_tests == 0
    assert outcome.n_evaluated_total == 4
    assert outcome.units_remaining.sum() == 4


def test_incomplete_marker_is_retested_on_its_stage1_group():
    # with two groups the last stage-1 group spends its final unit, leaving no tail
    tester = ScriptedTester([Decision.ACCEPT, Decision.CONTINUE])
    config = RotationConfig(V=1, kappa=2, tester=tester)
    outcome = simulate_rotation(_participants(), config, np.random.default_rng(5))
    assert outcome.n_star == 1
    assert outcome.incomplete == 1
    assert outcome.fixed_sample_tests == 1
    assert outcome.n_evaluated_total == 2
    assert np.all(outcome.units_remaining == 0)


@pytest.mark.parametrize("p", [0.0, 0.3, 0.7, 1.0])
@pytest.mark.parametrize("V, kappa", [(3, 2), (2, 3), (4, 4)])
def test_ledger_is_conserved(p, V, kappa):
    data = _participants(8).with_groups(kappa, seed=3)
    sizes = np.bincount(data.group_id, minlength=kappa)
    config = RotationConfig(V=V, kappa=kappa, tester=BernoulliTester(p), tail_phase=False)
    outcome = simulate_rotation(data, config, np.random.default_rng(6))
    consumed = int(sizes @ _group_charges(outcome, kappa))
    assert consumed + outcome.units_remaining.sum() == V * data.n
    assert outcome.units_remaining.min() >= 0


def test_continuation_charges_every_group():
    tester = ScriptedTester([Decision.CONTINUE] * 2, stage2_decision=Decision.REJECT_FINAL)
    config = RotationConfig(V=2, kappa=2, tester=tester)
    outcome = simulate_rotation(_participants(), config, np.random.default_rng(1))
    assert outcome.n_star == 2
    assert outcome.n_u_star == 2
    assert outcome.n_u_t_star == 0
    assert all(entry.units_by_group == (1, 1) for entry in outcome.ledger_history)


def test_not_evaluable_marker_is_not_counted():
    error = MarkerNotEvaluableError(1, ValueError("flat scores"))
    tester = ScriptedTester([error, Decision.ACCEPT])
    config = RotationConfig(V=1, kappa=2, tester=tester)
    outcome = simulate_rotation(_participants(), config, np.random.default_rng(2))
    assert outcome.n_star == 1
    assert outcome.not_evaluable == 1
    assert outcome.ledger_history[0].outcome == "not_evaluable"


@pytest.mark.parametrize("V, kappa", [(1, 2), (3, 2), (2, 3), (4, 5)])
def test_always_stopping_evaluates_kappa_v_markers(V, kappa):
    config = RotationConfig(V=V, kappa=kappa, tester=BernoulliTester(1.0))
    outcome = simulate_rotation(_participants(10), config, np.random.default_rng(3))
    assert outcome.n_star == kappa * V
    assert outcome.incomplete == 0
    assert expected_evaluated(1.0, V, kappa) == pytest.approx(kappa * V)


@pytest.mark.parametrize("V, kappa", [(1, 2), (3, 2), (2, 3), (4, 5)])
def test_never_stopping_evaluates_v_markers(V, kappa):
    config = RotationConfig(V=V, kappa=kappa, tester=BernoulliTester(0.0))
    outcome = simulate_rotation(_participants(10), config, np.random.default_rng(4))
    assert outcome.n_star == V
    assert outcome.fixed_sample_tests == 0
    assert expected_evaluated(0.0, V, kappa) == pytest.approx(V)


def test_ledger_charges_match_units_spent():
    config = RotationConfig(V=5, kappa=3, tester=BernoulliTester(0.4, gamma=0.5))
    data = _participants(9).with_groups(3, seed=7)
    outcome = simulate_rotation(data, config, np.random.default_rng(5))
    charges = _group_charges(outcome, 3)
    for g in range(3):
        remaining = outcome.units_remaining[data.group_id == g]
        assert np.all(remaining == remaining[0])
        assert charges[g] == 5 - remaining[0]
    assert np.all(outcome.units_remaining >= 0)


def test_rotation_is_deterministic():
    config = RotationConfig(V=4, kappa=3, tester=BernoulliTester(0.5, gamma=0.3))
    first = simulate_rotation(_participants(), config, np.random.default_rng(11))
    second = simulate_rotation(_participants(), config, np.random.default_rng(11))
    assert first.ledger_history == second.ledger_history


@pytest.mark.parametrize("p", [0.0, 0.2, 0.5, 0.9, 1.0])
def test_expected_evaluated_small_cases(p):
    assert expected_evaluated(p, 1, 2) == pytest.approx(1 + p**2)
    assert expected_evaluated(p, 2, 2) == pytest.approx(2 + 3 * p**2 - 2 * p**3 + p**4)


def test_expected_evaluated_matches_simulation():
    p, V, kappa, runs = 0.3, 3, 3, 3000
    rng = np.random.default_rng(12)
    config = RotationConfig(V=V, kappa=kappa, tester=BernoulliTester(p), tail_phase=False)
    data = _participants()
    counts = [simulate_rotation(data, config, rng).n_star for _ in range(runs)]
    se = np.std(counts, ddof=1) / np.sqrt(runs)
    assert np.mean(counts) == pytest.approx(expected_evaluated(p, V, kappa), abs=4 * se)


def test_expected_evaluated_is_increasing_in_p():
    values = [expected_evaluated(p, 10, 3) for p in np.linspace(0.0, 1.0, 11)]
    assert np.all(np.diff(values) > 0)


@pytest.mark.parametrize("p, V, kappa", [(1.2, 2, 2), (0.5, 0, 2), (0.5, 2, 1)])
def test_expected_evaluated_domain(p, V, kappa):
    with pytest.raises(RotationConfigError):
        expected_evaluated(p, V, kappa)


def test_expected_counts():
    assert expected_rejected(10.0, 0.3) == pytest.approx(3.0)
    assert expected_true_validated(10.0, 0.5, 0.2) == pytest.approx(4.0)
    with pytest.raises(RotationConfigError):
        expected_true_validated(10.0, 0.5, 1.5)


def test_config_validation(correct_scenario):
    boundaries = solve_boundaries(0.05, 0.5, Spending.OBF, Stopping.BOTH)
    test_config = TestConfig(t=0.1, delta0=0.0, stage1_fraction=0.5, boundaries=boundaries)
    stream = ScenarioMarkerStream(correct_scenario)
    RotationConfig(V=2, kappa=2, marker_stream=stream, test_config=test_config).validate()
    for bad in (
        RotationConfig(V=0, kappa=2, tester=BernoulliTester(0.5)),
        RotationConfig(V=2, kappa=1, tester=BernoulliTester(0.5)),
        RotationConfig(V=2, kappa=3, marker_stream=stream, test_config=test_config),
        RotationConfig(V=2, kappa=2),
    ):
        with pytest.raises(RotationConfigError):
            bad.validate()


def test_small_groups_are_rejected(correct_scenario):
    boundaries = solve_boundaries(0.05, 0.5, Spending.OBF, Stopping.BOTH)
    test_config = TestConfig(t=0.1, delta0=0.0, stage1_fraction=0.5, boundaries=boundaries)
    config = RotationConfig(
        V=1, kappa=2, marker_stream=ScenarioMarkerStream(correct_scenario), test_config=test_config
    )
    with pytest.raises(RotationConfigError):
        simulate_rotation(_participants(12), config, np.random.default_rng(0))


def test_bernoulli_tester_bounds():
    with pytest.raises(RotationConfigError):
        BernoulliTester(1.5)


def test_sequential_rotation_on_simulated_panel(strong_scenario):
    boundaries = solve_boundaries(0.05, 0.5, Spending.OBF, Stopping.BOTH)
    test_config = TestConfig(t=0.1, delta0=0.0, stage1_fraction=0.5, boundaries=boundaries)
    stream = ScenarioMarkerStream(strong_scenario)
    rng = np.random.default_rng(6)
    config = RotationConfig(V=1, kappa=2, marker_stream=stream, test_config=test_config)
    outcome = simulate_rotation(stream.participants(rng), config, rng)
    assert 1 <= outcome.n_star <= 2
    assert outcome.n_u_star >= 1
    assert np.all(outcome.units_remaining == 0)


def test_column_stream():
    rng = np.random.default_rng(0)
    labels = np.r_[np.ones(5, dtype=int), np.zeros(5, dtype=int)]
    data = CaseControlData(markers=rng.standard_normal((10, 4)), labels=labels)
    stream = ColumnMarkerStream([0], [2, 3], useful_columns=[3])
    for _ in range(10):
        candidate = stream.next_marker(data, rng)
        column = data.marker_names.index(candidate.data.marker_names[1])
        assert column in (2, 3)
        assert candidate.truly_useful == (column == 3)
        np.testing.assert_array_equal(candidate.data.markers[:, 0], data.markers[:, 0])
    with pytest.raises(RotationConfigError):
        ColumnMarkerStream([0], [])


def test_scenario_stream_keeps_established_markers(correct_scenario):
    stream = ScenarioMarkerStream(correct_scenario, fix_established=True)
    rng = np.random.default_rng(3)
    data = stream.participants(rng)
    candidate = stream.next_marker(data, rng)
    np.testing.assert_array_equal(candidate.data.markers[:, 0], data.markers[:, 0])
    assert not np.array_equal(candidate.data.markers[:, 1], data.markers[:, 1])
    assert candidate.truly_useful is False


def test_scenario_stream_mixture(correct_scenario):
    scenario = dataclasses.replace(
        correct_scenario, mixture_gamma=0.0, mu_alt_components=[1.1, 1.5]
    )
    stream = ScenarioMarkerStream(scenario)
    rng = np.random.default_rng(4)
    data = stream.participants(rng)
    assert all(stream.next_marker(data, rng).truly_useful for _ in range(5))


def test_operating_probs_need_replicates(correct_scenario):
    boundaries = solve_boundaries(0.05, 0.5, Spending.OBF, Stopping.BOTH)
    test_config = TestConfig(t=0.1, delta0=0.0, stage1_fraction=0.5, boundaries=boundaries)
    with pytest.raises(RotationConfigError):
        estimate_operating_probs(correct_scenario, test_config, 50, 1)
