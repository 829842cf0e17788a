"""
Group rotation over a specimen ledger, its closed-form operating
characteristics and a Monte Carlo estimator of the stage-level
probabilities they need.
"""

import logging
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import gammaln, xlogy

from scenario import (
    CaseControlData,
    ScenarioConfig,
    draw_conditional_new_marker,
    generate_mvn_panel,
)
from seqtest import (
    Decision,
    DegenerateStatisticError,
    MarkerNotEvaluableError,
    TestConfig,
    fixed_sample_test,
    run_two_stage,
    select_stage1,
    stage1,
    stage2,
)
from utils import parallel_map, spawn_rng

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

MIN_OPERATING_REPLICATES = 100


class RotationConfigError(ValueError):
    """
    Exception raised when a rotation configuration is invalid.
    """

    def __init__(self, message="Invalid rotation configuration"):
        self.message = message
        super().__init__(self.message)


_NOT_EVALUABLE = (MarkerNotEvaluableError, DegenerateStatisticError)


class Candidate(NamedTuple):
    """One candidate marker measured on every participant."""

    data: CaseControlData
    truly_useful: bool


class ScenarioMarkerStream:
    """Candidate markers drawn from a simulation scenario.

    Under a two-point mixture each candidate is null with probability
    ``mixture_gamma``. By default every candidate comes with a freshly drawn
    panel; with ``fix_established`` the established markers of the
    participants are kept and only the new marker is drawn, from its
    conditional law given them.
    """

    def __init__(self, scenario: ScenarioConfig, fix_established: bool = False):
        scenario.validate()
        self.scenario = scenario
        self.fix_established = fix_established

    def _draw_mean(self, rng):
        if not self.scenario.mixture_active:
            return None, False
        null_marker = rng.random() < self.scenario.mixture_gamma
        return self.scenario.mu_alt_components[0 if null_marker else 1], not null_marker

    def participants(self, rng) -> CaseControlData:
        """An initial panel defining the participants and their labels."""
        return generate_mvn_panel(self.scenario, rng)

    def next_marker(self, data: CaseControlData, rng) -> Candidate:
        new_mean, useful = self._draw_mean(rng)
        if self.fix_established:
            p = self.scenario.n_markers
            established = data.markers[:, : p - 1]
            values = draw_conditional_new_marker(
                established, data.labels, self.scenario, rng, new_mean=new_mean
            )
            panel = dataclasses.replace(
                data, markers=np.column_stack([established, values]), truly_useful=useful
            )
            return Candidate(panel, useful)

        mu = list(self.scenario.mu_case)
        if new_mean is not None:
            mu[self.scenario.new_marker_column] = new_mean
        fresh = generate_mvn_panel(
            dataclasses.replace(self.scenario, mu_case=mu, mixture_gamma=None), rng
        )
        panel = dataclasses.replace(
            data, markers=fresh.markers, marker_names=(), truly_useful=useful
        )
        return Candidate(panel, useful)


class ColumnMarkerStream:
    """Candidate markers sampled with replacement from columns of a panel.

    Each candidate panel holds the established columns followed by one
    candidate column; ``useful_columns`` are the candidates regarded as
    truly useful.
    """

    def __init__(
        self,
        established_columns: Sequence[int],
        candidate_columns: Sequence[int],
        useful_columns: Sequence[int] = (),
    ):
        if not candidate_columns:
            raise RotationConfigError("at least one candidate marker column is required.")
        if not established_columns:
            raise RotationConfigError("at least one established marker column is required.")
        self.established_columns = list(established_columns)
        self.candidate_columns = list(candidate_columns)
        self.useful_columns = set(useful_columns)

    def next_marker(self, data: CaseControlData, rng) -> Candidate:
        column = int(rng.choice(self.candidate_columns))
        useful = column in self.useful_columns
        panel = dataclasses.replace(
            data.columns(self.established_columns + [column]), truly_useful=useful
        )
        return Candidate(panel, useful)


class SequentialTester:
    """Runs the two-stage test on candidate markers from a stream."""

    def __init__(self, stream, test_config: TestConfig):
        self.stream = stream
        self.test_config = test_config
        self._first = None

    @property
    def min_per_stratum(self) -> int:
        return self.test_config.min_per_stratum

    def next_marker(self, data, rng) -> Candidate:
        return self.stream.next_marker(data, rng)

    def stage1(self, candidate: Candidate, ids, rng) -> Decision:
        self._first = stage1(candidate.data, ids, self.test_config)
        return self._first.decision

    def stage2(self, candidate: Candidate, rng) -> Decision:
        return stage2(candidate.data, self.test_config, self._first).decision

    def fixed(self, candidate: Candidate, ids, rng) -> Decision:
        return fixed_sample_test(candidate.data, ids, self.test_config).decision


class BernoulliTester:
    """Synthetic decisions with given probabilities; no data are analysed.

    Stage 1 stops with probability ``p`` and a stop is a rejection with
    probability ``reject_given_stop``. Stage 2 and fixed-sample tests reject
    with probability ``reject_stage2``. Candidates are truly useful with
    probability ``1 - gamma``.
    """

    min_per_stratum = 0

    def __init__(self, p: float, reject_given_stop=0.5, reject_stage2=0.5, gamma=0.0):
        for name, value in (
            ("p", p),
            ("reject_given_stop", reject_given_stop),
            ("reject_stage2", reject_stage2),
            ("gamma", gamma),
        ):
            if not 0.0 <= value <= 1.0:
                raise RotationConfigError(f"{name} must lie in [0, 1], got {value}.")
        self.p = p
        self.reject_given_stop = reject_given_stop
        self.reject_stage2 = reject_stage2
        self.gamma = gamma

    def next_marker(self, data, rng) -> Candidate:
        return Candidate(data, bool(rng.random() >= self.gamma))

    def stage1(self, candidate, ids, rng) -> Decision:
        if rng.random() < self.p:
            return Decision.REJECT if rng.random() < self.reject_given_stop else Decision.ACCEPT
        return Decision.CONTINUE

    def stage2(self, candidate, rng) -> Decision:
        return Decision.REJECT_FINAL if rng.random() < self.reject_stage2 else Decision.ACCEPT_FINAL

    def fixed(self, candidate, ids, rng) -> Decision:
        return self.stage2(candidate, rng)


@dataclass
class RotationConfig:
    """Settings of one rotation run.

    ``tester`` defaults to a SequentialTester over ``marker_stream`` with
    ``test_config``.
    """

    V: int
    kappa: int
    marker_stream: Any = None
    test_config: Optional[TestConfig] = None
    seed: int = 0
    tester: Any = None
    tail_phase: bool = True

    def validate(self) -> None:
        """
        Raises:
            RotationConfigError: If an invariant is violated.
        """
        if self.V < 1:
            raise RotationConfigError(f"V must be at least 1, got {self.V}.")
        if self.kappa < 2:
            raise RotationConfigError(f"kappa must be at least 2, got {self.kappa}.")
        if self.tester is None:
            if self.marker_stream is None or self.test_config is None:
                raise RotationConfigError(
                    "a marker stream and a test configuration are required without a tester."
                )
            if not math.isclose(self.test_config.stage1_fraction, 1.0 / self.kappa):
                raise RotationConfigError(
                    f"stage-1 fraction {self.test_config.stage1_fraction} does not match "
                    f"1/kappa for kappa={self.kappa}."
                )

    def resolve_tester(self):
        if self.tester is not None:
            return self.tester
        return SequentialTester(self.marker_stream, self.test_config)


@dataclass(frozen=True)
class LedgerEntry:
    """One marker's pass through the ledger.

    ``group`` is the stage-1 group, or -1 for a tail-phase fixed-sample
    test; ``units_by_group`` is the units charged to each member of each
    group.
    """

    marker_index: int
    group: int
    stage_reached: int
    outcome: str
    truly_useful: bool
    units_by_group: tuple


@dataclass
class RotationOutcome:
    n_star: int = 0
    n_u_star: int = 0
    n_u_t_star: int = 0
    fixed_sample_tests: int = 0
    fixed_sample_rejected: int = 0
    fixed_sample_true_rejected: int = 0
    not_evaluable: int = 0
    incomplete: int = 0
    ledger_history: List[LedgerEntry] = field(default_factory=list)
    units_remaining: Optional[np.ndarray] = None

    @property
    def n_evaluated_total(self) -> int:
        return self.n_star + self.fixed_sample_tests

    @property
    def n_rejected_total(self) -> int:
        return self.n_u_star + self.fixed_sample_rejected

    @property
    def n_true_rejected_total(self) -> int:
        return self.n_u_t_star + self.fixed_sample_true_rejected


def _tally(outcome: RotationOutcome, decision: Decision, useful: bool) -> None:
    outcome.n_star += 1
    if decision.rejects:
        outcome.n_u_star += 1
        if useful:
            outcome.n_u_t_star += 1


def _record(outcome, marker_index, group, stage, result, candidate, charged):
    outcome.ledger_history.append(
        LedgerEntry(
            marker_index, group, stage, result, candidate.truly_useful, tuple(map(int, charged))
        )
    )


def _tally_fixed(outcome: RotationOutcome, decision: Decision, useful: bool) -> None:
    outcome.fixed_sample_tests += 1
    if decision.rejects:
        outcome.fixed_sample_rejected += 1
        if useful:
            outcome.fixed_sample_true_rejected += 1


def _fixed_on_stage1_group(outcome, tester, candidate, groups, g, marker_index, rng):
    # the stage-1 group already holds the measurement; no unit is charged
    no_charge = np.zeros(len(groups), dtype=int)
    try:
        decision = tester.fixed(candidate, groups[g], rng)
    except _NOT_EVALUABLE as error:
        logger.warning("Incomplete marker %s not evaluable: %s", marker_index, error)
        outcome.not_evaluable += 1
        _record(outcome, marker_index, g, 0, "not_evaluable", candidate, no_charge)
        return
    _tally_fixed(outcome, decision, candidate.truly_useful)
    _record(outcome, marker_index, g, 0, decision.value, candidate, no_charge)


def simulate_rotation(data: CaseControlData, config: RotationConfig, rng) -> RotationOutcome:
    """
    Run the group-rotation allocation until the ledger is exhausted.

    While some group holds a unit, a stage-1 group is drawn uniformly among
    those with the most units left and charged one unit. A terminal stage-1
    decision counts the marker. A continuation is funded only if every other
    group still holds a unit; those groups are then charged and the marker
    is tested at stage 2 on everyone. An unfundable continuation is recorded
    as incomplete, is not counted in n* and ends the rotation; with the tail
    phase on, that marker is then given a fixed-sample test on its stage-1
    group. Leftover units are spent on fixed-sample tests over every
    participant with a unit while the minimum cases and controls remain.

    Args:
        data (CaseControlData): Participants; groups are assigned here unless
            ``data`` already carries ``kappa`` groups.
        config (RotationConfig): The run settings.
        rng (numpy.random.Generator): The run's generator.

    Returns:
        RotationOutcome: Counts and the ledger history.
    """
    config.validate()
    tester = config.resolve_tester()
    kappa, V = config.kappa, config.V

    if data.n_groups != kappa:
        data = data.with_groups(kappa, int(rng.integers(2**32)))
    groups = [np.flatnonzero(data.group_id == g) for g in range(kappa)]
    for g, members in enumerate(groups):
        labels = data.labels[members]
        if min(labels.sum(), labels.size - labels.sum()) < tester.min_per_stratum:
            raise RotationConfigError(
                f"group {g} has fewer than {tester.min_per_stratum} cases or controls."
            )

    ledger = np.full(data.n, V, dtype=int)
    group_units = np.full(kappa, V, dtype=int)
    outcome = RotationOutcome()
    marker_index = 0

    while group_units.max() >= 1:
        candidates = np.flatnonzero(group_units == group_units.max())
        g = int(rng.choice(candidates))
        candidate = tester.next_marker(data, rng)
        charged = np.zeros(kappa, dtype=int)
        ledger[groups[g]] -= 1
        group_units[g] -= 1
        charged[g] = 1

        try:
            decision = tester.stage1(candidate, groups[g], rng)
        except _NOT_EVALUABLE as error:
            logger.warning("Marker %s not evaluable at stage 1: %s", marker_index, error)
            outcome.not_evaluable += 1
            _record(outcome, marker_index, g, 1, "not_evaluable", candidate, charged)
            marker_index += 1
            continue

        if decision.terminal:
            _tally(outcome, decision, candidate.truly_useful)
            _record(outcome, marker_index, g, 1, decision.value, candidate, charged)
            marker_index += 1
            continue

        others = [h for h in range(kappa) if h != g]
        if (group_units[others] < 1).any():
            outcome.incomplete += 1
            _record(outcome, marker_index, g, 1, "incomplete", candidate, charged)
            if config.tail_phase:
                _fixed_on_stage1_group(outcome, tester, candidate, groups, g, marker_index, rng)
            marker_index += 1
            break

        for h in others:
            ledger[groups[h]] -= 1
            group_units[h] -= 1
            charged[h] = 1
        try:
            decision = tester.stage2(candidate, rng)
        except _NOT_EVALUABLE as error:
            logger.warning("Marker %s not evaluable at stage 2: %s", marker_index, error)
            outcome.not_evaluable += 1
            _record(outcome, marker_index, g, 2, "not_evaluable", candidate, charged)
            marker_index += 1
            continue
        _tally(outcome, decision, candidate.truly_useful)
        _record(outcome, marker_index, g, 2, decision.value, candidate, charged)
        marker_index += 1

    while config.tail_phase:
        ids = np.flatnonzero(ledger >= 1)
        n_cases = int(data.labels[ids].sum())
        if ids.size == 0 or min(n_cases, ids.size - n_cases) < max(tester.min_per_stratum, 1):
            break
        candidate = tester.next_marker(data, rng)
        ledger[ids] -= 1
        charged = tuple(int(np.isin(members, ids).any()) for members in groups)
        try:
            decision = tester.fixed(candidate, ids, rng)
        except _NOT_EVALUABLE as error:
            logger.warning("Tail marker %s not evaluable: %s", marker_index, error)
            outcome.not_evaluable += 1
            _record(outcome, marker_index, -1, 0, "not_evaluable", candidate, charged)
            marker_index += 1
            continue
        _tally_fixed(outcome, decision, candidate.truly_useful)
        _record(outcome, marker_index, -1, 0, decision.value, candidate, charged)
        marker_index += 1

    outcome.units_remaining = ledger
    return outcome


def expected_evaluated(p: float, V: int, kappa: int) -> float:
    """
    Expected number of markers evaluated by the rotation when every
    stage-1 analysis stops with probability p.

    E(n*) = V + sum_{i=0}^{V} (k-1) i C(V+(k-1)i, ki) p^{ki} (1-p)^{V-i}
              + sum_{i=0}^{V-1} sum_{j=0}^{k-2} ((k-1)i+j)
                    C(V+(k-1)i+j, ki+j+1) p^{ki+j+1} (1-p)^{V-i}

    Terms are formed in log space and summed with math.fsum.

    Raises:
        RotationConfigError: For p outside [0, 1], V < 1 or kappa < 2.
    """
    if not 0.0 <= p <= 1.0:
        raise RotationConfigError(f"p must lie in [0, 1], got {p}.")
    if V < 1 or kappa < 2:
        raise RotationConfigError(f"need V >= 1 and kappa >= 2, got V={V}, kappa={kappa}.")

    def term(coefficient, n, k, p_power, q_power):
        if coefficient == 0:
            return 0.0
        log_value = (
            math.log(coefficient)
            + gammaln(n + 1)
            - gammaln(k + 1)
            - gammaln(n - k + 1)
            + xlogy(p_power, p)
            + xlogy(q_power, 1.0 - p)
        )
        return math.exp(log_value) if np.isfinite(log_value) else 0.0

    terms = [float(V)]
    for i in range(V + 1):
        terms.append(
            term((kappa - 1) * i, V + (kappa - 1) * i, kappa * i, kappa * i, V - i)
        )
    for i in range(V):
        for j in range(kappa - 1):
            terms.append(
                term(
                    (kappa - 1) * i + j,
                    V + (kappa - 1) * i + j,
                    kappa * i + j + 1,
                    kappa * i + j + 1,
                    V - i,
                )
            )
    return math.fsum(terms)


def expected_rejected(e_n_star: float, p_r: float) -> float:
    """E(n_u*) = E(n*) p_r."""
    if not 0.0 <= p_r <= 1.0:
        raise RotationConfigError(f"p_r must lie in [0, 1], got {p_r}.")
    if e_n_star < 0:
        raise RotationConfigError(f"E(n*) must be non-negative, got {e_n_star}.")
    return e_n_star * p_r


def expected_true_validated(e_n_star: float, p_r_star: float, gamma: float) -> float:
    """E(n_u^t*) = E(n*) p_r* (1 - gamma)."""
    if not 0.0 <= gamma <= 1.0:
        raise RotationConfigError(f"gamma must lie in [0, 1], got {gamma}.")
    return expected_rejected(e_n_star, p_r_star) * (1.0 - gamma)


@dataclass(frozen=True)
class OperatingProbs:
    """Stage-level probabilities feeding the expected-count formulas.

    ``p`` is the stage-1 stopping probability and ``p_r`` the overall
    rejection probability under the marker mixture; ``p_r_star`` is the
    rejection probability for a useful marker.
    """

    p: float
    p_r: float
    p_r_star: float
    gamma: float
    se_p: float = 0.0
    se_p_r: float = 0.0
    se_p_r_star: float = 0.0
    replicates: int = 0
    excluded: int = 0


class _ArmTally(NamedTuple):
    stopped: bool
    rejected: bool


def _arm_outcome(scenario: ScenarioConfig, test_config: TestConfig, rng) -> Optional[_ArmTally]:
    panel = generate_mvn_panel(scenario, rng)
    ids = select_stage1(panel.labels, test_config.stage1_fraction, rng)
    try:
        result = run_two_stage(panel, ids, test_config)
    except _NOT_EVALUABLE as error:
        logger.warning("Operating-probability replicate excluded: %s", error)
        return None
    return _ArmTally(result.stage1.decision.terminal, result.rejected)


def _operating_replicate(task):
    scenario, test_config, master, replicate, arms = task
    tallies = {}
    for arm_index, (arm, mean) in enumerate(arms):
        mu = list(scenario.mu_case)
        if mean is not None:
            mu[scenario.new_marker_column] = mean
        arm_scenario = dataclasses.replace(scenario, mu_case=mu, mixture_gamma=None)
        arm_rng = spawn_rng(master, replicate, arm_index)
        tallies[arm] = _arm_outcome(arm_scenario, test_config, arm_rng)
    return tallies


def _rate(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    rate = float(values.mean())
    return rate, math.sqrt(rate * (1.0 - rate) / values.size)


def estimate_operating_probs(
    scenario: ScenarioConfig,
    test_config: TestConfig,
    replicates: int,
    rng,
    workers: int = 1,
) -> OperatingProbs:
    """
    Monte Carlo estimates of p, p_r and p_r*.

    Under a two-point mixture the null and useful arms are simulated on
    separate panels each replicate; p and p_r are the gamma-weighted
    averages of the arm rates and p_r* is the useful-arm rejection rate.
    Replicates with a numerical failure are excluded from the denominators
    and counted.

    Args:
        scenario (ScenarioConfig): Marker law.
        test_config (TestConfig): The two-stage test.
        replicates (int): At least 100.
        rng (numpy.random.Generator or int): Source of the master seed.
        workers (int): Worker processes.

    Returns:
        OperatingProbs: The estimates with binomial standard errors.
    """
    if replicates < MIN_OPERATING_REPLICATES:
        raise RotationConfigError(
            f"replicates must be at least {MIN_OPERATING_REPLICATES}, got {replicates}."
        )
    scenario.validate()
    test_config.validate(scenario.n_markers)
    master = int(rng.integers(2**32)) if isinstance(rng, np.random.Generator) else int(rng)

    if scenario.mixture_active:
        gamma = scenario.mixture_gamma
        null_mean, useful_mean = scenario.mu_alt_components
        arms = []
        if gamma > 0:
            arms.append(("null", null_mean))
        arms.append(("useful", useful_mean))
    else:
        gamma = 0.0
        arms = [("useful", None)]

    tasks = [(scenario, test_config, master, r, arms) for r in range(replicates)]
    results = parallel_map(_operating_replicate, tasks, max_workers=workers)

    stats = {}
    excluded = 0
    for arm, _ in arms:
        tallies = [result[arm] for result in results]
        kept = [tally for tally in tallies if tally is not None]
        excluded += len(tallies) - len(kept)
        stats[arm] = (
            _rate([tally.stopped for tally in kept]),
            _rate([tally.rejected for tally in kept]),
        )

    (p_useful, se_p_useful), (r_useful, se_r_useful) = stats["useful"]
    if "null" in stats:
        (p_null, se_p_null), (r_null, se_r_null) = stats["null"]
    else:
        p_null = se_p_null = r_null = se_r_null = 0.0

    probs = OperatingProbs(
        p=gamma * p_null + (1.0 - gamma) * p_useful,
        p_r=gamma * r_null + (1.0 - gamma) * r_useful,
        p_r_star=r_useful,
        gamma=gamma,
        se_p=math.hypot(gamma * se_p_null, (1.0 - gamma) * se_p_useful),
        se_p_r=math.hypot(gamma * se_r_null, (1.0 - gamma) * se_r_useful),
        se_p_r_star=se_r_useful,
        replicates=replicates,
        excluded=excluded,
    )
    logger.info(
        "Operating probabilities: p=%s p_r=%s p_r*=%s (excluded %s)",
        probs.p,
        probs.p_r,
        probs.p_r_star,
        excluded,
    )
    return probs
