"""
Two-stage test of H0: ROC_f(t) - ROC_r(t) <= delta0.

Stage 1 fits both working models on a stratified subsample and compares
Z1 with (a1, b1); on continuation stage 2 refits on every participant and
compares Z2 with b2.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional

import numpy as np
from dataclasses_json import dataclass_json
from scipy.stats import norm

import logistic
from boundary import BoundarySet, Spending, Stopping, solve_boundaries
from roc import RocEstimate, RocInputError, panel_roc
from scenario import CaseControlData
from variance import (
    DegenerateSampleError,
    NonFiniteInfluenceError,
    VarianceEstimate,
    panel_variance,
    sigma_components,
)

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

MIN_PER_STRATUM = 10


class TestConfigError(ValueError):
    """
    Exception raised when a test configuration is invalid.
    """

    __test__ = False

    def __init__(self, message="Invalid test configuration"):
        self.message = message
        super().__init__(self.message)


class MarkerNotEvaluableError(RuntimeError):
    """
    Exception raised when a stage cannot be evaluated numerically.

    Attributes:
        stage (int): The stage that failed.
        cause (Exception): The underlying numerical failure.
    """

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.message = f"Stage {stage} not evaluable: {type(cause).__name__}: {cause}"
        super().__init__(self.message)


class DegenerateStatisticError(ArithmeticError):
    """
    Exception raised when the variance of the statistic is zero.
    """

    def __init__(self, message="Variance of the test statistic is zero"):
        self.message = message
        super().__init__(self.message)


class StagePreconditionError(RuntimeError):
    """
    Exception raised when a stage is run out of order or on too few
    participants.
    """

    def __init__(self, message="Stage precondition violated"):
        self.message = message
        super().__init__(self.message)


class Decision(str, Enum):
    REJECT = "reject"
    ACCEPT = "accept"
    CONTINUE = "continue"
    REJECT_FINAL = "reject_final"
    ACCEPT_FINAL = "accept_final"

    @property
    def rejects(self) -> bool:
        return self in (Decision.REJECT, Decision.REJECT_FINAL)

    @property
    def terminal(self) -> bool:
        return self is not Decision.CONTINUE


@dataclass
class TestConfig:
    """Settings of one two-stage test.

    With ``single_panel`` the hypothesis is H0: ROC_f(t) <= delta0 and no
    restricted model is fitted.
    """

    __test__ = False

    t: float
    delta0: float
    stage1_fraction: float
    boundaries: BoundarySet
    new_marker_columns: List[int] = field(default_factory=lambda: [-1])
    single_panel: bool = False
    min_per_stratum: int = MIN_PER_STRATUM

    def validate(self, n_markers: Optional[int] = None) -> None:
        """
        Raises:
            TestConfigError: If an invariant is violated.
        """
        if not 0.0 < self.t < 1.0:
            raise TestConfigError(f"t must lie in (0, 1), got {self.t}.")
        if self.delta0 < 0.0:
            raise TestConfigError(f"delta0 must be non-negative, got {self.delta0}.")
        if self.single_panel and not self.delta0 < 1.0:
            raise TestConfigError(f"single-panel threshold must be below 1, got {self.delta0}.")
        if not 0.0 < self.stage1_fraction < 1.0:
            raise TestConfigError(
                f"stage1_fraction must lie in (0, 1), got {self.stage1_fraction}."
            )
        if not math.isclose(self.boundaries.info_frac, self.stage1_fraction, abs_tol=1e-9):
            raise TestConfigError(
                f"boundaries were solved for lambda={self.boundaries.info_frac} but the "
                f"stage-1 fraction is {self.stage1_fraction}."
            )
        if not self.single_panel and not self.new_marker_columns:
            raise TestConfigError("new_marker_columns must name at least one column.")
        if n_markers is not None and not self.single_panel:
            restricted = self.restricted_columns(n_markers)
            if not restricted:
                raise TestConfigError("the restricted panel would have no markers.")

    def restricted_columns(self, n_markers: int) -> List[int]:
        new = {c % n_markers for c in self.new_marker_columns}
        return [j for j in range(n_markers) if j not in new]


@dataclass_json
@dataclass
class TestSpec:
    """Serializable test settings; ``build`` solves the boundaries."""

    __test__ = False

    t: float = 0.1
    delta0: float = 0.0
    stage1_fraction: float = 0.5
    stage1_fraction_controls: Optional[float] = None
    alpha: float = 0.05
    spending: Spending = Spending.OBF
    stopping: Stopping = Stopping.BOTH
    resolve: bool = False
    new_marker_columns: List[int] = field(default_factory=lambda: [-1])
    single_panel: bool = False

    def validate(self) -> None:
        if (
            self.stage1_fraction_controls is not None
            and not math.isclose(self.stage1_fraction_controls, self.stage1_fraction)
        ):
            raise TestConfigError(
                "stage-1 fractions must be equal for cases and controls, got "
                f"{self.stage1_fraction} and {self.stage1_fraction_controls}."
            )

    def build(self) -> TestConfig:
        self.validate()
        config = TestConfig(
            t=self.t,
            delta0=self.delta0,
            stage1_fraction=self.stage1_fraction,
            boundaries=solve_boundaries(
                self.alpha, self.stage1_fraction, self.spending, self.stopping, self.resolve
            ),
            new_marker_columns=list(self.new_marker_columns),
            single_panel=self.single_panel,
        )
        config.validate()
        return config


@dataclass(frozen=True, eq=False)
class StageResult:
    stage: int
    z: float
    roc_full: RocEstimate
    roc_restricted: Optional[RocEstimate]
    variance: VarianceEstimate
    decision: Decision
    units_consumed: int

    @property
    def estimate(self) -> float:
        """ROC_f - ROC_r, or ROC_f alone for a single-panel test."""
        if self.roc_restricted is None:
            return self.roc_full.value
        return self.roc_full.value - self.roc_restricted.value

    def to_row(self) -> dict:
        return {
            "stage": self.stage,
            "z": self.z,
            "roc_full": self.roc_full.value,
            "roc_restricted": (
                math.nan if self.roc_restricted is None else self.roc_restricted.value
            ),
            "estimate": self.estimate,
            "sigma": self.variance.sigma_delta,
            "decision": self.decision.value,
            "units_consumed": self.units_consumed,
        }


class TwoStageResult(NamedTuple):
    stage1: StageResult
    stage2: Optional[StageResult]

    @property
    def final(self) -> StageResult:
        return self.stage2 if self.stage2 is not None else self.stage1

    @property
    def rejected(self) -> bool:
        return self.final.decision.rejects

    @property
    def units_consumed(self) -> int:
        return self.stage1.units_consumed + (
            self.stage2.units_consumed if self.stage2 is not None else 0
        )


class Statistic(NamedTuple):
    z: float
    roc_full: RocEstimate
    roc_restricted: Optional[RocEstimate]
    variance: VarianceEstimate


def select_stage1(labels, fraction: float, rng) -> np.ndarray:
    """
    Stratified stage-1 subsample: floor(fraction N1) cases and
    floor(fraction N0) controls drawn without replacement.

    Returns:
        numpy.ndarray: Sorted participant indices.
    """
    if not 0.0 < fraction < 1.0:
        raise TestConfigError(f"stage-1 fraction must lie in (0, 1), got {fraction}.")
    labels = np.asarray(labels)
    chosen = []
    for stratum in (1, 0):
        members = np.flatnonzero(labels == stratum)
        take = math.floor(fraction * members.size + 1e-9)
        chosen.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


def _fit(panel, labels):
    model = logistic.fit(panel, labels)
    if not model.converged:
        raise logistic.LogisticFitError(
            f"fit did not converge within {model.iterations} iterations."
        )
    return model


def compute_statistic(
    data: CaseControlData, ids, config: TestConfig, stage: int = 1
) -> Statistic:
    """
    Fit the working models on participants ``ids`` and form
    Z = (estimate - delta0) / sqrt(Sigma_hat).

    Raises:
        StagePreconditionError: If ``ids`` hold fewer than the minimum cases
            or controls.
        MarkerNotEvaluableError: If a fit or the variance estimate fails.
        DegenerateStatisticError: If Sigma_hat is zero.
    """
    ids = np.asarray(ids, dtype=int)
    labels = data.labels[ids]
    n_cases = int(labels.sum())
    n_controls = labels.size - n_cases
    if min(n_cases, n_controls) < config.min_per_stratum:
        raise StagePreconditionError(
            f"stage {stage} needs at least {config.min_per_stratum} cases and controls, "
            f"got {n_cases} and {n_controls}."
        )
    panel = data.markers[ids]

    try:
        fit_full = _fit(panel, labels)
        roc_full = panel_roc(fit_full, panel, labels, config.t)
        if config.single_panel:
            roc_restricted = None
            variance = panel_variance(fit_full, panel, labels, config.t)
            estimate = roc_full.value
        else:
            restricted = config.restricted_columns(data.n_markers)
            fit_restr = _fit(panel[:, restricted], labels)
            roc_restricted = panel_roc(fit_restr, panel[:, restricted], labels, config.t)
            variance = sigma_components(
                fit_full, fit_restr, panel, labels, config.t, restricted_columns=restricted
            )
            estimate = roc_full.value - roc_restricted.value
    except (
        logistic.LogisticFitError,
        DegenerateSampleError,
        NonFiniteInfluenceError,
        RocInputError,
        np.linalg.LinAlgError,
    ) as error:
        raise MarkerNotEvaluableError(stage, error) from error

    scale = max(variance.sigma_f + variance.sigma_r, np.finfo(float).tiny)
    if variance.sigma_delta <= 1e-12 * scale:
        raise DegenerateStatisticError(
            f"Sigma_hat = {variance.sigma_delta:.3g} at stage {stage}; "
            "the full and restricted combinations coincide."
        )
    z = (estimate - config.delta0) / math.sqrt(variance.sigma_delta)
    return Statistic(z=z, roc_full=roc_full, roc_restricted=roc_restricted, variance=variance)


def decide(z: float, boundaries: BoundarySet, stage: int) -> Decision:
    """Apply the stage's boundaries to a statistic."""
    if stage == 1:
        if z >= boundaries.b1:
            return Decision.REJECT
        if z <= boundaries.a1:
            return Decision.ACCEPT
        return Decision.CONTINUE
    return Decision.REJECT_FINAL if z >= boundaries.b2 else Decision.ACCEPT_FINAL


def stage1(data: CaseControlData, stage1_ids, config: TestConfig) -> StageResult:
    """
    Stage-1 analysis on ``stage1_ids`` only.

    Raises:
        StagePreconditionError, MarkerNotEvaluableError, DegenerateStatisticError
    """
    stage1_ids = np.asarray(stage1_ids, dtype=int)
    stat = compute_statistic(data, stage1_ids, config, stage=1)
    decision = decide(stat.z, config.boundaries, 1)
    logger.debug("Stage 1: Z1=%s decision=%s", stat.z, decision.value)
    return StageResult(
        stage=1,
        z=stat.z,
        roc_full=stat.roc_full,
        roc_restricted=stat.roc_restricted,
        variance=stat.variance,
        decision=decision,
        units_consumed=int(stage1_ids.size),
    )


def stage2(data: CaseControlData, config: TestConfig, stage1_result: StageResult) -> StageResult:
    """
    Stage-2 analysis refitting both models on every participant.

    Raises:
        StagePreconditionError: If stage 1 did not continue.
        MarkerNotEvaluableError, DegenerateStatisticError
    """
    if stage1_result.decision is not Decision.CONTINUE:
        raise StagePreconditionError(
            f"stage 2 requires a stage-1 continuation, got {stage1_result.decision.value}."
        )
    stat = compute_statistic(data, np.arange(data.n), config, stage=2)
    decision = decide(stat.z, config.boundaries, 2)
    logger.debug("Stage 2: Z2=%s decision=%s", stat.z, decision.value)
    return StageResult(
        stage=2,
        z=stat.z,
        roc_full=stat.roc_full,
        roc_restricted=stat.roc_restricted,
        variance=stat.variance,
        decision=decision,
        units_consumed=data.n - stage1_result.units_consumed,
    )


def run_two_stage(data: CaseControlData, stage1_ids, config: TestConfig) -> TwoStageResult:
    """Stage 1, then stage 2 when stage 1 continues."""
    first = stage1(data, stage1_ids, config)
    if first.decision.terminal:
        return TwoStageResult(first, None)
    try:
        second = stage2(data, config, first)
    except MarkerNotEvaluableError as error:
        raise MarkerNotEvaluableError(2, error.cause) from error
    return TwoStageResult(first, second)


def canonical_statistics(data: CaseControlData, stage1_ids, config: TestConfig):
    """
    (Z1, Z2) on nested samples, both computed regardless of the stage-1
    outcome so one replicate can be judged against several designs.
    """
    z1 = compute_statistic(data, stage1_ids, config, stage=1).z
    z2 = compute_statistic(data, np.arange(data.n), config, stage=2).z
    return z1, z2


def fixed_sample_test(data: CaseControlData, ids, config: TestConfig) -> StageResult:
    """
    Single-analysis test on ``ids`` at critical value Phi^-1(1 - alpha).

    Raises:
        StagePreconditionError, MarkerNotEvaluableError, DegenerateStatisticError
    """
    ids = np.asarray(ids, dtype=int)
    stat = compute_statistic(data, ids, config, stage=2)
    critical = float(norm.isf(config.boundaries.alpha))
    decision = Decision.REJECT_FINAL if stat.z >= critical else Decision.ACCEPT_FINAL
    return StageResult(
        stage=2,
        z=stat.z,
        roc_full=stat.roc_full,
        roc_restricted=stat.roc_restricted,
        variance=stat.variance,
        decision=decision,
        units_consumed=int(ids.size),
    )


def decide_from_statistics(z1: float, z2: float, boundaries: BoundarySet) -> Decision:
    """Terminal decision of a two-stage test given both statistics."""
    first = decide(z1, boundaries, 1)
    return first if first.terminal else decide(z2, boundaries, 2)
