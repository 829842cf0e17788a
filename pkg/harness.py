"""
Experiment harness: operating-characteristic tables, rotation comparisons
and bootstrap rotation analysis of a real panel, with CSV output.
"""

import logging
import dataclasses
import math
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dataclasses_json import dataclass_json

from boundary import BoundarySet, Spending, Stopping, solve_boundaries
from rotation import (
    ColumnMarkerStream,
    RotationConfig,
    RotationConfigError,
    ScenarioMarkerStream,
    SequentialTester,
    estimate_operating_probs,
    expected_evaluated,
    expected_rejected,
    expected_true_validated,
    simulate_rotation,
)
from scenario import (
    CaseControlData,
    ScenarioConfig,
    closed_form_incremental,
    closed_form_roc,
    generate_mvn_panel,
)
from seqtest import (
    Decision,
    DegenerateStatisticError,
    MarkerNotEvaluableError,
    TestConfig,
    TestSpec,
    compute_statistic,
    decide,
    decide_from_statistics,
    select_stage1,
)
from utils import get_int_config, parallel_map, spawn_rng

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

MIN_REPLICATES = 100
DEFAULT_MASTER_SEED = 20240601
EXPERIMENT_KINDS = ("oc_table", "rotation_compare", "bootstrap")


class ExperimentConfigError(ValueError):
    """
    Exception raised when an experiment specification is invalid.
    """

    def __init__(self, message="Invalid experiment specification"):
        self.message = message
        super().__init__(self.message)


@dataclass_json
@dataclass
class DesignSpec:
    """One boundary design: spending family and stopping mode."""

    spending: Spending = Spending.OBF
    stopping: Stopping = Stopping.BOTH
    resolve: bool = False

    @property
    def label(self) -> str:
        label = f"{Spending(self.spending).value}-{Stopping(self.stopping).value}"
        return f"{label}-resolved" if self.resolve else label

    def boundaries(self, alpha: float, info_frac: float) -> BoundarySet:
        return solve_boundaries(alpha, info_frac, self.spending, self.stopping, self.resolve)


@dataclass_json
@dataclass
class ExperimentSpec:
    """Experiment settings, loadable from a JSON document.

    ``scenario_name`` resolves a bundled scenario, with ``scenario_overrides``
    replacing its fields; otherwise ``scenario`` is used as given. Bootstrap
    runs use ``panel_path`` and the named established, candidate and useful
    marker columns instead.
    """

    experiment_kind: str = "oc_table"
    scenario_name: Optional[str] = None
    scenario: Optional[ScenarioConfig] = None
    scenario_overrides: Dict[str, Any] = field(default_factory=dict)
    test: TestSpec = field(default_factory=TestSpec)
    designs: List[DesignSpec] = field(default_factory=lambda: [DesignSpec()])
    replicates: int = field(
        default_factory=lambda: get_int_config("ROC_REPLICATES", 2000)
    )
    parallel_workers: int = field(default_factory=lambda: get_int_config("ROC_WORKERS", 1))
    master_seed: int = field(
        default_factory=lambda: get_int_config("ROC_MASTER_SEED", DEFAULT_MASTER_SEED)
    )
    output_path: str = "-"
    V: int = 10
    kappa: int = 2
    gammas: List[float] = field(default_factory=lambda: [0.0])
    operating_replicates: Optional[int] = None
    fix_established: bool = False
    panel_path: Optional[str] = None
    label_column: str = "label"
    established_columns: List[str] = field(default_factory=list)
    candidate_columns: List[str] = field(default_factory=list)
    useful_columns: List[str] = field(default_factory=list)
    log_transform: bool = False
    info_fracs: List[float] = field(default_factory=lambda: [1.0 / 2.0, 1.0 / 3.0])

    def validate(self) -> None:
        """
        Raises:
            ExperimentConfigError: If the specification is inconsistent.
        """
        if self.experiment_kind not in EXPERIMENT_KINDS:
            raise ExperimentConfigError(
                f"experiment_kind must be one of {', '.join(EXPERIMENT_KINDS)}, "
                f"got '{self.experiment_kind}'."
            )
        if self.replicates < MIN_REPLICATES:
            raise ExperimentConfigError(
                f"replicates must be at least {MIN_REPLICATES}, got {self.replicates}."
            )
        if self.parallel_workers < 1:
            raise ExperimentConfigError("parallel_workers must be at least 1.")
        if not self.designs:
            raise ExperimentConfigError("at least one design is required.")
        if self.experiment_kind == "bootstrap":
            if not self.candidate_columns:
                raise ExperimentConfigError("bootstrap needs at least one candidate column.")
            if not self.established_columns:
                raise ExperimentConfigError("bootstrap needs at least one established column.")
            unknown = set(self.useful_columns) - set(self.candidate_columns)
            if unknown:
                raise ExperimentConfigError(
                    f"useful columns {sorted(unknown)} are not candidate columns."
                )
        elif self.scenario is None and self.scenario_name is None:
            raise ExperimentConfigError("a scenario or scenario_name is required.")
        if self.experiment_kind == "rotation_compare":
            for gamma in self.gammas:
                if not 0.0 <= gamma <= 1.0:
                    raise ExperimentConfigError(f"gamma must lie in [0, 1], got {gamma}.")

    def resolve_scenario(self) -> ScenarioConfig:
        if self.scenario_name is None:
            scenario = self.scenario
        else:
            scenario = ScenarioConfig.from_resource(
                self.scenario_name, **self.scenario_overrides
            )
        scenario.validate()
        return scenario


@dataclass
class OcRow:
    design: str
    scenario: str
    mu_case: str
    delta0: float
    t: float
    n_cases: int
    n_controls: int
    true_value: float
    replicates: int
    not_evaluable: int
    p_reject_stage1: float
    se_reject_stage1: float
    p_accept_stage1: float
    se_accept_stage1: float
    p_continue: float
    se_continue: float
    p_reject_stage2: float
    se_reject_stage2: float
    p_reject: float
    se_reject: float


@dataclass
class RotationRow:
    design: str
    info_frac: float
    gamma: float
    method: str
    e_n_star: float
    se_n_star: float
    e_n_u_star: float
    se_n_u_star: float
    e_n_u_t_star: float
    se_n_u_t_star: float
    p: float
    p_r: float
    p_r_star: float
    replicates: int
    skipped: int


@dataclass
class PlotRow:
    gamma: float
    method: str
    metric: str
    value: float


def binomial_se(p_hat: float, replicates: int) -> float:
    """sqrt(p (1 - p) / R)."""
    if replicates <= 0:
        return math.nan
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / replicates)


def _mean_se(values) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return math.nan, math.nan
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def _true_value(scenario: ScenarioConfig, test: TestConfig) -> float:
    """Closed-form target, available when both strata share a covariance."""
    if not np.allclose(scenario.cov_case, scenario.cov_control):
        return math.nan
    if test.single_panel:
        return closed_form_roc(scenario.mu_case, scenario.cov_case, test.t)
    return closed_form_incremental(
        scenario.mu_case, scenario.cov_case, test.t, test.new_marker_columns
    )


def _oc_replicate(task):
    scenario, config, boundary_sets, master, replicate = task
    rng = spawn_rng(master, replicate)
    panel = generate_mvn_panel(scenario, rng)
    ids = select_stage1(panel.labels, config.stage1_fraction, rng)
    try:
        z1 = compute_statistic(panel, ids, config, stage=1).z
    except (MarkerNotEvaluableError, DegenerateStatisticError) as error:
        logger.warning("Replicate %s not evaluable at stage 1: %s", replicate, error)
        return None, None
    if all(decide(z1, b, 1).terminal for b in boundary_sets):
        return z1, math.nan
    try:
        z2 = compute_statistic(panel, np.arange(panel.n), config, stage=2).z
    except (MarkerNotEvaluableError, DegenerateStatisticError) as error:
        logger.warning("Replicate %s not evaluable at stage 2: %s", replicate, error)
        z2 = None
    return z1, z2


def tabulate_oc(statistics, boundaries: BoundarySet) -> Dict[str, float]:
    """
    Decision rates of one design over per-replicate (Z1, Z2) pairs.

    A pair with Z1 None is not evaluable; a pair with Z2 None is not
    evaluable only when the design continues. Rates are over evaluable
    replicates, so the stage-1 reject, accept and continue rates sum to one.
    """
    decisions = []
    not_evaluable = 0
    for z1, z2 in statistics:
        if z1 is None:
            not_evaluable += 1
            continue
        first = decide(z1, boundaries, 1)
        if first.terminal:
            decisions.append((first, first))
        elif z2 is None:
            not_evaluable += 1
        else:
            decisions.append((first, decide_from_statistics(z1, z2, boundaries)))

    count = len(decisions)
    reject1 = sum(first is Decision.REJECT for first, _ in decisions)
    accept1 = sum(first is Decision.ACCEPT for first, _ in decisions)
    reject2 = sum(final is Decision.REJECT_FINAL for _, final in decisions)
    if count == 0:
        return {"replicates": 0, "not_evaluable": not_evaluable}
    rates = {
        "p_reject_stage1": reject1 / count,
        "p_accept_stage1": accept1 / count,
        "p_continue": (count - reject1 - accept1) / count,
        "p_reject_stage2": reject2 / count,
        "p_reject": (reject1 + reject2) / count,
    }
    table = {"replicates": count, "not_evaluable": not_evaluable}
    for key, value in rates.items():
        table[key] = value
        table[key.replace("p_", "se_", 1)] = binomial_se(value, count)
    return table


def run_oc_experiment(spec: ExperimentSpec) -> List[OcRow]:
    """
    Operating characteristics of every design on one scenario.

    Each replicate draws a fresh panel and a stratified stage-1 subsample
    from its own substream and computes (Z1, Z2) once; every design is then
    applied to the same statistics.
    """
    spec.validate()
    scenario = spec.resolve_scenario()
    config = spec.test.build()
    config.validate(scenario.n_markers)
    boundary_sets = [
        design.boundaries(spec.test.alpha, spec.test.stage1_fraction) for design in spec.designs
    ]

    logger.info(
        "Running %s OC replicates of scenario '%s' for %s designs",
        spec.replicates,
        scenario.name,
        len(spec.designs),
    )
    tasks = [
        (scenario, config, boundary_sets, spec.master_seed, r) for r in range(spec.replicates)
    ]
    statistics = parallel_map(_oc_replicate, tasks, max_workers=spec.parallel_workers)

    rows = []
    true_value = _true_value(scenario, config)
    for design, boundaries in zip(spec.designs, boundary_sets):
        table = tabulate_oc(statistics, boundaries)
        nan_fields = {
            f.name: math.nan
            for f in dataclasses.fields(OcRow)
            if f.name.startswith(("p_", "se_"))
        }
        nan_fields.update(table)
        rows.append(
            OcRow(
                design=design.label,
                scenario=scenario.name,
                mu_case=";".join(f"{m:g}" for m in scenario.mu_case),
                delta0=config.delta0,
                t=config.t,
                n_cases=scenario.n_cases,
                n_controls=scenario.n_controls,
                true_value=true_value,
                **nan_fields,
            )
        )
    return rows


def _rotation_replicate(task):
    stream, test_config, V, kappa, master, keys = task
    rng = spawn_rng(master, *keys)
    data = stream.participants(rng)
    config = RotationConfig(V=V, kappa=kappa, marker_stream=stream, test_config=test_config)
    try:
        outcome = simulate_rotation(data, config, rng)
    except RotationConfigError as error:
        logger.warning("Rotation replicate %s skipped: %s", keys, error)
        return None
    return (
        outcome.n_star,
        outcome.n_u_star,
        outcome.n_u_t_star,
        outcome.n_evaluated_total,
        outcome.n_rejected_total,
        outcome.n_true_rejected_total,
    )


def _default_replicate(task):
    stream, test_config, V, master, keys = task
    rng = spawn_rng(master, *keys)
    data = stream.participants(rng)
    tester = SequentialTester(stream, test_config)
    everyone = np.arange(data.n)
    rejected = true_rejected = 0
    for _ in range(V):
        candidate = tester.next_marker(data, rng)
        try:
            decision = tester.fixed(candidate, everyone, rng)
        except (MarkerNotEvaluableError, DegenerateStatisticError) as error:
            logger.warning("Default-arm marker not evaluable: %s", error)
            continue
        if decision.rejects:
            rejected += 1
            true_rejected += int(candidate.truly_useful)
    return rejected, true_rejected


def _simulated_rows(results, design, info_frac, gamma):
    kept = [r for r in results if r is not None]
    skipped = len(results) - len(kept)
    columns = np.array(kept, dtype=float).reshape(len(kept), 6)
    rows = []
    for method, offset in (("simulated", 0), ("simulated_with_tail", 3)):
        (n, se_n), (u, se_u), (ut, se_ut) = (
            _mean_se(columns[:, offset + k]) for k in range(3)
        )
        rows.append(
            RotationRow(
                design=design.label,
                info_frac=info_frac,
                gamma=gamma,
                method=method,
                e_n_star=n,
                se_n_star=se_n,
                e_n_u_star=u,
                se_n_u_star=se_u,
                e_n_u_t_star=ut,
                se_n_u_t_star=se_ut,
                p=math.nan,
                p_r=math.nan,
                p_r_star=math.nan,
                replicates=len(kept),
                skipped=skipped,
            )
        )
    return rows


def _default_row(results, design_label, info_frac, gamma, V):
    rejected = np.array([r[0] for r in results], dtype=float)
    true_rejected = np.array([r[1] for r in results], dtype=float)
    u, se_u = _mean_se(rejected)
    ut, se_ut = _mean_se(true_rejected)
    return RotationRow(
        design=design_label,
        info_frac=info_frac,
        gamma=gamma,
        method="default",
        e_n_star=float(V),
        se_n_star=0.0,
        e_n_u_star=u,
        se_n_u_star=se_u,
        e_n_u_t_star=ut,
        se_n_u_t_star=se_ut,
        p=math.nan,
        p_r=math.nan,
        p_r_star=math.nan,
        replicates=len(results),
        skipped=0,
    )


def run_rotation_experiment(
    spec: ExperimentSpec, methods: Sequence[str] = ("analytic", "simulated", "default")
) -> List[RotationRow]:
    """
    Rotation comparison over ``spec.gammas`` and ``spec.designs``.

    ``analytic`` applies the expected-count formulas to Monte Carlo
    operating probabilities, ``simulated`` runs the rotation itself (rows
    with and without the tail phase) and ``default`` runs V single-analysis
    tests on every participant.
    """
    spec.validate()
    base = spec.resolve_scenario()
    if not base.mu_alt_components:
        raise ExperimentConfigError("rotation experiments need mu_alt_components.")
    info_frac = 1.0 / spec.kappa
    test_spec = dataclasses.replace(spec.test, stage1_fraction=info_frac)
    operating_replicates = spec.operating_replicates or spec.replicates

    rows = []
    for gi, gamma in enumerate(spec.gammas):
        scenario = dataclasses.replace(base, mixture_gamma=gamma)
        stream = ScenarioMarkerStream(scenario, fix_established=spec.fix_established)
        for di, design in enumerate(spec.designs):
            config = dataclasses.replace(
                test_spec,
                spending=design.spending,
                stopping=design.stopping,
                resolve=design.resolve,
            ).build()
            logger.info("Rotation experiment gamma=%s design=%s", gamma, design.label)

            if "analytic" in methods:
                probs = estimate_operating_probs(
                    scenario,
                    config,
                    operating_replicates,
                    int(spawn_rng(spec.master_seed, gi, di, 0).integers(2**32)),
                    workers=spec.parallel_workers,
                )
                e_n = expected_evaluated(probs.p, spec.V, spec.kappa)
                rows.append(
                    RotationRow(
                        design=design.label,
                        info_frac=info_frac,
                        gamma=gamma,
                        method="analytic",
                        e_n_star=e_n,
                        se_n_star=math.nan,
                        e_n_u_star=expected_rejected(e_n, probs.p_r),
                        se_n_u_star=math.nan,
                        e_n_u_t_star=expected_true_validated(e_n, probs.p_r_star, gamma),
                        se_n_u_t_star=math.nan,
                        p=probs.p,
                        p_r=probs.p_r,
                        p_r_star=probs.p_r_star,
                        replicates=probs.replicates,
                        skipped=probs.excluded,
                    )
                )

            if "simulated" in methods:
                tasks = [
                    (stream, config, spec.V, spec.kappa, spec.master_seed, (gi, di, 1, r))
                    for r in range(spec.replicates)
                ]
                results = parallel_map(_rotation_replicate, tasks, spec.parallel_workers)
                rows.extend(_simulated_rows(results, design, info_frac, gamma))

        if "default" in methods:
            default_config = test_spec.build()
            tasks = [
                (stream, default_config, spec.V, spec.master_seed, (gi, 0, 2, r))
                for r in range(spec.replicates)
            ]
            results = parallel_map(_default_replicate, tasks, spec.parallel_workers)
            rows.append(_default_row(results, "default", info_frac, gamma, spec.V))
    return rows


class _ResampledPanel:
    """Participants of a stratified bootstrap resample of a fixed panel."""

    def __init__(self, panel: CaseControlData, stream: ColumnMarkerStream):
        self.panel = panel
        self.stream = stream

    def participants(self, rng) -> CaseControlData:
        cases = np.flatnonzero(self.panel.labels == 1)
        controls = np.flatnonzero(self.panel.labels == 0)
        ids = np.concatenate(
            [
                rng.choice(cases, size=cases.size, replace=True),
                rng.choice(controls, size=controls.size, replace=True),
            ]
        )
        return self.panel.subset(ids)

    def next_marker(self, data, rng):
        return self.stream.next_marker(data, rng)


def _column_indices(panel: CaseControlData, names: Sequence[str]) -> List[int]:
    missing = [name for name in names if name not in panel.marker_names]
    if missing:
        raise ExperimentConfigError(f"columns {missing} are not markers of the panel.")
    return [panel.marker_names.index(name) for name in names]


def run_bootstrap(panel: CaseControlData, spec: ExperimentSpec) -> List[RotationRow]:
    """
    Bootstrap rotation analysis of a real panel.

    Each replicate resamples cases and controls with replacement, assigns
    rotation groups once and rotates ``spec.V`` candidate markers drawn with
    replacement from the candidate columns, for every stage-1 fraction in
    ``spec.info_fracs`` and every design. Replicates whose groups are too
    small for a stage-1 analysis are skipped and counted.
    """
    spec.validate()
    established = _column_indices(panel, spec.established_columns)
    candidates = _column_indices(panel, spec.candidate_columns)
    useful = _column_indices(panel, spec.useful_columns)
    source = _ResampledPanel(panel, ColumnMarkerStream(established, candidates, useful))

    rows = []
    for li, info_frac in enumerate(spec.info_fracs):
        kappa = round(1.0 / info_frac)
        if not math.isclose(kappa * info_frac, 1.0, abs_tol=1e-9):
            raise ExperimentConfigError(f"stage-1 fraction {info_frac} is not 1/kappa.")
        test_spec = dataclasses.replace(spec.test, stage1_fraction=info_frac)
        for di, design in enumerate(spec.designs):
            config = dataclasses.replace(
                test_spec,
                spending=design.spending,
                stopping=design.stopping,
                resolve=design.resolve,
            ).build()
            logger.info("Bootstrap lambda=%s design=%s", info_frac, design.label)
            tasks = [
                (source, config, spec.V, kappa, spec.master_seed, (li, di, 1, b))
                for b in range(spec.replicates)
            ]
            results = parallel_map(_rotation_replicate, tasks, spec.parallel_workers)
            rows.extend(_simulated_rows(results, design, info_frac, math.nan))

    tasks = [
        (source, spec.test.build(), spec.V, spec.master_seed, (0, 0, 2, b))
        for b in range(spec.replicates)
    ]
    results = parallel_map(_default_replicate, tasks, spec.parallel_workers)
    rows.append(_default_row(results, "default", math.nan, math.nan, spec.V))
    return rows


def plot_data(rows: Sequence[RotationRow]) -> List[PlotRow]:
    """Long-format (gamma, method, metric, value) rows for plotting."""
    long_rows = []
    for row in rows:
        method = f"{row.design}:{row.method}"
        for metric in ("e_n_star", "e_n_u_star", "e_n_u_t_star"):
            long_rows.append(PlotRow(row.gamma, method, metric, getattr(row, metric)))
    return long_rows


def emit_csv(rows, path, row_type=None) -> None:
    """
    Write dataclass rows as UTF-8 CSV with a header, fields in declaration
    order and six significant digits; ``-`` writes to standard output.

    Args:
        rows (list): Dataclass instances of one type.
        path (str): Destination file, or ``-``.
        row_type (type, optional): Row dataclass, needed for a header when
            ``rows`` is empty.
    """
    rows = list(rows)
    row_type = row_type or (type(rows[0]) if rows else None)
    if row_type is None:
        raise ExperimentConfigError("emit_csv needs row_type when there are no rows.")
    columns = [f.name for f in dataclasses.fields(row_type)]
    frame = pd.DataFrame([dataclasses.asdict(row) for row in rows], columns=columns)
    target = sys.stdout if path in (None, "-") else path
    frame.to_csv(
        target, index=False, float_format="%.6g", na_rep="nan", encoding="utf-8"
    )
    if target is not sys.stdout:
        logger.info("Wrote %s rows to %s", len(rows), path)
