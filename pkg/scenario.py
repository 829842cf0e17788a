"""
Case-control panel generation, closed-form ROC and CSV ingestion.
"""

import logging
import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dataclasses_json import dataclass_json
from scipy.stats import norm

from utils import get_scenario_details_by_name

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


class ScenarioConfigError(ValueError):
    """
    Exception raised when a scenario configuration is invalid.

    Args:
        message (str): An optional message to include in the exception.
    """

    def __init__(self, message="Invalid scenario configuration"):
        self.message = message
        super().__init__(self.message)


class ClosedFormDomainError(ValueError):
    """
    Exception raised when the closed-form ROC is evaluated outside (0, 1).
    """

    def __init__(self, message="t must lie strictly between 0 and 1"):
        self.message = message
        super().__init__(self.message)


class PanelFormatError(ValueError):
    """
    Exception raised when a CSV panel does not follow the expected schema.

    Args:
        message (str): Description of the problem, naming the offending row
            when there is one.
    """

    def __init__(self, message="Malformed panel file"):
        self.message = message
        super().__init__(self.message)


@dataclass_json
@dataclass
class ScenarioConfig:
    """Multivariate-normal case-control scenario.

    Controls are drawn from MVN(0, cov_control) and cases from
    MVN(mu_case, cov_case). When ``mixture_gamma`` and ``mu_alt_components``
    are both set, the case mean of ``new_marker_column`` is replaced, per
    panel, by ``mu_alt_components[0]`` (null marker) with probability
    ``mixture_gamma`` and by ``mu_alt_components[1]`` (useful marker) otherwise.
    """

    mu_case: List[float]
    cov_case: List[List[float]]
    cov_control: List[List[float]]
    n_cases: int = 200
    n_controls: int = 200
    mixture_gamma: Optional[float] = None
    mu_alt_components: Optional[List[float]] = None
    new_marker_column: int = -1
    seed: int = 0
    name: str = "custom"

    @classmethod
    def from_resource(cls, name, **overrides):
        """
        Build a scenario from ``resources/scenarios.json``.

        Args:
            name (str): The scenario name.
            **overrides: Field values replacing those of the stored scenario.

        Returns:
            ScenarioConfig: The resolved scenario.

        Raises:
            ScenarioConfigError: If no scenario has that name.
        """
        details, error_message = get_scenario_details_by_name(name)
        if error_message:
            raise ScenarioConfigError(error_message)

        known = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in details.items() if k in known}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @property
    def n_markers(self) -> int:
        return len(self.mu_case)

    @property
    def mixture_active(self) -> bool:
        return self.mixture_gamma is not None and bool(self.mu_alt_components)

    def validate(self) -> None:
        """
        Check the scenario invariants.

        Raises:
            ScenarioConfigError: If any invariant is violated.
        """
        p = self.n_markers
        if p < 1:
            raise ScenarioConfigError("mu_case must contain at least one marker.")
        for label, cov in (("cov_case", self.cov_case), ("cov_control", self.cov_control)):
            matrix = np.asarray(cov, dtype=float)
            if matrix.shape != (p, p):
                raise ScenarioConfigError(
                    f"{label} must be {p}x{p}, got shape {matrix.shape}."
                )
            if not np.allclose(matrix, matrix.T):
                raise ScenarioConfigError(f"{label} must be symmetric.")
        if self.n_cases < 2 or self.n_controls < 2:
            raise ScenarioConfigError(
                "n_cases and n_controls must both be at least 2, got "
                f"{self.n_cases} and {self.n_controls}."
            )
        if self.mixture_gamma is not None and not 0.0 <= self.mixture_gamma <= 1.0:
            raise ScenarioConfigError(
                f"mixture_gamma must lie in [0, 1], got {self.mixture_gamma}."
            )
        if self.mu_alt_components is not None and len(self.mu_alt_components) != 2:
            raise ScenarioConfigError(
                "mu_alt_components must hold exactly two case means (null, useful)."
            )
        if not -p <= self.new_marker_column < p:
            raise ScenarioConfigError(
                f"new_marker_column {self.new_marker_column} out of range for {p} markers."
            )


def _read_only(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class CaseControlData:
    """Labeled marker matrix with rotation bookkeeping.

    Arrays are read-only; derived panels are produced by the ``with_*`` and
    ``subset`` methods.
    """

    markers: np.ndarray
    labels: np.ndarray
    units_remaining: np.ndarray = None
    group_id: np.ndarray = None
    marker_names: Tuple[str, ...] = ()
    truly_useful: Optional[bool] = None

    def __post_init__(self):
        markers = np.array(self.markers, dtype=float, ndmin=2)
        labels = np.asarray(self.labels).astype(int)
        n = labels.shape[0]
        if markers.shape[0] != n:
            raise ScenarioConfigError(
                f"markers have {markers.shape[0]} rows but labels have {n} entries."
            )
        if not np.isin(labels, (0, 1)).all():
            raise ScenarioConfigError("labels must be 0 (control) or 1 (case).")
        if labels.sum() < 1 or labels.sum() == n:
            raise ScenarioConfigError("a panel needs at least one case and one control.")

        units = (
            np.zeros(n, dtype=int)
            if self.units_remaining is None
            else np.array(self.units_remaining, dtype=int)
        )
        if units.shape != (n,) or (units < 0).any():
            raise ScenarioConfigError("units_remaining must hold n non-negative integers.")
        groups = (
            np.zeros(n, dtype=int) if self.group_id is None else np.array(self.group_id, dtype=int)
        )
        names = tuple(self.marker_names) or tuple(f"X{j + 1}" for j in range(markers.shape[1]))
        if len(names) != markers.shape[1]:
            raise ScenarioConfigError("marker_names must name every marker column.")

        object.__setattr__(self, "markers", _read_only(markers))
        object.__setattr__(self, "labels", _read_only(labels))
        object.__setattr__(self, "units_remaining", _read_only(units))
        object.__setattr__(self, "group_id", _read_only(groups))
        object.__setattr__(self, "marker_names", names)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def n_cases(self) -> int:
        return int(self.labels.sum())

    @property
    def n_controls(self) -> int:
        return self.n - self.n_cases

    @property
    def n_markers(self) -> int:
        return self.markers.shape[1]

    @property
    def n_groups(self) -> int:
        return int(self.group_id.max()) + 1

    def subset(self, ids) -> "CaseControlData":
        """Rows ``ids`` of the panel, bookkeeping included."""
        ids = np.asarray(ids, dtype=int)
        return dataclasses.replace(
            self,
            markers=self.markers[ids],
            labels=self.labels[ids],
            units_remaining=self.units_remaining[ids],
            group_id=self.group_id[ids],
        )

    def columns(self, cols: Sequence[int]) -> "CaseControlData":
        """The panel restricted to marker columns ``cols``."""
        cols = list(cols)
        return dataclasses.replace(
            self,
            markers=self.markers[:, cols],
            marker_names=tuple(self.marker_names[c] for c in cols),
        )

    def with_groups(self, kappa: int, seed: int) -> "CaseControlData":
        """The panel with stratified rotation groups assigned."""
        return dataclasses.replace(self, group_id=assign_groups(self.labels, kappa, seed))

    def with_units(self, units: int) -> "CaseControlData":
        """The panel with every participant holding ``units`` specimen units."""
        return dataclasses.replace(self, units_remaining=np.full(self.n, int(units)))


def assign_groups(labels, kappa: int, seed: int) -> np.ndarray:
    """
    Partition participants into ``kappa`` groups stratified by label.

    Each stratum is shuffled and split into ``kappa`` nearly equal parts, so
    per-group case (and control) counts differ by at most one.

    Args:
        labels (array-like): Disease indicators.
        kappa (int): Number of groups.
        seed (int): Seed for the shuffle, independent of marker generation.

    Returns:
        numpy.ndarray: Group index in ``[0, kappa)`` per participant.
    """
    if kappa < 1:
        raise ScenarioConfigError(f"kappa must be positive, got {kappa}.")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    group_id = np.zeros(labels.shape[0], dtype=int)
    for stratum in (1, 0):
        members = rng.permutation(np.flatnonzero(labels == stratum))
        for g, part in enumerate(np.array_split(members, kappa)):
            group_id[part] = g
    return group_id


def _cholesky(cov, label):
    try:
        return np.linalg.cholesky(np.asarray(cov, dtype=float))
    except np.linalg.LinAlgError as error:
        raise ScenarioConfigError(f"{label} is not positive definite.") from error


def generate_mvn_panel(config: ScenarioConfig, rng_seed) -> CaseControlData:
    """
    Draw a case-control panel from the scenario.

    Args:
        config (ScenarioConfig): The scenario.
        rng_seed (int or numpy.random.SeedSequence): Seed of the draw.

    Returns:
        CaseControlData: Cases first, then controls. ``truly_useful`` is set
            when the two-point mixture decided the new marker's case mean.

    Raises:
        ScenarioConfigError: If the config is invalid or a covariance is not
            positive definite.
    """
    config.validate()
    chol_case = _cholesky(config.cov_case, "cov_case")
    chol_control = _cholesky(config.cov_control, "cov_control")
    rng = np.random.default_rng(rng_seed)

    mu = np.asarray(config.mu_case, dtype=float).copy()
    useful = None
    if config.mixture_active:
        null_marker = rng.random() < config.mixture_gamma
        mu[config.new_marker_column] = config.mu_alt_components[0 if null_marker else 1]
        useful = not null_marker

    p = config.n_markers
    cases = mu + rng.standard_normal((config.n_cases, p)) @ chol_case.T
    controls = rng.standard_normal((config.n_controls, p)) @ chol_control.T
    labels = np.r_[np.ones(config.n_cases, dtype=int), np.zeros(config.n_controls, dtype=int)]

    return CaseControlData(
        markers=np.vstack([cases, controls]), labels=labels, truly_useful=useful
    )


def draw_conditional_new_marker(
    established, labels, config: ScenarioConfig, rng, new_mean: Optional[float] = None
) -> np.ndarray:
    """
    Draw the new marker given fixed established markers.

    Within each stratum the new marker follows its conditional normal law
    given the established columns of the same stratum.

    Args:
        established (numpy.ndarray): N x m* established marker values.
        labels (numpy.ndarray): Disease indicators.
        config (ScenarioConfig): The scenario; its ``new_marker_column`` must
            be the last column.
        rng (numpy.random.Generator): Caller-owned generator.
        new_mean (float, optional): Case mean of the new marker; defaults to
            the scenario value.

    Returns:
        numpy.ndarray: The new marker column (length N).
    """
    p = config.n_markers
    new_col = config.new_marker_column % p
    if new_col != p - 1:
        raise ScenarioConfigError("conditional draws require the new marker in the last column.")

    established = np.asarray(established, dtype=float)
    labels = np.asarray(labels)
    mu_case = np.asarray(config.mu_case, dtype=float).copy()
    if new_mean is not None:
        mu_case[new_col] = new_mean

    values = np.empty(labels.shape[0])
    for stratum, mu, cov in (
        (1, mu_case, np.asarray(config.cov_case, dtype=float)),
        (0, np.zeros(p), np.asarray(config.cov_control, dtype=float)),
    ):
        rows = labels == stratum
        cov_ee = cov[:new_col, :new_col]
        cov_ne = cov[new_col, :new_col]
        weights = np.linalg.solve(cov_ee, cov_ne)
        cond_mean = mu[new_col] + (established[rows] - mu[:new_col]) @ weights
        cond_var = cov[new_col, new_col] - cov_ne @ weights
        if cond_var <= 0:
            raise ScenarioConfigError("conditional variance of the new marker is not positive.")
        values[rows] = cond_mean + np.sqrt(cond_var) * rng.standard_normal(rows.sum())
    return values


def closed_form_roc(mu, cov, t: float) -> float:
    """
    ROC(t) of the optimal linear score under a common-covariance normal model.

    Returns Phi(sqrt(mu' cov^-1 mu) + Phi^-1(t)).

    Raises:
        ClosedFormDomainError: If t is not in (0, 1).
        ScenarioConfigError: If cov is not positive definite.
    """
    if not 0.0 < t < 1.0:
        raise ClosedFormDomainError(f"t must lie strictly between 0 and 1, got {t}.")
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    _cholesky(cov, "cov")
    separation = float(mu @ np.linalg.solve(cov, mu))
    return float(norm.cdf(np.sqrt(separation) + norm.ppf(t)))


def closed_form_incremental(mu, cov, t: float, new_marker_columns: Sequence[int]) -> float:
    """Closed-form ROC_f(t) - ROC_r(t), dropping ``new_marker_columns`` for the restricted panel."""
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    dropped = {int(c) % mu.shape[0] for c in new_marker_columns}
    keep = [j for j in range(mu.shape[0]) if j not in dropped]
    return closed_form_roc(mu, cov, t) - closed_form_roc(mu[keep], cov[np.ix_(keep, keep)], t)


def oracle_scores(markers, mu, cov) -> np.ndarray:
    """Scores X' cov^-1 mu, the optimal combination under the correct model."""
    return np.asarray(markers, dtype=float) @ np.linalg.solve(
        np.asarray(cov, dtype=float), np.asarray(mu, dtype=float)
    )


def load_csv(
    path,
    label_column: str,
    marker_columns: Sequence[str],
    log_transform: Union[bool, Sequence[str]] = False,
) -> CaseControlData:
    """
    Load a case-control panel from a UTF-8 CSV file with a header row.

    Args:
        path (str): Path to the file.
        label_column (str): Column holding the 0/1 disease indicator.
        marker_columns (list): Marker columns, in panel order.
        log_transform (bool or list): True to take the natural log of every
            marker column, or the names of the columns to transform.

    Returns:
        CaseControlData: The panel.

    Raises:
        PanelFormatError: On missing columns, non-binary labels, missing or
            non-numeric marker values, or non-positive values under the log
            transform. Row numbers are 0-based data rows.
    """
    frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    marker_columns = list(marker_columns)
    missing_columns = [c for c in [label_column, *marker_columns] if c not in frame.columns]
    if missing_columns:
        raise PanelFormatError(f"columns not found in '{path}': {missing_columns}")
    if not marker_columns:
        raise PanelFormatError("at least one marker column is required.")

    labels = pd.to_numeric(frame[label_column].str.strip(), errors="coerce")
    bad_labels = ~labels.isin([0, 1])
    if bad_labels.any():
        row = int(np.flatnonzero(bad_labels.to_numpy())[0])
        raise PanelFormatError(
            f"label column '{label_column}' must be 0 or 1; row {row} holds "
            f"'{frame[label_column].iloc[row]}'."
        )

    if log_transform is True:
        log_columns = set(marker_columns)
    else:
        log_columns = set(log_transform or ())
    unknown = log_columns - set(marker_columns)
    if unknown:
        raise PanelFormatError(f"log_transform names non-marker columns: {sorted(unknown)}")

    values = np.empty((len(frame), len(marker_columns)))
    for j, column in enumerate(marker_columns):
        raw = frame[column].str.strip()
        empty = raw == ""
        if empty.any():
            row = int(np.flatnonzero(empty.to_numpy())[0])
            raise PanelFormatError(f"missing value in column '{column}' at row {row}.")
        numeric = pd.to_numeric(raw, errors="coerce")
        if numeric.isna().any():
            row = int(np.flatnonzero(numeric.isna().to_numpy())[0])
            raise PanelFormatError(
                f"non-numeric value '{raw.iloc[row]}' in column '{column}' at row {row}."
            )
        column_values = numeric.to_numpy(dtype=float)
        if column in log_columns:
            non_positive = column_values <= 0
            if non_positive.any():
                row = int(np.flatnonzero(non_positive)[0])
                raise PanelFormatError(
                    f"cannot log-transform non-positive value {column_values[row]} "
                    f"in column '{column}' at row {row}."
                )
            column_values = np.log(column_values)
        values[:, j] = column_values

    logger.info(
        "Loaded panel from %s: %s cases, %s controls, %s markers",
        path,
        int(labels.sum()),
        int((labels == 0).sum()),
        len(marker_columns),
    )
    return CaseControlData(
        markers=values,
        labels=labels.to_numpy(dtype=int),
        marker_names=tuple(marker_columns),
    )


def write_csv(panel: CaseControlData, path, label_column: str = "label") -> None:
    """Write ``panel`` as CSV in the layout ``load_csv`` reads."""
    frame = pd.DataFrame(panel.markers, columns=list(panel.marker_names))
    frame.insert(0, label_column, panel.labels)
    frame.to_csv(path, index=False, encoding="utf-8")
