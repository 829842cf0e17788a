"""
Combination scores and the empirical ROC(t) estimator.
"""

import math
from dataclasses import dataclass

import numpy as np

from logistic import ModelFit


class RocInputError(ValueError):
    """
    Exception raised for empty score vectors, t outside [0, 1) or a panel
    that does not match the fit.
    """

    def __init__(self, message="Invalid ROC input"):
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True)
class RocEstimate:
    """Empirical ROC(t) value.

    Attributes:
        value (float): Fraction of case scores strictly above ``threshold``.
        threshold (float): Control score cutoff u.
        t (float): Target false-positive fraction.
        n_cases_used (int): Number of case scores.
        n_controls_used (int): Number of control scores.
    """

    value: float
    threshold: float
    t: float
    n_cases_used: int
    n_controls_used: int


def _check_t(t):
    if not 0.0 <= t < 1.0:
        raise RocInputError(f"t must lie in [0, 1), got {t}.")


def combination_scores(model: ModelFit, panel) -> np.ndarray:
    """
    Scores X_i' beta for every subject; the intercept is omitted since ROC
    is invariant to it.

    Raises:
        RocInputError: If the panel column count differs from the slope length.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim == 1:
        panel = panel[:, None]
    if panel.shape[1] != model.slopes.shape[0]:
        raise RocInputError(
            f"panel has {panel.shape[1]} columns but the fit has "
            f"{model.slopes.shape[0]} slopes."
        )
    return panel @ model.slopes


def order_statistic_index(t: float, n_controls: int) -> int:
    """
    The 1-based rank s with (s-1)/n < t <= s/n, and 1 for t = 0.
    """
    if t == 0.0:
        return 1
    # Rounded so that t*n landing a hair above an integer does not bump s.
    s = math.ceil(round(t * n_controls, 9))
    return min(max(s, 1), n_controls)


def control_quantile(control_scores, t: float) -> float:
    """
    Control score cutoff for false-positive fraction t.

    Control scores are ordered descending, X_[1] >= X_[2] >= ..., and X_[s]
    is returned with s = ceil(t * n0) (s = 1 for t = 0), so the fraction of
    controls strictly above the cutoff never exceeds t.

    Raises:
        RocInputError: If there are no control scores or t is outside [0, 1).
    """
    _check_t(t)
    control_scores = np.asarray(control_scores, dtype=float).ravel()
    if control_scores.size == 0:
        raise RocInputError("control scores are empty.")
    s = order_statistic_index(t, control_scores.size)
    descending = np.sort(control_scores)[::-1]
    return float(descending[s - 1])


def empirical_roc(case_scores, control_scores, t: float) -> RocEstimate:
    """
    Empirical ROC(t): the fraction of case scores strictly greater than the
    control cutoff at t.

    Raises:
        RocInputError: If either score vector is empty or t is outside [0, 1).
    """
    case_scores = np.asarray(case_scores, dtype=float).ravel()
    control_scores = np.asarray(control_scores, dtype=float).ravel()
    if case_scores.size == 0:
        raise RocInputError("case scores are empty.")
    threshold = control_quantile(control_scores, t)
    return RocEstimate(
        value=float(np.mean(case_scores > threshold)),
        threshold=threshold,
        t=t,
        n_cases_used=case_scores.size,
        n_controls_used=control_scores.size,
    )


def panel_roc(model: ModelFit, panel, labels, t: float) -> RocEstimate:
    """Empirical ROC(t) of the fitted combination on a labeled panel."""
    scores = combination_scores(model, panel)
    labels = np.asarray(labels)
    return empirical_roc(scores[labels == 1], scores[labels == 0], t)
