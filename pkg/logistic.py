"""
Logistic working-model fits for the full and restricted panels.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

SCORE_TOLERANCE = 1e-8
MAX_ITERATIONS = 100
SEPARATION_THRESHOLD = 30.0
MAX_STEP_HALVINGS = 40


class LogisticFitError(RuntimeError):
    """
    Base exception for logistic working-model fits.
    """

    def __init__(self, message="Logistic fit failed"):
        self.message = message
        super().__init__(self.message)


class SeparationError(LogisticFitError):
    """
    Exception raised when the linear predictor diverges along a direction
    that separates cases from controls.
    """

    def __init__(self, message="Separation detected: the MLE does not exist"):
        super().__init__(message)


class SingularDesignError(LogisticFitError):
    """
    Exception raised when the design matrix (with intercept) is rank deficient.
    """

    def __init__(self, message="Design matrix is rank deficient"):
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Maximum-likelihood fit of the logistic working model.

    Attributes:
        intercept (float): Fitted intercept.
        slopes (numpy.ndarray): Fitted slope vector, one entry per marker.
        fitted_probs (numpy.ndarray): Fitted probabilities per subject.
        inv_information (numpy.ndarray): Inverse of the observed information
            sum_i x_i x_i' p_i (1 - p_i), x_i = (1, X_i), intercept first.
        converged (bool): Whether the score max-norm reached the tolerance.
        iterations (int): Newton iterations performed.
        log_likelihood (float): Log-likelihood at the solution.
        score_norm (float): Max-norm of the score at the solution.
    """

    intercept: float
    slopes: np.ndarray
    fitted_probs: np.ndarray
    inv_information: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    score_norm: float

    @property
    def coefficients(self) -> np.ndarray:
        return np.r_[self.intercept, self.slopes]


def _design(panel) -> np.ndarray:
    panel = np.asarray(panel, dtype=float)
    if panel.ndim == 1:
        panel = panel[:, None]
    return np.column_stack([np.ones(panel.shape[0]), panel])


def _log_likelihood(eta, labels):
    return float(np.sum(labels * eta - np.logaddexp(0.0, eta)))


def _separates(eta, labels):
    """Whether the linear predictor orders every case at or above every control."""
    return eta[labels == 1].min() >= eta[labels == 0].max()


def fit(panel, labels, tol=SCORE_TOLERANCE, max_iter=MAX_ITERATIONS, start=None) -> ModelFit:
    """
    Fit the logistic working model by Newton-Raphson with step halving.

    Args:
        panel (array-like): N x d marker matrix (no intercept column).
        labels (array-like): Disease indicators.
        tol (float): Score max-norm tolerance.
        max_iter (int): Iteration cap.
        start (array-like, optional): Starting coefficients (intercept
            first). Defaults to zero.

    Returns:
        ModelFit: The fit; ``converged`` is False if the cap was reached.

    Raises:
        LogisticFitError: If there is not at least one case and one control.
        SingularDesignError: If the design matrix is rank deficient.
        SeparationError: If |linear predictor| exceeds 30 while it still
            places every case at or above every control.
    """
    design = _design(panel)
    labels = np.asarray(labels, dtype=float)
    n, k = design.shape
    if labels.shape != (n,):
        raise LogisticFitError(f"labels have shape {labels.shape}, expected ({n},).")
    n_cases = labels.sum()
    if n_cases < 1 or n_cases > n - 1:
        raise LogisticFitError("fit needs at least one case and one control.")
    if np.linalg.matrix_rank(design) < k:
        raise SingularDesignError(
            f"design matrix with intercept has rank below {k} columns."
        )

    theta = np.zeros(k) if start is None else np.asarray(start, dtype=float).copy()
    eta = design @ theta
    log_lik = _log_likelihood(eta, labels)
    converged = False
    iterations = 0

    while True:
        probs = expit(eta)
        score = design.T @ (labels - probs)
        score_norm = float(np.max(np.abs(score)))
        if np.max(np.abs(eta)) > SEPARATION_THRESHOLD and _separates(eta, labels):
            raise SeparationError(
                f"|linear predictor| reached {np.max(np.abs(eta)):.1f} and splits cases "
                f"from controls (score max-norm {score_norm:.3g})."
            )
        if score_norm <= tol:
            converged = True
            break
        if iterations >= max_iter:
            logger.warning(
                "Logistic fit stopped at the iteration cap (%s) with score max-norm %s",
                max_iter,
                score_norm,
            )
            break

        weights = probs * (1.0 - probs)
        information = design.T @ (design * weights[:, None])
        step = np.linalg.solve(information, score)

        # Ascent is judged up to rounding of the log-likelihood sum.
        slack = 1e-12 * max(1.0, abs(log_lik))
        for _ in range(MAX_STEP_HALVINGS):
            candidate = theta + step
            candidate_eta = design @ candidate
            candidate_ll = _log_likelihood(candidate_eta, labels)
            if candidate_ll >= log_lik - slack:
                break
            step = step / 2.0
        else:
            # No ascent left at machine precision.
            logger.debug("Step halving exhausted at score max-norm %s", score_norm)
            break

        theta, eta, log_lik = candidate, candidate_eta, candidate_ll
        iterations += 1
        logger.debug("Newton iteration %s: log-likelihood %s", iterations, log_lik)

    probs = expit(eta)
    weights = probs * (1.0 - probs)
    information = design.T @ (design * weights[:, None])
    inv_information = np.linalg.inv(information)
    inv_information = (inv_information + inv_information.T) / 2.0

    return ModelFit(
        intercept=float(theta[0]),
        slopes=theta[1:].copy(),
        fitted_probs=probs,
        inv_information=inv_information,
        converged=converged,
        iterations=iterations,
        log_likelihood=log_lik,
        score_norm=float(np.max(np.abs(design.T @ (labels - probs)))),
    )


def influence_core(model: ModelFit, panel, labels) -> np.ndarray:
    """
    Per-subject slope influence of the fit.

    Row i is the slope sub-vector of inv_information @ x_i (D_i - p_i),
    computed jointly with the intercept coordinate. Rows sum to the Newton
    step at the fit, i.e. to zero at the MLE.

    Args:
        model (ModelFit): A fit on this panel.
        panel (array-like): The N x d marker matrix the model was fitted on.
        labels (array-like): Disease indicators.

    Returns:
        numpy.ndarray: N x d matrix of influence vectors.

    Raises:
        LogisticFitError: On dimension mismatch.
    """
    design = _design(panel)
    labels = np.asarray(labels, dtype=float)
    if design.shape[1] != model.inv_information.shape[0]:
        raise LogisticFitError(
            f"panel has {design.shape[1] - 1} markers but the fit has "
            f"{model.slopes.shape[0]} slopes."
        )
    if design.shape[0] != model.fitted_probs.shape[0] or labels.shape[0] != design.shape[0]:
        raise LogisticFitError("panel, labels and fit disagree on the number of subjects.")

    residuals = labels - model.fitted_probs
    influence = (design * residuals[:, None]) @ model.inv_information
    return influence[:, 1:]
