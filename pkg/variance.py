"""
Plug-in influence-function variance of ROC(t) estimators under the logistic
working model.

For a fit with scores s_i = X_i' beta and control cutoff u, the per-subject
influence of ROC_hat(t) is

    psi_i = I(D_i=1) (I(s_i > u) - S_1(u)) / pi
          + I(D_i=0) (I(s_i <= u) - (1 - t)) f_1(u) / (f_0(u) (1 - pi))
          + n (g + h)' core_i

where pi is the case fraction, f_1, f_0 are kernel density estimates of the
case and control scores at u, core_i is the logistic influence vector and
g, h are the partial derivatives of the case survival and of the control
quantile term in beta. Variances are n^-2 sum psi_i^2.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.stats import iqr, norm

from logistic import ModelFit, influence_core
from roc import combination_scores, control_quantile

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

MAX_DENSITY_RATIO = 50.0
RELATIVE_STEP = 1e-3


class DegenerateSampleError(ValueError):
    """
    Exception raised when a sample has too few points or no spread for a
    kernel density estimate.
    """

    def __init__(self, message="Sample has no spread"):
        self.message = message
        super().__init__(self.message)


class NonFiniteInfluenceError(ArithmeticError):
    """
    Exception raised when a per-subject influence value is not finite.
    """

    def __init__(self, message="Non-finite influence value"):
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True, eq=False)
class InfluencePieces:
    """Per-subject terms of the ROC(t) influence decomposition.

    ``a1_term`` is the case survival term (zero for controls), ``a3_term``
    the control quantile term scaled by the density ratio (zero for cases)
    and ``a2_plus_a4_term`` the slope-estimation term n (g + h)' core_i.
    """

    a1_term: np.ndarray
    a3_term: np.ndarray
    a2_plus_a4_term: np.ndarray
    g: np.ndarray
    h: np.ndarray
    f_d1_at_u: float
    f_d0_at_u: float
    threshold: float
    bandwidth_case: float
    bandwidth_control: float
    ratio_clamped: bool

    @property
    def psi(self) -> np.ndarray:
        return self.a1_term + self.a3_term + self.a2_plus_a4_term


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    """Plug-in variance components of ROC_f(t) - ROC_r(t).

    For a single-panel estimate the restricted terms are zero and
    ``sigma_delta`` equals ``sigma_f``.
    """

    sigma_f: float
    sigma_r: float
    sigma_fr: float
    sigma_delta: float
    per_subject_full: np.ndarray
    per_subject_restricted: np.ndarray
    bandwidths: Dict[str, float] = field(default_factory=dict)
    ratio_clamped: bool = False

    @property
    def sigma_delta_reported(self) -> float:
        return max(self.sigma_delta, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.sigma_f, self.sigma_fr], [self.sigma_fr, self.sigma_r]])


def silverman_bandwidth(samples) -> float:
    """
    Silverman's rule 0.9 min(sd, IQR/1.34) m^(-1/5).

    The IQR term is dropped when it is zero but the standard deviation is not.

    Raises:
        DegenerateSampleError: With fewer than two samples or zero spread.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    m = samples.size
    if m < 2:
        raise DegenerateSampleError(f"kernel density needs at least 2 samples, got {m}.")
    sd = float(np.std(samples, ddof=1))
    if not sd > 0:
        raise DegenerateSampleError("all samples are equal; bandwidth would be zero.")
    spread = iqr(samples) / 1.34
    scale = min(sd, spread) if spread > 0 else sd
    return 0.9 * scale * m ** (-0.2)


def kde_at(samples, x: float, bandwidth: Optional[float] = None) -> float:
    """
    Gaussian-kernel density of ``samples`` at ``x``.

    Args:
        samples (array-like): The sample.
        x (float): Evaluation point.
        bandwidth (float, optional): Kernel bandwidth; Silverman's rule when
            omitted.

    Returns:
        float: The density estimate.

    Raises:
        DegenerateSampleError: If the bandwidth cannot be formed.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    h = silverman_bandwidth(samples) if bandwidth is None else float(bandwidth)
    return float(np.mean(norm.pdf((x - samples) / h)) / h)


def smoothed_survival(scores, u: float, bandwidth: float) -> float:
    """Kernel-smoothed fraction of ``scores`` above ``u``."""
    return float(np.mean(ndtr((np.asarray(scores) - u) / bandwidth)))


def smoothed_quantile(scores, t: float, bandwidth: float) -> float:
    """The cutoff q whose kernel-smoothed survival among ``scores`` equals t."""
    scores = np.asarray(scores, dtype=float)
    lower = scores.min() - 12.0 * bandwidth
    upper = scores.max() + 12.0 * bandwidth
    return brentq(
        lambda q: smoothed_survival(scores, q, bandwidth) - t, lower, upper, xtol=1e-13
    )


def gradients_gh(
    model: ModelFit,
    panel,
    labels,
    t: float,
    bandwidths: Optional[Tuple[float, float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Derivatives of ROC(t) in the slopes, split into g and h.

    g_j is the central difference, in beta_j, of the kernel-smoothed case
    survival at the fixed cutoff u; h_j is -f_1(u) times the central
    difference of the kernel-smoothed control quantile, re-solved at each
    perturbed beta. Steps are 1e-3 (1 + |beta_j|).

    Args:
        model (ModelFit): Converged fit on this panel.
        panel (array-like): N x d marker matrix.
        labels (array-like): Disease indicators.
        t (float): False-positive fraction in (0, 1).
        bandwidths (tuple, optional): (case, control) kernel bandwidths;
            Silverman's rule on the fitted scores by default.

    Returns:
        tuple: (g, h), each of length d.

    Raises:
        DegenerateSampleError: If either stratum's scores have no spread.
    """
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie strictly between 0 and 1, got {t}.")
    panel = np.asarray(panel, dtype=float)
    if panel.ndim == 1:
        panel = panel[:, None]
    labels = np.asarray(labels)
    cases, controls = panel[labels == 1], panel[labels == 0]
    beta = model.slopes

    case_scores = cases @ beta
    control_scores = controls @ beta
    u = control_quantile(control_scores, t)
    if bandwidths is None:
        bandwidths = (silverman_bandwidth(case_scores), silverman_bandwidth(control_scores))
    bw_case, bw_control = bandwidths
    f1_u = kde_at(case_scores, u, bw_case)

    d = beta.shape[0]
    g = np.empty(d)
    h = np.empty(d)
    for j in range(d):
        step = RELATIVE_STEP * (1.0 + abs(beta[j]))
        offset = np.zeros(d)
        offset[j] = step
        up, down = beta + offset, beta - offset
        g[j] = (
            smoothed_survival(cases @ up, u, bw_case)
            - smoothed_survival(cases @ down, u, bw_case)
        ) / (2.0 * step)
        q_up = smoothed_quantile(controls @ up, t, bw_control)
        q_down = smoothed_quantile(controls @ down, t, bw_control)
        h[j] = -f1_u * (q_up - q_down) / (2.0 * step)
    return g, h


def influence_pieces(model: ModelFit, panel, labels, t: float) -> InfluencePieces:
    """
    Per-subject influence terms of ROC_hat(t) for one fitted panel.

    Raises:
        DegenerateSampleError: If a stratum's scores have no spread.
        NonFiniteInfluenceError: If any term is not finite.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim == 1:
        panel = panel[:, None]
    labels = np.asarray(labels).astype(int)
    n = labels.shape[0]
    is_case = labels == 1
    pi_case = is_case.mean()

    scores = combination_scores(model, panel)
    case_scores, control_scores = scores[is_case], scores[~is_case]
    u = control_quantile(control_scores, t)

    bw_case = silverman_bandwidth(case_scores)
    bw_control = silverman_bandwidth(control_scores)
    f1_u = kde_at(case_scores, u, bw_case)
    f0_u = kde_at(control_scores, u, bw_control)

    ratio = f1_u / f0_u if f0_u > 0 else np.inf
    ratio_clamped = not 0.0 <= ratio <= MAX_DENSITY_RATIO
    if ratio_clamped:
        logger.warning(
            "Density ratio %s at threshold %s clamped to [0, %s]", ratio, u, MAX_DENSITY_RATIO
        )
        ratio = float(np.clip(ratio, 0.0, MAX_DENSITY_RATIO))

    above = scores > u
    survival = above[is_case].mean()
    a1 = np.where(is_case, (above - survival) / pi_case, 0.0)
    a3 = np.where(~is_case, ((~above) - (1.0 - t)) * ratio / (1.0 - pi_case), 0.0)

    g, h = gradients_gh(model, panel, labels, t, bandwidths=(bw_case, bw_control))
    core = influence_core(model, panel, labels)
    a24 = n * (core @ (g + h))

    pieces = InfluencePieces(
        a1_term=a1,
        a3_term=a3,
        a2_plus_a4_term=a24,
        g=g,
        h=h,
        f_d1_at_u=f1_u,
        f_d0_at_u=f0_u,
        threshold=u,
        bandwidth_case=bw_case,
        bandwidth_control=bw_control,
        ratio_clamped=ratio_clamped,
    )
    if not np.all(np.isfinite(pieces.psi)):
        raise NonFiniteInfluenceError("per-subject influence contains non-finite values.")
    return pieces


def panel_variance(model: ModelFit, panel, labels, t: float) -> VarianceEstimate:
    """Plug-in variance of ROC_hat(t) for a single panel (restricted terms zero)."""
    pieces = influence_pieces(model, panel, labels, t)
    psi = pieces.psi
    n = psi.shape[0]
    sigma_f = float(np.sum(psi * psi) / n**2)
    return VarianceEstimate(
        sigma_f=sigma_f,
        sigma_r=0.0,
        sigma_fr=0.0,
        sigma_delta=sigma_f,
        per_subject_full=psi,
        per_subject_restricted=np.zeros(n),
        bandwidths={"full_case": pieces.bandwidth_case, "full_control": pieces.bandwidth_control},
        ratio_clamped=pieces.ratio_clamped,
    )


def sigma_components(
    fit_full: ModelFit,
    fit_restr: ModelFit,
    panel,
    labels,
    t: float,
    restricted_columns: Optional[Sequence[int]] = None,
) -> VarianceEstimate:
    """
    Plug-in Sigma_f, Sigma_r, Sigma_fr and Sigma = Sigma_f + Sigma_r - 2 Sigma_fr.

    Args:
        fit_full (ModelFit): Fit on all columns of ``panel``.
        fit_restr (ModelFit): Fit on ``restricted_columns`` of ``panel``.
        panel (array-like): N x (m*+1) full marker matrix.
        labels (array-like): Disease indicators.
        t (float): False-positive fraction in (0, 1).
        restricted_columns (list, optional): Columns of the restricted panel;
            the first m* columns by default.

    Returns:
        VarianceEstimate: The components and per-subject influences.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim == 1:
        panel = panel[:, None]
    if restricted_columns is None:
        restricted_columns = list(range(fit_restr.slopes.shape[0]))

    full = influence_pieces(fit_full, panel, labels, t)
    restricted = influence_pieces(fit_restr, panel[:, list(restricted_columns)], labels, t)
    psi, phi = full.psi, restricted.psi
    n = psi.shape[0]

    sigma_f = float(np.sum(psi * psi) / n**2)
    sigma_r = float(np.sum(phi * phi) / n**2)
    sigma_fr = float(np.sum(psi * phi) / n**2)
    sigma_delta = sigma_f + sigma_r - 2.0 * sigma_fr
    logger.debug(
        "Sigma_f=%s Sigma_r=%s Sigma_fr=%s Sigma=%s", sigma_f, sigma_r, sigma_fr, sigma_delta
    )

    return VarianceEstimate(
        sigma_f=sigma_f,
        sigma_r=sigma_r,
        sigma_fr=sigma_fr,
        sigma_delta=sigma_delta,
        per_subject_full=psi,
        per_subject_restricted=phi,
        bandwidths={
            "full_case": full.bandwidth_case,
            "full_control": full.bandwidth_control,
            "restricted_case": restricted.bandwidth_case,
            "restricted_control": restricted.bandwidth_control,
        },
        ratio_clamped=full.ratio_clamped or restricted.ratio_clamped,
    )
