"""
Symmetric one-sided two-stage boundaries under alpha-spending.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from dataclasses_json import dataclass_json
from scipy.optimize import bisect
from scipy.special import ndtr
from scipy.stats import norm

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)

BRACKET = (0.0, 10.0)
BISECTION_XTOL = 1e-10
RESIDUAL_TOLERANCE = 1e-8
HIGH_CORRELATION = 0.925

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(20)


class BoundaryDomainError(ValueError):
    """
    Exception raised for a level, information fraction or correlation
    outside its domain.
    """

    def __init__(self, message="Boundary input out of range"):
        self.message = message
        super().__init__(self.message)


class BoundaryNumericalError(RuntimeError):
    """
    Exception raised when the boundary equations have no root in the search
    bracket or the solution misses the residual tolerance.
    """

    def __init__(self, message="Boundary solve failed"):
        self.message = message
        super().__init__(self.message)


class Spending(str, Enum):
    """Alpha-spending families."""

    OBF = "obf"
    POCOCK = "pocock"


class Stopping(str, Enum):
    """Which early decisions stage 1 may take."""

    BOTH = "both"
    FUTILITY = "futility"
    EFFICACY = "efficacy"


def spending(alpha: float, t_frac: float, family: Spending) -> float:
    """
    Type-I error spent by information fraction ``t_frac``.

    O'Brien-Fleming type: 2 Phi(-z_{alpha/2} / sqrt(t)).
    Pocock type: alpha log(1 + (e - 1) t).

    Args:
        alpha (float): Overall level in (0, 1).
        t_frac (float): Information fraction in (0, 1].
        family (Spending): The spending family.

    Returns:
        float: alpha_1, with alpha_1 = alpha at t_frac = 1.

    Raises:
        BoundaryDomainError: For out-of-range inputs.
    """
    if not 0.0 < alpha < 1.0:
        raise BoundaryDomainError(f"alpha must lie in (0, 1), got {alpha}.")
    if not 0.0 < t_frac <= 1.0:
        raise BoundaryDomainError(f"t_frac must lie in (0, 1], got {t_frac}.")
    family = Spending(family)
    if t_frac == 1.0:
        return alpha
    if family is Spending.OBF:
        return float(2.0 * norm.cdf(-norm.isf(alpha / 2.0) / math.sqrt(t_frac)))
    return float(alpha * math.log(1.0 + (math.e - 1.0) * t_frac))


def bvn_upper(h: float, k: float, rho: float) -> float:
    """
    Bivariate normal upper orthant P(Z1 > h, Z2 > k) with correlation rho.

    Drezner-Wesolowsky integration as refined by Genz: 20-point
    Gauss-Legendre on the arcsine form for |rho| < 0.925, and the
    asymptotic expansion about |rho| = 1 otherwise.

    Raises:
        BoundaryDomainError: If |rho| >= 1.
    """
    if not abs(rho) < 1.0:
        raise BoundaryDomainError(f"|rho| must be below 1, got {rho}.")
    if h == np.inf or k == np.inf:
        return 0.0
    if h == -np.inf:
        return 1.0 if k == -np.inf else float(ndtr(-k))
    if k == -np.inf:
        return float(ndtr(-h))
    if rho == 0.0:
        return float(ndtr(-h) * ndtr(-k))

    two_pi = 2.0 * math.pi
    hk = h * k
    if abs(rho) < HIGH_CORRELATION:
        hs = (h * h + k * k) / 2.0
        asr = math.asin(rho) / 2.0
        sn = np.sin(asr * (_NODES + 1.0))
        value = float(_WEIGHTS @ np.exp((sn * hk - hs) / (1.0 - sn**2)))
        value = value * asr / two_pi + ndtr(-h) * ndtr(-k)
        return float(min(1.0, max(0.0, value)))

    if rho < 0.0:
        k = -k
        hk = -hk
    a_sq = 1.0 - rho * rho
    a = math.sqrt(a_sq)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 80.0
    value = 0.0
    exponent = -(bs / a_sq + hk) / 2.0
    if exponent > -100.0:
        value = a * math.exp(exponent) * (
            1.0 - c * (bs - a_sq) * (1.0 - d * bs) / 3.0 + c * d * a_sq**2
        )
    if hk > -100.0:
        b = math.sqrt(bs)
        sp = math.sqrt(two_pi) * ndtr(-b / a)
        value -= math.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)

    half = a / 2.0
    xs = (half * (_NODES + 1.0)) ** 2
    rs = np.sqrt(1.0 - xs)
    exponents = -(bs / xs + hk) / 2.0
    keep = exponents > -100.0
    sp = 1.0 + c * xs[keep] * (1.0 + 5.0 * d * xs[keep])
    ep = np.exp(-(hk / 2.0) * xs[keep] / (1.0 + rs[keep]) ** 2) / rs[keep]
    value += half * float(_WEIGHTS[keep] @ (np.exp(exponents[keep]) * (ep - sp)))
    value = -value / two_pi

    if rho > 0.0:
        value += ndtr(-max(h, k))
    elif h >= k:
        value = -value
    else:
        spread = ndtr(k) - ndtr(h) if h < 0 else ndtr(-h) - ndtr(-k)
        value = spread - value
    return float(min(1.0, max(0.0, value)))


@dataclass_json
@dataclass(frozen=True)
class BoundarySet:
    """Two-stage boundaries in standardized units (I_2 = 1).

    Stage 1 rejects when Z1 >= b1, accepts when Z1 <= a1 and otherwise
    continues; stage 2 rejects when Z2 >= b2 (= a2).
    """

    a1: float
    b1: float
    b2: float
    alpha: float
    alpha1: float
    alpha2: float
    info_frac: float
    rho: float
    spending: Spending
    stopping: Stopping
    delta1: float
    resolved: bool = False

    @classmethod
    def fixed(cls, a1, b1, b2, alpha=0.05, info_frac=0.5):
        """Hand-set boundaries, e.g. degenerate ones forcing a stage-1 outcome."""
        if a1 > b1:
            raise BoundaryDomainError(f"a1 ({a1}) must not exceed b1 ({b1}).")
        return cls(
            a1=float(a1),
            b1=float(b1),
            b2=float(b2),
            alpha=alpha,
            alpha1=0.0,
            alpha2=alpha,
            info_frac=info_frac,
            rho=math.sqrt(info_frac),
            spending=Spending.OBF,
            stopping=Stopping.BOTH,
            delta1=2.0 * float(b2),
        )

    def to_row(self) -> dict:
        """Flat record with extended reals as ``inf``/``-inf``."""
        row = {}
        for key, value in self.to_dict(encode_json=True).items():
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, float) and math.isinf(value):
                value = "inf" if value > 0 else "-inf"
            row[key] = value
        return row


def _stage2_mass(a1, b1, b2, rho):
    """P(a1 < Z1 < b1, Z2 >= b2) under the canonical null."""
    if a1 >= b1:
        return 0.0
    return bvn_upper(a1, b2, rho) - bvn_upper(b1, b2, rho)


def _bisect(func, label):
    lower, upper = BRACKET
    f_lower, f_upper = func(lower), func(upper)
    if f_lower * f_upper > 0:
        raise BoundaryNumericalError(
            f"no root for {label} in [{lower}, {upper}] "
            f"(residuals {f_lower:.3g}, {f_upper:.3g})."
        )
    root = bisect(func, lower, upper, xtol=BISECTION_XTOL, maxiter=200)
    residual = func(root)
    if abs(residual) > RESIDUAL_TOLERANCE:
        raise BoundaryNumericalError(
            f"{label} solve left residual {residual:.3g} above {RESIDUAL_TOLERANCE}."
        )
    return root


def solve_boundaries(
    alpha: float,
    info_frac: float,
    spending_family: Spending,
    stopping: Stopping,
    resolve: bool = False,
) -> BoundarySet:
    """
    Solve the symmetric two-stage boundaries.

    b1 = Phi^-1(1 - alpha1). b2 solves P(a1 < Z1 < b1, Z2 >= b2) = alpha2
    with a1 = 2 b2 sqrt(lambda) - b1 eliminated by the symmetry relation, so
    a single bisection on b2 reaches the joint fixed point. Efficacy-only
    then sets a1 = -inf and futility-only sets b1 = +inf.

    With ``resolve``, the one-sided modes instead keep the retained stage-1
    boundary and re-solve b2 for an exact level-alpha test.

    Args:
        alpha (float): One-sided level in (0, 0.5).
        info_frac (float): lambda = I1/I2 in (0, 1).
        spending_family (Spending): Spending family for alpha1.
        stopping (Stopping): Stopping mode.
        resolve (bool): Re-solve b2 for one-sided modes.

    Returns:
        BoundarySet: The solved boundaries.

    Raises:
        BoundaryDomainError: For out-of-range alpha or info_frac.
        BoundaryNumericalError: If no root lies in [0, 10] or the residual
            exceeds 1e-8.
    """
    if not 0.0 < alpha < 0.5:
        raise BoundaryDomainError(f"alpha must lie in (0, 0.5), got {alpha}.")
    if not 0.0 < info_frac < 1.0:
        raise BoundaryDomainError(f"info_frac must lie in (0, 1), got {info_frac}.")
    spending_family = Spending(spending_family)
    stopping = Stopping(stopping)

    rho = math.sqrt(info_frac)
    alpha1 = spending(alpha, info_frac, spending_family)
    alpha2 = alpha - alpha1
    b1 = float(norm.isf(alpha1))

    b2 = _bisect(
        lambda x: _stage2_mass(2.0 * x * rho - b1, b1, x, rho) - alpha2, "symmetric b2"
    )
    a1 = 2.0 * b2 * rho - b1
    delta1 = 2.0 * b2

    if stopping is Stopping.EFFICACY:
        a1 = -math.inf
        if resolve:
            b2 = _bisect(lambda x: alpha1 + _stage2_mass(a1, b1, x, rho) - alpha, "efficacy b2")
    elif stopping is Stopping.FUTILITY:
        b1 = math.inf
        if resolve:
            b2 = _bisect(lambda x: bvn_upper(a1, x, rho) - alpha, "futility b2")
        alpha1, alpha2 = 0.0, alpha

    logger.info(
        "Solved %s/%s boundaries at lambda=%s: a1=%s b1=%s b2=%s",
        spending_family.value,
        stopping.value,
        info_frac,
        a1,
        b1,
        b2,
    )
    return BoundarySet(
        a1=a1,
        b1=b1,
        b2=b2,
        alpha=alpha,
        alpha1=alpha1,
        alpha2=alpha2,
        info_frac=info_frac,
        rho=rho,
        spending=spending_family,
        stopping=stopping,
        delta1=delta1,
        resolved=resolve and stopping is not Stopping.BOTH,
    )


def null_rejection_probability(boundaries: BoundarySet) -> float:
    """P(Z1 >= b1) + P(a1 < Z1 < b1, Z2 >= b2) under the canonical null."""
    stage1 = float(norm.sf(boundaries.b1))
    return stage1 + _stage2_mass(boundaries.a1, boundaries.b1, boundaries.b2, boundaries.rho)


class CanonicalRates(NamedTuple):
    reject_stage1: float
    accept_stage1: float
    reject_stage2: float

    @property
    def reject(self) -> float:
        return self.reject_stage1 + self.reject_stage2

    @property
    def accept(self) -> float:
        return 1.0 - self.reject


def simulate_canonical(boundaries: BoundarySet, drift: float, draws: int, rng) -> CanonicalRates:
    """
    Decision rates under canonical draws Z1 ~ N(drift sqrt(lambda), 1),
    Z2 ~ N(drift, 1) with correlation sqrt(lambda).

    Args:
        boundaries (BoundarySet): Boundaries to apply.
        drift (float): Standardized effect delta sqrt(I_2); 0 for the null.
        draws (int): Number of draws.
        rng (numpy.random.Generator): Caller-owned generator.

    Returns:
        CanonicalRates: Stage-1 reject and accept rates and stage-2 reject rate.
    """
    rho = boundaries.rho
    e1 = rng.standard_normal(draws)
    e2 = rng.standard_normal(draws)
    z1 = drift * rho + e1
    z2 = drift + rho * e1 + math.sqrt(1.0 - rho * rho) * e2
    reject1 = z1 >= boundaries.b1
    accept1 = z1 <= boundaries.a1
    cont = ~(reject1 | accept1)
    return CanonicalRates(
        reject_stage1=float(reject1.mean()),
        accept_stage1=float(accept1.mean()),
        reject_stage2=float((cont & (z2 >= boundaries.b2)).mean()),
    )
