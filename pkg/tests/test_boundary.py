import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from boundary import (
    BoundaryDomainError,
    BoundarySet,
    Spending,
    Stopping,
    bvn_upper,
    null_rejection_probability,
    simulate_canonical,
    solve_boundaries,
    spending,
)

DESIGNS = [
    (Spending.OBF, 0.5),
    (Spending.POCOCK, 0.5),
    (Spending.OBF, 1 / 3),
    (Spending.POCOCK, 1 / 3),
]


def test_pocock_spending():
    assert spending(0.05, 0.5, Spending.POCOCK) == pytest.approx(0.0310057, abs=1e-7)


def test_obf_spending():
    assert spending(0.05, 0.5, Spending.OBF) == pytest.approx(0.005575, abs=1e-5)


@pytest.mark.parametrize("family", list(Spending))
def test_spending_full_information(family):
    assert spending(0.05, 1.0, family) == 0.05
    assert spending(0.05, 0.2, family) < spending(0.05, 0.6, family) < 0.05


@pytest.mark.parametrize("alpha, t_frac", [(0.0, 0.5), (1.0, 0.5), (0.05, 0.0), (0.05, 1.2)])
def test_spending_domain(alpha, t_frac):
    with pytest.raises(BoundaryDomainError):
        spending(alpha, t_frac, Spending.OBF)


@pytest.mark.parametrize("rho", [-0.99, -0.95, -0.5, 0.3, 0.5, 0.93, 0.99])
def test_bvn_at_origin(rho):
    expected = 0.25 + math.asin(rho) / (2 * math.pi)
    assert bvn_upper(0.0, 0.0, rho) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize(
    "h, k, rho",
    [
        (0.5, -0.3, 0.3),
        (1.2, 0.8, 0.7),
        (-1.0, 2.0, 0.5),
        (1.5, 1.0, 0.95),
        (0.2, -0.4, -0.6),
        (-0.5, 0.7, -0.97),
        (1.0, -1.3, -0.97),
    ],
)
def test_bvn_against_scipy(h, k, rho):
    expected = multivariate_normal(mean=[0.0, 0.0], cov=[[1.0, rho], [rho, 1.0]]).cdf([-h, -k])
    assert bvn_upper(h, k, rho) == pytest.approx(expected, abs=5e-5)


def test_bvn_limits():
    assert bvn_upper(0.3, 0.4, 0.0) == pytest.approx(
        multivariate_normal(mean=[0, 0]).cdf([-0.3, -0.4]), abs=1e-8
    )
    assert bvn_upper(np.inf, 0.0, 0.5) == 0.0
    assert bvn_upper(-np.inf, -np.inf, 0.5) == 1.0
    assert bvn_upper(-np.inf, 0.0, 0.5) == pytest.approx(0.5)
    with pytest.raises(BoundaryDomainError):
        bvn_upper(0.0, 0.0, 1.0)


@pytest.mark.parametrize("family, info_frac", DESIGNS)
def test_symmetric_boundaries_hold_level(family, info_frac):
    boundaries = solve_boundaries(0.05, info_frac, family, Stopping.BOTH)
    assert null_rejection_probability(boundaries) == pytest.approx(0.05, abs=1e-7)
    assert boundaries.a1 == pytest.approx(2 * boundaries.b2 * math.sqrt(info_frac) - boundaries.b1)
    assert boundaries.a1 <= boundaries.b1
    assert boundaries.delta1 == pytest.approx(2 * boundaries.b2)
    assert boundaries.alpha1 + boundaries.alpha2 == pytest.approx(0.05)
    assert not boundaries.resolved


def test_pocock_stage1_boundary():
    boundaries = solve_boundaries(0.05, 0.5, Spending.POCOCK, Stopping.BOTH)
    assert boundaries.b1 == pytest.approx(1.866, abs=1e-3)


@pytest.mark.parametrize("family, info_frac", DESIGNS)
def test_truncated_one_sided_modes(family, info_frac):
    both = solve_boundaries(0.05, info_frac, family, Stopping.BOTH)
    efficacy = solve_boundaries(0.05, info_frac, family, Stopping.EFFICACY)
    futility = solve_boundaries(0.05, info_frac, family, Stopping.FUTILITY)

    assert efficacy.a1 == -math.inf
    assert efficacy.b1 == both.b1
    assert efficacy.b2 == both.b2
    assert null_rejection_probability(efficacy) >= 0.05

    assert futility.b1 == math.inf
    assert futility.a1 == both.a1
    assert futility.alpha1 == 0.0
    assert null_rejection_probability(futility) <= 0.05


@pytest.mark.parametrize("stopping", [Stopping.EFFICACY, Stopping.FUTILITY])
@pytest.mark.parametrize("family, info_frac", DESIGNS)
def test_resolved_one_sided_modes_hold_level(stopping, family, info_frac):
    boundaries = solve_boundaries(0.05, info_frac, family, stopping, resolve=True)
    assert boundaries.resolved
    assert null_rejection_probability(boundaries) == pytest.approx(0.05, abs=1e-7)


@pytest.mark.parametrize("alpha, info_frac", [(0.5, 0.5), (0.0, 0.5), (0.05, 1.0), (0.05, 0.0)])
def test_solve_domain(alpha, info_frac):
    with pytest.raises(BoundaryDomainError):
        solve_boundaries(alpha, info_frac, Spending.OBF, Stopping.BOTH)


def test_fixed_boundaries():
    boundaries = BoundarySet.fixed(-1.0, 2.0, 1.7)
    assert boundaries.rho == pytest.approx(math.sqrt(0.5))
    assert BoundarySet.fixed(1.0, 1.0, 1.0).a1 == 1.0
    with pytest.raises(BoundaryDomainError):
        BoundarySet.fixed(2.0, 1.0, 1.0)


def test_to_row_encodes_infinities():
    row = solve_boundaries(0.05, 0.5, "obf", "efficacy").to_row()
    assert row["a1"] == "-inf"
    assert row["spending"] == "obf"
    assert row["stopping"] == "efficacy"
    assert isinstance(row["b1"], float)


def test_canonical_simulation_null_rate():
    boundaries = solve_boundaries(0.05, 0.5, Spending.OBF, Stopping.BOTH)
    rates = simulate_canonical(boundaries, 0.0, 200_000, np.random.default_rng(8))
    assert rates.reject == pytest.approx(0.05, abs=3e-3)
    assert rates.reject_stage1 == pytest.approx(boundaries.alpha1, abs=1e-3)
    assert rates.accept == pytest.approx(1 - rates.reject)


def test_canonical_simulation_drift_raises_power():
    boundaries = solve_boundaries(0.05, 0.5, Spending.POCOCK, Stopping.BOTH)
    rng = np.random.default_rng(9)
    weak = simulate_canonical(boundaries, 1.0, 50_000, rng)
    strong = simulate_canonical(boundaries, 4.0, 50_000, rng)
    assert strong.reject > 0.9 > weak.reject


@pytest.mark.parametrize("family, info_frac", DESIGNS)
def test_canonical_draws_hold_level(family, info_frac):
    boundaries = solve_boundaries(0.05, info_frac, family, Stopping.BOTH)
    rates = simulate_canonical(boundaries, 0.0, 1_000_000, np.random.default_rng(21))
    assert abs(rates.reject - 0.05) <= 4 * math.sqrt(0.05 * 0.95 / 1_000_000)


@pytest.mark.parametrize("family, info_frac", DESIGNS)
def test_acceptance_at_design_alternative_equals_level(family, info_frac):
    boundaries = solve_boundaries(0.05, info_frac, family, Stopping.BOTH)
    rates = simulate_canonical(
        boundaries, boundaries.delta1, 1_000_000, np.random.default_rng(22)
    )
    assert abs(rates.accept - 0.05) <= 4 * math.sqrt(0.05 * 0.95 / 1_000_000)


def test_obf_stage1_boundary_exceeds_final():
    boundaries = solve_boundaries(0.05, 0.5, Spending.OBF, Stopping.BOTH)
    assert boundaries.b1 > boundaries.b2
