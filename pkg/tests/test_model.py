import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import poisson

from qdtomo.errors import NonInvertibleModelError, OutOfDomainError
from qdtomo.model import (
    CoherentInput,
    DetectorModel,
    click_probability,
    click_probability_mu,
    effective_photon_number,
    i_photon_click_probability,
    inverse_click_probability,
    low_flux_slope,
    no_click_probability_mu,
    poisson_terms,
    solve_mu,
)

REFERENCE = DetectorModel(1.60e-6, (0.568,))

probs = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def monotone_models(draw, max_n=4):
    p = sorted(draw(st.lists(probs, min_size=0, max_size=max_n)))
    eta = 10 ** draw(st.floats(-8, 0))
    return DetectorModel(eta, tuple(p))


def brute_force_click(model, mu, upto=200):
    i = np.arange(upto + 1)
    p_i = np.array([0.0 if k == 0 else model.p[k - 1] if k <= model.n_max else 1.0 for k in i])
    return float(np.sum(p_i * poisson.pmf(i, mu)))


def test_model_validation():
    with pytest.raises(ValueError):
        DetectorModel(0.0, (0.5,))
    with pytest.raises(ValueError):
        DetectorModel(1.5, ())
    with pytest.raises(ValueError):
        DetectorModel(0.1, (1.2,))
    with pytest.raises(ValueError):
        CoherentInput(-1.0)
    assert not DetectorModel(0.1, (0.6, 0.4)).is_monotone


def test_param_vector_round_trip():
    m = DetectorModel(2.5e-6, (0.3, 0.9))
    again = DetectorModel.from_params(m.to_params())
    assert again.eta == pytest.approx(m.eta, rel=1e-15)
    assert again.p == m.p


@pytest.mark.parametrize("eta, n, expected", [(1.0, 5.0, 5.0), (1.60e-6, 6.25e5, 1.0), (0.5, 0.0, 0.0)])
def test_effective_photon_number(eta, n, expected):
    assert effective_photon_number(DetectorModel(eta, ()), CoherentInput(n)) == pytest.approx(expected, rel=1e-15)


def test_i_photon_click_probability():
    assert i_photon_click_probability(REFERENCE, 0.0, 0) == 0.0
    assert i_photon_click_probability(DetectorModel(1.0, (1.0,)), 1.0, 1) == pytest.approx(math.exp(-1), rel=1e-15)
    assert i_photon_click_probability(DetectorModel(1.0, (0.5,)), 2.0, 1) == pytest.approx(math.exp(-2), rel=1e-15)
    # above n_max the efficiency is 1
    m = DetectorModel(1.0, (0.5,))
    assert i_photon_click_probability(m, 3.0, 4) == pytest.approx(poisson.pmf(4, 3.0), rel=1e-13)


def test_click_probability_examples():
    assert click_probability(DetectorModel(0.3, (1.0,)), math.log(2) / 0.3) == pytest.approx(0.5, abs=1e-15)
    assert click_probability(REFERENCE, 0.0) == 0.0
    expected = 1 - math.exp(-1) * (1 + 0.432)
    assert click_probability(REFERENCE, 6.25e5) == pytest.approx(expected, rel=1e-13)
    assert round(expected, 4) == 0.4732


def test_click_probability_sum_of_i_photon_terms():
    m = DetectorModel(1.0, (0.2, 0.7, 0.9))
    total = sum(i_photon_click_probability(m, 2.3, i) for i in range(120))
    assert click_probability(m, 2.3) == pytest.approx(total, abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(monotone_models(), st.floats(1e-6, 50.0))
def test_brute_force_poisson_equivalence(model, mu):
    direct = click_probability_mu(mu, np.asarray(model.p))
    assert abs(direct - brute_force_click(model, mu)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(monotone_models())
def test_strictly_increasing_in_photon_number(model):
    n = np.geomspace(1e-6, 30.0, 300) / model.eta
    P = click_probability(model, n)
    assert np.all(np.diff(P) > 0) or np.all(P[np.diff(P) <= 0] > 1 - 1e-15)
    assert np.all((P >= 0) & (P <= 1))


@settings(max_examples=100, deadline=None)
@given(monotone_models())
def test_saturation_limit(model):
    assert click_probability(model, 1e3 / model.eta) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5), st.floats(1e-10, 60.0))
def test_ideal_detector_closed_form(n_max, mu):
    model = DetectorModel(1.0, (1.0,) * n_max)
    assert click_probability(model, mu) == pytest.approx(-math.expm1(-mu), rel=1e-14)


def test_click_plus_no_click_is_one():
    p = np.array([0.1, 0.4, 0.8])
    mu = np.geomspace(1e-3, 40, 50)
    assert np.allclose(click_probability_mu(mu, p) + no_click_probability_mu(mu, p), 1.0, atol=1e-15, rtol=0)


def test_poisson_terms_log_space_branch():
    mu = np.array([3.0, 699.0, 701.0, 900.0])
    terms = poisson_terms(mu, 3)
    expected = poisson.pmf(np.arange(4)[None, :], mu[:, None])
    assert np.allclose(terms, expected, rtol=1e-10, atol=0)


@pytest.mark.parametrize("model, target, expected", [
    (DetectorModel(1.0, (1.0,)), 0.5, math.log(2)),
    (REFERENCE, 0.0, 0.0),
])
def test_inverse_examples(model, target, expected):
    assert inverse_click_probability(model, target) == pytest.approx(expected, rel=1e-14)


def test_inverse_reference_round_trip():
    target = click_probability(REFERENCE, 6.25e5)
    assert inverse_click_probability(REFERENCE, target) == pytest.approx(6.25e5, rel=1e-12)
    assert inverse_click_probability(REFERENCE, 0.4732) == pytest.approx(6.25e5, rel=1e-4)


def test_inverse_errors():
    with pytest.raises(OutOfDomainError):
        inverse_click_probability(REFERENCE, 1.0)
    with pytest.raises(OutOfDomainError):
        inverse_click_probability(REFERENCE, -0.1)
    with pytest.raises(NonInvertibleModelError):
        inverse_click_probability(DetectorModel(1e-3, (0.9, 0.2)), 0.3)


@settings(max_examples=100, deadline=None)
@given(monotone_models(), st.floats(-3, 7))
def test_inverse_round_trip_ten_decades(model, log_mu):
    # photon numbers spanning 10 decades of effective flux
    n = 10 ** log_mu / model.eta * 1e-3
    y = click_probability(model, n)
    if y >= 1.0 or y == 0.0:
        return
    back = inverse_click_probability(model, y)
    # near saturation P is flat, so compare in probability there
    if y < 1 - 1e-6:
        assert back == pytest.approx(n, rel=1e-9)
    assert abs(click_probability(model, back) - y) < 1e-12


@settings(max_examples=60, deadline=None)
@given(monotone_models())
def test_vectorized_solver_matches_brent(model):
    y = np.concatenate([np.geomspace(1e-8, 0.5, 15), 1 - np.geomspace(1e-8, 0.49, 15)])
    mu = solve_mu(y, np.asarray(model.p))
    brent = np.array([inverse_click_probability(model, v) * model.eta for v in y])
    assert np.allclose(mu, brent, rtol=1e-11, atol=0)


def test_solver_broadcasts_over_walkers():
    p = np.array([[0.2], [0.5], [0.9]])[:, None, :]
    y = np.array([1e-4, 0.3, 0.99])
    mu = solve_mu(y, p)
    assert mu.shape == (3, 3)
    assert np.allclose(click_probability_mu(mu, p), y, rtol=0, atol=1e-15)


def test_low_flux_slope():
    assert low_flux_slope(DetectorModel(1.0, (1.0,))) == 1.0
    slope = low_flux_slope(REFERENCE)
    assert slope == pytest.approx(9.088e-7, rel=1e-12)
    # compare with the ideal-detector fit value 9.0(3)e-7
    assert abs(slope - 9.0e-7) < 0.3e-7
    delta = 1e-9 / slope
    fd = (click_probability(REFERENCE, delta) - click_probability(REFERENCE, 0.0)) / delta
    assert fd == pytest.approx(slope, rel=1e-6)
    assert low_flux_slope(DetectorModel.ideal(3e-6)) == 3e-6


@settings(max_examples=100, deadline=None)
@given(monotone_models())
def test_low_flux_slope_finite_difference(model):
    slope = low_flux_slope(model)
    assume(model.p1 > 1e-3)
    # curvature relative to the slope scales like mu / p1
    delta = 1e-9 * model.p1 / model.eta
    fd = click_probability(model, delta) / delta
    assert fd == pytest.approx(slope, rel=1e-6)
