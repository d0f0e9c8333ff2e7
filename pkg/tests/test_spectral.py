import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from spikefield.errors import ModelError
from spikefield.invariant import gamma
from spikefield.measures import GridMeasure
from spikefield.model import Constant, ModelSpec, TimeGrid
from spikefield.repro import decay_window
from spikefield.spectral import (cone_bound, cone_bound_analytic, find_zeros, fit_decay_rate, lambda_star,
                                 laplace_H, laplace_K)
from spikefield.volterra import solve_rate

GAUSS_ZERO = complex(-1.9159908576, 2.8163594182)


def gauss_H(z):
    # int_0^inf exp(-z t - t^2 / 2) dt
    return math.sqrt(math.pi / 2) * np.exp(z * z / 2) * special.erfc(z / math.sqrt(2))


def test_transform_gaussian_oracle(gauss):
    z = np.array([0.0, 1.0, 0.3 + 2j, -1.0 + 0.5j, -2.5 - 3j])
    np.testing.assert_allclose(laplace_H(gauss, 0.0, z), gauss_H(z), rtol=1e-10)
    np.testing.assert_allclose(laplace_K(gauss, 0.0, z), 1 - z * gauss_H(z), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("name,a", [("gauss", 0.0), ("quad", 0.0), ("quad", 0.5), ("stiff", 1.0)])
def test_transform_at_zero(name, a, request):
    m = request.getfixturevalue(name)
    assert laplace_H(m, a, 0.0) == pytest.approx(1 / gamma(m, a), rel=1e-10)
    assert laplace_K(m, a, 0.0) == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=25)
@given(x=st.floats(-0.9, 2.0), y=st.floats(-20, 20), a=st.floats(0, 1))
def test_K_hat_is_one_minus_z_H_hat(quad, x, y, a):
    z = complex(x, y)
    assert abs(laplace_K(quad, a, z) - (1 - z * laplace_H(quad, a, z))) <= 1e-8


def test_transform_rejects_the_left_strip(quad):
    # f(sigma_0) = 1 for (1, 1, 2)
    with pytest.raises(ModelError):
        laplace_H(quad, 0.0, -1.0 + 0.3j)


# -- cone bound ------------------------------------------------------------

@pytest.mark.parametrize("name,a,x", [("gauss", 0.0, -2.0), ("quad", 0.0, -0.5), ("quad", 0.5, -1.5)])
def test_cone_bound_two_ways(name, a, x, request):
    m = request.getfixturevalue(name)
    assert cone_bound(m, a, x) == pytest.approx(cone_bound_analytic(m, a, x), rel=1e-3)


def test_cone_bound_excludes_zeros(gauss):
    x = -2.0
    Y = cone_bound(gauss, 0.0, x)
    assert Y == pytest.approx(32.744, abs=1e-2)
    xs = np.linspace(x, 0.0, 9)
    for y in (Y, 1.5 * Y, 4 * Y):
        z = xs + 1j * y
        # |K_hat| < 1 there, so H_hat = (1 - K_hat) / z cannot vanish
        assert np.all(np.abs(laplace_K(gauss, 0.0, z)) < 1)


def test_cone_bound_grows_to_the_left(quad):
    vals = [cone_bound(quad, 0.5, x) for x in (0.0, -0.5, -1.0, -1.4)]
    assert np.all(np.diff(vals) >= -1e-9)


# -- zeros -----------------------------------------------------------------

def test_gaussian_zeros(gauss):
    zeros, w = find_zeros(gauss, 0.0, -2.0, 40.0)
    assert w == len(zeros) == 2
    zs = sorted((z.z for z in zeros), key=lambda z: z.imag)
    assert zs[1] == pytest.approx(GAUSS_ZERO, abs=1e-8)
    assert zs[0] == pytest.approx(GAUSS_ZERO.conjugate(), abs=1e-8)
    assert all(z.residual < 1e-10 for z in zeros)
    assert all(abs(gauss_H(z.z)) < 1e-10 for z in zeros)


def test_zeros_against_a_grid_scan(gauss):
    # local minima of |H_hat| on a dense grid sit next to the zeros found by winding
    x = np.linspace(-2.0, -0.05, 196)
    y = np.linspace(0.05, 5.0, 496)
    Z = x[None, :] + 1j * y[:, None]
    A = np.abs(gauss_H(Z))
    i, j = np.unravel_index(np.argmin(A), A.shape)
    assert abs(Z[i, j] - GAUSS_ZERO) < 0.02


def test_lambda_star_gaussian(gauss):
    rep = lambda_star(gauss, 0.0)
    assert rep.lambda_star == pytest.approx(-GAUSS_ZERO.real, abs=1e-8)
    assert rep.conclusive and not rep.lower_bound
    assert rep.winding == len(rep.zeros)


@pytest.mark.parametrize("a", [0.0, 0.5, 1.0])
def test_lambda_star_bounded_rate(quad, a):
    rep = lambda_star(quad, a)
    assert 0 < rep.lambda_star <= rep.f_sigma
    assert rep.winding == len(rep.zeros)
    assert all(z.z.real < 0 for z in rep.zeros)
    # zeros come in conjugate pairs
    zs = sorted(z.z for z in rep.zeros if z.z.imag > 0)
    zc = sorted(z.z.conjugate() for z in rep.zeros if z.z.imag < 0)
    np.testing.assert_allclose(zs, zc, atol=1e-8)


def test_lambda_star_floor_validation(quad):
    with pytest.raises(ModelError):
        lambda_star(quad, 0.0, sigma_floor=1.5)


def test_report_json(gauss):
    import json

    rep = lambda_star(gauss, 0.0)
    data = json.loads(rep.to_json())
    assert data["winding"] == 2 and len(data["zeros"]) == 2


# -- decay fit -------------------------------------------------------------

def test_fit_pure_exponential():
    t = np.linspace(0, 10, 501)
    fit = fit_decay_rate(1.0 + 0.3 * np.exp(-0.7 * t), 1.0, (1.0, 9.0), times=t)
    assert fit.lambda_hat == pytest.approx(0.7, abs=1e-6)
    assert not fit.oscillatory and fit.r2 > 0.999999


def test_fit_damped_oscillation():
    t = np.linspace(0, 12, 6001)
    fit = fit_decay_rate(np.exp(-0.5 * t) * np.cos(3 * t), 0.0, (0.5, 11.5), times=t)
    assert fit.oscillatory
    assert fit.lambda_hat == pytest.approx(0.5, abs=1e-3)


def test_fit_needs_ten_samples():
    t = np.linspace(0, 1, 11)
    with pytest.raises(ModelError):
        fit_decay_rate(np.exp(-t), 0.0, (0.0, 0.5), times=t)


def test_observed_decay_matches_the_leading_zero(gauss):
    g = gamma(gauss, 0.0)
    sol = solve_rate(gauss, Constant(0.0), GridMeasure.dirac(0.0, 3.0, 1e-3), TimeGrid.from_horizon(12.0, 2e-3))
    fit = fit_decay_rate(sol, g, decay_window(sol.times, sol.values, g))
    assert abs(fit.lambda_hat + GAUSS_ZERO.real) <= 0.15 * -GAUSS_ZERO.real
