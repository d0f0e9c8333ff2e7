import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from spikefield.errors import BracketError, ModelError
from spikefield.model import (Affine, Constant, ExpApproach, ModelSpec, Power, Sampled, TabulatedConvex,
                              TabulatedLipschitz, TimeGrid, a_bar, beta_sup, flow_at, psi, r_bar, rk4_flow,
                              sigma_a)

pos = st.floats(0.05, 3.0)
nonneg = st.floats(0.0, 3.0)


# -- flow ------------------------------------------------------------------

def test_flow_settles_at_sigma(stiff):
    assert flow_at(stiff, Constant(0.0), 0.0, 40.0, 0.0) == pytest.approx(1.0, abs=1e-14)


def test_flow_identity_at_equal_times(quad):
    for cur in (Constant(0.3), ExpApproach(0.5, 0.2, 1.0), Sampled([0.0, 1.0], [0.0, 2.0])):
        assert flow_at(quad, cur, 0.7, 0.7, 3.7) == 3.7


def test_flow_closed_form_value():
    m = ModelSpec.affine_power(1.0, 0.5, 1.0)
    # x e^{-k t} + (mu + a)/k (1 - e^{-k t}) with x = 0, a = 0.25, k = 0.5, t = 1
    expect = 2.5 * (1 - math.exp(-0.5))
    assert flow_at(m, Constant(0.25), 0.0, 1.0, 0.0) == pytest.approx(expect, rel=1e-14)
    assert rk4_flow(m, Constant(0.25), 0.0, 1.0, 0.0) == pytest.approx(expect, abs=1e-10)


def test_flow_exp_current_closed_form():
    m = ModelSpec.affine_power(1.0, 1.0, 2.0)
    cur = ExpApproach(0.5, 0.3, 0.7)
    t = 2.0
    # x' = 1 - x + 0.5 + 0.3 e^{-0.7 t}, x(0) = 0
    exact = 1.5 * (1 - math.exp(-t)) + 0.3 * (math.exp(-0.7 * t) - math.exp(-t)) / (1 - 0.7)
    assert flow_at(m, cur, 0.0, t, 0.0) == pytest.approx(exact, rel=1e-13)


def test_flow_rejects_bad_arguments(quad):
    with pytest.raises(ModelError):
        flow_at(quad, Constant(0.0), 1.0, 0.5, 0.0)
    with pytest.raises(ModelError):
        flow_at(quad, Constant(0.0), 0.0, 1.0, -0.1)


@given(mu=pos, kappa=nonneg, a=nonneg, C=nonneg, lam=pos, x=st.floats(0, 4), t=st.floats(0, 5))
def test_flow_matches_rk4(mu, kappa, a, C, lam, x, t):
    m = ModelSpec.affine_power(mu, kappa, 2.0)
    cur = ExpApproach(a, C, lam)
    assert flow_at(m, cur, 0.0, t, x) == pytest.approx(rk4_flow(m, cur, 0.0, t, x), abs=1e-8)


@given(mu=pos, kappa=nonneg, a=nonneg, d=nonneg, x=st.floats(0, 4), y=st.floats(0, 4), t=st.floats(0, 5))
def test_flow_comparison_principle(mu, kappa, a, d, x, y, t):
    m = ModelSpec.affine_power(mu, kappa, 1.0)
    hi_a, lo_a = max(a, d), min(a, d)
    hi_x, lo_x = max(x, y), min(x, y)
    assert flow_at(m, Constant(hi_a), 0, t, hi_x) >= flow_at(m, Constant(lo_a), 0, t, lo_x) - 1e-12


@given(mu=pos, kappa=nonneg, a=nonneg, x=st.floats(0, 4), t=st.floats(0, 5))
def test_flow_linear_growth(mu, kappa, a, x, t):
    m = ModelSpec.affine_power(mu, kappa, 1.0)
    assert flow_at(m, Constant(a), 0, t, x) <= x + (m.C_b + a) * t + 1e-12


@given(mu=pos, kappa=nonneg, a=nonneg, C=nonneg, lam=pos, t=st.floats(0, 5))
def test_flow_lipschitz_in_current(mu, kappa, a, C, lam, t):
    m = ModelSpec.affine_power(mu, kappa, 1.0)
    gap = abs(flow_at(m, ExpApproach(a, C, lam), 0, t, 0.0) - flow_at(m, Constant(a), 0, t, 0.0))
    assert gap <= C * (1 - math.exp(-lam * t)) / lam + 1e-12


def test_sampled_current_flow_is_exact_for_piecewise_linear():
    m = ModelSpec.affine_power(1.0, 1.0, 2.0)
    cur = Sampled([0.0, 1.0, 2.0], [0.0, 1.0, 0.5])
    assert flow_at(m, cur, 0.0, 2.0, 0.2) == pytest.approx(rk4_flow(m, cur, 0.0, 2.0, 0.2, dt=1e-4), abs=1e-12)


def test_tabulated_drift_flow_uses_rk4():
    b = TabulatedLipschitz(np.array([0.0, 1.0, 5.0]), np.array([1.0, 0.0, -4.0]))
    m = ModelSpec(b, Power(2.0))
    ref = ModelSpec.affine_power(1.0, 1.0, 2.0)
    assert flow_at(m, Constant(0.0), 0, 2.0, 0.0) == pytest.approx(flow_at(ref, Constant(0.0), 0, 2.0, 0.0), abs=1e-10)


# -- sigma, psi, bounds ----------------------------------------------------

def test_sigma_examples():
    assert sigma_a(ModelSpec.affine_power(2, 2, 1), 0.0) == 1.0
    assert sigma_a(ModelSpec.affine_power(1, 0, 1), 5.0) == math.inf
    assert sigma_a(ModelSpec.affine_power(1, 1, 1), 0.5) == 1.5


def test_sigma_tabulated_by_bisection():
    b = TabulatedLipschitz(np.array([0.0, 2.0]), np.array([1.0, -1.0]))
    m = ModelSpec(b, Power(1.0))
    assert sigma_a(m, 0.5) == pytest.approx(1.5, abs=1e-10)


def test_psi_examples():
    assert psi(ModelSpec.affine_power(1, 0, 1), 2.0) == pytest.approx(2.0)
    assert psi(ModelSpec.affine_power(1, 0, 2), 3.0) == pytest.approx(1.5 * 3 ** (4 / 3))
    assert psi(ModelSpec.affine_power(1, 0, 2), 0.0) == 0.0


@given(p=st.floats(1.0, 6.0), theta=st.floats(0.0, 5.0))
def test_psi_matches_grid_supremum(p, theta):
    m = ModelSpec.affine_power(1, 0, p)
    x = np.linspace(0, 10, 200001)
    brute = np.max(theta * p * x ** (p - 1) - 0.5 * x ** (2 * p))
    assert psi(m, theta) == pytest.approx(brute, rel=1e-6, abs=1e-9)


def test_tabulated_psi_matches_power_on_a_fine_table():
    x = np.linspace(0, 4, 4001)
    m = ModelSpec(Affine(1.0), TabulatedConvex(x, x ** 2))
    ref = ModelSpec.affine_power(1.0, 0.0, 2.0)
    assert psi(m, 3.0) == pytest.approx(psi(ref, 3.0), rel=1e-3)


def test_a_bar_examples():
    m = ModelSpec.affine_power(1.0, 0.0, 1.0)
    assert a_bar(m.with_J(0.0), kappa_floor=0.7) == 0.7
    # a = 0.5 sqrt(2 (a + 1)) with psi(theta) = theta for f(x) = x
    assert a_bar(m.with_J(0.5)) == pytest.approx(1.0, abs=1e-10)
    # J = 2: a^2 = 8 (a + 1)
    assert a_bar(m.with_J(2.0)) == pytest.approx(4 + 2 * math.sqrt(6), abs=1e-9)


def test_a_bar_bracket_failure():
    m = ModelSpec.affine_power(1.0, 0.0, 10.0, J=50.0)
    with pytest.raises(BracketError):
        a_bar(m, a_max=1e3)


def test_r_bar_examples():
    m = ModelSpec.affine_power(1.0, 0.0, 1.0)
    assert r_bar(m) == pytest.approx(math.sqrt(2))
    assert r_bar(m.with_J(0.5)) == pytest.approx(math.sqrt(3))


@given(p=st.floats(1.0, 4.0), J1=st.floats(0, 2), J2=st.floats(0, 2))
def test_bounds_nondecreasing_in_J(p, J1, J2):
    lo, hi = sorted((J1, J2))
    m = ModelSpec.affine_power(1.0, 1.0, p)
    assert a_bar(m.with_J(lo)) <= a_bar(m.with_J(hi)) + 1e-9
    assert r_bar(m.with_J(lo)) <= r_bar(m.with_J(hi)) + 1e-12


@given(p=st.floats(1.0, 4.0), J=st.floats(0.01, 2))
@example(p=1.0000000000000002, J=1.0)
def test_beta_sup_matches_grid(p, J):
    m = ModelSpec.affine_power(1.0, 1.0, p, J=J)
    # geometric nodes resolve the maximiser 8J(p-1), which is tiny for p near 1
    top = 40 * max(J, 0.1) * p
    x = np.concatenate([np.linspace(0, top, 400001), np.geomspace(1e-16, top, 400001)])
    brute = np.max(J * p * x ** (p - 1) - x ** p / 8)
    assert beta_sup(m) == pytest.approx(brute, rel=1e-5)


# -- validation ------------------------------------------------------------

@pytest.mark.parametrize("build", [
    lambda: Affine(0.0, 1.0),
    lambda: Affine(1.0, -1.0),
    lambda: Power(0.5),
    lambda: ModelSpec(Affine(1.0), Power(1.0), J=-1.0),
    lambda: ExpApproach(-1.0, 0.0, 1.0),
    lambda: ExpApproach(1.0, 0.0, 0.0),
    lambda: Sampled([0.0, 0.0], [1.0, 1.0]),
    lambda: Sampled([0.0, 1.0], [1.0, -1.0]),
    lambda: TabulatedConvex(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 3.0])),   # concave
    lambda: TabulatedConvex(np.array([0.0, 1.0]), np.array([1.0, 2.0])),             # f(0) != 0
    lambda: TabulatedLipschitz(np.array([0.0, 1.0]), np.array([-1.0, 0.0])),         # b(0) <= 0
    lambda: TimeGrid(0.0, 0.0, 3),
])
def test_invalid_construction(build):
    with pytest.raises(ModelError):
        build()


def test_time_grid():
    g = TimeGrid.from_horizon(1.0, 0.1)
    assert g.n == 11 and g.t_end == pytest.approx(1.0)
    assert g.index_of(0.3) == 3
