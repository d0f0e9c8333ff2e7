import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikefield.errors import ModelError, StepSizeError
from spikefield.fokkerplanck import FPState, fp_solve, fp_step, max_stable_dt
from spikefield.invariant import gamma, stationary_measure
from spikefield.measures import GridMeasure
from spikefield.model import Constant, ModelSpec, TimeGrid
from spikefield.volterra import solve_rate


def random_state(seed, x_max=2.0, dx=0.01):
    rng = np.random.default_rng(seed)
    rho = rng.random(int(round(x_max / dx)))
    return FPState(x_max, dx, rho / (rho.sum() * dx))


@settings(max_examples=25)
@given(seed=st.integers(0, 2 ** 32 - 1), J=st.floats(0, 1))
def test_mass_is_conserved(quad, seed, J):
    m = quad.with_J(J)
    state = random_state(seed)
    dt = max_stable_dt(m, state, r_bound=5.0)
    for _ in range(50):
        state = fp_step(m, state, dt)
        assert abs(state.mass - 1.0) <= 1e-12
        assert np.all(state.rho >= 0)


def test_cfl_violation(quad):
    state = random_state(0)
    with pytest.raises(StepSizeError):
        fp_step(quad, state, 2.0 * state.dx)


def test_negative_density_is_reported(quad):
    rho = np.full(200, 0.5)
    rho[100] = -1e-3
    with pytest.raises(StepSizeError):
        fp_step(quad, FPState(2.0, 0.01, rho), 1e-3)


def test_state_shape_and_atoms():
    with pytest.raises(ModelError):
        FPState(1.0, 0.1, np.ones(9))
    with pytest.raises(ModelError):
        FPState.from_measure(GridMeasure.dirac(0.5, 1.0, 0.1))


def test_dx_must_match_the_initial_grid(quad):
    with pytest.raises(ModelError):
        fp_solve(quad, GridMeasure.dirac(0.0, 2.0, 1e-2), 1.0, dx=2e-2)


def test_stationary_law_stays_put(quad):
    nu = stationary_measure(quad, 0.0, 2.0, 1e-3)
    res = fp_solve(quad, nu, 5.0)
    assert np.max(np.abs(res.rates - gamma(quad, 0.0))) <= 1e-2
    assert res.state.mass == pytest.approx(1.0, abs=1e-12)


def test_uncoupled_gaussian_rate_relaxes(gauss):
    res = fp_solve(gauss, GridMeasure.dirac(0.0, 8.0, 2e-3), 10.0)
    assert res.rates[-1] == pytest.approx(math.sqrt(2 / math.pi), abs=1e-2)


def test_agrees_with_the_linear_rate(quad):
    ref = solve_rate(quad, Constant(0.0), GridMeasure.dirac(0.0, 3.0, 1e-3), TimeGrid.from_horizon(3.0, 1e-3))
    res = fp_solve(quad, GridMeasure.dirac(0.0, 2.0, 1e-3), 3.0)
    assert np.max(np.abs(res.rate_at(ref.times) - ref.values)) <= 2e-3


def test_first_order_in_dx(quad):
    ref = solve_rate(quad, Constant(0.0), GridMeasure.dirac(0.0, 3.0, 1e-3), TimeGrid.from_horizon(2.0, 1e-3))
    errs = []
    for dx in (8e-3, 4e-3, 2e-3):
        res = fp_solve(quad, GridMeasure.dirac(0.0, 2.0, dx), 2.0)
        errs.append(np.max(np.abs(res.rate_at(ref.times) - ref.values)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3))


def test_fixed_step_and_snapshots(quad):
    m = quad.with_J(0.5)
    res = fp_solve(m, GridMeasure.dirac(0.0, 2.0, 1e-2), 1.0, dt=1e-3, snapshot_times=(0.25, 0.5))
    assert res.times[-1] == pytest.approx(1.0)
    assert set(res.snapshots) == {0.25, 0.5}
    assert res.snapshots[0.5].t == pytest.approx(0.5, abs=1e-9)
    law = res.state.to_measure()
    assert law.total_mass() == pytest.approx(1.0, abs=1e-12)
