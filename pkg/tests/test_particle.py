import math

import numpy as np
import pytest
from scipy import stats

from spikefield.errors import ModelError
from spikefield.invariant import excursion, gamma
from spikefield.measures import GridMeasure
from spikefield.model import Constant, ModelSpec, Power, TabulatedLipschitz, TimeGrid
from spikefield.particle import (ParticleConfig, bin_edges, empirical_rate, ito_residual, replay, simulate,
                                 simulate_replicas)
from spikefield.volterra import solve_rate


def first_spikes(trace):
    _, first = np.unique(trace.neurons, return_index=True)
    return trace.times[first]


def test_first_spike_law_gaussian(gauss):
    tr = simulate(gauss, ParticleConfig(10_000, 6.0, seed=1))      # P(no spike by 6) ~ 1.5e-8
    t1 = first_spikes(tr)
    assert t1.size == 10_000
    assert stats.kstest(t1, lambda t: 1 - np.exp(-t ** 2 / 2)).pvalue > 0.01


def test_first_spike_law_bounded(quad):
    ex = excursion(quad, 0.0)
    tr = simulate(quad, ParticleConfig(10_000, 20.0, seed=2))
    t1 = first_spikes(tr)
    assert t1.size == 10_000
    assert stats.kstest(t1, lambda t: 1 - ex.survival(t)).pvalue > 0.01


def test_single_neuron_matches_the_linear_rate(quad):
    t_end, width = 4.0, 0.2
    traces = simulate_replicas(quad, ParticleConfig(1, t_end, seed=3, rate_bin=width), 4000)
    coarse = TimeGrid.from_horizon(t_end, width)
    emp = empirical_rate(traces, coarse)
    ref = solve_rate(quad, Constant(0.0), GridMeasure.dirac(0.0, 3.0, 1e-3), TimeGrid.from_horizon(t_end, 1e-3))
    avg = ref.bin_average(bin_edges(coarse, t_end))
    z = np.abs(emp.values - avg) / emp.stderr
    assert np.max(z[1:]) <= 4.0
    assert np.mean(z[1:] > 3) <= 0.1


@pytest.mark.parametrize("name,t_from", [("gauss", 5.0), ("quad", 8.0)])
def test_large_network_settles_at_gamma(name, t_from, request):
    m = request.getfixturevalue(name)
    N = 10_000
    tr = simulate(m, ParticleConfig(N, 10.0, seed=4))
    late = np.count_nonzero(tr.times >= t_from)
    rate = late / (N * (10.0 - t_from))
    se = math.sqrt(late) / (N * (10.0 - t_from))
    assert abs(rate - gamma(m, 0.0)) <= 3 * se


def test_ito_identity(quad):
    m = quad.with_J(0.5)
    snaps = tuple(np.linspace(0.0, 2.0, 201))
    tr = simulate(m, ParticleConfig(5000, 2.0, seed=5, snapshot_times=snaps))
    mean, se = ito_residual(m, tr, 0, 200)
    assert abs(mean) <= 5 * se


def test_seed_determinism(quad):
    m = quad.with_J(0.3)
    a = simulate(m, ParticleConfig(200, 3.0, seed=11))
    b = simulate(m, ParticleConfig(200, 3.0, seed=11))
    c = simulate(m, ParticleConfig(200, 3.0, seed=12))
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.neurons, b.neurons)
    assert a.to_csv() == b.to_csv()
    assert a.times.size != c.times.size or not np.array_equal(a.times, c.times)


def test_replay_reproduces_the_final_state(quad):
    m = quad.with_J(0.8)
    init = GridMeasure.uniform(0.0, 1.0, 2.0, 1e-3)
    tr = simulate(m, ParticleConfig(300, 3.0, seed=6, init=init, snapshot_times=(1.0, 2.0)))
    np.testing.assert_allclose(replay(m, tr), tr.final, atol=1e-10)
    assert np.all(tr.final >= 0) and np.all(tr.snapshots >= 0)
    assert np.all(np.diff(tr.times) >= 0)


def test_streams_do_not_depend_on_network_size(quad):
    pair = simulate(quad, ParticleConfig(2, 10.0, seed=7))
    for i in (0, 1):
        solo = simulate(quad, ParticleConfig(1, 10.0, seed=7, stream_offset=i))
        np.testing.assert_allclose(pair.times[pair.neurons == i], solo.times, rtol=0, atol=1e-10)


def test_empty_trace(gauss):
    tr = simulate(gauss, ParticleConfig(1, 1e-3, seed=0, rate_bin=1e-3))
    assert tr.n_events == 0
    emp = empirical_rate(tr, TimeGrid.from_horizon(1e-3, 1e-3))
    assert np.all(emp.values == 0) and np.all(np.isinf(emp.stderr))


@pytest.mark.parametrize("kappa,p", [(1.0, 2.0), (0.0, 1.0), (0.0, 2.0)])
def test_generic_path_agrees_with_the_compiled_loop(kappa, p):
    x = np.linspace(0, 4, 401)
    tab = ModelSpec(TabulatedLipschitz(x, 1 - kappa * x), Power(p), J=0.5, dt_flow=1e-3)
    m = ModelSpec.affine_power(1.0, kappa, p, J=0.5)
    cfg = ParticleConfig(20, 2.0, seed=8)
    fast, slow = simulate(m, cfg), simulate(tab, cfg)
    np.testing.assert_array_equal(fast.neurons, slow.neurons)
    np.testing.assert_allclose(fast.times, slow.times, atol=1e-8)


def test_invalid_configs():
    for kw in (dict(n_neurons=0, t_end=1.0), dict(n_neurons=1, t_end=0.0),
               dict(n_neurons=1, t_end=1.0, rate_bin=0.0), dict(n_neurons=1, t_end=1.0, seed=-1),
               dict(n_neurons=1, t_end=1.0, snapshot_times=(2.0,))):
        with pytest.raises(ModelError):
            ParticleConfig(**kw)
