"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from spikefield import repro
from spikefield.fokkerplanck import fp_solve
from spikefield.invariant import excursion, gamma, stationarity_residual
from spikefield.measures import GridMeasure
from spikefield.model import Constant, ExpApproach, ModelSpec, Sampled, TimeGrid
from spikefield.spectral import cone_bound, find_zeros, lambda_star
from spikefield.volterra import (integrate_kernel, kernel_pair, marginal_density, perturbation_reconstruct,
                                 picard_closure, solve_rate)

pytestmark = pytest.mark.acceptance

EXAMPLES = {"(1,0,1)": (1.0, 0.0, 1.0), "(1,1,2)": (1.0, 1.0, 2.0), "(2,2,10)": (2.0, 2.0, 10.0)}
D0 = GridMeasure.dirac(0.0, 3.0, 1e-3)


def verdict(capsys, n, ok, seconds, budget, detail):
    ok = bool(ok) and seconds <= budget
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s / {budget:g}s]")
    assert ok, detail


def test_01_kernel_normalisation(capsys):
    worst, slowest = 0.0, 0.0
    parts = []
    for name, (mu, kappa, p) in EXAMPLES.items():
        t0 = time.perf_counter()
        ex = excursion(ModelSpec.affine_power(mu, kappa, p), 0.0)
        t, w = ex.panels()
        # int_0^T K plus the mass H(T) still waiting at the horizon
        err = abs(float(w @ ex.kernel(t)) + float(ex.survival(ex.horizon)) - 1.0)
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, err)
        parts.append(f"{name} {err:.1e}")
    verdict(capsys, 1, worst <= 1e-6, slowest, 1.0, "|int K - 1|: " + ", ".join(parts) + " (tol 1e-6)")


def test_02_kernel_identity(capsys):
    t0 = time.perf_counter()
    m = ModelSpec.affine_power(1.0, 1.0, 2.0)
    grid = TimeGrid.from_horizon(10.0, 1e-3)
    rng = np.random.default_rng(0)
    x = np.linspace(0, 2, 201)
    rand = GridMeasure.from_parts(2.0, 0.01, rng.random(201) * (x < 1.5), [(0.7, 0.2), (1.9, 0.1)])
    res = []
    for nu in (D0, rand):
        K, H = kernel_pair(m, Constant(0.0), nu, grid, start_only=True)
        res.append(float(np.max(np.abs(integrate_kernel(K) - (1 - H.column0())))))
    verdict(capsys, 2, max(res) <= 1e-6, time.perf_counter() - t0, 10.0,
            f"sup|1*K - (1 - H)|: delta_0 {res[0]:.1e}, random {res[1]:.1e} (tol 1e-6)")


def test_03_stationarity(capsys):
    t0 = time.perf_counter()
    m = ModelSpec.affine_power(1.0, 1.0, 2.0)
    res = {a: stationarity_residual(m, a, t_end=10.0, dt=1e-3) for a in (0.0, 0.5, 1.0)}
    detail = ", ".join(f"a={a}: {v:.1e}" for a, v in res.items())
    verdict(capsys, 3, max(res.values()) <= 1e-4, time.perf_counter() - t0, 30.0,
            f"sup|r - gamma(a)|: {detail} (tol 1e-4)")


def test_04_gaussian_gamma(capsys):
    t0 = time.perf_counter()
    m = ModelSpec.affine_power(1.0, 0.0, 1.0)
    e0 = abs(gamma(m, 0.0) - math.sqrt(2 / math.pi))
    e1 = abs(gamma(m, 1.0) - math.sqrt(4 / math.pi))
    verdict(capsys, 4, max(e0, e1) <= 1e-8, time.perf_counter() - t0, 1.0,
            f"|gamma(0) - sqrt(2/pi)| {e0:.1e}, |gamma(1) - sqrt(4/pi)| {e1:.1e} (tol 1e-8)")


def test_05_convergence_rate(capsys):
    rep = repro.rate_lambda()
    i = rep.info
    verdict(capsys, 5, rep.passed, rep.seconds, 120.0,
            f"lambda_hat {i['lambda_hat']:.4f} vs lambda* {i['lambda_star']:.4f}, relative gap "
            f"{rep.checks[0].value:.3f} (tol 0.15)")


def test_06_propagation_of_chaos(capsys):
    rep = repro.chaos_check(N=5000, J=0.3, replicas=20, t_end=10.0, seed=0)
    i = rep.info
    verdict(capsys, 6, rep.passed, rep.seconds, 300.0,
            f"sup|empirical - Picard| {i['sup_distance']:.4f} <= 3 SE + 0.05 = {i['se_budget']:.4f}")


def test_07_small_coupling(capsys):
    rep = repro.small_j()
    gaps = ", ".join(f"{c.name.split()[-1]} {c.value:.1e}" for c in rep.checks[1:])
    verdict(capsys, 7, rep.passed, rep.seconds, 120.0,
            f"a* {rep.info['a_star']:.5f}, |r(30) - gamma(a*)|: {gaps} (tol 1e-3)")


def test_08_bistability(capsys):
    rep = repro.bistability()
    roots = ", ".join(f"{r['a']:.4f}" for r in rep.info["roots"])
    worst = max(c.value for c in rep.checks[1:]) if len(rep.checks) > 1 else math.inf
    verdict(capsys, 8, rep.passed, rep.seconds, 120.0,
            f"mu=0.1 J=2.2: roots [{roots}], worst stationarity residual {worst:.1e} (tol 1e-3)")


def test_09_oscillation(capsys):
    rep = repro.oscillation()
    i = rep.info
    verdict(capsys, 9, rep.passed, rep.seconds, 300.0,
            f"Picard amplitude [20,30] {i['picard_amplitude_20_30']:.3f}, [30,40] {i['picard_amplitude_30_40']:.3f}; "
            f"FP [30,40] {i['fp_amplitude_30_40']:.3f}, gap {rep.checks[1].value:.3f} (tol 0.10)")


def test_10_oracle_triangle(capsys):
    t0 = time.perf_counter()
    dx, t_end, t_law = 1e-3, 10.0, 5.0
    m = ModelSpec.affine_power(1.0, 1.0, 2.0, J=0.1)
    pic = picard_closure(m, D0, TimeGrid.from_horizon(t_end, 1e-3))
    fp = fp_solve(m, GridMeasure.dirac(0.0, 2.0, dx), t_end, snapshot_times=(t_law,))
    sup = float(np.max(np.abs(fp.rate_at(pic.rate.times) - pic.rate.values)))
    # law of the neuron at t = 5 from the Picard current, compared cell by cell with the PDE
    law_grid = TimeGrid.from_horizon(t_law, 1e-3)
    cur = Sampled(law_grid.times, m.J * pic.rate.values[: law_grid.n])
    rate = solve_rate(m.with_J(0.0), cur, D0, law_grid)
    law = marginal_density(m.with_J(0.0), cur, D0, rate, t_law, 2.0, dx)
    cells = fp.snapshots[t_law].rho * dx
    l1 = float(np.abs(law.cell_masses() - cells).sum())
    ok = sup <= max(1e-2, 5 * dx) and l1 <= 1e-2
    verdict(capsys, 10, ok, time.perf_counter() - t0, 300.0,
            f"sup|Picard - FP| {sup:.1e} (tol 1e-2); L1(marginal law, FP) at t=5 {l1:.3f} (tol 1e-2)")


def test_11_perturbation(capsys):
    t0 = time.perf_counter()
    m = ModelSpec.affine_power(1.0, 1.0, 2.0)
    cur = ExpApproach(0.5, 0.05, 0.3)
    grid = TimeGrid.from_horizon(10.0, 0.01)
    res = perturbation_reconstruct(m, cur, grid)
    direct = solve_rate(m, cur, D0, grid)
    sup = float(np.max(np.abs(res.rate.values - direct.values)))
    verdict(capsys, 11, sup <= 1e-3, time.perf_counter() - t0, 60.0,
            f"sup|reconstructed - direct| {sup:.1e} (tol 1e-3)")


@pytest.mark.parametrize("name", list(EXAMPLES))
def test_12_spectral_sanity(capsys, name):
    t0 = time.perf_counter()
    m = ModelSpec.affine_power(*EXAMPLES[name])
    rep = lambda_star(m, 0.0)
    inside = all(abs(z.z.imag) <= rep.cone_bound and z.z.real < 0 for z in rep.zeros)
    # right half-plane: no zero of H_hat in [0, 4] x [-Y, Y]
    Y = cone_bound(m, 0.0, 0.0)
    right, w_right = find_zeros(m, 0.0, 0.0, Y, x_max=4.0)
    ok = inside and not right and w_right == 0 and rep.winding == len(rep.zeros)
    verdict(capsys, 12, ok, time.perf_counter() - t0, 120.0,
            f"{name}: {len(rep.zeros)} zeros, winding {rep.winding}, lambda* {rep.lambda_star:.4f}, "
            f"right half-plane winding {w_right}")
