"""Finite-volume solver for the nonlinear transport equation of the mean-field law.

    d/dt rho = -d/dx[(b(x) + J r_t) rho] - f(x) rho,    r_t = int f rho dx,

with the killed mass re-entering at ``x = 0``.  Cells ``[k dx, (k+1) dx)`` carry
average densities; the transport term is first-order upwind with a closed right
boundary, the sink is applied exactly over a step (``rho exp(-f dt)``) and the
mass it removes is injected as the boundary flux into cell 0.  Total mass is
therefore conserved to round-off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ModelError, StepSizeError
from .measures import GridMeasure
from .model import ModelSpec

CFL_MAX = 0.9
MASS_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class FPState:
    x_max: float
    dx: float
    rho: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        n = int(round(self.x_max / self.dx))
        if self.rho.shape != (n,):
            raise ModelError(f"expected {n} cells, got {self.rho.shape}")

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.rho.size) + 0.5) * self.dx

    @property
    def mass(self) -> float:
        return float(self.rho.sum() * self.dx)

    def rate(self, m: ModelSpec) -> float:
        return float(m.f(self.centers) @ self.rho * self.dx)

    @classmethod
    def from_measure(cls, nu: GridMeasure, t: float = 0.0) -> "FPState":
        if nu.atoms.size and np.any(nu.atoms[:, 1] > 0):
            raise ModelError("mollify atoms before building a PDE state")
        masses = nu.cell_masses()
        return cls(nu.x_max, nu.dx, masses / nu.dx, t)

    def to_measure(self) -> GridMeasure:
        """Nodal density by averaging neighbouring cells (end nodes copy their cell)."""
        r = self.rho
        nodes = np.concatenate([[r[0]], 0.5 * (r[:-1] + r[1:]), [r[-1]]])
        return GridMeasure.from_parts(self.x_max, self.dx, nodes, normalize=True, max_defect=1e-2)


def max_stable_dt(m: ModelSpec, state: FPState, r_bound: float) -> float:
    """Largest step with CFL number ``CFL_MAX`` when ``J r_t <= J r_bound``."""
    edges = np.arange(0, state.rho.size) * state.dx     # left edges; the last right edge is closed
    b = m.b(edges)
    vmax = float(max(np.max(np.abs(b)), np.max(np.abs(b + m.J * r_bound))))
    return CFL_MAX * state.dx / vmax


class _Coefficients:
    """Model coefficients on the cell geometry, evaluated once per grid."""

    def __init__(self, m: ModelSpec, x_max: float, dx: float, n: int):
        self.J = m.J
        self.fx = m.f((np.arange(n) + 0.5) * dx)
        self.b_right = m.b(np.arange(1, n + 1) * dx)
        self.b0 = float(m.b(0.0))


def fp_step(m: ModelSpec, state: FPState, dt: float, coef: _Coefficients | None = None) -> FPState:
    """One step of sink + re-injection + upwind transport."""
    rho, dx = state.rho, state.dx
    if coef is None:
        coef = _Coefficients(m, state.x_max, dx, rho.size)
    fx = coef.fx
    r = float(fx @ rho * dx)
    v = coef.b_right + coef.J * r                 # velocities at right edges
    v[-1] = 0.0                                    # closed right boundary
    cfl = dt * max(float(np.max(np.abs(v))), abs(coef.b0 + coef.J * r)) / dx
    if cfl > CFL_MAX * (1 + 1e-12):
        raise StepSizeError(f"CFL number {cfl:.3f} exceeds {CFL_MAX}")
    survive = np.exp(-fx * dt)
    rho1 = rho * survive
    killed = float(rho.sum() - rho1.sum())
    # upwind fluxes through right edges
    up = np.empty_like(rho1)
    up[:-1] = rho1[1:]
    up[-1] = 0.0
    flux = v * np.where(v > 0, rho1, up)
    div = flux.copy()
    div[1:] -= flux[:-1]
    div[0] -= killed * dx / dt                     # injected boundary flux
    new = rho1 - dt / dx * div
    if np.any(new < -1e-14):
        raise StepSizeError("negative density after step; reduce dt")
    np.maximum(new, 0.0, out=new)
    return FPState(state.x_max, dx, new, state.t + dt)


@dataclass(frozen=True, eq=False)
class FPResult:
    times: np.ndarray
    rates: np.ndarray
    state: FPState
    snapshots: dict

    def rate_at(self, t):
        return np.interp(t, self.times, self.rates)


def fp_solve(m: ModelSpec, init: GridMeasure, t_end: float, dx: float | None = None,
             dt: float | None = None, snapshot_times=(), mollify_cells: int = 3) -> FPResult:
    """Integrate from ``init`` up to ``t_end``; records ``r_t`` at every step.

    Atoms of ``init`` are first spread over ``mollify_cells + 1`` nodes.  ``dx``
    must match the grid of ``init`` when given.  Without ``dt`` the step is the
    CFL-limited step for a rate bound grown adaptively from the initial rate.
    """
    if dx is not None and not math.isclose(dx, init.dx, rel_tol=1e-12):
        raise ModelError("dx must equal the grid spacing of the initial measure")
    nu = init.mollified(mollify_cells) if init.atoms.size else init
    state = FPState.from_measure(nu)
    n_steps = None
    if dt is not None:
        n_steps = int(math.ceil(t_end / dt - 1e-9))
        dt = t_end / n_steps
    times, rates = [0.0], [state.rate(m)]
    snaps = {}
    pending = sorted(snapshot_times)
    r_bound = max(1.0, 2.0 * rates[0])
    dx_ = state.dx
    coef = _Coefficients(m, state.x_max, dx_, state.rho.size)
    b_left = m.b(np.arange(state.rho.size) * dx_)
    vmax0 = float(np.max(np.abs(b_left)))
    k = 0
    while state.t < t_end - 1e-12:
        if n_steps is not None:
            h = dt
        else:
            h = min(CFL_MAX * dx_ / max(vmax0, float(np.max(np.abs(b_left + m.J * r_bound)))),
                    t_end - state.t)
            # finish on snapshot times exactly
            if pending and state.t + h > pending[0] - 1e-12 and pending[0] > state.t:
                h = pending[0] - state.t
        state = fp_step(m, state, h, coef)
        k += 1
        r = state.rate(m)
        if r > r_bound:
            r_bound = 2.0 * r
        times.append(state.t)
        rates.append(r)
        while pending and state.t >= pending[0] - 1e-9:
            snaps[pending.pop(0)] = state
        if abs(state.mass - 1.0) > MASS_TOL:
            raise StepSizeError(f"mass drifted to {state.mass!r}")
        if n_steps is not None and k >= n_steps:
            break
    return FPResult(np.array(times), np.array(rates), state, snaps)
