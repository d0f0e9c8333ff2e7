"""Kernels K and H, the Volterra equation for the jump rate, and the nonlinear closure.

For a current ``(a_t)`` and initial law ``nu`` the jump rate ``r(t, s) = E f(Y_t)``
solves ``r = K^nu + K * r`` with ``(alpha * beta)(t, s) = int_s^t alpha(t,u) beta(u,s) du``.

Everything here is driven by a row-marching engine: a set of "sources" (neurons
reset to 0 at each grid time, or started from the support points of ``nu``) is
pushed along the flow one grid step at a time while the hazard
``int f(flow) du`` is accumulated with 4-point Gauss-Legendre panels.  The
Volterra integral uses the product trapezoidal rule.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BracketError, ConvergenceError, ModelError, StepSizeError
from .measures import GridMeasure
from .model import (
    Constant,
    Current,
    ExpApproach,
    ModelSpec,
    Sampled,
    TimeGrid,
    _e1,
    a_bar,
    flow_at,
)

_GX, _GW = np.polynomial.legendre.leggauss(4)
THETA = 0.5 * (_GX + 1.0)
WEIGHTS = 0.5 * _GW


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Kernel values ``k(t_i, t_j)`` for ``i >= j`` on ``grid``.

    ``kind`` is ``"full"`` (lower-triangular ``(n, n)`` array), ``"convolution"``
    (``values[m] = k(t0 + m dt, t0)`` and ``k(t_i, t_j) = values[i - j]``) or
    ``"start"`` (only the column ``s = t0``, shape ``(n,)``).
    """

    grid: TimeGrid
    values: np.ndarray
    kind: str = "full"

    def __post_init__(self):
        n = self.grid.n
        expected = (n, n) if self.kind == "full" else (n,)
        if self.kind not in ("full", "convolution", "start"):
            raise ModelError(f"unknown kernel kind {self.kind!r}")
        if self.values.shape != expected:
            raise ModelError(f"{self.kind} kernel needs shape {expected}, got {self.values.shape}")

    def row(self, i: int) -> np.ndarray:
        if self.kind == "full":
            return self.values[i, : i + 1]
        if self.kind == "convolution":
            return self.values[i::-1]
        raise ModelError("a start-column kernel has no rows")

    def column0(self) -> np.ndarray:
        if self.kind == "full":
            return self.values[:, 0]
        return self.values

    def dense(self) -> np.ndarray:
        if self.kind == "full":
            return self.values
        if self.kind == "convolution":
            n = self.grid.n
            idx = np.arange(n)[:, None] - np.arange(n)[None, :]
            return np.where(idx >= 0, self.values[np.clip(idx, 0, None)], 0.0)
        raise ModelError("a start-column kernel cannot be densified")

    def __getitem__(self, ij):
        i, j = ij
        if j > i:
            return 0.0
        if self.kind == "full":
            return float(self.values[i, j])
        if self.kind == "convolution":
            return float(self.values[i - j])
        if j != 0:
            raise ModelError("a start-column kernel only holds s = t0")
        return float(self.values[i])


@dataclass(frozen=True, eq=False)
class RateSolution:
    """Jump rate ``r(t_k, t0)`` on ``grid`` for a current and an initial law."""

    grid: TimeGrid
    values: np.ndarray
    current: Optional[Current] = None
    origin: Optional[GridMeasure] = None
    stderr: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def at(self, t):
        return np.interp(t, self.times, self.values)

    def bin_average(self, edges) -> np.ndarray:
        """Average of the (piecewise-linear) rate over consecutive ``edges``."""
        edges = np.asarray(edges, dtype=float)
        t, v = self.times, self.values
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])
        c = np.interp(edges, t, cum)
        return np.diff(c) / np.diff(edges)


# ---------------------------------------------------------------------------
# row-marching engine
# ---------------------------------------------------------------------------

def _is_dirac0(nu: GridMeasure) -> bool:
    return nu.atoms.shape[0] == 1 and nu.atoms[0, 0] == 0.0 and not np.any(nu.density > 0)


class _PanelMaps:
    """Flow over the sub-panel offsets ``THETA * dt`` and ``dt`` of grid steps.

    For affine drifts the flow over a sub-panel is ``x -> A x + B`` with ``A``
    common to all rows and ``B`` depending only on the row (current term).
    """

    def __init__(self, m: ModelSpec, cur: Current, grid: TimeGrid, rows: np.ndarray):
        self.m, self.cur, self.grid = m, cur, grid
        self.offsets = np.append(THETA, 1.0) * grid.dt
        self.rows = np.asarray(rows)
        self.first = int(self.rows[0]) if self.rows.size else 0
        if m.is_affine:
            k, mu = m.drift.kappa, m.drift.mu
            self.A = np.exp(-k * self.offsets)
            s = grid.t0 + grid.dt * self.rows
            self.B = np.empty((self.rows.size, self.offsets.size))
            for q, h in enumerate(self.offsets):
                self.B[:, q] = mu * float(_e1(k, h)) + cur.exp_integral(k, s, s + h)

    def apply(self, i: int, x: np.ndarray) -> list[np.ndarray]:
        """Flow of ``x`` from ``t_i`` to each sub-panel offset; the last entry is ``t_{i+1}``."""
        if self.m.is_affine:
            b = self.B[i - self.first]
            return [self.A[q] * x + b[q] for q in range(self.offsets.size)]
        s = self.grid.t0 + self.grid.dt * i
        return [self.m.advance(self.cur, s, h, x) for h in self.offsets]


class _Engine:
    """Marches reset sources (and optional initial-law sources) along the grid.

    ``mode="full"``: one reset source per grid time, row ``i`` holds
    ``phi(t_i, t_j)(0)`` and the hazard for ``j <= i``.
    ``mode="convolution"``: a single reset source from ``t0`` (constant current);
    row ``i`` is the reversed history.
    """

    def __init__(self, m: ModelSpec, cur: Current, grid: TimeGrid, nu: Optional[GridMeasure],
                 mode: str = "full", maps: Optional[_PanelMaps] = None):
        self.m, self.cur, self.grid, self.mode = m, cur, grid, mode
        n = grid.n
        self.i = 0
        self.maps = maps if maps is not None else _PanelMaps(m, cur, grid, np.arange(n))
        if mode == "full":
            self.phi = np.zeros(n)
            self.lam = np.zeros(n)
        else:
            self.hist_phi = np.zeros(n)
            self.hist_lam = np.zeros(n)
            self.phi = np.zeros(1)
            self.lam = np.zeros(1)
        if nu is not None:
            self.xpts, self.xwts = nu.support_points()
        else:
            self.xpts, self.xwts = np.zeros(0), np.zeros(0)
        self.xphi = self.xpts.copy()
        self.xlam = np.zeros_like(self.xpts)

    # state save / restore for windowed Picard
    def snapshot(self):
        keep = (self.i, self.phi.copy(), self.lam.copy(), self.xphi.copy(), self.xlam.copy())
        if self.mode != "full":
            keep += (self.hist_phi.copy(), self.hist_lam.copy())
        return keep

    def restore(self, snap, maps: Optional[_PanelMaps] = None, cur: Optional[Current] = None):
        self.i, phi, lam, xphi, xlam = snap[:5]
        self.phi, self.lam, self.xphi, self.xlam = phi.copy(), lam.copy(), xphi.copy(), xlam.copy()
        if self.mode != "full":
            self.hist_phi, self.hist_lam = snap[5].copy(), snap[6].copy()
        if maps is not None:
            self.maps = maps
        if cur is not None:
            self.cur = cur

    def _advance(self, x: np.ndarray, lam: np.ndarray):
        flows = self.maps.apply(self.i, x)
        f = self.m.f
        inc = WEIGHTS[0] * f(flows[0])
        for q in range(1, THETA.size):
            inc = inc + WEIGHTS[q] * f(flows[q])
        return flows[-1], lam + self.grid.dt * inc

    def step(self):
        """Move from row ``i`` to row ``i + 1``."""
        i = self.i
        if self.mode == "full":
            a = slice(0, i + 1)
            self.phi[a], self.lam[a] = self._advance(self.phi[a], self.lam[a])
            self.phi[i + 1] = 0.0
            self.lam[i + 1] = 0.0
        else:
            self.phi, self.lam = self._advance(self.phi, self.lam)
            self.hist_phi[i + 1] = self.phi[0]
            self.hist_lam[i + 1] = self.lam[0]
        if self.xpts.size:
            self.xphi, self.xlam = self._advance(self.xphi, self.xlam)
        self.i = i + 1

    # row quantities --------------------------------------------------------
    def row_phi(self) -> np.ndarray:
        """``phi(t_i, t_j)(0)`` for ``j = 0..i``."""
        if self.mode == "full":
            return self.phi[: self.i + 1]
        return self.hist_phi[self.i::-1]

    def row_lam(self) -> np.ndarray:
        if self.mode == "full":
            return self.lam[: self.i + 1]
        return self.hist_lam[self.i::-1]

    def row_K(self) -> np.ndarray:
        return self.m.f(self.row_phi()) * np.exp(-self.row_lam())

    def row_H(self) -> np.ndarray:
        return np.exp(-self.row_lam())

    def forcing_K(self) -> float:
        return float(self.xwts @ (self.m.f(self.xphi) * np.exp(-self.xlam)))

    def forcing_H(self) -> float:
        return float(self.xwts @ np.exp(-self.xlam))


def _trap_row_sum(krow: np.ndarray, r: np.ndarray, dt: float) -> float:
    """Trapezoid of ``k(t_i, u) r(u)`` over ``[t0, t_i]`` excluding the ``u = t_i`` node."""
    i = krow.size - 1
    if i == 0:
        return 0.0
    s = float(krow[1:i] @ r[1:i]) if i > 1 else 0.0
    return dt * (s + 0.5 * krow[0] * r[0])


def _solve_step(forcing: float, krow: np.ndarray, r: np.ndarray, dt: float) -> float:
    i = krow.size - 1
    if i == 0:
        return forcing
    denom = 1.0 - 0.5 * dt * krow[i]
    if denom <= 0:
        raise StepSizeError(f"1 - dt/2 K(t,t) = {denom:.3g} <= 0; reduce dt")
    return (forcing + _trap_row_sum(krow, r, dt)) / denom


def _engine_mode(cur: Current) -> str:
    return "convolution" if isinstance(cur, Constant) else "full"


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _kernels(m: ModelSpec, cur: Current, nu: GridMeasure, grid: TimeGrid, start_only: bool):
    n = grid.n
    if start_only or not _is_dirac0(nu):
        if not start_only:
            return _kernels_general(m, cur, nu, grid)
        eng = _Engine(m, cur, grid, nu, mode="convolution")
        K, H = np.empty(n), np.empty(n)
        for i in range(n):
            if i:
                eng.step()
            K[i], H[i] = eng.forcing_K(), eng.forcing_H()
        return KernelMatrix(grid, K, "start"), KernelMatrix(grid, H, "start")
    mode = _engine_mode(cur)
    eng = _Engine(m, cur, grid, None, mode=mode)
    if mode == "convolution":
        for _ in range(n - 1):
            eng.step()
        lam = eng.hist_lam
        return (KernelMatrix(grid, m.f(eng.hist_phi) * np.exp(-lam), "convolution"),
                KernelMatrix(grid, np.exp(-lam), "convolution"))
    K = np.zeros((n, n))
    H = np.zeros((n, n))
    for i in range(n):
        if i:
            eng.step()
        K[i, : i + 1] = eng.row_K()
        H[i, : i + 1] = eng.row_H()
    return KernelMatrix(grid, K, "full"), KernelMatrix(grid, H, "full")


def _kernels_general(m, cur, nu, grid):
    # law nu started afresh at every t_j: one engine per column
    n = grid.n
    K = np.zeros((n, n))
    H = np.zeros((n, n))
    for j in range(n):
        sub = TimeGrid(grid.t0 + j * grid.dt, grid.dt, n - j)
        kj, hj = _kernels(m, cur, nu, sub, start_only=True)
        K[j:, j] = kj.values
        H[j:, j] = hj.values
    return KernelMatrix(grid, K, "full"), KernelMatrix(grid, H, "full")


def kernel_K(m: ModelSpec, cur: Current, nu: GridMeasure, grid: TimeGrid,
             start_only: bool = False) -> KernelMatrix:
    """``K^nu(t, s) = int f(phi_{t,s}(x)) exp(-int_s^t f(phi_{u,s}(x)) du) nu(dx)``.

    With ``start_only`` only the column ``s = t0`` is computed, which is all the
    Volterra forcing needs and avoids an ``O(n^2)`` table for general ``nu``.
    """
    if grid.t0 < 0:
        raise ModelError("grid must start at t0 >= 0")
    return _kernels(m, cur, nu, grid, start_only)[0]


def kernel_H(m: ModelSpec, cur: Current, nu: GridMeasure, grid: TimeGrid,
             start_only: bool = False) -> KernelMatrix:
    """``H^nu(t, s) = int exp(-int_s^t f(phi_{u,s}(x)) du) nu(dx)``: no spike in ``(s, t]``."""
    if grid.t0 < 0:
        raise ModelError("grid must start at t0 >= 0")
    return _kernels(m, cur, nu, grid, start_only)[1]


def kernel_pair(m: ModelSpec, cur: Current, nu: GridMeasure, grid: TimeGrid,
                start_only: bool = False) -> tuple[KernelMatrix, KernelMatrix]:
    """``(K^nu, H^nu)`` from a single pass."""
    return _kernels(m, cur, nu, grid, start_only)


def integrate_kernel(k: KernelMatrix) -> np.ndarray:
    """``(1 * k)(t_i, t0) = int_{t0}^{t_i} k(u, t0) du`` by cumulative Simpson/trapezoid."""
    from scipy.integrate import cumulative_simpson

    col = k.column0()
    if col.size < 3:
        return np.concatenate([[0.0], np.cumsum(0.5 * (col[1:] + col[:-1]) * k.grid.dt)])
    return np.concatenate([[0.0], cumulative_simpson(col, dx=k.grid.dt)])


# ---------------------------------------------------------------------------
# Volterra solvers
# ---------------------------------------------------------------------------

def volterra_solve(K_forcing: KernelMatrix, K_kernel: KernelMatrix,
                   current: Optional[Current] = None, origin: Optional[GridMeasure] = None) -> RateSolution:
    """Solve ``r = K^nu + K * r`` for ``r(t_i, t0)`` by the product trapezoidal rule."""
    grid = K_kernel.grid
    if K_forcing.grid.n != grid.n or not math.isclose(K_forcing.grid.dt, grid.dt):
        raise ModelError("forcing and kernel must share the time grid")
    forcing = K_forcing.column0()
    n, dt = grid.n, grid.dt
    r = np.empty(n)
    for i in range(n):
        r[i] = _solve_step(forcing[i], K_kernel.row(i), r, dt)
    return RateSolution(grid, r, current, origin)


def resolvent(K_kernel: KernelMatrix) -> KernelMatrix:
    """Two-variable resolvent ``R = K + K * R``, row by row."""
    grid = K_kernel.grid
    n, dt = grid.n, grid.dt
    if K_kernel.kind == "convolution":
        k = K_kernel.values
        R = np.empty(n)
        for i in range(n):
            R[i] = _solve_step(k[i], k[i::-1], R, dt)
        return KernelMatrix(grid, R, "convolution")
    if K_kernel.kind != "full":
        raise ModelError("resolvent needs a full or convolution kernel")
    K = K_kernel.values
    R = np.zeros((n, n))
    for i in range(n):
        R[i, i] = K[i, i]
        if i == 0:
            continue
        denom = 1.0 - 0.5 * dt * K[i, i]
        if denom <= 0:
            raise StepSizeError(f"1 - dt/2 K(t,t) = {denom:.3g} <= 0; reduce dt")
        ki = K[i, :i]
        # sum_{l=j}^{i-1} K(i,l) R(l,j), trapezoid correction at l = j
        acc = dt * (ki @ R[:i, :i]) - 0.5 * dt * ki * np.diag(R)[:i]
        R[i, :i] = (ki + acc) / denom
    return KernelMatrix(grid, R, "full")


def convolve(alpha: KernelMatrix, beta: KernelMatrix) -> KernelMatrix:
    """``(alpha * beta)(t_i, t_j) = int_{t_j}^{t_i} alpha(t_i,u) beta(u,t_j) du`` (trapezoid)."""
    grid = alpha.grid
    dt = grid.dt
    A, B = alpha.dense(), beta.dense()
    C = dt * (A @ B)
    C -= 0.5 * dt * (A * np.diag(B)[None, :])
    C -= 0.5 * dt * (np.diag(A)[:, None] * B)
    return KernelMatrix(grid, np.tril(C), "full")


def solve_rate(m: ModelSpec, cur: Current, nu: GridMeasure, grid: TimeGrid) -> RateSolution:
    """Jump rate ``r^nu_{(a.)}(t, t0)`` by a single fused march (no kernel tables)."""
    eng = _Engine(m, cur, grid, nu, mode=_engine_mode(cur))
    r = np.empty(grid.n)
    for i in range(grid.n):
        if i:
            eng.step()
        r[i] = _solve_step(eng.forcing_K(), eng.row_K(), r, grid.dt)
    return RateSolution(grid, r, cur, nu)


# ---------------------------------------------------------------------------
# nonlinear closure
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PicardResult:
    current: Sampled
    rate: RateSolution
    iterations: int
    sweeps: int
    residual: float
    window_iterations: list = field(default_factory=list)


def picard_closure(m: ModelSpec, nu: GridMeasure, grid: TimeGrid, tol: float = 1e-9,
                   max_iter: int = 200, damping: float = 1.0, window: float = 0.5) -> PicardResult:
    """Fixed point of ``a -> J r^nu_(a.)``: the nonlinear jump rate ``E f(X_t)``.

    The iteration is run on consecutive windows of length ``window`` (forward in
    time); the rate on a window only depends on the current up to its right end,
    so earlier windows stay fixed.  Within a window the Picard update is
    ``a <- damping * J r(a) + (1 - damping) * a`` and stops when
    ``sup |J r(a) - a| <= tol``.  The returned ``current`` is the last iterate
    ``a`` and ``rate`` is ``r(a)``.
    """
    if not 0 < damping <= 1:
        raise ModelError("damping must lie in (0, 1]")
    J, n, dt = m.J, grid.n, grid.dt
    times = grid.times
    nu_f = float(nu.support_points()[1] @ m.f(nu.support_points()[0]))
    if J > 0:
        try:
            a_bar(m, J * nu_f, a_max=1e12)
        except BracketError:
            warnings.warn("no finite abar found; the uniform rate bound is not verified", RuntimeWarning)
    a = np.full(n, J * nu_f)
    r = np.zeros(n)
    w_steps = max(1, int(round(window / dt)))
    eng = _Engine(m, Constant(0.0), grid, nu, mode="full", maps=_PanelMaps(m, Constant(0.0), grid, np.arange(0)))
    # row 0 needs no marching
    r[0] = eng.forcing_K()
    a[0] = J * r[0]
    per_window, sweeps, worst = [], 0, 0.0
    i0 = 1
    while i0 < n:
        i1 = min(n - 1, i0 + w_steps - 1)
        a[i0:i1 + 1] = a[i0 - 1]
        snap = eng.snapshot()
        rows = np.arange(i0 - 1, i1)
        for it in range(1, max_iter + 1):
            cur = Sampled(times[: i1 + 1], a[: i1 + 1])
            maps = _PanelMaps(m, cur, grid, rows)
            eng.restore(snap, maps=maps, cur=cur)
            for i in range(i0, i1 + 1):
                eng.step()
                r[i] = _solve_step(eng.forcing_K(), eng.row_K(), r, dt)
            sweeps += 1
            target = J * r[i0:i1 + 1]
            res = float(np.max(np.abs(target - a[i0:i1 + 1])))
            if res <= tol:
                break
            a[i0:i1 + 1] = damping * target + (1 - damping) * a[i0:i1 + 1]
        else:
            raise ConvergenceError(
                f"Picard did not converge on [{times[i0]:.3g}, {times[i1]:.3g}] in {max_iter} iterations",
                residual=res,
            )
        per_window.append(it)
        worst = max(worst, res)
        i0 = i1 + 1
    cur = Sampled(times, a.copy())
    return PicardResult(cur, RateSolution(grid, r, cur, nu), max(per_window, default=1), sweeps, worst,
                        per_window)


# ---------------------------------------------------------------------------
# marginal laws
# ---------------------------------------------------------------------------

def _march_to(m, cur, nu, rate: RateSolution, t: float) -> _Engine:
    grid = rate.grid
    i = grid.index_of(t)
    eng = _Engine(m, cur, TimeGrid(grid.t0, grid.dt, i + 1), nu, mode=_engine_mode(cur))
    for _ in range(i):
        eng.step()
    return eng


def marginal_law(m: ModelSpec, cur: Current, nu: GridMeasure, rate: RateSolution, t: float,
                 phi: Callable) -> float:
    """``E phi(Y_t)`` from the last-reset decomposition.

    ``int_s^t phi(flow_{t,u}(0)) H(t,u) r(u,s) du + int phi(flow_{t,s}(x)) H^x(t,s) nu(dx)``
    with the ``u``-integral by the trapezoid rule on the rate grid.
    """
    eng = _march_to(m, cur, nu, rate, t)
    i = eng.i
    w = np.full(i + 1, rate.grid.dt)
    w[0] = w[-1] = 0.5 * rate.grid.dt
    if i == 0:
        w[:] = 0.0
    reset = float(np.sum(w * phi(eng.row_phi()) * eng.row_H() * rate.values[: i + 1]))
    pushed = float(eng.xwts @ (phi(eng.xphi) * np.exp(-eng.xlam)))
    return reset + pushed


def _deposit(cells: np.ndarray, dx: float, y: np.ndarray, seg_mass: np.ndarray):
    """Add masses spread uniformly over ``[y_k, y_{k+1}]`` to cells of width ``dx``.

    ``y`` must be nondecreasing; the cumulative mass is piecewise linear in ``y``
    and is differenced at the cell edges, so no mass is lost however much the
    flow compresses the segments.
    """
    cum = np.concatenate([[0.0], np.cumsum(seg_mass)])
    # at repeated abscissae keep the largest cumulative mass
    yy = np.unique(y)
    cum_at = cum[np.searchsorted(y, yy, side="right") - 1]
    edges = np.arange(cells.size + 1) * dx
    cells += np.diff(np.interp(edges, yy, cum_at))


def marginal_density(m: ModelSpec, cur: Current, nu: GridMeasure, rate: RateSolution, t: float,
                     x_max: float, dx: float) -> GridMeasure:
    """Law of ``Y_t`` on the grid ``[0, x_max]`` by pushing mass along the flow.

    Reset part: between consecutive reset times ``u_j < u_{j+1}`` the mass
    ``int H(t,u) r(u) du`` (trapezoid) lies between ``flow_{t,u}(0)`` at both ends.
    Density part of ``nu``: the trapezoid cell ``[x_k, x_{k+1}]`` carries
    ``int rho H^x`` and lands between the images of its end points.  Both are
    deposited conservatively into cells and converted to nodal values; atoms
    of ``nu`` stay atoms with mass ``mass * H^x(t, s)``.
    """
    eng = _march_to(m, cur, nu, rate, t)
    i = eng.i
    n_cells = int(round(x_max / dx))
    cells = np.zeros(n_cells)
    dt = rate.grid.dt
    if i >= 1:
        y = eng.row_phi()[::-1]                      # increasing: latest reset first
        w = (eng.row_H() * rate.values[: i + 1])[::-1]
        _deposit(cells, dx, y, 0.5 * dt * (w[1:] + w[:-1]))
    atoms = []
    surv = np.exp(-eng.xlam)
    n_at = int(np.count_nonzero(nu.atoms[:, 1] > 0))
    n_dens = eng.xpts.size - n_at
    for loc, mass in zip(eng.xphi[n_dens:], eng.xwts[n_dens:] * surv[n_dens:]):
        atoms.append((float(loc), float(mass)))
    if n_dens:
        # trapezoid cells [x_k, x_{k+1}] of the density, carried by the exact flow map
        k = np.rint(eng.xpts[:n_dens] / nu.dx).astype(int)
        g = np.zeros(nu.density.size)
        g[k] = nu.density[k] * surv[:n_dens]
        seg = 0.5 * nu.dx * (g[1:] + g[:-1])
        live = np.nonzero(seg > 0)[0]
        first, last = live[0], live[-1] + 1
        ynode = np.asarray(flow_at(m, cur, rate.grid.t0, rate.grid.times[i], nu.nodes[first:last + 1]))
        _deposit(cells, dx, ynode, seg[first:last])
    dens = np.concatenate([[cells[0]], 0.5 * (cells[:-1] + cells[1:]), [cells[-1]]]) / dx
    return GridMeasure.from_parts(x_max, dx, dens, atoms, normalize=True, max_defect=1e-2)


# ---------------------------------------------------------------------------
# perturbation decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PerturbationResult:
    rate: RateSolution
    base_rate: np.ndarray
    delta_K: KernelMatrix
    delta_r: KernelMatrix
    alpha_hat: float


def weighted_norm(k: KernelMatrix, lam: float) -> float:
    """Grid estimate of ``sup_t int |k(t,s)| exp(lam (t-s)) ds``."""
    grid = k.grid
    K = np.abs(k.dense())
    t = grid.times
    w = np.exp(lam * (t[:, None] - t[None, :]))
    rows = np.tril(K * w)
    # trapezoid in s on [t0, t_i]
    tot = grid.dt * (rows.sum(axis=1) - 0.5 * rows[:, 0] - 0.5 * np.diag(rows))
    return float(tot.max())


def perturbation_reconstruct(m: ModelSpec, cur: ExpApproach, grid: TimeGrid,
                             gamma_value: Optional[float] = None) -> PerturbationResult:
    """Rate for a current converging exponentially to ``a``, rebuilt from the constant case.

    ``Kbar = K_(a.) - K_a`` and ``Hbar = H_(a.) - H_a``;
    ``Delta_K = Kbar + xi_a * Kbar - gamma(a) Hbar`` with ``xi_a = r_a - gamma(a)``;
    ``Delta_r = Delta_K + Delta_K * Delta_r``; then
    ``r_(a.) = r_a + Delta_r + Delta_r * r_a``.
    """
    if not isinstance(cur, ExpApproach):
        raise ModelError("perturbation_reconstruct needs an ExpApproach current")
    if gamma_value is None:
        from .invariant import gamma

        gamma_value = gamma(m, cur.a)
    dirac = GridMeasure.dirac(0.0, 1.0, 0.5)
    Kt, Ht = _kernels(m, cur, dirac, grid, start_only=False)
    Ka, Ha = _kernels(m, Constant(cur.a), dirac, grid, start_only=False)
    r_a = resolvent(Ka)                      # r_a = K_a + K_a * r_a
    Kbar = KernelMatrix(grid, Kt.values - Ka.dense(), "full")
    Hbar = Ht.values - Ha.dense()
    xi = KernelMatrix(grid, r_a.values - gamma_value, "convolution")
    dK = Kbar.values + convolve(xi, Kbar).values - gamma_value * Hbar
    delta_K = KernelMatrix(grid, np.tril(dK), "full")
    delta_r = resolvent(delta_K)
    corr = convolve(delta_r, r_a).values[:, 0]
    values = r_a.values + delta_r.values[:, 0] + corr
    alpha_hat = weighted_norm(delta_K, cur.lam)
    return PerturbationResult(RateSolution(grid, values, cur, dirac), r_a.values, delta_K, delta_r, alpha_hat)


def oscillation_amplitude(rate: RateSolution, t1: float, t2: float) -> float:
    """Peak-to-peak amplitude of the rate over ``[t1, t2]``."""
    t = rate.times
    sel = (t >= t1 - 1e-12) & (t <= t2 + 1e-12)
    v = rate.values[sel]
    return float(v.max() - v.min())
