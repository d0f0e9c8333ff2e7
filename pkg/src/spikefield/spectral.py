"""Laplace transforms of the survival kernel and the convergence rate of the linear jump rate.

``H_hat(z) = int_0^inf exp(-z t) H_a(t) dt`` is analytic for ``Re z > -f(sigma_a)``
and ``K_hat = 1 - z H_hat``.  The linear rate converges to ``gamma(a)`` at the
exponential rate ``lambda* = -max Re(zero of H_hat)`` (or ``f(sigma_a)`` when
there is no zero).  Zeros are located with the argument principle on
rectangles and polished by Newton's method.  Since ``|K_hat(x + iy)| <=
phi_a(x) / |y|`` with ``phi_a(x) = ||d/dt (exp(-x t) K_a(t))||_1``, every zero
of ``H_hat`` in the half-plane ``Re z >= x`` has ``|Im z| <= phi_a(x)``.
"""
from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ModelError, NumericalError
from .invariant import KAPPA_CUT, excursion
from .model import ModelSpec
from .volterra import RateSolution

_GX, _GW = np.polynomial.legendre.leggauss(16)
MARGIN = 0.01
EXP_CUT = 50.0
KAPPA0_FLOORS = (0.5, 1.0, 2.0, 4.0)


# ---------------------------------------------------------------------------
# Laplace transforms
# ---------------------------------------------------------------------------

class _Transform:
    """Quadrature of ``exp(-z t - Lambda(t)) g(t)`` for a batch of ``z``."""

    def __init__(self, m: ModelSpec, a: float, x_min: float, y_max: float):
        ex = excursion(m, a)
        self.ex, self.m, self.a = ex, m, a
        self.f_sigma = ex.f_sigma
        if math.isfinite(ex.f_sigma):
            if x_min <= -ex.f_sigma:
                raise ModelError(f"Re z = {x_min} is outside the half-plane Re z > -f(sigma_a) = {-ex.f_sigma}")
            if ex._closed and ex.kappa > 0:
                T = KAPPA_CUT / ex.kappa
            else:
                T = ex.horizon
            self.use_tail = True
        else:
            # Lambda grows faster than linearly: go until Lambda + x t is large
            T = ex.horizon
            while float(ex.hazard(T)) + x_min * T < EXP_CUT:
                T *= 1.25
            self.use_tail = False
        self.T = T
        self.lam_T = float(ex.hazard(T))
        # bands above the box height are clamped (Newton iterates may stray outside)
        self.y_cap = 2.0 ** math.ceil(math.log2(max(abs(y_max), 1.0)))
        self._nodes = {}

    def _band(self, cap: float):
        """Nodes resolving ``exp(-i y t)`` for ``|y| <= cap``."""
        if cap not in self._nodes:
            ex, T = self.ex, self.T
            width = min(T / 32.0, 8.0 / cap)
            if ex._closed and ex.kappa > 0:
                width = min(width, 0.5 / ex.kappa)
            if math.isfinite(ex.f_sigma):
                width = min(width, 0.5 / ex.f_sigma)
            n = max(1, int(math.ceil(T / width)))
            h = T / n
            e = h * np.arange(n)                          # panel starts
            c = 0.5 * h * (_GX + 1.0)                     # offsets inside a panel
            t = e[:, None] + c[None, :]
            w = 0.5 * h * _GW[None, :]
            lam = ex.hazard(t)
            lam0 = lam[:, 0].copy()
            # exp(-z t - Lambda) = exp(-z e_k - Lambda_k0) exp(-z c_j) exp(-(Lambda - Lambda_k0))
            base = w * np.exp(-(lam - lam0[:, None]))
            M = {"one": base, "t": base * t, "fphi": base * self.m.f(ex.phi(t))}
            self._nodes[cap] = (e, c, lam0, M)
        return self._nodes[cap]

    def _sum(self, z, which, budget=4_000_000):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        flat = z.ravel()
        res = np.empty(flat.shape, dtype=complex)
        # group the points by |Im z| into power-of-two bands; each band gets its own panel width
        band = np.ceil(np.log2(np.maximum(np.abs(flat.imag), 1.0)))
        for b in np.unique(band):
            idx = np.nonzero(band == b)[0]
            e, c, lam0, M = self._band(min(float(2.0 ** b), self.y_cap))
            Mg = M[which]
            chunk = max(1, budget // e.size)
            for k in range(0, idx.size, chunk):
                sel = idx[k:k + chunk]
                zz = flat[sel]
                A = np.exp(-np.outer(zz, e) - lam0[None, :])
                B = np.exp(-np.outer(zz, c))
                res[sel] = np.sum((A @ Mg) * B, axis=1)
        return res.reshape(z.shape)

    def _tail(self, z, power=0):
        if not self.use_tail:
            return 0.0
        z = np.asarray(z, dtype=complex)
        base = np.exp(-self.lam_T - z * self.T) / (z + self.f_sigma)
        if power == 0:
            return base
        # derivative in z of the tail
        return base * (-self.T - 1.0 / (z + self.f_sigma))

    def H(self, z):
        return self._sum(z, "one") + self._tail(z)

    def dH(self, z):
        return -self._sum(z, "t") + self._tail(z, power=1)

    def K(self, z):
        tail = self.f_sigma * self._tail(z) if self.use_tail else 0.0
        return self._sum(z, "fphi") + tail


def laplace_H(m: ModelSpec, a: float, z, margin: float = MARGIN):
    """``H_hat_a(z)``; scalar or array ``z`` with ``Re z > -f(sigma_a) + margin``."""
    ex = excursion(m, a)
    zz = np.atleast_1d(np.asarray(z, dtype=complex))
    x = float(np.min(zz.real))
    if math.isfinite(ex.f_sigma) and x < -ex.f_sigma + margin:
        raise ModelError(f"Re z = {x} is too close to or beyond -f(sigma_a) = {-ex.f_sigma}")
    tr = _Transform(m, a, x, float(np.max(np.abs(zz.imag))))
    out = tr.H(zz)
    return complex(out[0]) if np.ndim(z) == 0 else out.reshape(np.shape(z))


def laplace_K(m: ModelSpec, a: float, z, margin: float = MARGIN):
    """``K_hat_a(z)`` by direct quadrature of the first-spike density."""
    ex = excursion(m, a)
    zz = np.atleast_1d(np.asarray(z, dtype=complex))
    x = float(np.min(zz.real))
    if math.isfinite(ex.f_sigma) and x < -ex.f_sigma + margin:
        raise ModelError(f"Re z = {x} is too close to or beyond -f(sigma_a) = {-ex.f_sigma}")
    tr = _Transform(m, a, x, float(np.max(np.abs(zz.imag))))
    out = tr.K(zz)
    return complex(out[0]) if np.ndim(z) == 0 else out.reshape(np.shape(z))


# ---------------------------------------------------------------------------
# cone bound
# ---------------------------------------------------------------------------

def _kernel_grid(m: ModelSpec, a: float, x: float, dt: float):
    ex = excursion(m, a)
    if math.isfinite(ex.f_sigma):
        T = KAPPA_CUT / ex.kappa if ex._closed and ex.kappa > 0 else ex.horizon
    else:
        T = ex.horizon
        while float(ex.hazard(T)) + x * T < EXP_CUT:
            T *= 1.25
    t = np.arange(0.0, T + 0.5 * dt, dt)
    logg = -x * t - ex.hazard(t)
    g = m.f(ex.phi(t)) * np.exp(logg)
    return ex, t, g


def cone_bound(m: ModelSpec, a: float, x: float, dt: float = 1e-3) -> float:
    """``phi_a(x) = int_0^inf |d/dt (exp(-x t) K_a(t))| dt``.

    The derivative is taken by finite differences on a uniform grid, so the
    integral is the total variation of the sampled function; the part beyond the
    grid is the remaining (monotone) value, and a nonzero ``K_a(0)`` adds its jump.
    """
    ex = excursion(m, a)
    if math.isfinite(ex.f_sigma) and x <= -ex.f_sigma:
        raise ModelError("cone bound needs x > -f(sigma_a)")
    _, t, g = _kernel_grid(m, a, x, dt)
    return float(np.sum(np.abs(np.diff(g))) + abs(g[-1]) + abs(g[0]))


def cone_bound_analytic(m: ModelSpec, a: float, x: float, dt: float = 1e-3) -> float:
    """Same quantity from ``K' = H (f'(phi)(b(phi) + a) - f(phi)^2)`` and Simpson's rule."""
    from scipy.integrate import simpson

    ex, t, _ = _kernel_grid(m, a, x, dt)
    phi = ex.phi(t)
    e = np.exp(-x * t - ex.hazard(t))
    d = e * (m.fprime(phi) * (m.b(phi) + a) - m.f(phi) ** 2 - x * m.f(phi))
    return float(simpson(np.abs(d), x=t) + abs(m.f(phi[-1]) * e[-1]) + abs(m.f(phi[0]) * e[0]))


# ---------------------------------------------------------------------------
# zeros
# ---------------------------------------------------------------------------

class _NearZero(Exception):
    pass


@dataclass(frozen=True)
class Zero:
    z: complex
    residual: float


@dataclass(frozen=True, eq=False)
class SpectralReport:
    a: float
    lambda_star: float
    zeros: list
    box: tuple                   # (x_min, x_max, y_min, y_max)
    cone_bound: float
    winding: int
    conclusive: bool
    lower_bound: bool = False
    f_sigma: float = math.inf
    sweeps: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "a": self.a,
            "lambda_star": self.lambda_star,
            "zeros": [{"re": z.z.real, "im": z.z.imag, "residual": z.residual} for z in self.zeros],
            "box": list(self.box),
            "cone_bound": self.cone_bound,
            "winding": self.winding,
            "conclusive": self.conclusive,
            "lower_bound": self.lower_bound,
        })


def _perimeter(rect, s):
    """Counter-clockwise boundary point at perimeter parameter ``s`` in ``[0, 4)``."""
    x0, x1, y0, y1 = rect
    k = np.minimum(np.floor(s), 3).astype(int)
    u = s - k
    re = np.choose(k, [x0 + (x1 - x0) * u, np.full_like(u, x1), x1 - (x1 - x0) * u, np.full_like(u, x0)])
    im = np.choose(k, [np.full_like(u, y0), y0 + (y1 - y0) * u, np.full_like(u, y1), y1 - (y1 - y0) * u])
    return re + 1j * im


def _winding(F, rect, density, n_min=64, max_jump=0.3, n_max=200000, tiny=1e-8):
    """Winding number of ``F`` around the rectangle.

    Each edge starts with ``density`` points per unit length (at least
    ``n_min``); intervals where the phase of ``F`` turns by more than
    ``max_jump`` are bisected until none does.
    """
    x0, x1, y0, y1 = rect
    nx = max(n_min, int(math.ceil((x1 - x0) * density)))
    ny = max(n_min, int(math.ceil((y1 - y0) * density)))
    s = np.concatenate([k + np.linspace(0.0, 1.0, n, endpoint=False)
                        for k, n in enumerate((nx, ny, nx, ny))])
    v = F(_perimeter(rect, s))
    while True:
        if np.min(np.abs(v)) < tiny:
            raise _NearZero
        vc = np.append(v, v[0])
        dphi = np.angle(vc[1:] / vc[:-1])
        bad = np.nonzero(np.abs(dphi) > max_jump)[0]
        if bad.size == 0:
            return int(round(dphi.sum() / (2 * math.pi)))
        if s.size + bad.size > n_max:
            raise NumericalError("winding number did not stabilise")
        s_next = np.append(s[1:], 4.0)
        mid = 0.5 * (s[bad] + s_next[bad])
        vm = F(_perimeter(rect, mid))
        s = np.insert(s, bad + 1, mid)
        v = np.insert(v, bad + 1, vm)


def _newton(F, dF, z0, tol=1e-13, max_iter=60):
    z = complex(z0)
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            f = complex(F(np.array([z]))[0])
            d = complex(dF(np.array([z]))[0])
        if d == 0 or not (cmath.isfinite(f) and cmath.isfinite(d)):
            return None
        step = f / d
        z -= step
        if abs(step) <= tol * max(1.0, abs(z)):
            return z
    return None


def _inside(z, rect, slack=1e-9):
    x0, x1, y0, y1 = rect
    return x0 - slack <= z.real <= x1 + slack and y0 - slack <= z.imag <= y1 + slack


def _search(F, dF, rect, density, depth=0, max_depth=40):
    w = _robust_winding(F, rect, density)
    if w == 0:
        return [], w
    x0, x1, y0, y1 = rect
    if w == 1:
        # start from the smallest |F| on a coarse grid inside the rectangle
        # about 500 points, spread in proportion to the sides
        r = math.sqrt((x1 - x0) / (y1 - y0))
        nx = int(np.clip(round(22 * r), 4, 120))
        ny = int(np.clip(round(484 / nx), 4, 120))
        gx = np.linspace(x0, x1, nx + 2)[1:-1]
        gy = np.linspace(y0, y1, ny + 2)[1:-1]
        Z = (gx[None, :] + 1j * gy[:, None]).ravel()
        z = _newton(F, dF, Z[np.argmin(np.abs(F(Z)))])
        if z is not None and _inside(z, rect):
            return [z], w
    if depth >= max_depth:
        raise NumericalError("rectangle subdivision did not isolate the zeros")
    if (x1 - x0) >= (y1 - y0):
        xm = 0.5 * (x0 + x1)
        parts = [(x0, xm, y0, y1), (xm, x1, y0, y1)]
    else:
        ym = 0.5 * (y0 + y1)
        parts = [(x0, x1, y0, ym), (x0, x1, ym, y1)]
    found, total = [], 0
    for r in parts:
        zs, wr = _search(F, dF, r, density, depth + 1, max_depth)
        found += zs
        total += wr
    if total != w:
        raise NumericalError(f"sub-rectangle windings {total} do not add up to {w}")
    return found, w


def _robust_winding(F, rect, density):
    x0, x1, y0, y1 = rect
    for k in range(6):
        try:
            return _winding(F, rect, density)
        except _NearZero:
            # nudge the rectangle: edges move by a small irrational fraction
            dx = (x1 - x0) * 1e-3 * (k + 1) * 0.7071
            dy = (y1 - y0) * 1e-3 * (k + 1) * 0.5773
            rect = (x0 - dx, x1 + dx * (0 if x1 == 0 else 1), y0 - dy, y1 + dy)
    raise NumericalError("contour keeps passing through a zero")


def find_zeros(m: ModelSpec, a: float, x_min: float, y_max: float, x_max: float = 0.0):
    """Zeros of ``H_hat`` in ``[x_min, x_max] x [-y_max, y_max]`` and the total winding number."""
    tr = _Transform(m, a, x_min, y_max)
    # 2000 points on the longest edge of the outer box
    density = 2000.0 / max(x_max - x_min, 2.0 * y_max)
    zeros, w = _search(tr.H, tr.dH, (x_min, x_max, -y_max, y_max), density)
    zeros = sorted(zeros, key=lambda z: (-z.real, z.imag))
    res = [Zero(z, float(abs(tr.H(np.array([z]))[0]))) for z in zeros]
    return res, w


def lambda_star(m: ModelSpec, a: float, sigma_floor: Optional[float] = None,
                floors: Optional[Sequence[float]] = None) -> SpectralReport:
    """Convergence rate ``lambda*_a`` from the zeros of ``H_hat_a`` left of the imaginary axis.

    With finite ``f(sigma_a)`` the default floor is ``f(sigma_a) - 0.01``, i.e. the
    whole admissible strip.  For ``kappa = 0`` the strip is unbounded and the
    floors ``0.5, 1, 2, 4`` are tried in turn; the sweep stops at the first floor
    holding a zero, and when none does the deepest floor is reported as a lower
    bound.
    """
    ex = excursion(m, a)
    fs = ex.f_sigma
    if sigma_floor is not None:
        if math.isfinite(fs) and not 0 < sigma_floor < fs:
            raise ModelError(f"sigma_floor must lie in (0, f(sigma_a) = {fs})")
        floors = [sigma_floor]
    elif floors is None:
        floors = [fs - MARGIN] if math.isfinite(fs) else list(KAPPA0_FLOORS)
    sweeps = []
    for s in floors:
        Y = cone_bound(m, a, -s)
        zeros, w = find_zeros(m, a, -s, Y)
        sweeps.append({"floor": s, "cone_bound": Y, "winding": w, "zeros": len(zeros)})
        if zeros:
            lam = -max(z.z.real for z in zeros)
            return SpectralReport(a, lam, zeros, (-s, 0.0, -Y, Y), Y, w, True, False, fs, sweeps)
    s = floors[-1]
    if math.isfinite(fs):
        # no zero in the strip: the convention lambda* = f(sigma_a)
        return SpectralReport(a, fs, [], (-s, 0.0, -Y, Y), Y, w, True, False, fs, sweeps)
    return SpectralReport(a, s, [], (-s, 0.0, -Y, Y), Y, w, False, True, fs, sweeps)


# ---------------------------------------------------------------------------
# decay-rate fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    lambda_hat: float
    r2: float
    oscillatory: bool
    n_points: int


def fit_decay_rate(rate, gamma_target: float, window: Sequence[float], times=None) -> DecayFit:
    """Least-squares slope of ``log |r - gamma|`` over ``window``.

    ``rate`` is a :class:`RateSolution` or an array (then ``times`` is needed).
    When ``r - gamma`` changes sign in the window the signal is flagged as
    oscillatory and the fit uses the local maxima of ``|r - gamma|`` (the
    envelope) if there are at least three of them.
    """
    if isinstance(rate, RateSolution):
        t, v = rate.times, rate.values
    else:
        t, v = np.asarray(times, dtype=float), np.asarray(rate, dtype=float)
    t1, t2 = window
    sel = (t >= t1) & (t <= t2)
    if np.count_nonzero(sel) < 10:
        raise ModelError("decay window holds fewer than 10 samples")
    tt, d = t[sel], v[sel] - gamma_target
    ad = np.abs(d)
    sign = np.sign(d[ad > 1e-12])
    osc = bool(sign.size and np.any(sign[1:] != sign[:-1]))
    if osc:
        peaks = np.nonzero((ad[1:-1] >= ad[:-2]) & (ad[1:-1] >= ad[2:]))[0] + 1
        if peaks.size >= 3:
            tt, ad = tt[peaks], ad[peaks]
    keep = ad > 1e-300
    tt, y = tt[keep], np.log(ad[keep])
    A = np.vstack([tt, np.ones_like(tt)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(-coef[0]), r2, osc, int(tt.size))
