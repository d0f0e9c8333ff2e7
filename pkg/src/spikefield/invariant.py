"""Invariant measure of the linear process at constant current, gamma(a) and steady states.

At constant current ``a`` a neuron reset to 0 follows ``phi_u = flow_u(0)`` and
survives up to time ``u`` with probability ``H_a(u) = exp(-Lambda(u))``,
``Lambda(u) = int_0^u f(phi_v) dv``.  The stationary law is the occupation
measure of that excursion, normalised by ``gamma(a)^-1 = int_0^inf H_a(u) du``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate, optimize, special

from .errors import BracketError, ModelError, NumericalError
from .measures import GridMeasure
from .model import Affine, ModelSpec, Power, sigma_a

LAMBDA_CUT = 45.0    # exp(-45) ~ 3e-20
KAPPA_CUT = 40.0     # flow within sigma * exp(-40) of its limit
_GX, _GW = np.polynomial.legendre.leggauss(16)


class ExcursionFlow:
    """Flow from 0 at constant current ``a`` with its hazard ``Lambda``.

    ``phi(t)`` and ``hazard(t)`` are vectorised.  For affine drifts with integer
    power rates both are closed forms; otherwise ``(phi, Lambda)`` comes from a
    DOP853 integration with dense output.  ``horizon`` is the time after which
    either ``Lambda > 45`` or the flow sits at ``sigma_a`` to machine precision;
    beyond it ``H`` is replaced by its exponential tail at rate ``f(sigma_a)``.
    """

    def __init__(self, m: ModelSpec, a: float):
        if a < 0:
            raise ModelError("a must be nonnegative")
        self.m, self.a = m, float(a)
        self.sigma = sigma_a(m, a)
        self.f_sigma = float(m.f(self.sigma)) if math.isfinite(self.sigma) else math.inf
        d, r = m.drift, m.rate
        self._closed = isinstance(d, Affine) and isinstance(r, Power) and r.is_integer
        if self._closed:
            self._setup_closed()
        else:
            self._setup_ode()

    # -- closed forms ---------------------------------------------------------
    def _setup_closed(self):
        d, p = self.m.drift, int(self.m.rate.p)
        self.kappa = d.kappa
        self.c = d.mu + self.a
        if self.kappa == 0:
            # Lambda = c^p t^(p+1) / (p+1)
            self.horizon = (LAMBDA_CUT * (p + 1) / self.c ** p) ** (1.0 / (p + 1))
            self.tail = 0.0
        else:
            t_cap = KAPPA_CUT / self.kappa
            # the kappa = 0 horizon is a lower bound; double it for a finite bracket
            hi = (LAMBDA_CUT * (p + 1) / self.c ** p) ** (1.0 / (p + 1))
            while hi < t_cap and float(self._lam_closed(hi)) <= LAMBDA_CUT:
                hi *= 2.0
            if hi < t_cap or float(self._lam_closed(t_cap)) > LAMBDA_CUT:
                hi = min(hi, t_cap)
                self.horizon = optimize.brentq(lambda t: float(self._lam_closed(t)) - LAMBDA_CUT, 0.0, hi)
                self.tail = 0.0
            else:
                self.horizon = t_cap
                self.tail = float(np.exp(-self._lam_closed(t_cap))) / self.f_sigma

    def _lam_closed(self, t):
        t = np.asarray(t, dtype=float)
        p = int(self.m.rate.p)
        if self.kappa == 0:
            return self.c ** p * t ** (p + 1) / (p + 1)
        k, s = self.kappa, self.sigma
        # f(phi) = s^p (1 - e^{-k u})^p; integrate term by term.  For small k t the
        # binomial sum cancels badly, so use the series of (1-e^{-x})^p there.
        x = k * t
        out = np.zeros_like(x)
        small = x < 0.5
        if np.any(~small):
            xs = x[~small]
            acc = xs.copy()
            for j in range(1, p + 1):
                acc = acc + special.comb(p, j) * (-1) ** j * (-np.expm1(-j * xs)) / j
            out[~small] = acc
        res = np.empty_like(x)
        if np.any(~small):
            res[~small] = s ** p * out[~small] / k
        if np.any(small):
            # s^p S(x) / k = c^p t^(p+1) S(x) / x^(p+1), finite as k -> 0
            ts = t[small]
            res[small] = self.c ** p * ts ** (p + 1) * _small_hazard(x[small], p)
        return res

    # -- ODE fallback ---------------------------------------------------------
    def _setup_ode(self):
        m, a = self.m, self.a
        f = m.f
        sig = self.sigma

        def rhs(t, y):
            return [float(m.b(y[0])) + a, float(f(max(y[0], 0.0)))]

        def over(t, y):
            return y[1] - LAMBDA_CUT
        over.terminal = True

        events = [over]
        t_max = 1e6
        if math.isfinite(sig):
            def settled(t, y):
                return (sig - y[0]) - 1e-13 * max(sig, 1.0)
            settled.terminal = True
            events.append(settled)
            if isinstance(m.drift, Affine) and m.drift.kappa > 0:
                t_max = KAPPA_CUT / m.drift.kappa
        sol = integrate.solve_ivp(rhs, (0.0, t_max), [0.0, 0.0], method="DOP853", rtol=1e-12,
                                  atol=1e-14, dense_output=True, events=events)
        if sol.status == -1:
            raise NumericalError(f"flow integration failed: {sol.message}")
        self._sol = sol.sol
        self.horizon = float(sol.t[-1])
        lam_T = float(sol.y[1, -1])
        self.tail = 0.0 if lam_T >= LAMBDA_CUT - 1e-9 else math.exp(-lam_T) / self.f_sigma
        if self.tail and not math.isfinite(self.tail):
            raise NumericalError("hazard tail does not converge")

    # -- public ---------------------------------------------------------------
    def phi(self, t):
        t = np.asarray(t, dtype=float)
        if self._closed:
            if self.kappa == 0:
                return self.c * t
            return self.c * t * special.exprel(-self.kappa * t)
        tt = np.minimum(t, self.horizon)
        return self._sol(tt.ravel())[0].reshape(tt.shape)

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        if self._closed:
            return self._lam_closed(t)
        tt = np.minimum(t, self.horizon)
        lam = self._sol(tt.ravel())[1].reshape(tt.shape)
        return lam + np.maximum(t - self.horizon, 0.0) * self.f_sigma

    def survival(self, t):
        return np.exp(-self.hazard(t))

    def kernel(self, t):
        """``K_a(t) = f(phi_t) H_a(t)``, the first-spike density."""
        return self.m.f(self.phi(t)) * self.survival(t)

    def panels(self, width: Optional[float] = None):
        """Composite Gauss-Legendre nodes and weights on ``[0, horizon]``."""
        if width is None:
            scales = [self.horizon / 64.0]
            if self._closed and self.kappa > 0:
                scales.append(0.5 / self.kappa)
            if self.tail > 0:
                scales.append(0.5 / self.f_sigma)
            width = min(scales)
        n = max(1, int(math.ceil(self.horizon / width)))
        edges = np.linspace(0.0, self.horizon, n + 1)
        h = np.diff(edges)[:, None]
        nodes = edges[:-1, None] + 0.5 * h * (_GX[None, :] + 1.0)
        wts = 0.5 * h * _GW[None, :]
        return nodes.ravel(), wts.ravel()


def _small_hazard(x, p):
    # x^-(p+1) int_0^x (1 - e^{-y})^p dy for small x by series of g(y) = 1 - e^{-y}
    # in powers of y; 30 terms are plenty for x < 0.5.
    nterm = 30
    g = np.zeros(nterm + 1)
    for k in range(1, nterm + 1):
        g[k] = (-1) ** (k + 1) / math.factorial(k)
    poly = np.zeros(nterm + 1)
    poly[0] = 1.0
    for _ in range(p):
        poly = np.convolve(poly, g)[: nterm + 1]
    ipoly = np.concatenate([[0.0], poly / np.arange(1, nterm + 2)])
    return np.polynomial.polynomial.polyval(x, ipoly[p + 1:])


@lru_cache(maxsize=4096)
def _flow_cached(m: ModelSpec, a: float) -> ExcursionFlow:
    return ExcursionFlow(m, a)


def excursion(m: ModelSpec, a: float) -> ExcursionFlow:
    try:
        return _flow_cached(m, float(a))
    except TypeError:      # unhashable tabulated model
        return ExcursionFlow(m, a)


def gamma(m: ModelSpec, a: float) -> float:
    """Stationary jump rate ``gamma(a) = 1 / int_0^inf H_a(t) dt``."""
    ex = excursion(m, a)
    t, w = ex.panels()
    inv = float(w @ ex.survival(t)) + ex.tail
    if not (inv > 0 and math.isfinite(inv)):
        raise NumericalError("survival integral did not converge")
    return 1.0 / inv


def gamma_xspace(m: ModelSpec, a: float) -> float:
    """``gamma(a)`` from the space-form density normalisation (cross-check only).

    ``1/gamma = int_0^sigma exp(-int_0^x f/(b+a)) / (b(x)+a) dx`` by nested
    adaptive quadrature; used by tests to confirm the flow form.
    """
    sig = sigma_a(m, a)
    b, f = m.b, m.f

    def g(x):
        return float(f(x)) / (float(b(x)) + a)

    def integrand(x):
        inner, _ = integrate.quad(g, 0.0, x, limit=200, epsabs=1e-13)
        return math.exp(-inner) / (float(b(x)) + a) if inner < 745.0 else 0.0

    # geometric breakpoints keep quad from stepping over the mass near 0 when sigma is huge
    edges = [0.0]
    while edges[-1] < min(sig, 1e3) and (edges[-1] == 0.0 or integrand(edges[-1]) > 0.0):
        edges.append(min(sig, max(1.0, 2.0 * edges[-1])))
    val = sum(integrate.quad(integrand, lo, hi, limit=400, epsabs=1e-13)[0] for lo, hi in zip(edges, edges[1:]))
    if edges[-1] < sig and integrand(edges[-1]) > 0.0:
        val += integrate.quad(integrand, edges[-1], sig, limit=400, epsabs=1e-13)[0]
    return 1.0 / val


def U(m: ModelSpec, a: float) -> float:
    """Steady-state map ``a / gamma(a)``; roots of ``U(a) = J`` index invariant measures."""
    return a / gamma(m, a)


# ---------------------------------------------------------------------------
# stationary measure
# ---------------------------------------------------------------------------

STATIONARY_DEFECT = 1e-6
TRAPEZOID_END = 2e-8


def stationary_measure(m: ModelSpec, a: float, x_max: float, dx: float,
                       cut_fraction: float = 0.9) -> GridMeasure:
    """Invariant law ``nu_a`` on the grid ``[0, x_max]`` with spacing ``dx``.

    On ``[0, x_c]`` with ``x_c <= cut_fraction * sigma_a`` (earlier if the density
    steepens) the density
    ``gamma / (b + a) * exp(-int_0^x f / (b + a))`` is tabulated at the nodes (the
    node at ``x_c`` carries half its value so that the full-grid trapezoid is the
    trapezoid on ``[0, x_c]``).  The remainder, where the density may blow up
    like ``(sigma - x)^(f(sigma)/kappa - 1)``, is represented by atoms at
    Gauss-Legendre nodes of the flow time with masses ``gamma H(u) w``, plus a
    final atom at ``sigma_a`` carrying the exponential tail.
    """
    ex = excursion(m, a)
    g = gamma(m, a)
    n = int(round(x_max / dx)) + 1
    nodes = np.linspace(0.0, x_max, n)
    sig = ex.sigma
    inside = math.isfinite(sig) and sig <= x_max + 1e-12
    kc = min(int(math.floor(cut_fraction * sig / dx)), n - 1) if inside else n - 1
    xc = nodes[kc]
    # hazard in space: I(x) = int_0^x f / (b + a), cellwise 16-point Gauss-Legendre
    pts = nodes[:kc, None] + 0.5 * dx * (_GX[None, :] + 1.0)
    vals = m.f(pts) / (m.b(pts) + a)
    cells = (vals * (0.5 * dx * _GW[None, :])).sum(axis=1)
    I = np.concatenate([[0.0], np.cumsum(cells)])
    dens = np.zeros(n)
    dens[: kc + 1] = g / (m.b(nodes[: kc + 1]) + a) * np.exp(-I)
    atoms = []
    if inside:
        # pull the cut back where the trapezoid end error dx^2/12 |rho'| gets large
        if kc > 2:
            slope = np.abs(np.gradient(dens[: kc + 1], dx))
            steep = np.nonzero(slope * dx * dx / 12 > TRAPEZOID_END)[0]
            if steep.size and steep[0] < kc:
                kc = max(int(steep[0]), 1)
                dens[kc + 1:] = 0.0
                xc = nodes[kc]
        dens[kc] *= 0.5
        u_c = _flow_time(ex, xc)
        T = ex.horizon
        if T > u_c:
            rate_scale = max(ex.kappa if ex._closed else 1.0, ex.f_sigma)
            width = min(0.5 / rate_scale, (T - u_c) / 4)
            k = max(1, int(math.ceil((T - u_c) / width)))
            edges = np.linspace(u_c, T, k + 1)
            hh = np.diff(edges)[:, None]
            uu = (edges[:-1, None] + 0.5 * hh * (_GX[None, :] + 1.0)).ravel()
            ww = (0.5 * hh * _GW[None, :]).ravel()
            locs = np.minimum(ex.phi(uu), sig)
            atoms.extend(zip(locs, g * ex.survival(uu) * ww))
        if ex.tail > 0:
            atoms.append((sig, g * ex.tail))
    else:
        lost = g * _tail_integral(ex, _flow_time(ex, x_max))
        if lost > STATIONARY_DEFECT:
            raise ModelError(f"grid [0, {x_max}] truncates mass {lost:.2e} of the invariant law")
    return GridMeasure.from_parts(x_max, dx, dens, atoms, normalize=True, max_defect=STATIONARY_DEFECT)


def _flow_time(ex: ExcursionFlow, x: float) -> float:
    """Time for the flow from 0 to reach ``x``."""
    if ex._closed:
        u = ex.kappa * x / ex.c
        if u == 0:
            return x / ex.c
        return -math.log1p(-u) / u * (x / ex.c)
    if x >= ex.sigma:
        return math.inf
    return float(optimize.brentq(lambda t: float(ex.phi(t)) - x, 0.0, ex.horizon, xtol=1e-14))


def _tail_integral(ex: ExcursionFlow, u: float) -> float:
    """``int_u^inf H(t) dt``."""
    if u >= ex.horizon:
        return ex.tail * math.exp(-(u - ex.horizon) * ex.f_sigma) if ex.tail else 0.0
    val, _ = integrate.quad(lambda t: float(ex.survival(t)), u, ex.horizon, limit=200, epsabs=1e-14)
    return val + ex.tail


# ---------------------------------------------------------------------------
# steady states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SteadyRoot:
    a: float
    gamma: float
    bracket: tuple
    stable_hint: bool


@dataclass(frozen=True, eq=False)
class SteadyStateReport:
    J: float
    a_grid: np.ndarray
    U_values: np.ndarray
    roots: list
    J_m: float
    windows: list = field(default_factory=list)

    @property
    def gamma_at_roots(self) -> list:
        return [r.gamma for r in self.roots]

    @property
    def multiplicity(self) -> int:
        return len(self.roots)

    def to_json(self, scan_csv: Optional[str] = None) -> str:
        return json.dumps({
            "J": self.J,
            "roots": [{"a": r.a, "gamma": r.gamma, "stable_hint": r.stable_hint} for r in self.roots],
            "J_m": self.J_m if math.isfinite(self.J_m) else None,
            "bistable_windows": [list(w) for w in self.windows],
            "scan_csv": scan_csv,
        })


def scan_U(m: ModelSpec, a_max: float, n_scan: int = 2000):
    a = np.linspace(0.0, a_max, n_scan)
    u = np.array([U(m, x) for x in a])
    return a, u


def steady_states(m: ModelSpec, a_max: float, n_scan: int = 2000, xtol: float = 1e-12) -> SteadyStateReport:
    """All roots of ``U(a) = J`` on ``[0, a_max]`` from a dense scan plus bisection."""
    if not a_max > 0:
        raise ModelError("a_max must be positive")
    if n_scan < 3:
        raise ModelError("n_scan must be at least 3")
    J = m.J
    a, u = scan_U(m, a_max, n_scan)
    g = u - J
    roots = []
    for k in range(n_scan - 1):
        lo, hi = a[k], a[k + 1]
        if g[k] == 0.0:
            roots.append(lo)
            continue
        if g[k] * g[k + 1] < 0:
            roots.append(optimize.brentq(lambda x: U(m, x) - J, lo, hi, xtol=xtol, rtol=1e-15))
    if g[-1] == 0.0:
        roots.append(a[-1])
    if not roots:
        raise BracketError(f"no steady state in [0, {a_max:g}]; increase a_max")
    out = []
    for r in roots:
        k = min(int(np.searchsorted(a, r)), n_scan - 1)
        h = max(1e-6, 1e-6 * r)
        slope = (U(m, r + h) - U(m, max(r - h, 0.0))) / (r + h - max(r - h, 0.0))
        out.append(SteadyRoot(float(r), gamma(m, r), (float(a[max(k - 1, 0)]), float(a[k])), bool(slope > 0)))
    # unique-root threshold: below the smallest local minimum value of U every J has one root
    interior = np.arange(1, n_scan - 1)
    mins = interior[(u[interior] < u[interior - 1]) & (u[interior] <= u[interior + 1])]
    maxs = interior[(u[interior] > u[interior - 1]) & (u[interior] >= u[interior + 1])]
    J_m = float(u[mins].min()) if mins.size else math.inf
    windows = [(float(u[i]), float(u[j])) for i, j in zip(mins, maxs)] if mins.size else []
    if mins.size:
        windows = []
        for j in maxs:
            later = mins[mins > j]
            if later.size:
                windows.append((float(u[later[0]]), float(u[j])))
    return SteadyStateReport(J, a, u, out, J_m, windows)


def stationarity_residual(m: ModelSpec, a: float, t_end: float = 10.0, dt: float = 1e-3,
                          dx: Optional[float] = None) -> float:
    """``sup_t |r(t) - gamma(a)|`` for the linear rate started from ``nu_a`` at constant ``a``.

    The default ``dx`` is ``min(1e-3, sigma_a / 1000)`` so that narrow supports
    are still resolved.
    """
    from .model import Constant, TimeGrid
    from .volterra import solve_rate

    sig = sigma_a(m, a)
    if dx is None:
        dx = min(1e-3, sig / 1000.0) if math.isfinite(sig) else 1e-3
    x_max = (sig + max(0.05 * sig, 10 * dx)) if math.isfinite(sig) else _finite_support(m, a)
    x_max = dx * math.ceil(x_max / dx)
    nu = stationary_measure(m, a, x_max, dx)
    grid = TimeGrid.from_horizon(t_end, dt)
    r = solve_rate(m, Constant(a), nu, grid)
    return float(np.max(np.abs(r.values - gamma(m, a))))


def _finite_support(m: ModelSpec, a: float) -> float:
    ex = excursion(m, a)
    # grow x_max until the truncated mass is below the defect budget
    g = gamma(m, a)
    x = 1.0
    while g * _tail_integral(ex, _flow_time(ex, x)) > 1e-9:
        x *= 1.5
    return x
