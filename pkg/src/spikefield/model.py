"""Model specification: drift, rate function, coupling, external currents and flows.

The between-spike dynamics of a neuron driven by an external current ``a_t`` is
the ODE ``dy/dt = b(y) + a_t``.  For the affine drift ``b(x) = mu - kappa*x``
the flow is available in closed form and every current kind below provides the
exponentially weighted integral it needs exactly.  Tabulated drifts fall back on
a fixed-step RK4 integrator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import optimize

from .errors import BracketError, ModelError

_TAB_TOL = 1e-10


# ---------------------------------------------------------------------------
# small closed forms
# ---------------------------------------------------------------------------

def _e1(k: float, h):
    """``int_0^h exp(-k (h - v)) dv`` (equals ``h`` when ``k == 0``)."""
    h = np.asarray(h, dtype=float)
    if k == 0.0:
        return h
    return -np.expm1(-k * h) / k


def _e2(k: float, h):
    """``int_0^h exp(-k (h - v)) v dv``."""
    h = np.asarray(h, dtype=float)
    if k == 0.0:
        return 0.5 * h * h
    kh = k * h
    with np.errstate(invalid="ignore", divide="ignore"):
        exact = (h + np.expm1(-kh) / k) / k
    series = h * h * (0.5 - kh / 6.0 + kh * kh / 24.0 - kh ** 3 / 120.0)
    return np.where(np.abs(kh) < 1e-3, series, exact)


def _exp_diff(k: float, lam: float, h):
    """``int_0^h exp(-k (h - v)) exp(-lam v) dv``."""
    h = np.asarray(h, dtype=float)
    d = k - lam
    dh = d * h
    with np.errstate(over="ignore", invalid="ignore"):
        exact = (np.exp(-lam * h) - np.exp(-k * h)) / (d if d != 0.0 else 1.0)
    series = h * np.exp(-k * h) * (1.0 + dh / 2.0 + dh * dh / 6.0 + dh ** 3 / 24.0)
    if d == 0.0:
        return series
    return np.where(np.abs(dh) < 1e-3, series, exact)


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 + k*dt`` for ``k = 0..n-1``."""

    t0: float
    dt: float
    n: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ModelError(f"dt must be positive, got {self.dt}")
        if self.n < 1:
            raise ModelError(f"n must be >= 1, got {self.n}")

    @classmethod
    def from_horizon(cls, t_end: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        n = int(round((t_end - t0) / dt)) + 1
        return cls(t0, dt, n)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.n - 1)

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k >= self.n or abs(self.t0 + k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ModelError(f"time {t} is not a node of the grid")
        return k

    def __len__(self) -> int:
        return self.n


# ---------------------------------------------------------------------------
# drifts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Affine:
    """``b(x) = mu - kappa * x``."""

    mu: float
    kappa: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ModelError("affine drift needs mu > 0 so that b(0) > 0")
        if self.kappa < 0:
            raise ModelError("negative kappa is not supported")

    def __call__(self, x):
        return self.mu - self.kappa * np.asarray(x, dtype=float)

    @property
    def sup(self) -> float:
        return self.mu


@dataclass(frozen=True, eq=False)
class TabulatedLipschitz:
    """Piecewise-linear drift through ``(grid, values)``, constant beyond the table."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ModelError("tabulated drift needs matching 1-d grid and values")
        if g[0] != 0.0 or np.any(np.diff(g) <= 0):
            raise ModelError("tabulated drift grid must start at 0 and increase")
        if not np.all(np.isfinite(v)):
            raise ModelError("tabulated drift values must be finite")
        if not v[0] > 0:
            raise ModelError("drift must satisfy b(0) > 0")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    def __call__(self, x):
        return np.interp(x, self.grid, self.values)

    @property
    def sup(self) -> float:
        return float(self.values.max())


# ---------------------------------------------------------------------------
# rate functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Power:
    """``f(x) = x**p`` with ``p >= 1``."""

    p: float

    def __post_init__(self):
        if not self.p >= 1:
            raise ModelError("power rate needs p >= 1 (convexity)")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.p == 1:
            return x * 1.0
        if self.p == 2:
            return x * x
        return x ** self.p

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.p == 1:
            return np.ones_like(x)
        return self.p * x ** (self.p - 1)

    @property
    def is_integer(self) -> bool:
        return float(self.p).is_integer()


@dataclass(frozen=True, eq=False)
class TabulatedConvex:
    """Piecewise-linear convex rate through ``(grid, values)``, extended linearly."""

    grid: np.ndarray
    values: np.ndarray
    slopes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ModelError("tabulated rate needs matching 1-d grid and values")
        if g[0] != 0.0 or np.any(np.diff(g) <= 0):
            raise ModelError("tabulated rate grid must start at 0 and increase")
        if abs(v[0]) > _TAB_TOL:
            raise ModelError("rate must satisfy f(0) = 0")
        s = np.diff(v) / np.diff(g)
        if np.any(s < -_TAB_TOL):
            raise ModelError("rate must be nondecreasing")
        if np.any(np.diff(s) < -_TAB_TOL):
            raise ModelError("rate must be convex")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "slopes", s)

    def _segment(self, x):
        k = np.searchsorted(self.grid, x, side="right") - 1
        return np.clip(k, 0, self.slopes.size - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self._segment(x)
        return self.values[k] + self.slopes[k] * (x - self.grid[k])

    def derivative(self, x):
        return self.slopes[self._segment(np.asarray(x, dtype=float))]


Drift = Union[Affine, TabulatedLipschitz]
Rate = Union[Power, TabulatedConvex]


# ---------------------------------------------------------------------------
# external currents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    a: float

    def __post_init__(self):
        if not self.a >= 0:
            raise ModelError("current must be nonnegative")

    def value(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.a)

    def exp_integral(self, kappa: float, s, t):
        """``int_s^t exp(-kappa (t-u)) a_u du``."""
        return self.a * _e1(kappa, np.asarray(t, dtype=float) - s)

    @property
    def limit(self) -> float:
        return self.a


@dataclass(frozen=True)
class ExpApproach:
    """``a_t = a + C exp(-lam t)``; nonnegative because ``a, C >= 0``."""

    a: float
    C: float
    lam: float

    def __post_init__(self):
        if not (self.a >= 0 and self.C >= 0):
            raise ModelError("ExpApproach needs a >= 0 and C >= 0")
        if not self.lam > 0:
            raise ModelError("ExpApproach needs lam > 0")

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return np.maximum(self.a + self.C * np.exp(-self.lam * t), 0.0)

    def exp_integral(self, kappa: float, s, t):
        s = np.asarray(s, dtype=float)
        h = np.asarray(t, dtype=float) - s
        return self.a * _e1(kappa, h) + self.C * np.exp(-self.lam * s) * _exp_diff(kappa, self.lam, h)

    @property
    def limit(self) -> float:
        return self.a


@dataclass(frozen=True, eq=False)
class Sampled:
    """Piecewise-linear current through ``(times, values)``, constant outside."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 1:
            raise ModelError("sampled current needs matching 1-d times and values")
        if np.any(np.diff(t) <= 0):
            raise ModelError("sampled current times must increase")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ModelError("current must be finite and nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "_prefix", {})

    def value(self, t):
        return np.interp(t, self.times, self.values)

    def _prefix_for(self, kappa: float) -> np.ndarray:
        cache = self._prefix
        if kappa not in cache:
            h = np.diff(self.times)
            slope = np.diff(self.values) / h if h.size else h
            seg = self.values[:-1] * _e1(kappa, h) + slope * _e2(kappa, h)
            decay = np.exp(-kappa * h)
            P = np.zeros(self.times.size)
            for k in range(h.size):
                P[k + 1] = decay[k] * P[k] + seg[k]
            cache[kappa] = P
        return cache[kappa]

    def _Q(self, kappa: float, t):
        # int_{times[0]}^t exp(-kappa (t-u)) a_u du, with orientation for t < times[0]
        t = np.asarray(t, dtype=float)
        tau, v = self.times, self.values
        P = self._prefix_for(kappa)
        m = tau.size - 1
        k = np.clip(np.searchsorted(tau, t, side="right") - 1, 0, max(m - 1, 0))
        before = t < tau[0]
        after = t >= tau[m]
        h = t - tau[k]
        if m > 0:
            slope = (v[k + 1] - v[k]) / (tau[k + 1] - tau[k])
            inner = np.exp(-kappa * h) * P[k] + v[k] * _e1(kappa, h) + slope * _e2(kappa, h)
        else:
            inner = np.zeros_like(t)
        h_end = t - tau[m]
        tail = np.exp(-kappa * np.maximum(h_end, 0.0)) * P[m] + v[m] * _e1(kappa, h_end)
        head = v[0] * _e1(kappa, t - tau[0])
        return np.where(before, head, np.where(after, tail, inner))

    def exp_integral(self, kappa: float, s, t):
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return self._Q(kappa, t) - np.exp(-kappa * (t - s)) * self._Q(kappa, s)

    @property
    def limit(self) -> float:
        return float(self.values[-1])


Current = Union[Constant, ExpApproach, Sampled]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Drift ``b``, rate ``f`` and coupling ``J``.

    ``dt_flow`` bounds the RK4 step used for tabulated drifts.
    """

    drift: Drift
    rate: Rate
    J: float = 0.0
    dt_flow: float = 1e-3

    def __post_init__(self):
        if not self.J >= 0:
            raise ModelError("coupling J must be nonnegative")
        if not self.dt_flow > 0:
            raise ModelError("dt_flow must be positive")

    @classmethod
    def affine_power(cls, mu: float, kappa: float, p: float, J: float = 0.0) -> "ModelSpec":
        return cls(Affine(mu, kappa), Power(p), J)

    def with_J(self, J: float) -> "ModelSpec":
        return ModelSpec(self.drift, self.rate, J, self.dt_flow)

    # symbols
    def b(self, x):
        return self.drift(x)

    def f(self, x):
        return self.rate(x)

    def fprime(self, x):
        return self.rate.derivative(x)

    @property
    def C_b(self) -> float:
        return self.drift.sup

    @property
    def is_affine(self) -> bool:
        return isinstance(self.drift, Affine)

    @property
    def kappa(self) -> float:
        return self.drift.kappa if self.is_affine else float("nan")

    # flows
    def advance(self, cur: Current, s: float, h: float, x):
        """Flow from time ``s`` to ``s + h`` applied to the array ``x``."""
        x = np.asarray(x, dtype=float)
        if h == 0:
            return x.copy()
        if self.is_affine:
            k, mu = self.drift.kappa, self.drift.mu
            return x * math.exp(-k * h) + mu * float(_e1(k, h)) + float(cur.exp_integral(k, s, s + h))
        n = max(1, int(math.ceil(h / self.dt_flow - 1e-12)))
        step = h / n
        y = x.copy()
        t = s
        rhs = lambda t_, y_: self.drift(y_) + float(cur.value(t_))
        for _ in range(n):
            k1 = rhs(t, y)
            k2 = rhs(t + step / 2, y + step / 2 * k1)
            k3 = rhs(t + step / 2, y + step / 2 * k2)
            k4 = rhs(t + step, y + step * k3)
            y = np.maximum(y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0)
            t += step
        return y


def flow_at(m: ModelSpec, cur: Current, s: float, t: float, x):
    """Value at time ``t`` of the flow started from ``x`` at time ``s``."""
    if t < s:
        raise ModelError(f"flow needs t >= s, got s={s}, t={t}")
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0):
        raise ModelError("flow start point must be nonnegative")
    out = m.advance(cur, s, t - s, xa)
    return float(out) if out.ndim == 0 else out


def rk4_flow(m: ModelSpec, cur: Current, s: float, t: float, x, dt: float = 1e-3):
    """Reference RK4 integration of ``dy/dt = b(y) + a_t`` (any drift)."""
    n = max(1, int(math.ceil((t - s) / dt)))
    h = (t - s) / n
    y = np.asarray(x, dtype=float).copy()
    u = s
    rhs = lambda u_, y_: m.drift(y_) + cur.value(u_)
    for _ in range(n):
        k1 = rhs(u, y)
        k2 = rhs(u + h / 2, y + h / 2 * k1)
        k3 = rhs(u + h / 2, y + h / 2 * k2)
        k4 = rhs(u + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        u += h
    return y


# ---------------------------------------------------------------------------
# derived constants
# ---------------------------------------------------------------------------

def sigma_a(m: ModelSpec, a: float) -> float:
    """``inf{x >= 0 : b(x) + a = 0}``, the limit of the flow from 0 at constant ``a``."""
    if a < 0:
        raise ModelError("a must be nonnegative")
    d = m.drift
    if isinstance(d, Affine):
        return math.inf if d.kappa == 0 else (d.mu + a) / d.kappa
    g = d.values + a
    neg = np.nonzero(g <= 0)[0]
    if neg.size == 0:
        return math.inf
    k = neg[0]
    if g[k] == 0:
        return float(d.grid[k])
    return float(optimize.bisect(lambda x: float(d(x)) + a, d.grid[k - 1], d.grid[k], xtol=1e-14))


def psi(m: ModelSpec, theta: float) -> float:
    """``sup_{x >= 0} {theta f'(x) - f(x)^2 / 2}``."""
    r = m.rate
    if isinstance(r, Power):
        p = r.p
        if p == 1:
            return float(theta)
        return 0.5 * theta ** (2 * p / (p + 1)) * (p - 1) ** ((p - 1) / (p + 1)) * (1 + p)
    # f' is constant on each segment and f increasing: sup is reached at a left node
    return float(np.max(theta * r.slopes - 0.5 * r.values[:-1] ** 2))


def beta_sup(m: ModelSpec) -> float:
    """``sup_{x >= 0} {J f'(x) - f(x) / 8}``."""
    r, J = m.rate, m.J
    if isinstance(r, Power):
        p = r.p
        if p == 1:
            return J
        return J * (8 * J * (p - 1)) ** (p - 1)
    return float(np.max(J * r.slopes - r.values[:-1] / 8.0))


def a_bar(m: ModelSpec, kappa_floor: float = 0.0, a_max: float = 1e6) -> float:
    """Smallest ``abar >= kappa_floor`` with ``J sqrt(2 psi(abar + C_b)) <= abar``."""
    if kappa_floor < 0:
        raise ModelError("kappa_floor must be nonnegative")
    J, Cb = m.J, m.C_b
    g = lambda a: a - J * math.sqrt(2.0 * psi(m, a + Cb))
    if g(kappa_floor) >= 0:
        return float(kappa_floor)
    lo = kappa_floor
    hi = max(2.0 * kappa_floor, 1.0)
    while g(hi) < 0:
        lo, hi = hi, 2.0 * hi
        if hi > a_max:
            if g(a_max) >= 0:
                hi = a_max
                break
            raise BracketError(
                f"no abar <= {a_max:g} with J*sqrt(2 psi(abar + C_b)) <= abar; "
                "sublinearity of psi could not be verified"
            )
    return float(optimize.bisect(g, lo, hi, xtol=1e-13, rtol=1e-15))


def r_bar(m: ModelSpec) -> float:
    """``sqrt(psi(2 C_b) + 4 beta^2)``."""
    return math.sqrt(psi(m, 2.0 * m.C_b) + 4.0 * beta_sup(m) ** 2)
