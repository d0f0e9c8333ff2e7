"""Exact event-driven simulation of the N-neuron network.

Between spikes every potential follows ``dx/dt = b(x)``.  Neuron ``i`` carries a
unit-exponential threshold and fires when its accumulated hazard
``int f(x_i(u)) du`` reaches it; it is then reset to 0 and every other neuron
jumps by ``J / N``.  Unused parts of the thresholds are carried over across the
other neurons' spikes (memorylessness), so the scheme samples the process
exactly; the only error is the root-finding tolerance on event times.

Affine drifts with power rates run in a compiled loop.  For integer ``p`` the
hazard over a common step ``tau`` is a polynomial in ``x - c`` with coefficients
``(1 - exp(-k kappa tau)) / (k kappa)`` shared by all neurons (a polynomial in
``x`` when ``kappa = 0``); non-integer ``p``
uses adaptive Gauss-Legendre.  Other models use a slower pure-Python path built
on the generic flow.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import ModelError
from .measures import GridMeasure
from .model import Affine, Constant, ModelSpec, Power, TimeGrid
from .volterra import RateSolution

_BLOCK = 64
_GX, _GW = np.polynomial.legendre.leggauss(16)


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParticleConfig:
    """Run parameters; neuron ``i`` draws from the stream ``(seed, stream_offset + i)``."""

    n_neurons: int
    t_end: float
    seed: int = 0
    init: Optional[GridMeasure] = None
    rate_bin: float = 0.1
    snapshot_times: Sequence[float] = ()
    stream_offset: int = 0

    def __post_init__(self):
        if self.n_neurons < 1:
            raise ModelError("n_neurons must be >= 1")
        if not self.t_end > 0:
            raise ModelError("t_end must be positive")
        if not self.rate_bin > 0:
            raise ModelError("rate_bin must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ModelError("seed must be a 64-bit unsigned integer")
        if any(not 0 <= s <= self.t_end for s in self.snapshot_times):
            raise ModelError("snapshot times must lie in [0, t_end]")


@dataclass(frozen=True, eq=False)
class ParticleTrace:
    times: np.ndarray            # spike times, nondecreasing
    neurons: np.ndarray          # index of the neuron that spiked
    initial: np.ndarray          # potentials at t = 0
    final: np.ndarray            # potentials at t_end
    n_neurons: int
    t_end: float
    seed: int
    J: float
    snapshot_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    snapshots: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def n_events(self) -> int:
        return int(self.times.size)

    def counts_per_neuron(self) -> np.ndarray:
        return np.bincount(self.neurons, minlength=self.n_neurons)

    def to_csv(self, path=None, header: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "neuron"])
        for t, i in zip(self.times, self.neurons):
            w.writerow([repr(float(t)), int(i)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def neuron_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one neuron, independent of the network size."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


# ---------------------------------------------------------------------------
# compiled kernels (affine drift, power rate)
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _pw(x, p, p_int):
    if p_int == 1:
        return x
    if p_int > 0:
        r = 1.0
        for _ in range(p_int):
            r *= x
        return r
    if x <= 0.0:
        return 0.0
    return x ** p


@numba.njit(cache=True)
def _flow1(x, tau, mu, kappa):
    if kappa > 0.0:
        c = mu / kappa
        return c + (x - c) * math.exp(-kappa * tau)
    return x + mu * tau


@numba.njit(cache=True)
def _ek(k, kappa, tau):
    # int_0^tau exp(-k kappa v) dv
    if k == 0:
        return tau
    z = k * kappa * tau
    if z < 1e-5:
        return tau * (1.0 - 0.5 * z + z * z / 6.0)
    return -math.expm1(-z) / (k * kappa)


@numba.njit(cache=True)
def _poly_hazard(d, coef, ek, p_int):
    # sum_k coef[k] d^k ek[k] by Horner
    acc = 0.0
    for k in range(p_int, -1, -1):
        acc = acc * d + coef[k] * ek[k]
    return acc


@numba.njit(cache=True)
def _gl_panel(x, a, b, mu, kappa, p, gx, gw):
    h = 0.5 * (b - a)
    m = 0.5 * (b + a)
    s = 0.0
    for q in range(gx.size):
        s += gw[q] * _pw(_flow1(x, m + h * gx[q], mu, kappa), p, 0)
    return h * s


@numba.njit(cache=True)
def _gl_hazard(x, tau, mu, kappa, p, gx, gw):
    # adaptive: accept a panel when it agrees with its two halves to 1e-13
    if tau <= 0.0:
        return 0.0
    total = 0.0
    stack_a = np.empty(64)
    stack_b = np.empty(64)
    stack_a[0] = 0.0
    stack_b[0] = tau
    top = 1
    while top > 0:
        top -= 1
        a = stack_a[top]
        b = stack_b[top]
        whole = _gl_panel(x, a, b, mu, kappa, p, gx, gw)
        m = 0.5 * (a + b)
        halves = _gl_panel(x, a, m, mu, kappa, p, gx, gw) + _gl_panel(x, m, b, mu, kappa, p, gx, gw)
        if abs(whole - halves) <= 1e-13 * max(1.0, abs(halves)) or top >= 62 or b - a < 1e-12:
            total += halves
        else:
            stack_a[top] = a
            stack_b[top] = m
            stack_a[top + 1] = m
            stack_b[top + 1] = b
            top += 2
    return total


@numba.njit(cache=True)
def _hazard(x, tau, mu, kappa, p, p_int, coef, gx, gw):
    """``int_0^tau f(flow_u(x)) du`` for one neuron."""
    if tau <= 0.0:
        return 0.0
    if kappa == 0.0:
        q = p + 1.0
        if x <= 0.0:
            return mu ** p * tau ** q / q
        return x ** q * math.expm1(q * math.log1p(mu * tau / x)) / (mu * q)
    if p_int > 0:
        ek = np.empty(p_int + 1)
        for k in range(p_int + 1):
            ek[k] = _ek(k, kappa, tau)
        return _poly_hazard(x - mu / kappa, coef, ek, p_int)
    return _gl_hazard(x, tau, mu, kappa, p, gx, gw)


@numba.njit(cache=True)
def _first_passage(x, R, mu, kappa, p, p_int, coef, gx, gw):
    """Smallest ``tau`` with hazard ``R`` (safeguarded Newton, tolerance 1e-12 relative)."""
    if R <= 0.0:
        return 0.0
    if kappa == 0.0:
        q = p + 1.0
        if x <= 0.0:
            return (q * R / mu ** p) ** (1.0 / q)
        return x / mu * math.expm1(math.log1p(R * mu * q / x ** q) / q)
    c = mu / kappa
    fx = _pw(x, p, p_int)
    fc = _pw(c, p, p_int)
    hi_rate = max(fx, fc)
    lo_rate = min(fx, fc)
    lo = R / hi_rate
    if lo_rate > 0.0:
        hi = R / lo_rate
    else:
        hi = 2.0 * lo + 1.0 / kappa
        while _hazard(x, hi, mu, kappa, p, p_int, coef, gx, gw) < R:
            hi *= 2.0
    tau = 0.5 * (lo + hi)
    for _ in range(200):
        g = _hazard(x, tau, mu, kappa, p, p_int, coef, gx, gw) - R
        if g > 0.0:
            hi = tau
        else:
            lo = tau
        rate = _pw(_flow1(x, tau, mu, kappa), p, p_int)
        step = g / rate if rate > 0.0 else 0.0
        new = tau - step
        if not (lo < new < hi) or rate <= 0.0:
            new = 0.5 * (lo + hi)
        if abs(new - tau) <= 1e-15 + 1e-13 * tau or hi - lo <= 1e-15 + 1e-13 * hi:
            return new
        tau = new
    return tau


@numba.njit(cache=True)
def _advance_all(x, R, tau, mu, kappa, p, p_int, coef, gx, gw, skip):
    """Flow every neuron over ``tau`` and spend its hazard (``skip`` keeps its threshold)."""
    n = x.size
    if p_int > 0 and kappa > 0.0:
        ek = np.empty(p_int + 1)
        for k in range(p_int + 1):
            ek[k] = _ek(k, kappa, tau)
        c = mu / kappa
        decay = math.exp(-kappa * tau)
        for j in range(n):
            d = x[j] - c
            if j != skip:
                R[j] -= _poly_hazard(d, coef, ek, p_int)
            x[j] = c + d * decay
    elif p_int > 0:
        # kappa = 0: int_0^tau (x + mu u)^p du = sum_k C(p, k) x^k mu^(p-k) tau^(p-k+1) / (p-k+1)
        ek = np.empty(p_int + 1)
        for k in range(p_int + 1):
            ek[k] = mu ** (p_int - k) * tau ** (p_int - k + 1) / (p_int - k + 1)
        for j in range(n):
            if j != skip:
                R[j] -= _poly_hazard(x[j], coef, ek, p_int)
            x[j] += mu * tau
    else:
        for j in range(n):
            if j != skip:
                R[j] -= _hazard(x[j], tau, mu, kappa, p, p_int, coef, gx, gw)
            x[j] = _flow1(x[j], tau, mu, kappa)


@numba.njit(cache=True, nogil=True)
def _event_loop(x, R, clock, t_end, mu, kappa, p, p_int, coef, kick, E, E_pos,
                ev_t, ev_i, n_ev, snap_t, snap_pos, snaps, gx, gw):
    """Run until ``t_end``; returns (status, neuron): 0 done, 1 refill neuron, 2 grow log."""
    n = x.size
    t = clock[0]
    lb = np.empty(n)
    while True:
        if n_ev[0] >= ev_t.size:
            clock[0] = t
            return 2, -1
        # lower bounds on the passage times; exact roots only where they can win
        if kappa > 0.0:
            fc = _pw(mu / kappa, p, p_int)
            for j in range(n):
                r = max(_pw(x[j], p, p_int), fc)
                lb[j] = R[j] / r
            first = np.argmin(lb)
            best = _first_passage(x[first], R[first], mu, kappa, p, p_int, coef, gx, gw)
            idx = first
            for j in range(n):
                if lb[j] < best and j != first:
                    tj = _first_passage(x[j], R[j], mu, kappa, p, p_int, coef, gx, gw)
                    if tj < best or (tj == best and j < idx):
                        best = tj
                        idx = j
        else:
            # the rate only grows along the flow: R / f(x) bounds the passage from above
            for j in range(n):
                fx = _pw(x[j], p, p_int)
                lb[j] = R[j] / fx if fx > 0.0 else np.inf
            first = np.argmin(lb) if np.isfinite(lb.min()) else np.argmin(R)
            best = _first_passage(x[first], R[first], mu, kappa, p, p_int, coef, gx, gw)
            idx = first
            for j in range(n):
                # Lambda_j(best) <= best f(x_j + mu best), so j cannot fire first when that is below R_j
                if j != first and R[j] <= best * _pw(x[j] + mu * best, p, p_int):
                    tj = _first_passage(x[j], R[j], mu, kappa, p, p_int, coef, gx, gw)
                    if tj < best or (tj == best and j < idx):
                        best = tj
                        idx = j
        t_next = t + best
        # snapshots strictly before the event (memorylessness lets us stop anywhere)
        while snap_pos[0] < snap_t.size and snap_t[snap_pos[0]] <= min(t_next, t_end):
            h = snap_t[snap_pos[0]] - t
            if h > 0.0:
                _advance_all(x, R, h, mu, kappa, p, p_int, coef, gx, gw, -1)
            t = snap_t[snap_pos[0]]
            best = t_next - t
            for j in range(n):
                snaps[snap_pos[0], j] = x[j]
            snap_pos[0] += 1
        if t_next > t_end:
            h = t_end - t
            if h > 0.0:
                _advance_all(x, R, h, mu, kappa, p, p_int, coef, gx, gw, -1)
            clock[0] = t_end
            return 0, -1
        _advance_all(x, R, best, mu, kappa, p, p_int, coef, gx, gw, idx)
        t = t_next
        for j in range(n):
            if j != idx:
                x[j] += kick
        x[idx] = 0.0
        ev_t[n_ev[0]] = t
        ev_i[n_ev[0]] = idx
        n_ev[0] += 1
        R[idx] = E[idx, E_pos[idx]]
        E_pos[idx] += 1
        if E_pos[idx] >= E.shape[1]:
            clock[0] = t
            return 1, idx


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _initial_state(cfg: ParticleConfig):
    gens = [neuron_stream(cfg.seed, cfg.stream_offset + i) for i in range(cfg.n_neurons)]
    u = np.array([g.random() for g in gens])
    init = cfg.init if cfg.init is not None else GridMeasure.dirac(0.0, 1.0, 0.5)
    x0 = init.sample(u)
    E = np.empty((cfg.n_neurons, _BLOCK))
    for i, g in enumerate(gens):
        E[i] = g.standard_exponential(_BLOCK)
    return gens, x0, E


def _compiled_ok(m: ModelSpec) -> bool:
    return isinstance(m.drift, Affine) and isinstance(m.rate, Power)


def simulate(m: ModelSpec, cfg: ParticleConfig) -> ParticleTrace:
    """Exact simulation of the network on ``[0, cfg.t_end]``."""
    gens, x0, E = _initial_state(cfg)
    N = cfg.n_neurons
    kick = m.J / N
    snap_t = np.array(sorted(cfg.snapshot_times), dtype=float)
    if not _compiled_ok(m):
        return _simulate_generic(m, cfg, gens, x0, E, snap_t)
    mu, kappa, p = m.drift.mu, m.drift.kappa, float(m.rate.p)
    p_int = int(p) if float(p).is_integer() else 0
    if kappa > 0:
        c = mu / kappa
        coef = np.array([math.comb(p_int, k) * c ** (p_int - k) for k in range(p_int + 1)]) if p_int else np.zeros(1)
    else:
        coef = np.array([float(math.comb(p_int, k)) for k in range(p_int + 1)]) if p_int else np.zeros(1)
    x = x0.astype(float).copy()
    R = E[:, 0].copy()
    E_pos = np.ones(N, dtype=np.int64)
    cap = max(1024, int(4 * N * cfg.t_end))
    ev_t = np.empty(cap)
    ev_i = np.empty(cap, dtype=np.int64)
    n_ev = np.zeros(1, dtype=np.int64)
    clock = np.zeros(1)
    snap_pos = np.zeros(1, dtype=np.int64)
    snaps = np.empty((snap_t.size, N))
    while True:
        status, who = _event_loop(x, R, clock, cfg.t_end, mu, kappa, p, p_int, coef, kick, E, E_pos,
                                  ev_t, ev_i, n_ev, snap_t, snap_pos, snaps, _GX, _GW)
        if status == 0:
            break
        if status == 1:
            E[who] = gens[who].standard_exponential(_BLOCK)
            E_pos[who] = 0
        else:
            ev_t = np.concatenate([ev_t, np.empty(cap)])
            ev_i = np.concatenate([ev_i, np.empty(cap, dtype=np.int64)])
            cap *= 2
    k = int(n_ev[0])
    return ParticleTrace(ev_t[:k].copy(), ev_i[:k].copy(), x0, x, N, cfg.t_end, cfg.seed, m.J,
                         snap_t, snaps)


def _simulate_generic(m, cfg, gens, x0, E, snap_t):
    """Any drift and rate: flow and hazard integrated jointly with RK4 steps.

    Each step of length ``m.dt_flow`` advances ``(x, Lambda)``; a crossing of a
    threshold inside the step is located by bisection on the step length.
    """
    N = cfg.n_neurons
    kick = m.J / N
    x = x0.astype(float).copy()
    R = E[:, 0].copy()
    E_pos = np.ones(N, dtype=int)
    t = 0.0
    ev_t, ev_i = [], []
    snaps = np.empty((snap_t.size, N))
    s_pos = 0

    def rk4(xv, h):
        f = lambda y: np.stack([m.b(y[0]), m.f(np.maximum(y[0], 0.0))])
        y = np.stack([xv, np.zeros_like(xv)])
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return np.maximum(y[0], 0.0), y[1]

    while t < cfg.t_end:
        h = min(m.dt_flow, cfg.t_end - t)
        if s_pos < snap_t.size and t + h >= snap_t[s_pos]:
            h = snap_t[s_pos] - t
        xn, lam = rk4(x, h)
        over = lam >= R
        if np.any(over):
            # earliest crossing among neurons that cross inside the step
            cand = np.nonzero(over)[0]
            best, idx = h, -1
            for j in cand:
                lo, hi = 0.0, h
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if rk4(x[j:j + 1], mid)[1][0] >= R[j]:
                        hi = mid
                    else:
                        lo = mid
                if hi < best or (hi == best and (idx < 0 or j < idx)):
                    best, idx = hi, j
            xn, lam = rk4(x, best)
            R -= lam
            x = xn
            t += best
            x += kick
            x[idx] = 0.0
            ev_t.append(t)
            ev_i.append(idx)
            if E_pos[idx] >= E.shape[1]:
                E[idx] = gens[idx].standard_exponential(_BLOCK)
                E_pos[idx] = 0
            R[idx] = E[idx, E_pos[idx]]
            E_pos[idx] += 1
            continue
        R -= lam
        x = xn
        t += h
        while s_pos < snap_t.size and t >= snap_t[s_pos] - 1e-15:
            snaps[s_pos] = x
            s_pos += 1
    return ParticleTrace(np.array(ev_t), np.array(ev_i, dtype=np.int64), x0, x, N, cfg.t_end, cfg.seed,
                         m.J, snap_t, snaps)


def simulate_replicas(m: ModelSpec, cfg: ParticleConfig, n_replicas: int, workers: int = 1) -> list:
    """Independent replicas with seeds ``cfg.seed + r``."""
    cfgs = [ParticleConfig(cfg.n_neurons, cfg.t_end, (cfg.seed + r) % 2 ** 64, cfg.init, cfg.rate_bin,
                           cfg.snapshot_times, cfg.stream_offset) for r in range(n_replicas)]
    if workers <= 1:
        return [simulate(m, c) for c in cfgs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda c: simulate(m, c), cfgs))


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

def _bins(grid: TimeGrid, t_end: float):
    t = grid.times
    if t[0] < -1e-12 or t[-1] > t_end + 1e-9:
        raise ModelError("rate grid must lie within [0, t_end]")
    lo = np.maximum(t - 0.5 * grid.dt, 0.0)
    hi = np.minimum(t + 0.5 * grid.dt, t_end)
    return lo, hi


def empirical_rate(trace, grid: TimeGrid) -> RateSolution:
    """Spike counts per bin over ``N * width`` on bins centred at the grid nodes.

    ``trace`` may be a single :class:`ParticleTrace` or a list of replicas, which
    are pooled.  Standard errors are binomial in the pooled neuron count.
    """
    traces = trace if isinstance(trace, (list, tuple)) else [trace]
    t_end = min(tr.t_end for tr in traces)
    lo, hi = _bins(grid, t_end)
    edges = np.append(lo, hi[-1])
    counts = np.zeros(grid.n)
    n_tot = 0
    for tr in traces:
        c, _ = np.histogram(tr.times, bins=edges)
        counts += c
        n_tot += tr.n_neurons
    width = hi - lo
    rate = counts / (n_tot * width)
    p_hat = counts / n_tot
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(p_hat < 1.0, p_hat * (1.0 - p_hat), p_hat) / n_tot
    se = np.sqrt(var) / width
    if counts.sum() == 0:
        se = np.full(grid.n, np.inf)
    return RateSolution(grid, rate, None, None, se)


def bin_edges(grid: TimeGrid, t_end: float) -> np.ndarray:
    lo, hi = _bins(grid, t_end)
    return np.append(lo, hi[-1])


def replay(m: ModelSpec, trace: ParticleTrace) -> np.ndarray:
    """Rebuild the final potentials from the event log with the closed-form flow."""
    zero = Constant(0.0)
    x = trace.initial.astype(float).copy()
    t = 0.0
    kick = trace.J / trace.n_neurons
    for te, i in zip(trace.times, trace.neurons):
        x = m.advance(zero, t, te - t, x)
        if np.any(x < 0):
            raise ModelError("negative potential during replay")
        x += kick
        x[i] = 0.0
        t = te
    return m.advance(zero, t, trace.t_end - t, x)


def ito_residual(m: ModelSpec, trace: ParticleTrace, s_index: int, t_index: int) -> tuple[float, float]:
    """Residual of ``E f(X_t) - E f(X_s) = int E[f'(X)(b(X) + J E f) - f(X)^2]`` and its SE.

    Uses the snapshots between ``s_index`` and ``t_index`` and a per-neuron
    trapezoid in time, so the standard error comes from the spread across neurons.
    """
    ts = trace.snapshot_times[s_index:t_index + 1]
    X = trace.snapshots[s_index:t_index + 1]
    fx = m.f(X)
    mean_f = fx.mean(axis=1)
    g = m.fprime(X) * (m.b(X) + m.J * mean_f[:, None]) - fx ** 2
    w = np.zeros(ts.size)
    dt = np.diff(ts)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    Z = fx[-1] - fx[0] - (w[:, None] * g).sum(axis=0)
    return float(Z.mean()), float(Z.std(ddof=1) / math.sqrt(Z.size))
