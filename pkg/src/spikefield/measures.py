"""Probability measures on the half-line: a nodal density on a uniform grid plus atoms.

Integrals against the density use the trapezoid rule on the full grid
``[0, x_max]``; atoms are integrated exactly.  Keeping atoms apart from the
density means the canonical initial condition ``delta_0`` is never smeared.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ModelError

MASS_TOL = 1e-10


def trapezoid_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Density ``density[k]`` at nodes ``k * dx`` on ``[0, x_max]`` plus atoms.

    ``atoms`` is an array of shape ``(m, 2)`` holding ``(location, mass)`` rows.
    """

    x_max: float
    dx: float
    density: np.ndarray
    atoms: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if not (self.x_max > 0 and self.dx > 0):
            raise ModelError("x_max and dx must be positive")
        n = int(round(self.x_max / self.dx)) + 1
        dens = np.asarray(self.density, dtype=float)
        if dens.shape != (n,):
            raise ModelError(f"density must have {n} nodes, got shape {dens.shape}")
        atoms = np.asarray(self.atoms, dtype=float).reshape(-1, 2)
        if np.any(dens < 0) or np.any(atoms[:, 1] < 0) or np.any(atoms[:, 0] < 0):
            raise ModelError("densities, atom locations and masses must be nonnegative")
        if not (np.all(np.isfinite(dens)) and np.all(np.isfinite(atoms))):
            raise ModelError("measure contains non-finite values")
        object.__setattr__(self, "density", dens)
        object.__setattr__(self, "atoms", atoms)
        mass = self.total_mass()
        if abs(mass - 1.0) > MASS_TOL:
            raise ModelError(f"total mass is {mass!r}, expected 1 within {MASS_TOL}")

    # -- construction -----------------------------------------------------
    @classmethod
    def from_parts(cls, x_max: float, dx: float, density=None, atoms=(), normalize: bool = True,
                   max_defect: float = math.inf) -> "GridMeasure":
        """Build a measure, rescaling to unit mass when ``normalize`` is set.

        Raises if the mass before rescaling is farther than ``max_defect`` from 1.
        """
        n = int(round(x_max / dx)) + 1
        dens = np.zeros(n) if density is None else np.asarray(density, dtype=float).copy()
        at = np.asarray(atoms, dtype=float).reshape(-1, 2).copy()
        mass = float(trapezoid_weights(n, dx) @ dens + at[:, 1].sum())
        if abs(mass - 1.0) > max_defect:
            raise ModelError(f"mass defect {mass - 1.0:.3e} exceeds {max_defect:.1e}")
        if normalize:
            if not mass > 0:
                raise ModelError("cannot normalize a zero measure")
            dens /= mass
            at[:, 1] /= mass
        return cls(x_max, dx, dens, at)

    @classmethod
    def dirac(cls, x0: float = 0.0, x_max: float = 5.0, dx: float = 1e-3) -> "GridMeasure":
        n = int(round(x_max / dx)) + 1
        return cls(x_max, dx, np.zeros(n), np.array([[x0, 1.0]]))

    @classmethod
    def uniform(cls, lo: float, hi: float, x_max: float = 5.0, dx: float = 1e-3) -> "GridMeasure":
        x = np.linspace(0.0, x_max, int(round(x_max / dx)) + 1)
        dens = ((x >= lo - 1e-12) & (x <= hi + 1e-12)).astype(float)
        return cls.from_parts(x_max, dx, dens)

    # -- basic properties ---------------------------------------------------
    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.x_max, self.density.size)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.density.size, self.dx)

    def total_mass(self) -> float:
        return float(self.weights @ self.density + self.atoms[:, 1].sum())

    def support_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature representation ``(points, weights)`` with zero weights dropped."""
        w = self.weights * self.density
        keep = w > 0
        pts = np.concatenate([self.nodes[keep], self.atoms[:, 0]])
        wts = np.concatenate([w[keep], self.atoms[:, 1]])
        keep = wts > 0
        return pts[keep], wts[keep]

    def same_grid(self, other: "GridMeasure") -> bool:
        return self.density.size == other.density.size and math.isclose(self.dx, other.dx, rel_tol=1e-12)

    # -- derived measures ---------------------------------------------------
    def mollified(self, cells: int = 3) -> "GridMeasure":
        """Replace every atom by a plateau on the ``cells + 1`` nodes starting at its node."""
        dens = self.density.copy()
        n = dens.size
        w = self.weights
        for loc, mass in self.atoms:
            k0 = min(int(math.floor(loc / self.dx + 1e-9)), n - 1 - cells)
            sl = slice(k0, k0 + cells + 1)
            dens[sl] += mass / w[sl].sum()
        return GridMeasure.from_parts(self.x_max, self.dx, dens, normalize=True, max_defect=1e-9)

    def cell_masses(self) -> np.ndarray:
        """Masses of the cells ``[k dx, (k+1) dx)``; atoms go to the cell holding them."""
        d = self.density
        m = 0.5 * (d[:-1] + d[1:]) * self.dx
        if self.atoms.size:
            k = np.clip((self.atoms[:, 0] / self.dx).astype(int), 0, m.size - 1)
            np.add.at(m, k, self.atoms[:, 1])
        return m

    def sample(self, u) -> np.ndarray:
        """Inverse-CDF transform of uniforms ``u`` in ``[0, 1)``."""
        u = np.asarray(u, dtype=float)
        x, d = self.nodes, self.density
        cell = 0.5 * (d[:-1] + d[1:]) * self.dx
        # atoms are laid out after the density in CDF order
        cdf_dens = np.concatenate([[0.0], np.cumsum(cell)])
        m_dens = cdf_dens[-1]
        out = np.empty_like(u)
        in_dens = u < m_dens
        if np.any(in_dens):
            uu = u[in_dens]
            k = np.clip(np.searchsorted(cdf_dens, uu, side="right") - 1, 0, cell.size - 1)
            rem = uu - cdf_dens[k]
            d0, d1 = d[k], d[k + 1]
            slope = (d1 - d0) / self.dx
            # solve d0*y + slope*y^2/2 = rem for y in [0, dx]
            with np.errstate(divide="ignore", invalid="ignore"):
                quad = np.where(
                    np.abs(slope) > 1e-14,
                    (-d0 + np.sqrt(np.maximum(d0 * d0 + 2 * slope * rem, 0.0))) / slope,
                    rem / np.where(d0 > 0, d0, 1.0),
                )
            out[in_dens] = x[k] + np.clip(quad, 0.0, self.dx)
        if np.any(~in_dens):
            if self.atoms.size == 0:
                out[~in_dens] = x[-1]
            else:
                cdf_at = m_dens + np.cumsum(self.atoms[:, 1])
                j = np.clip(np.searchsorted(cdf_at, u[~in_dens], side="right"), 0, len(self.atoms) - 1)
                out[~in_dens] = self.atoms[j, 0]
        return out

    # -- csv ------------------------------------------------------------------
    def to_csv(self, path=None, header: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        buf.write(f"# x_max={float(self.x_max)!r} dx={float(self.dx)!r}\n")
        for loc, mass in self.atoms:
            buf.write(f"# atom {float(loc)!r} {float(mass)!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "density"])
        for xv, dv in zip(self.nodes, self.density):
            w.writerow([repr(float(xv)), repr(float(dv))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "GridMeasure":
        text = Path(source).read_text() if not isinstance(source, str) or "\n" not in source else source
        atoms, xs, ds = [], [], []
        x_max = dx = None
        for line in text.splitlines():
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "atom":
                    atoms.append((float(parts[1]), float(parts[2])))
                elif parts and parts[0].startswith("x_max="):
                    x_max = float(parts[0].split("=", 1)[1])
                    dx = float(parts[1].split("=", 1)[1])
                continue
            if not line.strip() or line.startswith("x,"):
                continue
            xv, dv = line.split(",")
            xs.append(float(xv))
            ds.append(float(dv))
        if x_max is None:
            x_max, dx = xs[-1], xs[1] - xs[0]
        return cls(x_max, dx, np.array(ds), np.array(atoms).reshape(-1, 2))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def moment(nu: GridMeasure, g: Callable) -> float:
    """Integral of ``g`` against ``nu`` (trapezoid on the density, exact on atoms)."""
    gx = np.asarray(g(nu.nodes), dtype=float)
    ga = np.asarray(g(nu.atoms[:, 0]), dtype=float) if nu.atoms.size else np.zeros(0)
    used = nu.density > 0
    if not (np.all(np.isfinite(gx[used])) and np.all(np.isfinite(ga))):
        raise ModelError("integrand is not finite on the support of the measure")
    return float(nu.weights[used] @ (gx[used] * nu.density[used]) + ga @ nu.atoms[:, 1])


def l1_distance(nu1: GridMeasure, nu2: GridMeasure) -> float:
    """Total-variation style distance: trapezoid of ``|rho1 - rho2|`` plus atom mismatch."""
    if not nu1.same_grid(nu2):
        raise ModelError("l1_distance needs measures on the same grid")
    dist = float(nu1.weights @ np.abs(nu1.density - nu2.density))
    a1 = [list(r) for r in nu1.atoms]
    a2 = [list(r) for r in nu2.atoms]
    half = 0.5 * nu1.dx
    for loc, mass in a1:
        match = next((r for r in a2 if abs(r[0] - loc) <= half and r[1] >= 0), None)
        if match is None:
            dist += mass
        else:
            dist += abs(mass - match[1])
            match[1] = -1.0
    dist += sum(m for _, m in a2 if m >= 0)
    return dist


def check_f_moment(nu: GridMeasure, m) -> dict:
    """``nu(f)`` and ``nu(f^2)``; ``ok`` is False when either is not finite."""
    try:
        nf = moment(nu, m.f)
        nf2 = moment(nu, lambda x: np.asarray(m.f(x)) ** 2)
    except ModelError:
        return {"nu_f": math.inf, "nu_f2": math.inf, "ok": False}
    ok = math.isfinite(nf) and math.isfinite(nf2)
    return {"nu_f": nf, "nu_f2": nf2, "ok": ok}


def default_grid(m, a_bar_value: float = 0.0, dx: float = 1e-3) -> tuple[float, float]:
    """Default ``(x_max, dx)``: ``sigma_0 + 5``, or ``5 (C_b + abar)`` when unbounded."""
    from .model import sigma_a

    s0 = sigma_a(m, 0.0)
    if math.isfinite(s0):
        x_max = s0 + 5.0
    else:
        x_max = 5.0 * (m.C_b + a_bar_value)
    x_max = dx * math.ceil(x_max / dx - 1e-9)
    return x_max, dx
