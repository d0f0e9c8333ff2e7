"""Command-line harness: ``spikefield <command> [--config PATH] [--out DIR] [overrides]``.

Every run writes CSV files (first line ``# config_sha256=...``), the resolved
config as ``config.ini`` and ``summary.json`` into the output directory, and
prints the summary as one JSON line.  Exit codes: 0 success, 1 invalid input,
2 numerical failure (including a failed tolerance in ``repro``).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ModelError, NumericalError

SCHEMA = 1
OUT_ENV = "SPIKEFIELD_OUT"

# numeric override flags shared by all subcommands: flag -> config key
OVERRIDES = {
    "mu": "drift.mu",
    "kappa": "drift.kappa",
    "p": "rate.p",
    "J": "coupling.J",
    "a": "current.a",
    "C": "current.C",
    "lam": "current.lambda",
    "t_end": "grid.t_end",
    "dt": "grid.dt",
    "dx": "init.dx",
    "N": "particle.N",
    "replicas": "particle.replicas",
    "rate_bin": "particle.rate_bin",
    "a_max": "steady.a_max",
    "n_scan": "steady.n_scan",
    "sigma_floor": "spectral.sigma_floor",
    "fp_t_end": "fp.t_end",
}

COMMANDS = ("simulate", "rate", "picard", "invariant", "steady-states", "spectral",
            "fokker-planck", "chaos-check", "repro")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key-value config file")
    common.add_argument("--out", type=Path, help=f"output directory (or ${OUT_ENV})")
    common.add_argument("--seed", type=int, help="64-bit seed")
    common.add_argument("--workers", type=int, help="worker threads for replicas")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set init.kind=uniform")
    for flag, key in OVERRIDES.items():
        common.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=float, metavar="X",
                            help=f"override {key}")
    parser = _Parser(prog="spikefield", description="Mean-field spiking network experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "exact event-driven simulation of the N-neuron network",
        "rate": "linear jump rate for a given current (Volterra solve)",
        "picard": "nonlinear jump rate by Picard iteration",
        "invariant": "invariant law and gamma(a) for a constant current",
        "steady-states": "all solutions of a / gamma(a) = J",
        "spectral": "zeros of the Laplace transform of H_a and lambda*_a",
        "fokker-planck": "finite-volume solution of the transport equation",
        "chaos-check": "empirical network rate against the Picard rate",
        "repro": "canned experiment with pass/fail tolerances",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "repro":
            from .repro import EXPERIMENTS

            p.add_argument("name", choices=sorted(EXPERIMENTS))
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    items = {}
    for flag, key in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            items[key] = v
    for kv in args.set:
        if "=" not in kv:
            raise ModelError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    if args.seed is not None:
        items["run.seed"] = args.seed
    if args.workers is not None:
        items["run.workers"] = args.workers
    return cfg.with_overrides(items)


class Output:
    """Output directory with config-hash headers on every file."""

    def __init__(self, root: Path, cfg: ExperimentConfig):
        self.root = root
        self.cfg = cfg
        self.hash = cfg.sha256()
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.ini").write_text(f"# config_sha256={self.hash}\n" + cfg.to_ini())
        self.files: list[str] = []

    def csv(self, name: str, header: str, data: np.ndarray) -> Path:
        path = self.root / name
        data = np.atleast_2d(np.asarray(data, dtype=float))
        with open(path, "w") as fh:
            fh.write(f"# config_sha256={self.hash}\n")
            np.savetxt(fh, data, delimiter=",", header=header, comments="", fmt="%.17g")
        self.files.append(name)
        return path

    def text(self, name: str, body: str) -> Path:
        path = self.root / name
        path.write_text(f"# config_sha256={self.hash}\n" + body)
        self.files.append(name)
        return path

    def summary(self, command: str, payload: dict) -> dict:
        out = {"schema": SCHEMA, "command": command, "config_sha256": self.hash, **payload,
               "files": self.files}
        (self.root / "summary.json").write_text(json.dumps(_jsonable(out), indent=2) + "\n")
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Output) -> dict:
    from .particle import ParticleConfig, empirical_rate, simulate_replicas

    m = cfg.model()
    nu = cfg.init(m)
    pc = ParticleConfig(cfg["particle.N"], cfg["grid.t_end"], cfg["run.seed"], nu, cfg["particle.rate_bin"])
    traces = simulate_replicas(m, pc, cfg["particle.replicas"], workers=cfg["run.workers"])
    for r, tr in enumerate(traces):
        out.csv(f"events_{r}.csv", "time,neuron", np.column_stack([tr.times, tr.neurons]))
    from .model import TimeGrid

    grid = TimeGrid.from_horizon(cfg["grid.t_end"], cfg["particle.rate_bin"])
    emp = empirical_rate(traces, grid)
    out.csv("rate.csv", "t,rate,stderr", np.column_stack([emp.times, emp.values, emp.stderr]))
    n_events = [tr.n_events for tr in traces]
    return {"replicas": len(traces), "n_events": n_events,
            "mean_rate": float(sum(n_events) / (pc.n_neurons * pc.t_end * len(traces)))}


def cmd_rate(cfg, out):
    from .invariant import gamma
    from .volterra import solve_rate

    m = cfg.model()
    cur = cfg.current()
    sol = solve_rate(m, cur, cfg.init(m), cfg.grid())
    out.csv("rate.csv", "t,r", np.column_stack([sol.times, sol.values]))
    a_lim = cur.limit
    g = gamma(m, a_lim) if a_lim is not None and math.isfinite(a_lim) else None
    return {"r_end": float(sol.values[-1]), "gamma_limit": g}


def cmd_picard(cfg, out):
    from .volterra import oscillation_amplitude, picard_closure

    m = cfg.model()
    grid = cfg.grid()
    res = picard_closure(m, cfg.init(m), grid, tol=cfg["picard.tol"], max_iter=cfg["picard.max_iter"],
                         damping=cfg["picard.damping"], window=cfg["picard.window"])
    out.csv("rate.csv", "t,r,a", np.column_stack([grid.times, res.rate.values, res.current.values]))
    T = grid.t_end
    # peak-to-peak amplitude over the third and fourth quarters of the run
    windows = [(0.5 * T, 0.75 * T), (0.75 * T, T)]
    return {"iterations": res.iterations, "sweeps": res.sweeps, "residual": res.residual,
            "r_end": float(res.rate.values[-1]),
            "amplitudes": [{"t1": t1, "t2": t2, "amplitude": oscillation_amplitude(res.rate, t1, t2)}
                           for t1, t2 in windows]}


def cmd_invariant(cfg, out):
    from .invariant import U, gamma, stationary_measure
    from .model import sigma_a

    m = cfg.model()
    a = cfg["invariant.a"]
    sig = sigma_a(m, a)
    dx = cfg["init.dx"]
    x_max = cfg["init.x_max"] or ((sig + 1.0) if math.isfinite(sig) else 10.0)
    x_max = dx * math.ceil(x_max / dx - 1e-9)
    nu = stationary_measure(m, a, x_max, dx)
    out.text("invariant.csv", nu.to_csv())
    return {"a": a, "gamma": gamma(m, a), "sigma": sig, "U": U(m, a), "atoms": int(nu.atoms.shape[0])}


def cmd_steady_states(cfg, out):
    from .invariant import steady_states

    m = cfg.model()
    rep = steady_states(m, cfg["steady.a_max"], cfg["steady.n_scan"])
    out.csv("scan.csv", "a,U", np.column_stack([rep.a_grid, rep.U_values]))
    return {"J": rep.J, "roots": [{"a": r.a, "gamma": r.gamma, "stable_hint": r.stable_hint} for r in rep.roots],
            "multiplicity": rep.multiplicity, "J_m": rep.J_m, "windows": rep.windows}


def cmd_spectral(cfg, out):
    from .spectral import lambda_star

    m = cfg.model()
    floor = cfg["spectral.sigma_floor"] or None
    rep = lambda_star(m, cfg["spectral.a"], floor)
    z = np.array([[q.z.real, q.z.imag, q.residual] for q in rep.zeros]).reshape(-1, 3)
    out.csv("zeros.csv", "re,im,residual", z)
    return json.loads(rep.to_json()) | {"sweeps": rep.sweeps}


def cmd_fokker_planck(cfg, out):
    from .fokkerplanck import fp_solve

    m = cfg.model()
    v = cfg.values
    dx = v["fp.dx"]
    cfg_fp = cfg.with_overrides({"init.dx": dx})
    nu = cfg_fp.init(m)
    snaps = [float(s) for s in v["fp.snapshots"].split(",") if s.strip()]
    res = fp_solve(m, nu, v["fp.t_end"], snapshot_times=snaps, mollify_cells=v["fp.mollify_cells"])
    from .model import TimeGrid

    grid = TimeGrid.from_horizon(v["fp.t_end"], v["grid.dt"])
    out.csv("rate.csv", "t,r", np.column_stack([grid.times, res.rate_at(grid.times)]))
    for t, st in sorted(res.snapshots.items()):
        out.csv(f"density_t{t:g}.csv", "x,density", np.column_stack([st.centers, st.rho]))
    return {"steps": int(res.times.size - 1), "r_end": float(res.rates[-1]), "mass_end": res.state.mass}


def cmd_chaos_check(cfg, out):
    from .repro import chaos_check

    m = cfg.model()
    rep = chaos_check(N=cfg["particle.N"], J=cfg["coupling.J"], replicas=cfg["particle.replicas"],
                      t_end=cfg["grid.t_end"], seed=cfg["run.seed"], workers=cfg["run.workers"],
                      dt=cfg["grid.dt"], rate_bin=cfg["particle.rate_bin"], m=m, nu=cfg.init(m))
    for name, (header, data) in rep.series.items():
        out.csv(f"{name}.csv", header, data)
    return rep.summary()


HANDLERS = {
    "simulate": cmd_simulate,
    "rate": cmd_rate,
    "picard": cmd_picard,
    "invariant": cmd_invariant,
    "steady-states": cmd_steady_states,
    "spectral": cmd_spectral,
    "fokker-planck": cmd_fokker_planck,
    "chaos-check": cmd_chaos_check,
}


def _out_dir(args, cfg: ExperimentConfig, label: str) -> Path:
    if args.out is not None:
        return args.out
    base = Path(os.environ.get(OUT_ENV, "runs"))
    return base / f"{label}-{cfg.sha256()[:10]}"


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if args.command == "repro":
            from .repro import EXPERIMENTS

            out = Output(_out_dir(args, cfg, f"repro-{args.name}"), cfg)
            rep = EXPERIMENTS[args.name]()
            for name, (header, data) in rep.series.items():
                out.csv(f"{name}.csv", header, data)
            summary = out.summary("repro", rep.summary())
            print(json.dumps(_jsonable(summary)))
            return 0 if rep.passed else 2
        out = Output(_out_dir(args, cfg, args.command), cfg)
        payload = HANDLERS[args.command](cfg, out)
        summary = out.summary(args.command, payload)
        print(json.dumps(_jsonable(summary)))
        return 0
    except (ModelError, ValueError) as exc:
        print(json.dumps({"schema": SCHEMA, "error": type(exc).__name__, "message": str(exc)}))
        return 1
    except NumericalError as exc:
        print(json.dumps({"schema": SCHEMA, "error": type(exc).__name__, "message": str(exc)}))
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
