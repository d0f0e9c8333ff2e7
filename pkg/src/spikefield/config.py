"""Experiment configuration: a key-value file with dotted keys.

The file is INI-style; the section name is the key prefix::

    [drift]
    kind = affine
    mu = 1.0
    kappa = 1.0

    [rate]
    p = 2

is the same as the flat keys ``drift.kind``, ``drift.mu``, ``drift.kappa`` and
``rate.p``.  Keys without a section go under ``[run]`` (``run.seed``, ...).
Tabulated drifts, rates and sampled currents take comma-separated lists.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ModelError
from .measures import GridMeasure
from .model import (Affine, Constant, ExpApproach, ModelSpec, Power, Sampled, TabulatedConvex,
                    TabulatedLipschitz, TimeGrid, sigma_a)

DEFAULTS: dict[str, Any] = {
    "drift.kind": "affine",          # affine | tabulated
    "drift.mu": 1.0,
    "drift.kappa": 1.0,
    "drift.x": "",
    "drift.b": "",
    "drift.dt_flow": 1e-3,
    "rate.kind": "power",            # power | tabulated
    "rate.p": 2.0,
    "rate.x": "",
    "rate.f": "",
    "coupling.J": 0.0,
    "current.kind": "constant",      # constant | exp | sampled
    "current.a": 0.0,
    "current.C": 0.0,
    "current.lambda": 1.0,
    "current.t": "",
    "current.values": "",
    "init.kind": "dirac",            # dirac | uniform | stationary
    "init.x0": 0.0,
    "init.lo": 0.0,
    "init.hi": 1.0,
    "init.a": 0.0,
    "init.x_max": 0.0,               # 0: default grid
    "init.dx": 1e-3,
    "grid.t_end": 10.0,
    "grid.dt": 1e-2,
    "picard.tol": 1e-9,
    "picard.max_iter": 200,
    "picard.damping": 1.0,
    "picard.window": 0.5,
    "particle.N": 1000,
    "particle.replicas": 1,
    "particle.rate_bin": 0.1,
    "steady.a_max": 20.0,
    "steady.n_scan": 2000,
    "spectral.a": 0.0,
    "spectral.sigma_floor": 0.0,     # 0: default sweep
    "fp.dx": 1e-3,
    "fp.t_end": 10.0,
    "fp.snapshots": "",
    "fp.mollify_cells": 3,
    "invariant.a": 0.0,
    "run.seed": 0,
    "run.workers": 1,
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        v = float(value)
        if v != int(v):
            raise ModelError(f"{key} must be an integer, got {value!r}")
        return int(v)
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError as exc:
            raise ModelError(f"{key} must be a number, got {value!r}") from exc
    return str(value).strip()


def _floats(text: str, key: str) -> np.ndarray:
    if not text:
        raise ModelError(f"{key} is required for this kind")
    try:
        return np.array([float(s) for s in text.split(",")])
    except ValueError as exc:
        raise ModelError(f"{key} must be a comma-separated list of numbers") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    # -- construction ---------------------------------------------------------
    @classmethod
    def from_mapping(cls, items: Mapping[str, Any], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        vals = dict(DEFAULTS if base is None else base.values)
        for k, v in items.items():
            key = k if "." in k else f"run.{k}"
            if key not in DEFAULTS:
                raise ModelError(f"unknown config key {k!r}")
            vals[key] = _coerce(key, v)
        return cls(vals)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser(default_section="__none__", interpolation=None)
        parser.optionxform = str
        with open(path) as fh:
            text = fh.read()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ModelError(f"cannot parse {path}: {exc}") from exc
        items = {f"{sec}.{k}": v for sec in parser.sections() for k, v in parser.items(sec)}
        return cls.from_mapping(items)

    def with_overrides(self, items: Mapping[str, Any]) -> "ExperimentConfig":
        return ExperimentConfig.from_mapping({k: v for k, v in items.items() if v is not None}, base=self)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # -- serialisation --------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(dict(sorted(self.values.items())), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_ini(self) -> str:
        sections: dict[str, dict[str, Any]] = {}
        for k, v in sorted(self.values.items()):
            sec, name = k.split(".", 1)
            sections.setdefault(sec, {})[name] = v
        lines = []
        for sec, kv in sections.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)

    # -- builders -------------------------------------------------------------
    def model(self) -> ModelSpec:
        v = self.values
        if v["drift.kind"] == "affine":
            drift = Affine(v["drift.mu"], v["drift.kappa"])
        elif v["drift.kind"] == "tabulated":
            drift = TabulatedLipschitz(_floats(v["drift.x"], "drift.x"), _floats(v["drift.b"], "drift.b"))
        else:
            raise ModelError(f"unknown drift.kind {v['drift.kind']!r}")
        if v["rate.kind"] == "power":
            rate = Power(v["rate.p"])
        elif v["rate.kind"] == "tabulated":
            rate = TabulatedConvex(_floats(v["rate.x"], "rate.x"), _floats(v["rate.f"], "rate.f"))
        else:
            raise ModelError(f"unknown rate.kind {v['rate.kind']!r}")
        return ModelSpec(drift, rate, v["coupling.J"], v["drift.dt_flow"])

    def current(self):
        v = self.values
        kind = v["current.kind"]
        if kind == "constant":
            return Constant(v["current.a"])
        if kind == "exp":
            return ExpApproach(v["current.a"], v["current.C"], v["current.lambda"])
        if kind == "sampled":
            return Sampled(_floats(v["current.t"], "current.t"), _floats(v["current.values"], "current.values"))
        raise ModelError(f"unknown current.kind {kind!r}")

    def grid(self) -> TimeGrid:
        return TimeGrid.from_horizon(self.values["grid.t_end"], self.values["grid.dt"])

    def x_range(self, m: ModelSpec) -> tuple[float, float]:
        v = self.values
        dx = v["init.dx"]
        x_max = v["init.x_max"]
        if x_max <= 0:
            s0 = sigma_a(m, 0.0)
            x_max = s0 + 5.0 if math.isfinite(s0) else 10.0
            if v["init.kind"] == "stationary":
                sa = sigma_a(m, v["init.a"])
                x_max = max(x_max, sa + 1.0) if math.isfinite(sa) else x_max
        x_max = dx * math.ceil(x_max / dx - 1e-9)
        return x_max, dx

    def init(self, m: ModelSpec) -> GridMeasure:
        from .invariant import stationary_measure

        v = self.values
        x_max, dx = self.x_range(m)
        kind = v["init.kind"]
        if kind == "dirac":
            return GridMeasure.dirac(v["init.x0"], x_max, dx)
        if kind == "uniform":
            return GridMeasure.uniform(v["init.lo"], v["init.hi"], x_max, dx)
        if kind == "stationary":
            return stationary_measure(m, v["init.a"], x_max, dx)
        raise ModelError(f"unknown init.kind {kind!r}")
