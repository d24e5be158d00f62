"""Layered TOML configuration for the experiment drivers."""
from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..domain import CommKernel, FourierProfile, Grid, InitialDataSpec, profiles

SECTIONS = ("domain", "kernel", "kinetic", "euler", "experiment")


def load_defaults() -> dict:
    text = resources.files("kcslab.harness").joinpath("defaults.toml").read_text()
    return tomllib.loads(text)


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def layered(preset: str | None = None, user: dict | Path | str | None = None,
            overrides: dict | None = None) -> dict:
    raw = load_defaults()
    presets = raw.pop("presets", {})
    cfg = raw
    if preset is not None:
        cfg = deep_merge(cfg, presets.get(preset, {}))
    if user is not None:
        if not isinstance(user, dict):
            user = tomllib.loads(Path(user).read_text())
        unknown = set(user) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return cfg


@dataclass
class ExperimentConfig:
    name: str
    raw: dict = field(repr=False)

    def __post_init__(self):
        exp = self.raw["experiment"]
        if not exp["horizon"] > 0:
            raise ValueError("experiment.horizon must be positive")
        eps = [float(e) for e in exp.get("epsilons", [])]
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("experiment.epsilons must be strictly decreasing")
        if any(not e > 0 for e in eps):
            raise ValueError("epsilons must be positive")
        kin = self.raw["kinetic"]
        if kin["dt"] <= 0 or kin["dt"] > kin.get("dt_max", math.inf):
            raise ValueError("kinetic.dt must lie in (0, dt_max]")
        if self.raw["euler"]["dt"] <= 0:
            raise ValueError("euler.dt must be positive")
        self.kernel  # validates lam/beta
        self.initial_data(self.epsilon)

    @classmethod
    def build(cls, name: str, user=None, overrides: dict | None = None) -> "ExperimentConfig":
        return cls(name, layered(name, user, overrides))

    def section(self, key: str) -> dict:
        return self.raw[key]

    @property
    def d(self) -> int:
        return int(self.raw["domain"]["d"])

    @property
    def seed(self) -> int:
        return int(self.raw["domain"]["seed"])

    @property
    def kernel(self) -> CommKernel:
        k = self.raw["kernel"]
        return CommKernel(float(k["lam"]), float(k["beta"]))

    @property
    def grid(self) -> Grid:
        return Grid(int(self.raw["kinetic"]["cells"]), self.d)

    @property
    def euler_grid(self) -> Grid:
        return Grid(int(self.raw["kinetic"]["cells"]) * int(self.raw["euler"]["refine"]), self.d)

    @property
    def epsilon(self) -> float:
        return float(self.raw["kinetic"]["epsilon"])

    @property
    def epsilons(self) -> list[float]:
        return [float(e) for e in self.raw["experiment"]["epsilons"]]

    @property
    def horizon(self) -> float:
        return float(self.raw["experiment"]["horizon"])

    @property
    def dt(self) -> float:
        return float(self.raw["kinetic"]["dt"])

    def exp(self, key: str, default=None):
        return self.raw["experiment"].get(key, default)

    def initial_data(self, epsilon: float, particles: int | None = None) -> InitialDataSpec:
        dom = self.raw["domain"]
        n = int(self.raw["kinetic"]["particles"] if particles is None else particles)
        return InitialDataSpec(FourierProfile.from_config(dom["rho0"]), profiles(dom["u0"]),
                               epsilon, n, self.seed, self.d,
                               velocity_sampling=str(dom.get("velocity_sampling", "kronecker")))
