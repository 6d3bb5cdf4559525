"""Experiment configuration: TOML files with explicit defaults.

One config file drives one reproducible experiment.  Every default is
materialized in the resolved dump (``--print-config``) so experiments are
reviewable and diffable; the seed is mandatory because no command is
allowed to fall back to an entropy source.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .control import make_problem
from .kernels import parse_kernel_spec
from .lift import build_laplace_lift, build_shift_lift
from .simulate import BrownianGrid


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


DEFAULTS = {
    "kernel": {
        "name": "",  # empty: take the problem's catalog kernel
    },
    "lift": {
        "kind": "",  # empty: shift for sqrt, laplace for laplace/exp kernels
        "horizon": 0.0,  # 0: use grid.T
        "nodes": 64,
        "panels": 8,
    },
    "problem": {
        "name": "consumption_sqrt",
        "a1": 1.0,
        "a2": 1.0,
        "c_bar": 1.0,
        "sigma0": 0.2,
        "x_bar": 1.0,
        "K_R": 10.0,
        "eps": 0.5,
        "sigma_kind": "const",
    },
    "grid": {
        "t0": 0.0,
        "T": 1.0,
        "n_steps": 64,
        "n_paths": 10000,
        "seed": None,  # required
    },
    "solver": {
        "method": "both",  # lsmc | picard | both
        "picard_rounds": 8,
        "agreement_band_sigma": 2.0,
    },
    "basis": {
        "spec": "poly3_transport",
        "ridge": "auto",
    },
    "output": {
        "dir": "out",
    },
    "lift_check": {
        "max_abs_err": 1e-12,
        "max_rel_err": 1e-3,
        "n_probe": 64,
    },
    "simulate": {
        "equivalence_tol": 1e-10,
        "csv_include_z": False,
    },
    "optimize": {
        "n_random_policies": 20,
        "band_sigma": 3.0,
        "n_trace_paths": 20,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration plus builders for the pieces."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = _toml.loads(Path(path).read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except _toml.TOMLDecodeError as err:
            raise ConfigError(f"config parse error in {path}: {err}") from err
        return cls(data=_merge(DEFAULTS, raw))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls(data=_merge(DEFAULTS, raw))

    def override(self, seed=None, out_dir=None, n_paths=None, n_steps=None) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["grid"]["seed"] = int(seed)
        if out_dir is not None:
            data["output"]["dir"] = str(out_dir)
        if n_paths is not None:
            data["grid"]["n_paths"] = int(n_paths)
        if n_steps is not None:
            data["grid"]["n_steps"] = int(n_steps)
        return ExperimentConfig(data=data)

    # -- validation and builders ------------------------------------------

    def validate(self) -> None:
        g = self.data["grid"]
        if not isinstance(g["seed"], int):
            raise ConfigError("grid.seed is required (no entropy-source defaults)")
        if g["n_steps"] < 1:
            raise ConfigError("grid.n_steps must be >= 1")
        if g["n_paths"] < 1:
            raise ConfigError("grid.n_paths must be >= 1")
        if g["T"] <= g["t0"]:
            raise ConfigError("grid.T must exceed grid.t0")
        if self.lift_horizon() < g["T"] - 1e-12:
            raise ConfigError("grid.T must not exceed the lift horizon")
        method = self.data["solver"]["method"]
        if method not in ("lsmc", "picard", "both"):
            raise ConfigError(f"solver.method must be lsmc|picard|both, got {method!r}")

    def lift_horizon(self) -> float:
        h = self.data["lift"]["horizon"]
        return float(h) if h else float(self.data["grid"]["T"])

    def dt(self) -> float:
        g = self.data["grid"]
        return (g["T"] - g["t0"]) / g["n_steps"]

    def build_problem(self):
        p = dict(self.data["problem"])
        name = p.pop("name")
        horizon = self.lift_horizon()
        if name in ("consumption_sqrt", "consumption_laplace"):
            kwargs = {k: p[k] for k in ("a1", "a2", "c_bar", "sigma0", "x_bar",
                                        "K_R", "sigma_kind")}
            if name == "consumption_laplace":
                kwargs["eps"] = p["eps"]
            return make_problem(name, horizon=horizon, **kwargs)
        if name == "lq_smooth":
            return make_problem(name, sigma0=p["sigma0"], x_bar=p["x_bar"],
                                K_R=p["K_R"], horizon=horizon)
        raise ConfigError(f"unknown problem.name {name!r}")

    def build_kernel(self, problem=None):
        name = self.data["kernel"]["name"]
        if name:
            return parse_kernel_spec(name, horizon=self.lift_horizon())
        if problem is None:
            problem = self.build_problem()
        return problem.kernel

    def lift_kind(self, kernel) -> str:
        kind = self.data["lift"]["kind"]
        if kind:
            return kind
        if kernel.name.startswith("sqrt"):
            return "shift"
        return "laplace"

    def build_lift(self, kernel=None):
        if kernel is None:
            kernel = self.build_kernel()
        kind = self.lift_kind(kernel)
        if kind == "shift":
            return build_shift_lift(kernel, dt=self.dt(), horizon=self.lift_horizon())
        if kind == "laplace":
            return build_laplace_lift(
                kernel, dt=self.dt(), horizon=self.lift_horizon(),
                n_nodes=int(self.data["lift"]["nodes"]),
                n_panels=int(self.data["lift"]["panels"]),
            )
        raise ConfigError(f"unknown lift.kind {kind!r}")

    def build_grid(self, n_paths=None, seed_offset=0) -> BrownianGrid:
        g = self.data["grid"]
        return BrownianGrid(
            t0=float(g["t0"]), T=float(g["T"]), n_steps=int(g["n_steps"]),
            n_paths=int(n_paths if n_paths is not None else g["n_paths"]),
            seed=int(g["seed"]) + seed_offset,
        )

    def build_basis(self):
        from .regression import parse_basis

        ridge = self.data["basis"]["ridge"]
        return parse_basis(self.data["basis"]["spec"],
                           ridge=ridge if ridge == "auto" else float(ridge))

    # -- rendering ---------------------------------------------------------

    def to_toml(self) -> str:
        lines = []
        for section, table in self.data.items():
            lines.append(f"[{section}]")
            for key, value in table.items():
                if value is None:
                    lines.append(f"# {key} = <required>")
                else:
                    lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float):
        return repr(value)
    return str(value)
