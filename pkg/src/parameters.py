#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
MIT License

Copyright (c) 2024 cauchy1988

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in all
copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
SOFTWARE.
"""


from __future__ import annotations

import configparser
import copy
import hashlib
import re
from typing import Any, Dict, List, Optional, Sequence, Tuple

from bench import BenchConfig, BenchKernel
from grid import BoundaryCondition, GridSpec
from kernels import KernelPath
from precond import PreconditionerKind
from pulse import PulseProblem
from solver import SolverConfig, SolverVariant
from stencil_operator import Limiter


class ConfigError(Exception):
    """Custom exception for configuration parsing and validation"""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class ParameterRange:
    """Define the range and constraints for a parameter"""

    KINDS = ("int", "float", "bool", "choice", "pair", "list")

    def __init__(self, min_value: Optional[float] = None, max_value: Optional[float] = None,
                 kind: str = "float", choices: Sequence[str] = (), description: str = ""):
        if kind not in self.KINDS:
            raise ValueError(f"unknown parameter kind {kind}")
        self.min_value = min_value
        self.max_value = max_value
        self.kind = kind
        self.choices = tuple(choices)
        self.description = description

    def parse(self, text: str) -> Any:
        """Convert the textual form of a value"""
        text = text.strip()
        try:
            if self.kind == "int":
                return int(text)
            if self.kind == "float":
                return float(text)
            if self.kind == "bool":
                lowered = text.lower()
                if lowered in ("true", "yes", "on", "1"):
                    return True
                if lowered in ("false", "no", "off", "0"):
                    return False
                raise ValueError(text)
            if self.kind == "pair":
                parts = [float(p) for p in text.split(",")]
                if len(parts) != 2:
                    raise ValueError(text)
                return tuple(parts)
            if self.kind == "list":
                return tuple(p.strip() for p in text.split(",") if p.strip())
        except ValueError as e:
            raise ValueError(f"cannot read {text!r} as {self.kind}") from e
        return text.lower()

    def validate(self, value: Any) -> bool:
        """Validate if a value satisfies the parameter constraints"""
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                return False
        elif self.kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value != value:
                return False
        elif self.kind == "bool":
            return isinstance(value, bool)
        elif self.kind == "choice":
            return value in self.choices
        elif self.kind == "pair":
            return isinstance(value, tuple) and len(value) == 2
        elif self.kind == "list":
            allowed = {c.upper() for c in self.choices}
            return isinstance(value, tuple) and len(value) > 0 and all(v.upper() in allowed for v in value)
        if self.min_value is not None and value < self.min_value:
            return False
        if self.max_value is not None and value > self.max_value:
            return False
        return True

    def format(self, value: Any) -> str:
        if self.kind == "bool":
            return "true" if value else "false"
        if self.kind == "float":
            return repr(float(value))
        if self.kind == "pair":
            return ", ".join(repr(float(v)) for v in value)
        if self.kind == "list":
            return ", ".join(value)
        return str(value)

    def describe(self) -> str:
        if self.kind in ("choice", "list"):
            return f"one of {list(self.choices)}"
        return f"[{self.min_value}, {self.max_value}]"


class ParameterGroup:
    """Group related parameters; one group per configuration section"""

    def __init__(self, name: str, parameters: List[str], description: str = ""):
        self.name = name
        self.parameters = parameters
        self.description = description


class Parameters:
    """
    Validated run configuration.

    Keys are addressed as "section.key". Every value is checked against its
    ParameterRange on construction and on every change.
    """

    PARAMETER_GROUPS = {
        "grid": ParameterGroup("Grid", ["nx1", "nx2", "nspecies", "dx1", "dx2"],
                               "Zone counts and widths of the global grid"),
        "problem": ParameterGroup(
            "Pulse Problem",
            ["sigma0", "center", "amplitude", "d0", "dt", "nsteps", "solves_per_step", "limiter", "opacity",
             "light_speed", "coupling", "boundary", "boundary_value", "snapshot_every"],
            "Gaussian pulse, time stepping and physics switches"),
        "solver": ParameterGroup("Solver", ["tol", "max_iter", "variant", "precond", "warm_start", "kernel_path"],
                                 "BiCGSTAB tolerance, variant and preconditioner"),
        "topology": ParameterGroup("Topology", ["nprx1", "nprx2"], "Tile decomposition"),
        "bench": ParameterGroup("Bench", ["n", "reps", "warmup", "seed", "kernels", "paths", "run_count",
                                          "include_precond"],
                                "Kernel benchmark and scaling sweep settings"),
    }

    PARAMETER_RANGES = {
        "grid.nx1": ParameterRange(2, 100_000, kind="int", description="Zones along x1"),
        "grid.nx2": ParameterRange(2, 100_000, kind="int", description="Zones along x2"),
        "grid.nspecies": ParameterRange(1, 16, kind="int", description="Species per zone"),
        "grid.dx1": ParameterRange(1e-12, 1e12, description="Zone width along x1"),
        "grid.dx2": ParameterRange(1e-12, 1e12, description="Zone width along x2"),

        "problem.sigma0": ParameterRange(1e-12, 1e12, description="Initial Gaussian width"),
        "problem.center": ParameterRange(kind="pair", description="Pulse center x1, x2"),
        "problem.amplitude": ParameterRange(1e-300, 1e300, description="Peak energy density per species"),
        "problem.d0": ParameterRange(0.0, 1e12, description="Constant diffusion coefficient"),
        "problem.dt": ParameterRange(1e-300, 1e12, description="Time step"),
        "problem.nsteps": ParameterRange(0, 10_000_000, kind="int", description="Number of time steps"),
        "problem.solves_per_step": ParameterRange(1, 100, kind="int", description="Implicit stages per step"),
        "problem.limiter": ParameterRange(kind="choice", choices=[l.value for l in Limiter],
                                          description="Flux limiter"),
        "problem.opacity": ParameterRange(1e-300, 1e300, description="Opacity used by the flux limiter"),
        "problem.light_speed": ParameterRange(1e-300, 1e300, description="Light speed used by the flux limiter"),
        "problem.coupling": ParameterRange(0.0, 1e12, description="Species exchange rate"),
        "problem.boundary": ParameterRange(kind="choice", choices=["zero_flux", "dirichlet"],
                                           description="Physical boundary condition"),
        "problem.boundary_value": ParameterRange(-1e300, 1e300, description="Dirichlet boundary value"),
        "problem.snapshot_every": ParameterRange(0, 10_000_000, kind="int",
                                                 description="Write a field snapshot every N steps, 0 disables"),

        "solver.tol": ParameterRange(1e-300, 1.0, description="Relative residual tolerance"),
        "solver.max_iter": ParameterRange(0, 100_000_000, kind="int",
                                          description="Iteration cap, 0 means 10 * sqrt(N)"),
        "solver.variant": ParameterRange(kind="choice", choices=[v.value for v in SolverVariant],
                                         description="BiCGSTAB variant"),
        "solver.precond": ParameterRange(kind="choice", choices=[k.value for k in PreconditionerKind],
                                         description="Preconditioner"),
        "solver.warm_start": ParameterRange(kind="bool", description="Start each solve from the previous state"),
        "solver.kernel_path": ParameterRange(kind="choice", choices=[p.value for p in KernelPath],
                                             description="Kernel code path used inside the solver"),

        "topology.nprx1": ParameterRange(1, 100_000, kind="int", description="Tiles along x1"),
        "topology.nprx2": ParameterRange(1, 100_000, kind="int", description="Tiles along x2"),

        "bench.n": ParameterRange(1, 100_000_000, kind="int", description="Vector length"),
        "bench.reps": ParameterRange(1, 1_000_000_000, kind="int", description="Timed repetitions"),
        "bench.warmup": ParameterRange(0, 1_000_000_000, kind="int", description="Untimed warmup repetitions"),
        "bench.seed": ParameterRange(0, 2 ** 63 - 1, kind="int", description="Random seed"),
        "bench.kernels": ParameterRange(kind="list", choices=[k.value for k in BenchKernel],
                                        description="Kernels to time"),
        "bench.paths": ParameterRange(kind="list", choices=[p.value for p in KernelPath],
                                      description="Kernel paths to time"),
        "bench.run_count": ParameterRange(1, 1000, kind="int", description="Repetitions per sweep topology"),
        "bench.include_precond": ParameterRange(kind="bool", description="Also time the SPAI application"),
    }

    DEFAULTS = {
        "grid.nx1": 200,
        "grid.nx2": 100,
        "grid.nspecies": 2,
        "grid.dx1": 0.01,
        "grid.dx2": 0.01,
        "problem.sigma0": 0.033,
        "problem.center": (1.0, 0.5),
        "problem.amplitude": 1.0,
        "problem.d0": 0.04,
        "problem.dt": 1e-3,
        "problem.nsteps": 100,
        "problem.solves_per_step": 3,
        "problem.limiter": "none",
        "problem.opacity": 1.0,
        "problem.light_speed": 1.0,
        "problem.coupling": 0.0,
        "problem.boundary": "zero_flux",
        "problem.boundary_value": 0.0,
        "problem.snapshot_every": 0,
        "solver.tol": 1e-8,
        "solver.max_iter": 0,
        "solver.variant": "ganged",
        "solver.precond": "spai",
        "solver.warm_start": False,
        "solver.kernel_path": "vectorized",
        "topology.nprx1": 1,
        "topology.nprx2": 1,
        "bench.n": 1000,
        "bench.reps": 100_000,
        "bench.warmup": 1000,
        "bench.seed": 20211,
        "bench.kernels": ("MATVEC", "DPROD", "DAXPY", "DSCAL", "DDAXPY"),
        "bench.paths": ("scalar", "vectorized"),
        "bench.run_count": 3,
        "bench.include_precond": False,
    }

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._params = copy.deepcopy(self.DEFAULTS)
        if values:
            for name in values:
                if name not in self._params:
                    raise ConfigError(f"unknown parameter: {name}", key=name)
            self._params.update(values)

        # Store original parameters for reset
        self._original_params = copy.deepcopy(self._params)

        self._validate_all_parameters()

    def _validate_all_parameters(self) -> None:
        """Validate all parameters against their defined ranges"""
        for name, value in self._params.items():
            self._validate_parameter(name, value)

    def _validate_parameter(self, name: str, value: Any, line: Optional[int] = None) -> None:
        """Validate a single parameter"""
        param_range = self.PARAMETER_RANGES[name]
        if not param_range.validate(value):
            raise ConfigError(f"parameter {name}={value!r} is outside valid range {param_range.describe()}",
                              line=line, key=name)

    def reset(self) -> None:
        """Reset parameters to their original values"""
        self._params = copy.deepcopy(self._original_params)

    def get(self, name: str) -> Any:
        if name not in self._params:
            raise ConfigError(f"unknown parameter: {name}", key=name)
        return self._params[name]

    def __getitem__(self, name: str) -> Any:
        return self.get(name)

    def section(self, section: str) -> Dict[str, Any]:
        if section not in self.PARAMETER_GROUPS:
            raise ConfigError(f"unknown section: {section}")
        return {key: self._params[f"{section}.{key}"] for key in self.PARAMETER_GROUPS[section].parameters}

    def apply_parameters(self, new_params: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> None:
        """Apply new parameter values with validation"""
        lines = lines or {}
        for name, value in new_params.items():
            if name not in self._params:
                raise ConfigError(f"unknown parameter: {name}", line=lines.get(name), key=name)
            self._validate_parameter(name, value, lines.get(name))
            self._params[name] = value

    def apply_overrides(self, overrides: Sequence[str]) -> None:
        """Apply "section.key=value" overrides given on the command line"""
        parsed = {}
        for override in overrides:
            if "=" not in override:
                raise ConfigError(f"override {override!r} is not of the form section.key=value")
            name, text = override.split("=", 1)
            name = name.strip().lower()
            if name not in self.PARAMETER_RANGES:
                raise ConfigError(f"unknown parameter: {name}", key=name)
            try:
                parsed[name] = self.PARAMETER_RANGES[name].parse(text)
            except ValueError as e:
                raise ConfigError(f"override {name}: {e}", key=name) from e
        self.apply_parameters(parsed)

    def to_dict(self) -> Dict[str, Any]:
        """Convert parameters to dictionary"""
        return copy.deepcopy(self._params)

    def to_ini_text(self) -> str:
        """Canonical INI serialization: sections and keys in declaration order"""
        lines = []
        for section, group in self.PARAMETER_GROUPS.items():
            lines.append(f"[{section}]")
            for key in group.parameters:
                name = f"{section}.{key}"
                lines.append(f"{key} = {self.PARAMETER_RANGES[name].format(self._params[name])}")
            lines.append("")
        return "\n".join(lines)

    @property
    def fingerprint(self) -> str:
        """Hash of the effective configuration, written into every output header"""
        return hashlib.blake2b(self.to_ini_text().encode("utf-8"), digest_size=16).hexdigest()

    def export_parameters(self, filename: str) -> None:
        """Export current parameters to an INI file that read_config_file reads back"""
        with open(filename, "w") as f:
            f.write(f"# config_hash={self.fingerprint}\n")
            f.write(self.to_ini_text())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Parameters) and self._params == other._params

    def __str__(self) -> str:
        return self.to_ini_text()


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> Dict[str, int]:
    """Line number of every "section.key" in the file text"""
    lines = {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        match = _SECTION_RE.match(raw)
        if match:
            section = match.group(1).strip().lower()
            continue
        match = _KEY_RE.match(raw)
        if match and section is not None and not raw.startswith((" ", "\t")):
            lines.setdefault(f"{section}.{match.group(1).strip().lower()}", number)
    return lines


def _section_lines(text: str) -> Dict[str, int]:
    lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        match = _SECTION_RE.match(raw)
        if match:
            lines.setdefault(match.group(1).strip().lower(), number)
    return lines


def parse_config_text(text: str, source: str = "<string>") -> Parameters:
    """
    Parse INI text into validated Parameters.

    Raises:
        ConfigError: On syntax errors, duplicates, unknown sections or keys and invalid
            values; the error names the line number
    """
    parser = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"{source}: duplicate section [{e.section}]", line=e.lineno) from e
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"{source}: duplicate key {e.section}.{e.option}", line=e.lineno,
                          key=f"{e.section}.{e.option}") from e
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}: key outside of any section", line=e.lineno) from e
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError(f"{source}: malformed line", line=line) from e

    key_lines = _key_lines(text)
    section_lines = _section_lines(text)
    values = {}
    for section in parser.sections():
        if section not in Parameters.PARAMETER_GROUPS:
            raise ConfigError(f"{source}: unknown section [{section}]", line=section_lines.get(section.lower()))
        for key, raw in parser.items(section):
            name = f"{section}.{key}"
            line = key_lines.get(name)
            if name not in Parameters.PARAMETER_RANGES:
                raise ConfigError(f"{source}: unknown key {name}", line=line, key=name)
            try:
                values[name] = Parameters.PARAMETER_RANGES[name].parse(raw)
            except ValueError as e:
                raise ConfigError(f"{source}: {name}: {e}", line=line, key=name) from e
    params = Parameters()
    params.apply_parameters(values, key_lines)
    return params


def read_config_file(path: str) -> Parameters:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, source=path)


def build_solver_config(params: Parameters) -> SolverConfig:
    max_iter = params["solver.max_iter"]
    return SolverConfig(tol=params["solver.tol"], max_iter=max_iter if max_iter > 0 else None,
                        variant=SolverVariant.parse(params["solver.variant"]),
                        precond=PreconditionerKind.parse(params["solver.precond"]),
                        warm_start=params["solver.warm_start"],
                        kernel_path=KernelPath.parse(params["solver.kernel_path"]))


def build_pulse_problem(params: Parameters) -> PulseProblem:
    """
    Assemble the pulse problem described by the configuration.

    Raises:
        ConfigError: If the values are individually valid but inconsistent together
    """
    try:
        grid = GridSpec(params["grid.nx1"], params["grid.nx2"], params["grid.nspecies"], params["grid.dx1"],
                        params["grid.dx2"])
        if params["problem.boundary"] == "dirichlet":
            bc = BoundaryCondition.dirichlet(params["problem.boundary_value"])
        else:
            bc = BoundaryCondition.zero_flux()
        return PulseProblem(grid=grid, sigma0=params["problem.sigma0"], center=params["problem.center"],
                            amplitude=params["problem.amplitude"], d0=params["problem.d0"],
                            dt=params["problem.dt"], nsteps=params["problem.nsteps"],
                            solves_per_step=params["problem.solves_per_step"],
                            limiter=Limiter.parse(params["problem.limiter"]), opacity=params["problem.opacity"],
                            light_speed=params["problem.light_speed"], coupling=params["problem.coupling"],
                            bc=bc, solver=build_solver_config(params),
                            topology=(params["topology.nprx1"], params["topology.nprx2"]),
                            snapshot_every=params["problem.snapshot_every"])
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"inconsistent problem configuration: {e}") from e


def build_bench_config(params: Parameters) -> BenchConfig:
    try:
        return BenchConfig(n=params["bench.n"], reps=params["bench.reps"],
                           kernels=tuple(BenchKernel.parse(k) for k in params["bench.kernels"]),
                           paths=tuple(KernelPath.parse(p) for p in params["bench.paths"]),
                           warmup_reps=params["bench.warmup"], rng_seed=params["bench.seed"],
                           include_precond=params["bench.include_precond"])
    except Exception as e:
        raise ConfigError(f"inconsistent bench configuration: {e}") from e


def parse_topologies(text: str) -> List[Tuple[int, int]]:
    """Parse "1x1,10x1,5x4" into (nprx1, nprx2) pairs; counts must be positive"""
    topologies = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        match = re.fullmatch(r"(\d+)x(\d+)", item)
        if not match:
            raise ConfigError(f"topology {item!r} is not of the form NX1xNX2")
        nprx1, nprx2 = int(match.group(1)), int(match.group(2))
        if nprx1 < 1 or nprx2 < 1:
            raise ConfigError(f"topology {item!r} needs positive tile counts")
        topologies.append((nprx1, nprx2))
    if not topologies:
        raise ConfigError("empty topology list")
    return topologies
