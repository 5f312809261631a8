"""Config file loading: one JSON file describes an experiment.

Scalar fields can be overridden from the command line; everything else is
pinned by the file so a config + seed is a reproducible experiment record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import kernels, macro_energy, microstructure
from .errors import ConfigError


def _require(d, key, where):
    if key not in d:
        raise ConfigError(f"missing field {key!r} in {where}")
    return d[key]


def kernel_from_dict(d, where="kernel"):
    family = _require(d, "family", where)
    params = dict(d.get("params", {}))
    normalization = d.get("normalization", "analytic")
    coercivity = d.get("coercivity_radius")
    if family == "expression":
        params["formula"] = _require(d, "formula", where)
        if "support_radius" in d:
            params["support_radius"] = d["support_radius"]
    try:
        return kernels.scalar_kernel(
            family, normalization=normalization, coercivity_radius=coercivity, **params
        )
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {where}: {exc}") from exc


def vector_kernel_from_dict(d, where="vector_kernel"):
    family = _require(d, "family", where)
    normalization = d.get("normalization", "analytic")
    if family == "axial":
        profile = kernel_from_dict(_require(d, "profile", where), where + ".profile")
        return kernels.axial_kernel(profile, normalization_mode=normalization)
    if family == "fixed_direction":
        profile = kernel_from_dict(_require(d, "profile", where), where + ".profile")
        direction = _require(d, "direction", where)
        return kernels.fixed_direction_kernel(direction, profile,
                                              normalization_mode=normalization)
    if family == "expression":
        formulas = _require(d, "formulas", where)
        support = _require(d, "support_radius", where)
        return kernels.expression_vector_kernel(formulas, support,
                                                normalization=normalization)
    raise ConfigError(f"unknown vector kernel family {family!r} in {where}")


def coefficient_from_dict(d, where="coefficient"):
    kind = _require(d, "kind", where)
    a0 = d.get("a0")
    sup = d.get("sup")
    if kind == "constant":
        return microstructure.constant_coefficient(_require(d, "value", where), a0=a0, sup=sup)
    if kind == "separable":
        return microstructure.separable_coefficient(
            _require(d, "f", where), _require(d, "g", where), a0=a0, sup=sup
        )
    if kind == "fourier":
        modes = []
        for mode in d.get("modes", []):
            modes.append((
                _require(mode, "k", where + ".modes"),
                _require(mode, "l", where + ".modes"),
                _require(mode, "amplitude", where + ".modes"),
                mode.get("phase", 0.0),
            ))
        return microstructure.fourier_coefficient(modes, offset=d.get("offset", 0.0),
                                                  a0=a0, sup=sup)
    if kind == "expression":
        return microstructure.expression_coefficient(_require(d, "formula", where),
                                                     a0=a0, sup=sup)
    raise ConfigError(f"unknown coefficient kind {kind!r} in {where}")


def magnetization_factory(d, where="macro.magnetization"):
    family = _require(d, "family", where)
    params = dict(d.get("params", {}))
    if family == "constant":
        direction = params.get("direction", (0.0, 0.0, 1.0))
        return lambda M: macro_energy.constant_magnetization(M, direction)
    if family == "helix":
        return lambda M: macro_energy.helix_magnetization(
            M, axis=int(params.get("axis", 3)), turns=params.get("turns", 1.0),
            phase=params.get("phase", 0.0),
        )
    if family == "bloch_wall":
        return lambda M: macro_energy.bloch_wall_magnetization(
            M, axis=int(params.get("axis", 1)), center=params.get("center", 0.5),
            width=params.get("width", 0.1),
        )
    if family == "expression":
        formulas = _require(d, "formulas", where)
        return lambda M: macro_energy.expression_magnetization(M, formulas)
    raise ConfigError(f"unknown magnetization family {family!r} in {where}")


@dataclass
class Config:
    rho: kernels.KernelSpec
    nu: kernels.VectorKernelSpec
    a: microstructure.CoefficientSpec
    kappa: microstructure.CoefficientSpec
    n: int = 8
    radius: Optional[float] = None
    tail_tol: float = 1e-8
    P_list: tuple = (4,)
    magnetization: object = None
    cg_tol: float = 1e-10
    max_iter_factor: int = 10
    preconditioner: str = "none"
    cache_coefficients: bool = False
    seed: int = 0
    output_dir: str = "."
    scenarios: tuple = ()
    raw: dict = field(default_factory=dict)

    def eps_list(self):
        return [1.0 / P for P in self.P_list]


def parse_config(source):
    """Parse a config from a JSON string, dict, or file path."""
    if isinstance(source, dict):
        data = source
    else:
        text = source
        path = Path(str(source))
        if "\n" not in str(source) and path.exists():
            text = path.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    kernel_d = _require(data, "kernel", "config")
    vector_d = _require(data, "vector_kernel", "config")
    coeff_d = _require(data, "coefficients", "config")
    lattice_d = data.get("lattice", {})
    macro_d = data.get("macro", {})
    solver_d = data.get("solver", {})
    output_d = data.get("output", {})

    n = int(lattice_d.get("n", 8))
    if n < 2:
        raise ConfigError("lattice.n must be at least 2")
    tail_tol = float(lattice_d.get("tail_tol", 1e-8))
    if tail_tol <= 0:
        raise ConfigError("lattice.tail_tol must be positive")
    radius = lattice_d.get("R")
    radius = float(radius) if radius is not None else None

    P_list = macro_d.get("P", [4])
    if isinstance(P_list, (int, float)):
        P_list = [P_list]
    P_list = tuple(int(P) for P in P_list)
    for P in P_list:
        if P < 1:
            raise ConfigError(f"macro.P entries must be positive integers, got {P}")
    if "M" in macro_d:
        M = int(macro_d["M"])
        for P in P_list:
            if M != P * n:
                raise ConfigError(
                    f"commensurability violated: M = {M} but P n = {P * n} "
                    f"(M must equal P n)"
                )

    cg_tol = float(solver_d.get("cg_tol", 1e-10))
    if cg_tol <= 0:
        raise ConfigError("solver.cg_tol must be positive")
    max_iter_factor = int(solver_d.get("max_iter_factor", 10))
    if max_iter_factor <= 0:
        raise ConfigError("solver.max_iter_factor must be positive")
    precond = solver_d.get("preconditioner", "none")
    if precond is True:
        precond = "jacobi"
    if precond is False or precond is None:
        precond = "none"

    magnet = None
    if "magnetization" in macro_d:
        magnet = magnetization_factory(macro_d["magnetization"])

    return Config(
        rho=kernel_from_dict(kernel_d),
        nu=vector_kernel_from_dict(vector_d),
        a=coefficient_from_dict(_require(coeff_d, "a", "coefficients"), "coefficients.a"),
        kappa=coefficient_from_dict(_require(coeff_d, "kappa", "coefficients"),
                                    "coefficients.kappa"),
        n=n,
        radius=radius,
        tail_tol=tail_tol,
        P_list=P_list,
        magnetization=magnet,
        cg_tol=cg_tol,
        max_iter_factor=max_iter_factor,
        preconditioner=precond,
        cache_coefficients=bool(solver_d.get("cache_coefficients", False)),
        seed=int(data.get("seed", 0)),
        output_dir=output_d.get("dir", "."),
        scenarios=tuple(data.get("scenarios", ())),
        raw=data,
    )


def load_scenario(name_or_path):
    """Load a scenario dict from the packaged set or from a file path."""
    path = Path(str(name_or_path))
    if path.exists():
        return json.loads(path.read_text())
    resource = resources.files("nlhom").joinpath(f"scenarios/{name_or_path}.json")
    try:
        return json.loads(resource.read_text())
    except FileNotFoundError:
        raise ConfigError(
            f"unknown scenario {name_or_path!r} (not a file, not packaged)"
        ) from None


def build_scenario(scenario):
    """Materialize a scenario dict (or name) into specs and factories."""
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    name = scenario.get("name", "scenario")
    return {
        "name": name,
        "n": int(scenario["n"]),
        "eps_list": [float(e) for e in scenario["eps_list"]],
        "rho": kernel_from_dict(scenario["kernel"], f"{name}.kernel"),
        "nu": vector_kernel_from_dict(scenario["vector_kernel"], f"{name}.vector_kernel"),
        "a": coefficient_from_dict(scenario["coefficients"]["a"], f"{name}.a"),
        "kappa": coefficient_from_dict(scenario["coefficients"]["kappa"], f"{name}.kappa"),
        "magnetization": magnetization_factory(scenario["magnetization"], f"{name}.magnetization"),
        "gap_tolerance": float(scenario["gap_tolerance"]),
        "raw": scenario,
    }
