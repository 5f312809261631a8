"""Q x Q-periodic coefficients a(z, z') and kappa(z, z').

Kinds: ``constant``, ``separable`` f(z) g(z'), ``fourier`` (finite cosine
modes on the torus pair), and ``expression`` (DSL in z1..z3, zp1..zp3).
Evaluation wraps all six arguments mod 1 first, so periodicity is exact.
Coefficients are evaluated lazily at node pairs and never materialized as an
n^3 x n^3 table.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dsl import Expression, parse_expression
from .errors import AssumptionError, ConfigError

_Z_VARS = {"z1", "z2", "z3"}
_ZP_VARS = {"zp1", "zp2", "zp3"}


@dataclass(frozen=True)
class FourierMode:
    k: tuple          # integer wave vector in z
    l: tuple          # integer wave vector in z'
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class CoefficientSpec:
    kind: str
    value: float = 0.0                       # constant kind
    f: Optional[Expression] = None           # separable: f(z)
    g: Optional[Expression] = None           # separable: g(z')
    modes: tuple = ()                        # fourier kind
    offset: float = 0.0                      # fourier constant term
    formula: Optional[Expression] = None     # expression kind
    a0_declared: Optional[float] = None
    sup_bound: Optional[float] = None


def constant_coefficient(value, a0=None, sup=None):
    return CoefficientSpec(kind="constant", value=float(value), a0_declared=a0, sup_bound=sup)


def separable_coefficient(f, g, a0=None, sup=None):
    f_expr = f if isinstance(f, Expression) else parse_expression(f)
    g_expr = g if isinstance(g, Expression) else parse_expression(g)
    if f_expr.variables - _Z_VARS:
        raise ConfigError(f"separable factor f may only use z1..z3, got {f_expr.text!r}")
    if g_expr.variables - _ZP_VARS:
        raise ConfigError(f"separable factor g may only use zp1..zp3, got {g_expr.text!r}")
    return CoefficientSpec(kind="separable", f=f_expr, g=g_expr, a0_declared=a0, sup_bound=sup)


def fourier_coefficient(modes, offset=0.0, a0=None, sup=None):
    """modes: iterable of (k, l, amplitude[, phase]) with integer 3-vectors k, l."""
    packed = []
    for mode in modes:
        if isinstance(mode, FourierMode):
            packed.append(mode)
            continue
        k, l, amp = mode[0], mode[1], mode[2]
        phase = mode[3] if len(mode) > 3 else 0.0
        packed.append(FourierMode(tuple(int(v) for v in k), tuple(int(v) for v in l),
                                  float(amp), float(phase)))
    return CoefficientSpec(kind="fourier", modes=tuple(packed), offset=float(offset),
                           a0_declared=a0, sup_bound=sup)


def expression_coefficient(formula, a0=None, sup=None):
    expr = formula if isinstance(formula, Expression) else parse_expression(formula)
    extra = expr.variables - (_Z_VARS | _ZP_VARS)
    if extra:
        raise ConfigError(f"coefficient formula uses non-coefficient variables {sorted(extra)}")
    return CoefficientSpec(kind="expression", formula=expr, a0_declared=a0, sup_bound=sup)


def eval_coeff(spec, z, zprime):
    """Evaluate at (z, z'), broadcasting; both points are wrapped mod 1."""
    z = np.mod(np.asarray(z, dtype=float), 1.0)
    zp = np.mod(np.asarray(zprime, dtype=float), 1.0)
    if spec.kind == "constant":
        shape = np.broadcast_shapes(z.shape[:-1], zp.shape[:-1])
        return np.full(shape, spec.value) if shape else float(spec.value)
    if spec.kind == "separable":
        fv = spec.f(z1=z[..., 0], z2=z[..., 1], z3=z[..., 2])
        gv = spec.g(zp1=zp[..., 0], zp2=zp[..., 1], zp3=zp[..., 2])
        return fv * gv
    if spec.kind == "fourier":
        out = None
        for mode in spec.modes:
            arg = np.zeros(np.broadcast_shapes(z.shape[:-1], zp.shape[:-1]))
            for i in range(3):
                if mode.k[i]:
                    arg = arg + mode.k[i] * z[..., i]
                if mode.l[i]:
                    arg = arg + mode.l[i] * zp[..., i]
            term = mode.amplitude * np.cos(2.0 * np.pi * arg + mode.phase)
            out = term if out is None else out + term
        base = spec.offset
        return base + out if out is not None else np.full(z.shape[:-1], base)
    return spec.formula(
        z1=z[..., 0], z2=z[..., 1], z3=z[..., 2],
        zp1=zp[..., 0], zp2=zp[..., 1], zp3=zp[..., 2],
    )


def eval_coeff_pairs(spec, z, xi):
    """a(z, z + xi) with z of shape (..., 3) and a single offset xi."""
    return eval_coeff(spec, z, z + np.asarray(xi, dtype=float))


@dataclass
class H1Report:
    min_sample: float
    max_sample: float
    passed: bool
    symmetry_defect: float
    argmin: tuple = ()


def check_h1(spec, lattice, grid=None):
    """Sample a(z, z + xi_q) over the cell grid for every lattice node.

    Passes iff the sampled minimum stays above the declared lower bound and
    the maximum is finite (and below sup_bound when declared).  A sampled
    symmetry defect beyond 1e-8 emits a warning, not an error.
    """
    z = lattice.cell_coordinates() if grid is None else grid
    min_val = np.inf
    max_val = -np.inf
    sym_defect = 0.0
    argmin = None
    for q in range(lattice.node_count):
        xi = lattice.xi[q]
        vals = np.asarray(eval_coeff(spec, z, z + xi))
        if not np.all(np.isfinite(vals)):
            bad = int(np.argmax(~np.isfinite(vals)))
            raise AssumptionError(
                f"coefficient is non-finite at z={z[bad]}, z'={z[bad] + xi}"
            )
        vmin = float(vals.min())
        if vmin < min_val:
            min_val = vmin
            bad = int(np.argmin(vals))
            argmin = (tuple(z[bad]), tuple(z[bad] + xi))
        max_val = max(max_val, float(vals.max()))
        vals_t = np.asarray(eval_coeff(spec, z + xi, z))
        sym_defect = max(sym_defect, float(np.max(np.abs(vals - vals_t))))
    passed = np.isfinite(max_val)
    if spec.a0_declared is not None:
        passed = passed and min_val >= spec.a0_declared
    if spec.sup_bound is not None:
        passed = passed and max_val <= spec.sup_bound
    if sym_defect > 1e-8:
        warnings.warn(
            f"coefficient symmetry defect {sym_defect:.3e} exceeds 1e-8; "
            "the analysis assumes the symmetric reduction",
            stacklevel=2,
        )
    report = H1Report(min_sample=min_val, max_sample=max_val, passed=passed,
                      symmetry_defect=sym_defect, argmin=argmin)
    if spec.a0_declared is not None and min_val < spec.a0_declared:
        raise AssumptionError(
            f"coefficient drops to {min_val:.6g} below the declared bound "
            f"{spec.a0_declared:.6g} at pair {argmin}"
        )
    return report


def coefficient_node_averages(spec, lattice, z=None):
    """Mean over the cell grid of a(z, z + xi_q), one value per lattice node."""
    if spec.kind == "constant":
        return np.full(lattice.node_count, spec.value)
    if z is None:
        z = lattice.cell_coordinates()
    out = np.empty(lattice.node_count)
    for q in range(lattice.node_count):
        out[q] = float(np.mean(eval_coeff(spec, z, z + lattice.xi[q])))
    return out


def averaged_kernels(a_spec, kappa_spec, lattice):
    """z-averaged kernels rho_bar_a and nu_bar_kappa tabulated on the lattice."""
    abar = coefficient_node_averages(a_spec, lattice)
    kbar = coefficient_node_averages(kappa_spec, lattice)
    return {
        "rho_bar_a": abar * lattice.rho,
        "nu_bar_kappa": kbar[:, None] * lattice.nu,
    }
