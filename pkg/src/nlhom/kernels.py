"""Localizing kernels: the scalar weight rho and the vector weight nu.

Built-in scalar families (all compactly supported):

* ``bump_quadratic``     rho(xi) = c |xi|^2           on |xi| <= r
* ``truncated_gaussian`` rho(xi) = c exp(-|xi|^2/s^2) on |xi| <= R
* ``indicator_shell``    rho(xi) = c                  on r1 <= |xi| <= r2
* ``expression``         user formula in xi1..xi3, r; declared support radius

Vector families:

* ``axial``           nu(xi) = (xi/|xi|) g(|xi|) with a scalar-kernel profile g
* ``fixed_direction`` nu(xi) = e g(|xi|), |e| = 1
* ``expression``      three formulas in xi1..xi3, r

Normalization: ``analytic`` uses the closed-form constant of the family;
``quadrature`` rescales so that the L1 sum over a given xi-lattice is one
(applied when the lattice is built).  Lambda-rescaling wraps evaluation as
rho_lam(xi) = lam^-3 rho(xi/lam), which preserves the L1 mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dsl import Expression, parse_expression
from .errors import AssumptionError, ConfigError, InputError

SCALAR_FAMILIES = ("bump_quadratic", "truncated_gaussian", "indicator_shell", "expression")
VECTOR_FAMILIES = ("axial", "fixed_direction", "expression")

_KERNEL_VARS = {"xi1", "xi2", "xi3", "r"}


def _as_points(xi):
    pts = np.asarray(xi, dtype=float)
    if pts.shape[-1] != 3:
        raise InputError(f"xi must have 3 components, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InputError("xi contains non-finite entries")
    return pts


@dataclass(frozen=True)
class KernelSpec:
    """Parametric scalar kernel; immutable, pure to evaluate."""

    family: str
    params: tuple  # sorted (name, value) pairs
    normalization_mode: str = "analytic"
    coercivity_radius: Optional[float] = None
    lam: float = 1.0          # lambda-rescaling factor
    norm_scale: float = 1.0   # extra factor set by quadrature normalization
    formula: Optional[Expression] = None

    def param(self, name):
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)

    @property
    def support_radius(self):
        return _base_support(self) * self.lam

    @property
    def coercivity_r(self):
        base = self.coercivity_radius
        if base is None:
            base = _default_coercivity(self)
        return base * self.lam


@dataclass(frozen=True)
class VectorKernelSpec:
    """Parametric vector kernel; |nu| integrates to one."""

    family: str
    profile: Optional[KernelSpec] = None       # axial / fixed_direction
    direction: Optional[tuple] = None          # fixed_direction
    formulas: Optional[tuple] = None           # expression family: 3 Expressions
    params: tuple = ()
    normalization_mode: str = "analytic"
    lam: float = 1.0
    norm_scale: float = 1.0

    def param(self, name):
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)

    @property
    def support_radius(self):
        if self.profile is not None:
            return self.profile.support_radius * self.lam
        return self.param("support_radius") * self.lam


def _params_tuple(d):
    return tuple(sorted((str(k), float(v)) for k, v in d.items()))


def _base_support(spec):
    if spec.family == "bump_quadratic":
        return spec.param("r")
    if spec.family == "truncated_gaussian":
        return spec.param("R")
    if spec.family == "indicator_shell":
        return spec.param("r2")
    return spec.param("support_radius")


def _default_coercivity(spec):
    # essinf of rho/|xi|^2 over B_r must be positive; shells with a hole
    # have no admissible radius, keep the support and let validation flag it.
    return _base_support(spec)


def _analytic_constant(spec):
    """Closed-form c with integral 1 over the support; 'expression' maps to 1."""
    if spec.family == "bump_quadratic":
        r = spec.param("r")
        return 1.0 / (4.0 * math.pi * r**5 / 5.0)
    if spec.family == "truncated_gaussian":
        sigma = spec.param("sigma")
        R = spec.param("R")
        radial = (sigma**2 / 2.0) * (
            (sigma * math.sqrt(math.pi) / 2.0) * math.erf(R / sigma)
            - R * math.exp(-(R / sigma) ** 2)
        )
        return 1.0 / (4.0 * math.pi * radial)
    if spec.family == "indicator_shell":
        r1, r2 = spec.param("r1"), spec.param("r2")
        return 1.0 / (4.0 * math.pi * (r2**3 - r1**3) / 3.0)
    return 1.0


def scalar_kernel(family, normalization="analytic", coercivity_radius=None, **params):
    """Build a KernelSpec, validating family parameters."""
    if family not in SCALAR_FAMILIES:
        raise ConfigError(f"unknown kernel family {family!r}")
    formula = None
    if family == "expression":
        text = params.pop("formula")
        if "support_radius" not in params:
            raise ConfigError("expression kernels need an explicit support_radius")
        formula = text if isinstance(text, Expression) else parse_expression(text)
        extra = formula.variables - _KERNEL_VARS
        if extra:
            raise ConfigError(f"kernel formula uses non-kernel variables {sorted(extra)}")
    if family == "bump_quadratic" and params.get("r", 1.0) <= 0:
        raise ConfigError("bump_quadratic needs r > 0")
    if family == "truncated_gaussian":
        if params.get("sigma", 0) <= 0 or params.get("R", 0) <= 0:
            raise ConfigError("truncated_gaussian needs sigma > 0 and R > 0")
    if family == "indicator_shell":
        r1, r2 = params.get("r1", 0.0), params.get("r2", 0.0)
        if not (0 <= r1 < r2):
            raise ConfigError("indicator_shell needs 0 <= r1 < r2")
        params["r1"], params["r2"] = r1, r2
    if normalization not in ("analytic", "quadrature"):
        raise ConfigError(f"unknown normalization mode {normalization!r}")
    return KernelSpec(
        family=family,
        params=_params_tuple(params),
        normalization_mode=normalization,
        coercivity_radius=coercivity_radius,
        formula=formula,
    )


def bump_quadratic(r=1.0, **kw):
    return scalar_kernel("bump_quadratic", r=r, **kw)


def truncated_gaussian(sigma, R, **kw):
    return scalar_kernel("truncated_gaussian", sigma=sigma, R=R, **kw)


def indicator_shell(r1, r2, **kw):
    return scalar_kernel("indicator_shell", r1=r1, r2=r2, **kw)


def expression_kernel(formula, support_radius, **kw):
    kw.setdefault("normalization", "quadrature")
    return scalar_kernel("expression", formula=formula, support_radius=support_radius, **kw)


def _eval_rho_base(spec, pts):
    """Evaluate the un-rescaled family at points of shape (..., 3)."""
    rad = np.sqrt(np.sum(pts * pts, axis=-1))
    c = _analytic_constant(spec) * spec.norm_scale
    if spec.family == "bump_quadratic":
        r = spec.param("r")
        return np.where(rad <= r, c * rad**2, 0.0)
    if spec.family == "truncated_gaussian":
        sigma, R = spec.param("sigma"), spec.param("R")
        return np.where(rad <= R, c * np.exp(-((rad / sigma) ** 2)), 0.0)
    if spec.family == "indicator_shell":
        r1, r2 = spec.param("r1"), spec.param("r2")
        return np.where((rad >= r1) & (rad <= r2), c, 0.0)
    vals = spec.formula(xi1=pts[..., 0], xi2=pts[..., 1], xi3=pts[..., 2], r=rad)
    vals = np.asarray(vals, dtype=float)
    if vals.shape != rad.shape:
        vals = np.broadcast_to(vals, rad.shape).copy()
    out = np.where(rad <= spec.param("support_radius"), c * vals, 0.0)
    if np.any(out < 0):
        raise AssumptionError(f"kernel formula {spec.formula.text!r} is negative on its support")
    return out


def eval_rho(spec, xi):
    """rho(xi) for xi of shape (..., 3); zero outside the support."""
    pts = _as_points(xi)
    scalar_input = pts.ndim == 1
    if scalar_input:
        pts = pts[None, :]
    if spec.lam != 1.0:
        vals = spec.lam**-3 * _eval_rho_base(spec, pts / spec.lam)
    else:
        vals = _eval_rho_base(spec, pts)
    return float(vals[0]) if scalar_input else vals


def axial_kernel(profile, **kw):
    return VectorKernelSpec(family="axial", profile=profile, **kw)


def fixed_direction_kernel(direction, profile, **kw):
    e = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(e)
    if norm < 1e-12:
        raise ConfigError("fixed_direction needs a nonzero direction")
    return VectorKernelSpec(
        family="fixed_direction", profile=profile, direction=tuple(e / norm), **kw
    )


def expression_vector_kernel(formulas, support_radius, normalization="quadrature", **kw):
    if len(formulas) != 3:
        raise ConfigError("expression vector kernels need exactly 3 component formulas")
    parsed = []
    for text in formulas:
        expr = text if isinstance(text, Expression) else parse_expression(text)
        extra = expr.variables - _KERNEL_VARS
        if extra:
            raise ConfigError(f"vector kernel formula uses non-kernel variables {sorted(extra)}")
        parsed.append(expr)
    return VectorKernelSpec(
        family="expression",
        formulas=tuple(parsed),
        params=_params_tuple({"support_radius": support_radius}),
        normalization_mode=normalization,
        **kw,
    )


def _eval_nu_base(spec, pts):
    rad = np.sqrt(np.sum(pts * pts, axis=-1))
    if spec.family == "axial":
        g = _eval_rho_base(spec.profile, pts) if spec.profile.lam == 1.0 else eval_rho(spec.profile, pts)
        safe = np.where(rad > 0, rad, 1.0)
        out = pts / safe[..., None] * g[..., None]
        out[rad == 0] = 0.0  # continuity convention at the origin
        return out * spec.norm_scale
    if spec.family == "fixed_direction":
        g = _eval_rho_base(spec.profile, pts) if spec.profile.lam == 1.0 else eval_rho(spec.profile, pts)
        e = np.asarray(spec.direction)
        return g[..., None] * e * spec.norm_scale
    comps = []
    for expr in spec.formulas:
        vals = np.asarray(expr(xi1=pts[..., 0], xi2=pts[..., 1], xi3=pts[..., 2], r=rad), dtype=float)
        if vals.shape != rad.shape:
            vals = np.broadcast_to(vals, rad.shape).copy()
        comps.append(vals)
    out = np.stack(comps, axis=-1) * spec.norm_scale
    support = spec.param("support_radius")
    out[rad > support] = 0.0
    return out


def eval_nu(spec, xi):
    """nu(xi) as an array of shape (..., 3)."""
    pts = _as_points(xi)
    scalar_input = pts.ndim == 1
    if scalar_input:
        pts = pts[None, :]
    if spec.lam != 1.0:
        vals = spec.lam**-3 * _eval_nu_base(spec, pts / spec.lam)
    else:
        vals = _eval_nu_base(spec, pts)
    return vals[0] if scalar_input else vals


def scale_lambda(spec, lam):
    """Rescale to lam^-3 * kernel(./lam); lam=1 returns the spec unchanged."""
    if not (isinstance(lam, (int, float)) and math.isfinite(lam)) or lam <= 0:
        raise InputError(f"lambda must be a positive finite scalar, got {lam!r}")
    lam = float(lam)
    if lam == 1.0:
        return spec
    # the spec-level lam wraps evaluation; nested profiles stay untouched
    return replace(spec, lam=spec.lam * lam)


def radial_l1_mass(spec, r_lo, r_hi=None, panels=20000):
    """L1 mass of the *radialized* kernel profile between radii, by Simpson.

    Uses |kernel| sampled along the x1 axis times the sphere area; exact for
    the built-in radial families.  r_hi defaults to the support radius.
    """
    if r_hi is None:
        r_hi = spec.support_radius
    if r_hi <= r_lo:
        return 0.0
    # Simpson needs an even panel count
    m = panels + (panels % 2)
    t = np.linspace(r_lo, r_hi, m + 1)
    pts = np.zeros((m + 1, 3))
    pts[:, 0] = t
    if isinstance(spec, VectorKernelSpec):
        vals = np.linalg.norm(eval_nu(spec, pts), axis=-1)
    else:
        vals = eval_rho(spec, pts)
    integrand = 4.0 * math.pi * t**2 * vals
    weights = np.ones(m + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    h = (r_hi - r_lo) / m
    return float(h / 3.0 * np.sum(weights * integrand))


def tail_mass(spec, radius):
    """Mass of the kernel's underlying profile beyond ``radius``.

    For truncated gaussians the untruncated gaussian tail is reported, so the
    truncation loss is visible; compact families inside ``radius`` give zero.
    """
    if isinstance(spec, VectorKernelSpec):
        if spec.family in ("axial", "fixed_direction"):
            return tail_mass(spec.profile, radius / spec.lam)
        support = spec.support_radius
        if radius >= support:
            return 0.0
        total = radial_l1_mass(spec, 0.0, support)
        return radial_l1_mass(spec, radius, support) / total
    if spec.family == "truncated_gaussian":
        sigma = spec.param("sigma") * spec.lam
        R = spec.param("R") * spec.lam
        cut = min(radius, R)

        def inside(r):  # mass of exp(-|xi|^2/sigma^2) in B_r over its R^3 mass
            return math.erf(r / sigma) - 2.0 / math.sqrt(math.pi) * (r / sigma) * math.exp(
                -((r / sigma) ** 2)
            )

        return 1.0 - inside(cut)
    support = spec.support_radius
    if radius >= support:
        return 0.0
    return radial_l1_mass(spec, radius, support)


@dataclass
class AssumptionReport:
    """Lattice-evaluated diagnostics for the kernel hypotheses."""

    l1_rho: float
    l1_nu: float
    coercivity_min: float
    ratio_l2: float
    tail_mass: float
    tail_mass_rho: float
    tail_mass_nu: float
    passed: bool = True
    failures: list = field(default_factory=list)


def validate_assumptions(rho_spec, nu_spec, lattice):
    """Evaluate the H2-H4 diagnostics on a xi-lattice.

    Flags when an L1 mass deviates from 1 by more than 1e-3, when the
    coercivity minimum is non-positive, or when the ratio norm is non-finite.
    A node with rho = 0 but |nu| > 0 makes the ratio undefined and raises.
    """
    w = lattice.weight
    rho_vals = lattice.rho
    nu_vals = lattice.nu
    nu_mag = np.linalg.norm(nu_vals, axis=-1)

    bad = (rho_vals == 0.0) & (nu_mag > 0.0)
    if np.any(bad):
        q = int(np.argmax(bad))
        raise AssumptionError(
            f"nu is supported where rho vanishes (node xi={lattice.xi[q]}); "
            "the ratio |nu|/sqrt(rho) is undefined"
        )

    l1_rho = float(w * np.sum(rho_vals))
    l1_nu = float(w * np.sum(nu_mag))

    r_c = rho_spec.coercivity_r
    in_ball = lattice.xi_norm <= r_c
    if np.any(in_ball):
        coercivity_min = float(np.min(rho_vals[in_ball] / lattice.xi_norm[in_ball] ** 2))
    else:
        coercivity_min = 0.0

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_terms = np.where(rho_vals > 0, nu_mag**2 / np.where(rho_vals > 0, rho_vals, 1.0), 0.0)
    ratio_l2 = float(math.sqrt(w * np.sum(ratio_terms)))

    tail_rho = tail_mass(rho_spec, lattice.radius)
    tail_nu = tail_mass(nu_spec, lattice.radius)

    report = AssumptionReport(
        l1_rho=l1_rho,
        l1_nu=l1_nu,
        coercivity_min=coercivity_min,
        ratio_l2=ratio_l2,
        tail_mass=max(tail_rho, tail_nu),
        tail_mass_rho=tail_rho,
        tail_mass_nu=tail_nu,
    )
    if abs(l1_rho - 1.0) > 1e-3:
        report.failures.append(f"lattice L1 of rho is {l1_rho:.6e}, deviates from 1 by > 1e-3")
    if abs(l1_nu - 1.0) > 1e-3:
        report.failures.append(f"lattice L1 of |nu| is {l1_nu:.6e}, deviates from 1 by > 1e-3")
    if coercivity_min <= 0.0:
        report.failures.append("essinf of rho/|xi|^2 over the coercivity ball is not positive")
    if not math.isfinite(ratio_l2):
        report.failures.append("ratio norm |nu|/sqrt(rho) is non-finite on the lattice")
    report.passed = not report.failures
    return report
