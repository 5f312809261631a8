"""Nonlocal energies of sphere-valued magnetizations on the unit box.

The box (0,1)^3 is sampled at cell centers x = (i + 1/2)/M.  Admissible
localization parameters are eps = 1/P with M = P n, so that every shift
x -> x + eps xi_q moves by the integer offset j_q on the box grid; pairs
leaving the box are dropped (no periodic wrap), and the dropped quadrature
mass is reported.

Coefficients are evaluated at the true fast variable x/eps (mod 1).  Cell
fields tabulated on the grid z = i/n are read through the index map
i -> i mod n; the uniform half-cell offset of the fast variable relative to
the node grid is part of the discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import parallel
from .dsl import Expression, parse_expression
from .errors import ConfigError, DomainError, InputError
from .homogenized import combination_vectors
from .microstructure import eval_coeff

_X_VARS = {"x1", "x2", "x3"}


@dataclass
class Magnetization:
    """Unit-length 3-vector field on the box grid; analytic families carry
    the closed form and its gradient."""

    M: int
    data: np.ndarray                                 # (M^3, 3) unit rows
    gradient_fn: Optional[Callable] = None           # x (N,3) -> (N,3,3)
    family: str = "generic"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=float)
        if self.data.shape != (self.M**3, 3):
            raise InputError(f"magnetization data must be ({self.M**3}, 3)")
        lengths = np.linalg.norm(self.data, axis=1)
        if np.max(np.abs(lengths - 1.0)) > 1e-10:
            raise InputError("magnetization rows must be unit length within 1e-10")

    def gradient(self):
        """(M^3, 3, 3) array of d m_j / d x_k; analytic when available, else
        central differences with one-sided boundary stencils."""
        if self.gradient_fn is not None:
            return self.gradient_fn(box_coordinates(self.M))
        return _finite_difference_gradient(self)


def box_coordinates(M):
    idx = np.arange(M)
    i3, i2, i1 = np.meshgrid(idx, idx, idx, indexing="ij")
    coords = np.stack([i1.ravel(), i2.ravel(), i3.ravel()], axis=-1)
    return (coords + 0.5) / float(M)


def box_view(values, M):
    """Reshape (M^3, k) flat data to the (i3, i2, i1, k) box view."""
    return values.reshape(M, M, M, -1)


def _finite_difference_gradient(m):
    M = m.M
    h = 1.0 / M
    view = box_view(m.data, M)  # axes (i3, i2, i1, comp)
    grad = np.empty((M, M, M, 3, 3))
    for k, axis in ((0, 2), (1, 1), (2, 0)):  # x-k varies along array axis
        d = np.empty_like(view)
        d_interior = (np.roll(view, -1, axis=axis) - np.roll(view, 1, axis=axis)) / (2 * h)
        d[:] = d_interior
        # one-sided second-order stencils at the box faces
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis] = 0
        hi[axis] = M - 1
        first = [slice(None)] * 4
        second = [slice(None)] * 4
        first[axis] = 1
        second[axis] = 2
        d[tuple(lo)] = (
            -3.0 * view[tuple(lo)] + 4.0 * view[tuple(first)] - view[tuple(second)]
        ) / (2 * h)
        first[axis] = M - 2
        second[axis] = M - 3
        d[tuple(hi)] = (
            3.0 * view[tuple(hi)] - 4.0 * view[tuple(first)] + view[tuple(second)]
        ) / (2 * h)
        grad[..., k] = d
    return grad.reshape(M**3, 3, 3)


def constant_magnetization(M, direction):
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    data = np.tile(u, (M**3, 1))

    def grad(x):
        return np.zeros((len(x), 3, 3))

    return Magnetization(M=M, data=data, gradient_fn=grad, family="constant")


def helix_magnetization(M, axis=3, turns=1.0, phase=0.0):
    """m = (cos(2 pi t x_ax + phase), sin(...), 0) in the plane cyclic to the axis."""
    if axis not in (1, 2, 3):
        raise ConfigError("helix axis must be 1, 2, or 3")
    p1, p2 = {3: (0, 1), 1: (1, 2), 2: (2, 0)}[axis]
    ax = axis - 1
    omega = 2.0 * math.pi * turns

    def values(x):
        theta = omega * x[:, ax] + phase
        out = np.zeros((len(x), 3))
        out[:, p1] = np.cos(theta)
        out[:, p2] = np.sin(theta)
        return out

    def grad(x):
        theta = omega * x[:, ax] + phase
        out = np.zeros((len(x), 3, 3))
        out[:, p1, ax] = -omega * np.sin(theta)
        out[:, p2, ax] = omega * np.cos(theta)
        return out

    return Magnetization(M=M, data=values(box_coordinates(M)), gradient_fn=grad, family="helix")


def bloch_wall_magnetization(M, axis=1, center=0.5, width=0.1):
    """m = (0, sech(u), tanh(u)) with u = (x_ax - center)/width (axes permuted)."""
    if axis not in (1, 2, 3):
        raise ConfigError("bloch wall axis must be 1, 2, or 3")
    p1, p2 = {1: (1, 2), 2: (2, 0), 3: (0, 1)}[axis]
    ax = axis - 1

    def values(x):
        u = (x[:, ax] - center) / width
        out = np.zeros((len(x), 3))
        out[:, p1] = 1.0 / np.cosh(u)
        out[:, p2] = np.tanh(u)
        return out

    def grad(x):
        u = (x[:, ax] - center) / width
        sech = 1.0 / np.cosh(u)
        out = np.zeros((len(x), 3, 3))
        out[:, p1, ax] = -sech * np.tanh(u) / width
        out[:, p2, ax] = sech**2 / width
        return out

    return Magnetization(M=M, data=values(box_coordinates(M)), gradient_fn=grad, family="bloch_wall")


def expression_magnetization(M, formulas):
    """Three DSL formulas in x1..x3, renormalized nodewise; gradient is FD."""
    if len(formulas) != 3:
        raise ConfigError("expression magnetization needs 3 component formulas")
    parsed = []
    for text in formulas:
        expr = text if isinstance(text, Expression) else parse_expression(text)
        if expr.variables - _X_VARS:
            raise ConfigError("magnetization formulas may only use x1..x3")
        parsed.append(expr)
    x = box_coordinates(M)
    comps = [np.broadcast_to(np.asarray(e(x1=x[:, 0], x2=x[:, 1], x3=x[:, 2])), (M**3,))
             for e in parsed]
    data = np.stack(comps, axis=1)
    norms = np.linalg.norm(data, axis=1)
    if np.any(norms < 1e-12):
        raise ConfigError("magnetization formulas vanish at a node; cannot normalize")
    return Magnetization(M=M, data=data / norms[:, None], family="expression")


def _check_commensurate(m, lattice, eps):
    P = 1.0 / eps
    if abs(P - round(P)) > 1e-9:
        raise ConfigError(f"eps = {eps} is not the reciprocal of an integer")
    P = int(round(P))
    if m.M != P * lattice.n:
        raise ConfigError(
            f"commensurability requires M = P n (got M = {m.M}, P = {P}, "
            f"n = {lattice.n}); shifts eps xi_q must land on the box grid"
        )
    return P


@dataclass
class EnergyBreakdown:
    F_eps: float
    H_eps: float
    pair_count: int
    dropped_fraction: float

    @property
    def total(self):
        return self.F_eps + self.H_eps


def _box_slices(M, j):
    """Slices (base, shifted) over array axes (i3, i2, i1) for offset j."""
    base = []
    shifted = []
    for axis_j in (j[2], j[1], j[0]):  # array axis 0 is i3
        lo = max(0, -int(axis_j))
        hi = max(lo, min(M, M - int(axis_j)))
        base.append(slice(lo, hi))
        shifted.append(slice(lo + int(axis_j), hi + int(axis_j)))
    return tuple(base), tuple(shifted)


def _fast_axis_values(M, P, n):
    """x/eps mod 1 per box index along one axis: ((i + 1/2) P / M) mod 1."""
    i = np.arange(M)
    return np.mod((i + 0.5) * P / M, 1.0)


def _pair_energies(m, a_spec, kappa_spec, lattice, eps, want_F=True, want_H=True):
    M = m.M
    P = _check_commensurate(m, lattice, eps)
    n = lattice.n
    view = box_view(m.data, M)
    fast = _fast_axis_values(M, P, n)
    invM3 = 1.0 / M**3
    h3 = lattice.weight
    rho_mass_total = float(np.sum(lattice.rho)) * M**3

    def partial(sl):
        F = 0.0
        H = 0.0
        pairs = 0
        kept_mass = 0.0
        for q in range(sl.start, sl.stop):
            j = lattice.offsets[q]
            base, shifted = _box_slices(M, j)
            counts = [b.stop - b.start for b in base]
            box_count = counts[0] * counts[1] * counts[2]
            if box_count == 0:
                continue
            pairs += box_count
            kept_mass += lattice.rho[q] * box_count
            diff = view[shifted] - view[base]
            # fast variable z = x/eps mod 1, broadcast per axis; z' = z + xi_q
            z1 = fast[base[2]].reshape(1, 1, -1)
            z2 = fast[base[1]].reshape(1, -1, 1)
            z3 = fast[base[0]].reshape(-1, 1, 1)
            z = np.stack(np.broadcast_arrays(z1, z2, z3), axis=-1)
            xi = lattice.xi[q]
            if want_F and lattice.rho[q] != 0.0:
                avals = np.asarray(eval_coeff(a_spec, z, z + xi))
                w = lattice.rho[q] / (eps * lattice.xi_norm[q]) ** 2
                F += w * float(np.sum(avals * np.sum(diff * diff, axis=-1)))
            if want_H and np.any(lattice.nu[q] != 0.0):
                kvals = np.asarray(eval_coeff(kappa_spec, z, z + xi))
                cross = np.cross(view[shifted], view[base])
                proj = cross @ lattice.nu[q]
                H += float(np.sum(kvals * proj)) / (eps * lattice.xi_norm[q])
        return np.array([F, H, float(pairs), kept_mass])

    F, H, pairs, kept = parallel.kahan_combine(
        parallel.map_chunks(partial, parallel.node_chunks(lattice.node_count))
    )
    dropped = 1.0 - kept / rho_mass_total if rho_mass_total > 0 else 0.0
    return EnergyBreakdown(
        F_eps=float(h3 * invM3 * F),
        H_eps=float(h3 * invM3 * H),
        pair_count=int(pairs),
        dropped_fraction=float(dropped),
    )


def energy_F_eps(m, a_spec, lattice, eps):
    """Symmetric exchange energy at localization eps (boundary pairs dropped)."""
    return _pair_energies(m, a_spec, None, lattice, eps, want_H=False).F_eps


def energy_H_eps(m, kappa_spec, lattice, eps):
    """Antisymmetric (DMI) energy at localization eps."""
    return _pair_energies(m, None, kappa_spec, lattice, eps, want_F=False).H_eps


def energy_eps(m, a_spec, kappa_spec, lattice, eps):
    """Both energies in one sweep over the pair lattice."""
    return _pair_energies(m, a_spec, kappa_spec, lattice, eps)


def delta_rho_eps(m, lattice, eps):
    """Difference-quotient family over (x, xi_q); zero where pairs leave the box.

    Returns an array of shape (Nq, M^3, 3) -- desk-scale sizes only.
    """
    M = m.M
    _check_commensurate(m, lattice, eps)
    view = box_view(m.data, M)
    out = np.zeros((lattice.node_count, M**3, 3))
    for q in range(lattice.node_count):
        j = lattice.offsets[q]
        base, shifted = _box_slices(M, j)
        if any(b.stop - b.start == 0 for b in base):
            continue
        scale = math.sqrt(lattice.rho[q]) / (eps * lattice.xi_norm[q])
        block = np.zeros((M, M, M, 3))
        block[base] = scale * (view[shifted] - view[base])
        out[q] = block.reshape(M**3, 3)
    return out


@dataclass
class TwoScaleField:
    """w(x, z) tabulated over box-grid x and cell-grid z.

    Rows repeat whenever (m0(x), grad m0(x)) repeats, so the table stores the
    distinct slices once and an index per box node.
    """

    M: int
    n: int
    slice_of_x: np.ndarray     # (M^3,) index into the distinct tables
    svals: np.ndarray          # (D, 3)
    Gvals: np.ndarray          # (D, 3, 3) tangent-projected gradients
    w: np.ndarray              # (D, n^3, 3)
    tangency_defect: float = 0.0
    projection_defect: float = 0.0

    @property
    def distinct_count(self):
        return len(self.svals)

    def values_at_box(self):
        """phi(x, x/eps) realized through the index map i -> i mod n; (M^3, 3)."""
        idx = np.arange(self.M)
        i3, i2, i1 = np.meshgrid(idx, idx, idx, indexing="ij")
        n = self.n
        cell_row = (
            np.mod(i1.ravel(), n)
            + n * (np.mod(i2.ravel(), n) + n * np.mod(i3.ravel(), n))
        )
        return self.w[self.slice_of_x, cell_row]


def project_gradient_tangent(s_rows, grad_rows):
    """Project each gradient column onto T_s S^2; returns (projected, defect)."""
    dots = np.einsum("xi,xik->xk", s_rows, grad_rows)
    defect = float(np.max(np.abs(dots))) if len(dots) else 0.0
    projected = grad_rows - s_rows[:, :, None] * dots[:, None, :]
    return projected, defect


def _distinct_slices(m):
    s_rows = m.data
    grad_rows = m.gradient()
    key = np.concatenate([s_rows, grad_rows.reshape(len(s_rows), 9)], axis=1)
    packed = np.ascontiguousarray(key).view([("b", "V96")]).ravel()
    _, first, inverse = np.unique(packed, return_index=True, return_inverse=True)
    return s_rows[first], grad_rows[first], inverse.astype(np.int64)


def corrector_field(m, density):
    """w(x, z) = grad m(x) v_a(z) + m(x) x v_kappa(z), tangent-projected gradients."""
    if density.v_a.n != density.lattice.n:
        raise InputError("density correctors do not match its lattice")
    svals, Gvals, inverse = _distinct_slices(m)
    Gvals, proj_defect = project_gradient_tangent(svals, Gvals)
    n = density.lattice.n
    D = len(svals)
    w = np.empty((D, n**3, 3))
    for d in range(D):
        rows = density.v_a.data @ Gvals[d].T + np.cross(svals[d], density.v_kappa.data)
        w[d] = rows
    tangency = float(np.max(np.abs(np.einsum("dzc,dc->dz", w, svals)))) if D else 0.0
    return TwoScaleField(
        M=m.M, n=n, slice_of_x=inverse, svals=svals, Gvals=Gvals, w=w,
        tangency_defect=tangency, projection_defect=proj_defect,
    )


def zero_corrector_field(m, n):
    """Same slice structure with w = 0 (useful as a comparison candidate)."""
    svals, Gvals, inverse = _distinct_slices(m)
    Gvals, proj_defect = project_gradient_tangent(svals, Gvals)
    return TwoScaleField(
        M=m.M, n=n, slice_of_x=inverse, svals=svals, Gvals=Gvals,
        w=np.zeros((len(svals), n**3, 3)), projection_defect=proj_defect,
    )


def recovery_sequence(m, phi, eps):
    """m_eps(x) = (m(x) + eps phi(x, x/eps)) normalized to the sphere."""
    if phi.M != m.M:
        raise InputError("corrector field box grid does not match the magnetization")
    shifted = m.data + eps * phi.values_at_box()
    norms = np.linalg.norm(shifted, axis=1)
    if np.min(norms) < 0.5:
        bad = int(np.argmin(norms))
        raise DomainError(
            f"|m0 + eps phi| = {norms[bad]:.3f} < 1/2 at box node {bad}; reduce eps"
        )
    return Magnetization(M=m.M, data=shifted / norms[:, None], family="recovery")


def energy_homogenized(m, density, strict=False):
    """Box midpoint integral of f_hom(m(x), P_tan grad m(x)).

    Gradient columns are projected onto the tangent plane first; the largest
    removed component is the reported projection defect.
    """
    s_rows = m.data
    grad_rows = m.gradient()
    A_rows, defect = project_gradient_tangent(s_rows, grad_rows)
    if defect > 1e-3:
        message = (
            f"gradient tangency defect {defect:.3e} exceeds 1e-3; "
            "the homogenized integrand projected away a visible component"
        )
        if strict:
            raise DomainError(message)
        import warnings

        warnings.warn(message, stacklevel=2)

    quad = np.einsum("xik,kl,xil->x", A_rows, density.Tbar, A_rows, optimize=True)
    cross = np.cross(np.broadcast_to(density.dbar, (len(s_rows), 3, 3)),
                     np.transpose(A_rows, (0, 2, 1)))
    dmi = np.einsum("xi,xi->x", s_rows, cross.sum(axis=1))

    U = np.empty((len(s_rows), 3, 6))
    U[:, :, :3] = A_rows
    eye = np.eye(3)
    for k in range(3):
        U[:, :, 3 + k] = np.cross(s_rows, eye[k])
    corr = np.einsum("xik,kl,xil->x", U, density.gram, U, optimize=True)

    values = quad + dmi - corr
    return float(np.mean(values))


def energy_two_scale(m, w, density):
    """The pair (F(m, w), H(m, w)) by midpoint rule over (x, xi_q, z).

    Triple sums run once per distinct (m, grad m) slice of the tabulated w,
    weighted by how often the slice occurs.
    """
    lattice = density.lattice
    counts = np.bincount(w.slice_of_x, minlength=w.distinct_count).astype(float)
    weights = counts / len(w.slice_of_x)
    operator = density.operator
    n3 = operator.n3
    h3 = lattice.weight

    F_total = 0.0
    H_total = 0.0
    for d in range(w.distinct_count):
        G = w.Gvals[d]
        s = w.svals[d]
        wd = w.w[d]
        aff = lattice.xi @ G.T                     # rows G xi_q
        cross = np.cross(s, lattice.nu)            # rows s x nu_q

        def partial(sl, aff=aff, cross=cross, wd=wd):
            perm, _ = operator._perms(sl)
            arows = operator.a_rows(sl)
            krows = operator.kappa_rows(sl)
            diff = wd[perm] - wd[None, :, :]       # (K, n^3, 3)
            total = diff + aff[sl][:, None, :]
            F = np.sum(
                lattice.rho[sl] / lattice.xi_norm[sl] ** 2
                * np.einsum("qzc,qz->q", total * total, arows, optimize=True)
            )
            Hterm = np.einsum("qzc,qz,qc->q", total, krows, cross[sl], optimize=True)
            H = np.sum(Hterm / lattice.xi_norm[sl])
            return np.array([F, H])

        F_d, H_d = parallel.kahan_combine(
            parallel.map_chunks(partial, parallel.node_chunks(lattice.node_count))
        )
        F_total += weights[d] * F_d
        H_total += weights[d] * H_d

    scale = h3 / n3
    return {"F": float(scale * F_total), "H": float(scale * H_total)}
