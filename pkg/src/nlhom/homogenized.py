"""Homogenized density: moment tensor, DMI vectors, correctors, and queries.

The density evaluates two ways:

* ``fhom_direct``     runs the tangentially constrained cell solve for (s, A)
  and reports its minimized objective.
* ``fhom_decomposed`` uses the cached correctors and the identity

      f(s, A) = (A Tbar):A + sum_i s.(dbar_i x A e_i) - correction(s, A),

  where the correction is the a-weighted quadratic form of the combined
  corrector A v_a + s x v_kappa, stored as a 6x6 Gram matrix over the six
  scalar corrector components.  Repeated (s, A) queries then cost O(1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import parallel
from .cell_solver import CellProblem, NonlocalOperator, cg_solve, validate_tangent_pair
from .errors import InputError
from .kernels import scale_lambda, tail_mass
from .microstructure import coefficient_node_averages
from .periodic_cell import PeriodicField, build_lattice


def compute_Tbar(a_spec, lattice):
    """Tbar = sum_q h^3 rho_q (xi xi^T / |xi|^2) mean_z a(z, z + xi_q)."""
    abar = coefficient_node_averages(a_spec, lattice)
    xin = lattice.xi / lattice.xi_norm[:, None]
    scaled = lattice.weight * lattice.rho * abar
    return np.einsum("q,qi,qj->ij", scaled, xin, xin, optimize=True)


def compute_dbar(kappa_spec, lattice):
    """Rows dbar_i = sum_q h^3 (xi_q)_i / |xi_q| nu_q mean_z kappa(z, z + xi_q)."""
    kbar = coefficient_node_averages(kappa_spec, lattice)
    scaled = lattice.weight * kbar / lattice.xi_norm
    return np.einsum("q,qi,qj->ij", scaled, lattice.xi, lattice.nu, optimize=True)


@dataclass
class HomogenizedDensity:
    Tbar: np.ndarray
    dbar: np.ndarray                  # rows dbar_i
    v_a: PeriodicField
    v_kappa: PeriodicField
    gram: np.ndarray                  # 6x6 correction quadratic form
    lattice: object
    a: object
    kappa: object
    operator: Optional[NonlocalOperator] = None
    solver_stats: dict = field(default_factory=dict)

    def closed_form(self, s, A):
        """(A Tbar):A + sum_i s.(dbar_i x A e_i), no corrector contribution."""
        quad = float(np.sum((A @ self.Tbar) * A))
        dmi = float(np.sum(s * np.cross(self.dbar, A.T).sum(axis=0)))
        return quad + dmi

    def correction(self, s, A):
        """a-weighted rho-norm of A v_a + s x v_kappa via the Gram cache."""
        U = combination_vectors(s, A)
        return float(np.sum(self.gram * (U.T @ U)))

    def combined_corrector(self, s, A):
        data = self.v_a.data @ A.T + np.cross(s, self.v_kappa.data)
        data = data - data.mean(axis=0, keepdims=True)
        return PeriodicField(self.v_a.n, 3, data)


def combination_vectors(s, A):
    """Columns (A e_1, A e_2, A e_3, s x e_1, s x e_2, s x e_3) as a 3x6 matrix."""
    eye = np.eye(3)
    cols = [A[:, k] for k in range(3)] + [np.cross(s, eye[k]) for k in range(3)]
    return np.stack(cols, axis=1)


def _correction_gram(operator, v_a, v_kappa):
    """G_kl = sum_q h^3 rho_q/|xi|^2 mean_z a_q D_q f_k D_q f_l over the six
    scalar corrector components."""
    fields = np.concatenate([v_a.data, v_kappa.data], axis=1)  # (n^3, 6)
    lattice = operator.lattice
    n3 = operator.n3
    # wq already carries the factor 2; the correction integrand has none
    wgt = 0.5 * operator.wq / n3

    def partial(sl):
        perm, _ = operator._perms(sl)
        rows = operator.a_rows(sl)
        diff = fields[perm] - fields[None, :, :]          # (K, n^3, 6)
        weighted = rows[:, :, None] * diff
        acc = np.zeros((6, 6))
        for i, q in enumerate(range(sl.start, sl.stop)):
            acc += wgt[q] * (diff[i].T @ weighted[i])
        return acc

    gram = parallel.kahan_combine(parallel.map_chunks(partial, operator.slices))
    return 0.5 * (gram + gram.T)


def correction_integral(density, v):
    """Fresh a-weighted integral of the correction term for a given field."""
    operator = density.operator
    wgt = 0.5 * operator.wq / operator.n3

    def partial(sl):
        perm, _ = operator._perms(sl)
        rows = operator.a_rows(sl)
        diff = v.data[perm] - v.data[None, :, :]
        return float(np.sum(wgt[sl] * np.einsum("qzc,qz->q", diff * diff, rows, optimize=True)))

    return float(parallel.kahan_combine(parallel.map_chunks(partial, operator.slices)))


def build(a_spec, kappa_spec, lattice, cg_tol=1e-10, max_iter_factor=10,
          preconditioner="none", cache_coefficients=True):
    """Solve both corrector problems and cache everything f_hom needs."""
    prob_a = CellProblem(a=a_spec, kappa=kappa_spec, lattice=lattice, mode="corrector_a",
                         cg_tol=cg_tol, max_iter_factor=max_iter_factor,
                         preconditioner=preconditioner, cache_coefficients=cache_coefficients)
    operator = NonlocalOperator(prob_a)
    sol_a = cg_solve(prob_a, operator=operator)
    prob_k = CellProblem(a=a_spec, kappa=kappa_spec, lattice=lattice, mode="corrector_kappa",
                         cg_tol=cg_tol, max_iter_factor=max_iter_factor,
                         preconditioner=preconditioner, cache_coefficients=cache_coefficients)
    sol_k = cg_solve(prob_k, operator=operator)

    gram = _correction_gram(operator, sol_a.v, sol_k.v)
    return HomogenizedDensity(
        Tbar=compute_Tbar(a_spec, lattice),
        dbar=compute_dbar(kappa_spec, lattice),
        v_a=sol_a.v,
        v_kappa=sol_k.v,
        gram=gram,
        lattice=lattice,
        a=a_spec,
        kappa=kappa_spec,
        operator=operator,
        solver_stats={"corrector_a": sol_a.stats(), "corrector_kappa": sol_k.stats()},
    )


def fhom_decomposed(density, s, A, tol=1e-8):
    """Closed-form f_hom(s, A) from the cached correctors; no new solve."""
    s, A = validate_tangent_pair(s, A, tol=tol)
    return density.closed_form(s, A) - density.correction(s, A)


def fhom_direct(density, s, A, cg_tol=None):
    """f_hom(s, A) as the minimized objective of a fresh constrained solve."""
    base = density.operator.problem
    problem = CellProblem(
        a=density.a, kappa=density.kappa, lattice=density.lattice, mode="direct",
        s=np.asarray(s, dtype=float), A=np.asarray(A, dtype=float),
        cg_tol=base.cg_tol if cg_tol is None else cg_tol,
        max_iter_factor=base.max_iter_factor,
        preconditioner=base.preconditioner,
        cache_coefficients=base.cache_coefficients,
    )
    solution = cg_solve(problem, operator=density.operator)
    return solution.energy


def build_lambda(a_spec, kappa_spec, rho_spec, nu_spec, n, lam, radius=None,
                 tail_tol=1e-6, **solver_kw):
    """Density built with lambda-rescaled kernels rho_lam, nu_lam.

    The lattice radius scales with lambda so the rescaled support stays
    covered; a residual tail above tail_tol triggers a truncation warning.
    """
    if lam <= 0:
        raise InputError(f"lambda must be positive, got {lam}")
    rho_l = scale_lambda(rho_spec, lam)
    nu_l = scale_lambda(nu_spec, lam)
    if radius is not None:
        radius = radius * lam
    lattice = build_lattice(rho_l, nu_l, n, radius=radius)
    tail = max(tail_mass(rho_l, lattice.radius), tail_mass(nu_l, lattice.radius))
    if tail > tail_tol:
        warnings.warn(
            f"lambda-scaled kernels keep {tail:.3e} of their mass beyond the "
            f"lattice radius {lattice.radius}",
            stacklevel=2,
        )
    return build(a_spec, kappa_spec, lattice, **solver_kw)


def fhom_lambda(a_spec, kappa_spec, rho_spec, nu_spec, n, lam, s, A,
                method="decomposed", **kw):
    """f_hom with lambda-rescaled kernels; lam = 1 reproduces f_hom bit-for-bit."""
    density = build_lambda(a_spec, kappa_spec, rho_spec, nu_spec, n, lam, **kw)
    if method == "direct":
        return fhom_direct(density, s, A)
    return fhom_decomposed(density, s, A)
