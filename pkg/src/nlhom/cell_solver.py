"""Discrete periodic cell problems and their conjugate-gradient solver.

The weak Euler-Lagrange system for every mode shares one SPD operator,

    (H v)(z) = 2 sum_q h^3 rho_q / |xi_q|^2 * D_q^T( a(., . + xi_q) D_q v )(z),

with D_q v = shift(v, j_q) - v and D_q^T u = shift(u, -j_q) - u (coefficient
rows shifted consistently).  H acts componentwise, so the vector corrector
problems reduce to independent scalar solves and the tangentially constrained
problem becomes two scalar solves in frame coordinates.

Modes:
* ``corrector_a``      affine term xi, vector unknown (three scalar solves)
* ``corrector_kappa``  DMI linear term, vector unknown
* ``direct``           given (s, A) in TS^2, unknown constrained to T_s S^2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import microstructure, parallel
from .errors import AssemblyError, ConvergenceError, DomainError, InputError
from .periodic_cell import PeriodicField, TangentFrame, shift_permutation, tangent_frame

# permutation tables above this entry count are rebuilt per apply instead of cached
_PERM_CACHE_LIMIT = 40_000_000


def validate_tangent_pair(s, A, tol=1e-8):
    """Check (s, A) lies in the matrix tangent bundle; returns normalized s."""
    s = np.asarray(s, dtype=float)
    A = np.asarray(A, dtype=float)
    norm = np.linalg.norm(s)
    if abs(norm - 1.0) > tol:
        raise DomainError(f"|s| = {norm} deviates from 1 beyond {tol}")
    s = s / norm
    if A.shape != (3, 3):
        raise DomainError(f"A must be 3x3, got {A.shape}")
    defect = float(np.max(np.abs(s @ A)))
    if defect > tol:
        raise DomainError(f"columns of A deviate from T_s S^2 by {defect:.3e} > {tol}")
    return s, A


@dataclass
class CellProblem:
    a: microstructure.CoefficientSpec
    kappa: microstructure.CoefficientSpec
    lattice: object
    mode: str
    s: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    cg_tol: float = 1e-10
    max_iter_factor: int = 10
    preconditioner: str = "none"          # "none" or "jacobi"
    cache_coefficients: bool = False

    def __post_init__(self):
        if self.mode not in ("corrector_a", "corrector_kappa", "direct"):
            raise InputError(f"unknown cell problem mode {self.mode!r}")
        if self.mode == "direct":
            if self.s is None or self.A is None:
                raise InputError("direct mode needs both s and A")
            self.s, self.A = validate_tangent_pair(self.s, self.A)
        if self.preconditioner not in ("none", "jacobi"):
            raise InputError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class CellSolution:
    v: PeriodicField
    energy: float
    residual: float
    iterations: int
    el_residual: float
    mode: str
    frame: Optional[TangentFrame] = None
    residual_history: list = field(default_factory=list)

    def stats(self):
        return {
            "energy": self.energy,
            "residual": self.residual,
            "iterations": self.iterations,
            "el_residual": self.el_residual,
        }


class NonlocalOperator:
    """Prepared data for applying H and assembling right-hand sides."""

    def __init__(self, problem):
        self.problem = problem
        self.lattice = problem.lattice
        self.n = self.lattice.n
        self.n3 = self.n**3
        nq = self.lattice.node_count
        # 2 h^3 rho_q / |xi_q|^2, the quadratic-form weight per node
        self.wq = 2.0 * self.lattice.weight * self.lattice.rho / self.lattice.xi_norm**2
        self.slices = parallel.node_chunks(nq)
        self._cache_perms = nq * self.n3 <= _PERM_CACHE_LIMIT
        self._perm = None
        self._inv = None
        self._a_rows = None
        self._weighted_rows = None
        self._z = self.lattice.cell_coordinates()
        self._a_is_constant = problem.a.kind == "constant"
        if problem.cache_coefficients and not self._a_is_constant:
            self._a_rows = self._eval_rows(problem.a, slice(0, nq))
            self._weighted_rows = self._a_rows * self.wq[:, None]

    def with_problem(self, problem):
        """Share the prepared caches with another problem on the same inputs."""
        if problem.lattice is not self.lattice or problem.a is not self.problem.a:
            raise InputError("operator reuse requires the identical lattice and coefficient")
        clone = object.__new__(NonlocalOperator)
        clone.__dict__ = {**self.__dict__, "problem": problem}
        return clone

    # -- permutations ----------------------------------------------------------
    def _perm_table(self, offsets):
        from .periodic_cell import grid_indices

        ind = grid_indices(self.n)  # (n^3, 3)
        n = self.n
        return (
            np.mod(ind[None, :, 0] + offsets[:, 0, None], n)
            + n * np.mod(ind[None, :, 1] + offsets[:, 1, None], n)
            + n * n * np.mod(ind[None, :, 2] + offsets[:, 2, None], n)
        ).astype(np.int32)

    def _perms(self, sl):
        if self._cache_perms:
            if self._perm is None:
                offs = self.lattice.offsets
                self._perm = self._perm_table(offs)
                self._inv = self._perm_table(-offs)
            return self._perm[sl], self._inv[sl]
        offs = self.lattice.offsets[sl]
        return self._perm_table(offs), self._perm_table(-offs)

    # -- coefficient rows ----------------------------------------------------
    def _eval_rows(self, spec, sl):
        count = sl.stop - sl.start
        rows = np.empty((count, self.n3))
        for i, q in enumerate(range(sl.start, sl.stop)):
            rows[i] = microstructure.eval_coeff(spec, self._z, self._z + self.lattice.xi[q])
        return rows

    def a_rows(self, sl):
        """a(z, z + xi_q) for nodes in the slice, shape (len, n^3)."""
        if self._a_is_constant:
            return np.full((sl.stop - sl.start, self.n3), self.problem.a.value)
        if self._a_rows is not None:
            return self._a_rows[sl]
        return self._eval_rows(self.problem.a, sl)

    def kappa_rows(self, sl):
        if self.problem.kappa.kind == "constant":
            return np.full((sl.stop - sl.start, self.n3), self.problem.kappa.value)
        return self._eval_rows(self.problem.kappa, sl)

    # -- operator action -----------------------------------------------------
    def apply(self, V):
        """H V for V of shape (n^3, k); acts on each column independently."""
        V = np.asarray(V, dtype=float)
        squeeze = V.ndim == 1
        if squeeze:
            V = V[:, None]

        def partial(sl):
            perm, inv = self._perms(sl)
            if self._weighted_rows is not None:
                rows = self._weighted_rows[sl][:, :, None]
            elif self._a_is_constant:
                rows = (self.wq[sl] * self.problem.a.value)[:, None, None]
            else:
                rows = (self.a_rows(sl) * self.wq[sl][:, None])[:, :, None]
            diff = V[perm] - V[None, :, :]
            cd = rows * diff
            back = np.take_along_axis(cd, inv[:, :, None], axis=1)
            return np.sum(back - cd, axis=0)

        out = parallel.kahan_combine(parallel.map_chunks(partial, self.slices))
        out -= out.mean(axis=0, keepdims=True)
        return out[:, 0] if squeeze else out

    def diagonal(self):
        """Jacobi diagonal: sum_q wq (a_q(z) + a_q(z - xi_q)), per grid site."""

        def partial(sl):
            perm, inv = self._perms(sl)
            del perm
            rows = self.a_rows(sl) * self.wq[sl][:, None]
            shifted = np.take_along_axis(rows, inv, axis=1)
            return np.sum(rows + shifted, axis=0)

        return parallel.kahan_combine(parallel.map_chunks(partial, self.slices))

    # -- right-hand sides ------------------------------------------------------
    def rhs(self):
        """Mean-zero b with the minimizer solving H v = -b, one column per unknown."""
        problem = self.problem
        mode = problem.mode
        lattice = self.lattice

        if mode == "direct":
            aff = (self.lattice.xi @ problem.A.T)  # rows A xi_q
            cross = np.cross(problem.s, lattice.nu)  # rows s x nu_q
        elif mode == "corrector_a":
            aff = lattice.xi
        else:
            aff = None

        kdmi = lattice.weight / lattice.xi_norm  # h^3 / |xi_q|

        def partial(sl):
            acc = np.zeros((self.n3, 3))
            perm, inv = self._perms(sl)
            del perm
            if mode in ("corrector_a", "direct"):
                rows = self.a_rows(sl)
                d = np.take_along_axis(rows, inv, axis=1) - rows  # a(z-xi, z) - a(z, z+xi)
                d *= self.wq[sl][:, None]
                acc += np.einsum("qz,qi->zi", d, aff[sl], optimize=True)
            if mode in ("corrector_kappa", "direct"):
                if mode == "direct":
                    vec = cross[sl] * kdmi[sl][:, None]
                else:
                    vec = lattice.nu[sl] * kdmi[sl][:, None]
                rows = self.kappa_rows(sl)
                d = np.take_along_axis(rows, inv, axis=1) - rows
                acc += np.einsum("qz,qi->zi", d, vec, optimize=True)
            return acc

        b = parallel.kahan_combine(parallel.map_chunks(partial, self.slices))
        b -= b.mean(axis=0, keepdims=True)
        if mode == "direct":
            frame = tangent_frame(problem.s)
            return np.stack([b @ frame.t1, b @ frame.t2], axis=1), frame
        return b, None

    # -- constant part of the objective ----------------------------------------
    def energy_offset(self):
        """Objective value at v = 0, from per-node coefficient averages."""
        problem = self.problem
        lattice = self.lattice
        mode = problem.mode
        h3 = lattice.weight
        abar = microstructure.coefficient_node_averages(problem.a, lattice, self._z)
        if mode == "corrector_a":
            return float(np.sum(h3 * lattice.rho * abar))
        if mode == "corrector_kappa":
            return 0.0
        kbar = microstructure.coefficient_node_averages(problem.kappa, lattice, self._z)
        aff = lattice.xi @ problem.A.T
        cross = np.cross(problem.s, lattice.nu)
        sym = np.sum(h3 * lattice.rho * abar * np.sum(aff * aff, axis=1) / lattice.xi_norm**2)
        dmi = np.sum(h3 * kbar * np.sum(aff * cross, axis=1) / lattice.xi_norm)
        return float(sym + dmi)


def _dot(u, v, n3):
    """Grid-weighted inner product n^-3 sum_z u.v (deterministic numpy sum)."""
    return float(np.sum(u * v) / n3)


def _cg_scalar(op, rhs, tol, max_iter, diag=None):
    """CG for H x = rhs on mean-zero scalar fields; returns (x, info)."""
    n3 = rhs.shape[0]
    x = np.zeros_like(rhs)
    b_norm = np.sqrt(_dot(rhs, rhs, n3))
    history = []
    if b_norm == 0.0:
        return x, {"iterations": 0, "residual": 0.0, "history": history}
    r = rhs.copy()
    z = r / diag if diag is not None else r
    p = z.copy()
    rz = _dot(r, z, n3)
    for it in range(1, max_iter + 1):
        Hp = op.apply(p)
        pHp = _dot(p, Hp, n3)
        if pHp <= 0.0:
            raise AssemblyError(
                f"non-positive curvature direction in CG (p.Hp = {pHp:.3e}); "
                "the assembled operator is not SPD on mean-zero fields"
            )
        alpha = rz / pHp
        x += alpha * p
        r -= alpha * Hp
        # mean-zero projection every iterate kills rounding drift
        x -= x.mean()
        r -= r.mean()
        res = np.sqrt(_dot(r, r, n3)) / b_norm
        history.append(res)
        if res <= tol:
            return x, {"iterations": it, "residual": res, "history": history}
        z = r / diag if diag is not None else r
        rz_new = _dot(r, z, n3)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    raise ConvergenceError(
        f"CG hit the iteration cap {max_iter} at relative residual {history[-1]:.3e}",
        history=history,
    )


def cg_solve(problem, operator=None):
    """Solve the cell problem; relative residual <= cg_tol or error.

    Vector unknowns are solved one scalar component at a time (the operator
    is componentwise), so stacking independent scalar solves reproduces the
    vector solve bit-for-bit.  Pass ``operator`` to reuse prepared caches
    across problems that share the lattice and coefficient.
    """
    op = NonlocalOperator(problem) if operator is None else operator.with_problem(problem)
    b, frame = op.rhs()
    k = b.shape[1]
    max_iter = problem.max_iter_factor * op.n3 * k
    diag = op.diagonal() if problem.preconditioner == "jacobi" else None

    cols = []
    iterations = 0
    residual = 0.0
    history = []
    for j in range(k):
        xj, info = _cg_scalar(op, -b[:, j], problem.cg_tol, max_iter, diag)
        cols.append(xj)
        iterations += info["iterations"]
        residual = max(residual, info["residual"])
        history.append(info["history"])
    x = np.stack(cols, axis=1)

    Hx = op.apply(x)
    el_residual = float(np.max(np.abs(Hx + b)))
    energy = op.energy_offset() + _dot(b, x, op.n3) + 0.5 * _dot(Hx, x, op.n3)

    if problem.mode == "direct":
        v3 = np.outer(x[:, 0], frame.t1) + np.outer(x[:, 1], frame.t2)
        v_field = PeriodicField(op.n, 3, v3 - v3.mean(axis=0, keepdims=True))
    else:
        v_field = PeriodicField(op.n, 3, x - x.mean(axis=0, keepdims=True))

    return CellSolution(
        v=v_field,
        energy=energy,
        residual=residual,
        iterations=iterations,
        el_residual=el_residual,
        mode=problem.mode,
        frame=frame,
        residual_history=history,
    )


def apply_hessian(problem, v):
    """Hessian action on a PeriodicField (same grid as the problem lattice)."""
    if v.n != problem.lattice.n:
        raise InputError("field grid does not match the problem lattice")
    op = NonlocalOperator(problem)
    return PeriodicField(v.n, v.c, op.apply(v.data))


def assemble_rhs(problem):
    """Right-hand side as a PeriodicField (frame coordinates for direct mode)."""
    op = NonlocalOperator(problem)
    b, _ = op.rhs()
    return PeriodicField(op.n, b.shape[1], b)


def solve_direct(problem, operator=None):
    if problem.mode != "direct":
        raise InputError("solve_direct needs a problem in direct mode")
    solution = cg_solve(problem, operator=operator)
    tangency = float(np.max(np.abs(solution.v.data @ problem.s)))
    if tangency > 1e-12:
        raise AssemblyError(f"direct-mode solution violates tangency by {tangency:.3e}")
    return solution
