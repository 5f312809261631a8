"""Property harness: the package's identities and inequalities as checks.

Each check is deterministic given its seed and returns a CheckReport; the
suite runner collects reports into a JSON-ready list and an exit code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import homogenized as hg
from . import kernels, macro_energy, microstructure, periodic_cell
from .cell_solver import CellProblem, NonlocalOperator, cg_solve
from .errors import ConvergenceError
from .periodic_cell import PeriodicField, build_lattice, norm_rho, norm_rho_squared


@dataclass
class CheckReport:
    name: str
    passed: bool
    measured: dict
    tolerance: float
    seed: int
    details: str = ""

    def to_json_dict(self):
        return {
            "name": self.name,
            "pass": bool(self.passed),
            "measured": {k: _jsonable(v) for k, v in self.measured.items()},
            "tolerance": self.tolerance,
            "seed": self.seed,
            "details": self.details,
        }


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def default_kernels(normalization="quadrature"):
    rho = kernels.bump_quadratic(r=1.0, normalization=normalization)
    nu = kernels.axial_kernel(
        kernels.indicator_shell(0.0, 1.0), normalization_mode=normalization
    )
    return rho, nu


def one_mode_coefficients():
    """The standard one-mode microstructure used by scenario checks."""
    a = microstructure.fourier_coefficient(
        [((1, 0, 0), (0, 0, 0), 0.25), ((0, 0, 0), (1, 0, 0), 0.25)],
        offset=1.0, a0=0.5, sup=1.5,
    )
    kappa = microstructure.fourier_coefficient(
        [((0, 1, 0), (0, 0, 0), 0.15), ((0, 0, 0), (0, 1, 0), 0.15)],
        offset=0.3,
    )
    return a, kappa


def random_tangent_pair(rng, scale=1.0):
    s = rng.standard_normal(3)
    s /= np.linalg.norm(s)
    frame = periodic_cell.tangent_frame(s)
    A = scale * (
        np.outer(frame.t1, rng.standard_normal(3))
        + np.outer(frame.t2, rng.standard_normal(3))
    )
    return s, A


def check_adjoint(seed=0, n=4, draws=3, tolerance=1e-12):
    """<S_rho w, u> = <w, S*_rho u> for random fields, exactly up to rounding."""
    rho, nu = default_kernels()
    lattice = build_lattice(rho, nu, n)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        w = PeriodicField(n, 3, rng.standard_normal((n**3, 3)))
        u = rng.standard_normal((lattice.node_count, n**3, 3))
        Sw = periodic_cell.s_rho_apply(w, lattice)
        lhs = float(np.sum(Sw * u) * lattice.weight / n**3)
        Su = periodic_cell.s_rho_adjoint_apply(u, lattice)
        rhs = float(np.sum(w.data * Su.data) / n**3)
        scale = max(abs(lhs), abs(rhs), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return CheckReport(
        name="adjoint",
        passed=worst <= tolerance,
        measured={"max_rel_defect": worst, "n": n, "draws": draws},
        tolerance=tolerance,
        seed=seed,
    )


def fourier_symbol(lattice, k):
    """Constant-coefficient Hessian symbol 2 sum_q h^3 rho_q (2 - 2cos(2 pi k.xi_q)) / |xi_q|^2."""
    k = np.asarray(k, dtype=float)
    phases = 2.0 * np.pi * (lattice.xi @ k)
    return float(
        2.0
        * lattice.weight
        * np.sum(lattice.rho * (2.0 - 2.0 * np.cos(phases)) / lattice.xi_norm**2)
    )


def fourier_min_symbol(lattice):
    """Smallest symbol over the discrete nonzero modes k in {0..n-1}^3."""
    n = lattice.n
    best = math.inf
    argbest = None
    for k1 in range(n):
        for k2 in range(n):
            for k3 in range(n):
                if k1 == k2 == k3 == 0:
                    continue
                sym = fourier_symbol(lattice, (k1, k2, k3))
                if sym < best:
                    best = sym
                    argbest = (k1, k2, k3)
    return best, argbest


def estimate_poincare_constant(lattice, tol=1e-8, max_rounds=200, seed=0):
    """C_P with ||w||^2 <= C_P ||w||_rho^2 on mean-zero fields, a = 1.

    Inverse power iteration on the constant-coefficient Hessian H (whose
    quadratic form is twice the squared rho-norm), solving H y = x by CG.
    """
    a1 = microstructure.constant_coefficient(1.0)
    k0 = microstructure.constant_coefficient(0.0)
    problem = CellProblem(a=a1, kappa=k0, lattice=lattice, mode="corrector_a",
                          cg_tol=tol * 1e-2, cache_coefficients=False)
    op = NonlocalOperator(problem)
    n3 = op.n3
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n3)
    x -= x.mean()
    x /= math.sqrt(float(np.sum(x * x) / n3))
    mu = math.inf
    from .cell_solver import _cg_scalar

    for _ in range(max_rounds):
        y, _info = _cg_scalar(op, x, tol * 1e-2, 10 * n3)
        y -= y.mean()
        norm = math.sqrt(float(np.sum(y * y) / n3))
        y /= norm
        Hy = op.apply(y)
        mu_new = float(np.sum(Hy * y) / n3)
        if mu_new <= 0:
            raise ConvergenceError("inverse power iteration lost positivity")
        if abs(mu_new - mu) <= tol * abs(mu_new):
            return 2.0 / mu_new, mu_new
        mu = mu_new
        x = y
    raise ConvergenceError(
        f"inverse power iteration stagnated after {max_rounds} rounds (mu = {mu})"
    )


def check_poincare(seed=0, n=4, samples=20, tolerance=1e-6):
    """Estimated discrete Poincare constant vs the Fourier-symbol oracle, and
    the inequality on fresh random mean-zero fields."""
    rho, nu = default_kernels()
    lattice = build_lattice(rho, nu, n)
    cp_est, mu = estimate_poincare_constant(lattice, seed=seed)
    sym_min, argmin = fourier_min_symbol(lattice)
    cp_oracle = 2.0 / sym_min
    rel = abs(cp_est - cp_oracle) / cp_oracle

    rng = np.random.default_rng(seed + 1)
    inequality_ok = True
    worst_ratio = 0.0
    for _ in range(samples):
        w = PeriodicField(n, 3, rng.standard_normal((n**3, 3)))
        w = periodic_cell.project_mean_zero(w)
        lhs = w.l2() ** 2
        rhs = cp_est * norm_rho_squared(w, lattice)
        worst_ratio = max(worst_ratio, lhs / rhs if rhs > 0 else math.inf)
        if lhs > rhs * (1.0 + 1e-8):
            inequality_ok = False
    return CheckReport(
        name="poincare",
        passed=(rel <= tolerance) and inequality_ok,
        measured={
            "C_P": cp_est,
            "C_P_oracle": cp_oracle,
            "rel_diff": rel,
            "min_symbol_mode": list(argmin),
            "mu_min": mu,
            "worst_sample_ratio": worst_ratio,
            "samples": samples,
        },
        tolerance=tolerance,
        seed=seed,
    )


def check_decomposition(seed=0, n=4, draws=5, field_tol=1e-8, value_tol=1e-7):
    """solve_direct vs A v_a + s x v_kappa, and direct vs decomposed f_hom."""
    rho, nu = default_kernels()
    lattice = build_lattice(rho, nu, n)
    a, kappa = one_mode_coefficients()
    density = hg.build(a, kappa, lattice, cg_tol=1e-12, cache_coefficients=True)
    rng = np.random.default_rng(seed)
    worst_field = 0.0
    worst_value = 0.0
    for _ in range(draws):
        s, A = random_tangent_pair(rng)
        problem = CellProblem(a=a, kappa=kappa, lattice=lattice, mode="direct",
                              s=s, A=A, cg_tol=1e-12, cache_coefficients=True)
        solution = cg_solve(problem, operator=density.operator)
        combined = density.combined_corrector(s, A)
        diff = PeriodicField(n, 3, solution.v.data - combined.data)
        denom = max(norm_rho(combined, lattice), 1e-300)
        worst_field = max(worst_field, norm_rho(diff, lattice) / denom)
        f_direct = solution.energy
        f_dec = hg.fhom_decomposed(density, s, A)
        worst_value = max(
            worst_value, abs(f_direct - f_dec) / max(abs(f_direct), 1e-300)
        )
    return CheckReport(
        name="decomposition",
        passed=(worst_field <= field_tol) and (worst_value <= value_tol),
        measured={
            "max_field_rel": worst_field,
            "max_value_rel": worst_value,
            "draws": draws,
            "n": n,
        },
        tolerance=max(field_tol, value_tol),
        seed=seed,
    )


def antisym_constant(a_spec, kappa_spec, lattice, m, eps):
    """Lattice-evaluated C = (1/(2 a_min)) sup|kappa|^2 ||nu/sqrt(rho)||_2^2.

    a_min and sup|kappa| are taken over exactly the coefficient samples the
    eps-energies evaluate, so the bound is exact for the discrete sums.
    """
    M = m.M
    P = int(round(1.0 / eps))
    fast = macro_energy._fast_axis_values(M, P, lattice.n)
    a_min = math.inf
    k_sup = 0.0
    z1 = fast.reshape(1, 1, -1)
    z2 = fast.reshape(1, -1, 1)
    z3 = fast.reshape(-1, 1, 1)
    z = np.stack(np.broadcast_arrays(z1, z2, z3), axis=-1)
    for q in range(lattice.node_count):
        xi = lattice.xi[q]
        avals = np.asarray(microstructure.eval_coeff(a_spec, z, z + xi))
        kvals = np.asarray(microstructure.eval_coeff(kappa_spec, z, z + xi))
        a_min = min(a_min, float(avals.min()))
        k_sup = max(k_sup, float(np.max(np.abs(kvals))))
    nu_mag2 = np.sum(lattice.nu**2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(lattice.rho > 0, nu_mag2 / np.where(lattice.rho > 0, lattice.rho, 1.0), 0.0)
    ratio2 = float(lattice.weight * np.sum(terms))
    return 0.5 / a_min * k_sup**2 * ratio2


def check_antisym_bound(seed=0, n=4, M=16, eps=0.25, draws=5):
    """|H_eps| <= F_eps / 2 + C ||m||^2 with the lattice-evaluated constant."""
    rho, nu = default_kernels()
    lattice = build_lattice(rho, nu, n)
    a, kappa = one_mode_coefficients()
    rng = np.random.default_rng(seed)
    margin = math.inf
    passed = True
    m_probe = macro_energy.constant_magnetization(M, (0, 0, 1.0))
    C = antisym_constant(a, kappa, lattice, m_probe, eps)
    for _ in range(draws):
        raw = rng.standard_normal((M**3, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        m = macro_energy.Magnetization(M=M, data=raw)
        breakdown = macro_energy.energy_eps(m, a, kappa, lattice, eps)
        l2sq = float(np.mean(np.sum(m.data**2, axis=1)))  # = |Omega| = 1
        bound = 0.5 * breakdown.F_eps + C * l2sq
        slack = bound - abs(breakdown.H_eps)
        margin = min(margin, slack)
        if abs(breakdown.H_eps) > bound * (1.0 + 1e-12) + 1e-300:
            passed = False
    return CheckReport(
        name="antisym_bound",
        passed=passed,
        measured={"constant": C, "min_slack": margin, "draws": draws, "M": M, "eps": eps},
        tolerance=0.0,
        seed=seed,
    )


@dataclass
class SweepRow:
    eps: float
    F_eps: float
    H_eps: float
    E_eps_plain: float
    E_eps_recovery: float
    E_hom: float
    dropped_fraction: float


def gamma_sweep(scenario, eps_list=None, n=None):
    """Run the plain and recovery energies over an eps sweep.

    ``scenario`` is a dict with the kernel/coefficient/magnetization setup and
    the calibrated final-gap tolerance; see nlhom/scenarios/*.json.
    """
    from .config import build_scenario

    setup = build_scenario(scenario)
    if eps_list is None:
        eps_list = setup["eps_list"]
    if n is None:
        n = setup["n"]
    rho, nu = setup["rho"], setup["nu"]
    a, kappa = setup["a"], setup["kappa"]
    lattice = build_lattice(rho, nu, n)
    density = hg.build(a, kappa, lattice, cache_coefficients=True)

    rows = []
    for eps in sorted(eps_list, reverse=True):
        P = int(round(1.0 / eps))
        M = P * n
        m0 = setup["magnetization"](M)
        w = macro_energy.corrector_field(m0, density)
        breakdown = macro_energy.energy_eps(m0, a, kappa, lattice, eps)
        m_rec = macro_energy.recovery_sequence(m0, w, eps)
        rec = macro_energy.energy_eps(m_rec, a, kappa, lattice, eps)
        E_hom = macro_energy.energy_homogenized(m0, density)
        rows.append(SweepRow(
            eps=eps,
            F_eps=breakdown.F_eps,
            H_eps=breakdown.H_eps,
            E_eps_plain=breakdown.total,
            E_eps_recovery=rec.total,
            E_hom=E_hom,
            dropped_fraction=breakdown.dropped_fraction,
        ))

    gaps = [abs(r.E_eps_recovery - r.E_hom) for r in rows]
    trend_ok = all(gaps[i + 1] <= gaps[i] * (1.0 + 1e-12) for i in range(len(gaps) - 1))
    final_tol = setup["gap_tolerance"]
    final_ok = gaps[-1] <= final_tol
    report = CheckReport(
        name=f"gamma_sweep:{setup['name']}",
        passed=trend_ok and final_ok,
        measured={
            "eps": [r.eps for r in rows],
            "recovery_gaps": gaps,
            "plain_gaps": [abs(r.E_eps_plain - r.E_hom) for r in rows],
            "E_hom": rows[-1].E_hom,
            "final_gap": gaps[-1],
        },
        tolerance=final_tol,
        seed=0,
        details="gap trend nonincreasing" if trend_ok else "gap trend increased",
    )
    return report, rows


def sweep_rows_to_csv(rows, target):
    lines = ["eps,F_eps,H_eps,E_eps_plain,E_eps_recovery,E_hom,dropped_fraction"]
    for r in rows:
        lines.append(
            ",".join(
                f"{v:.17g}"
                for v in (r.eps, r.F_eps, r.H_eps, r.E_eps_plain, r.E_eps_recovery,
                          r.E_hom, r.dropped_fraction)
            )
        )
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w") as fh:
            fh.write(text)
    return text


def run_selftest(seed=0, n=4, M=None, draws=5, scenarios=None):
    """Run every check at the given scale; returns (reports, exit_code)."""
    if M is None:
        M = 4 * n
    reports = [
        check_adjoint(seed=seed, n=n, draws=draws),
        check_poincare(seed=seed, n=n, samples=draws * 4),
        check_decomposition(seed=seed, n=n, draws=draws),
        check_antisym_bound(seed=seed, n=n, M=M, draws=draws),
    ]
    if scenarios:
        for scenario in scenarios:
            report, _rows = gamma_sweep(scenario)
            reports.append(report)
    exit_code = 0 if all(r.passed for r in reports) else 1
    return reports, exit_code


def reports_to_json(reports):
    return json.dumps([r.to_json_dict() for r in reports], indent=2, sort_keys=True) + "\n"
