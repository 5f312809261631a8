"""Command-line entry point.

Subcommands: validate-kernels, moments, cell-solve, fhom, energy,
gamma-sweep, selftest.  Exit codes: 0 ok, 1 computational error, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import homogenized as hg
from . import macro_energy, verification
from .cell_solver import CellProblem, cg_solve
from .config import build_scenario, parse_config
from .dsl import parse_expression  # re-exported: the config DSL lives here
from .errors import NlhomError
from .kernels import validate_assumptions
from .microstructure import check_h1
from .periodic_cell import build_lattice, write_field

__all__ = ["main", "parse_expression"]


def _add_common(p):
    p.add_argument("--config", required=True, help="path to the JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--n", type=int, default=None, help="override lattice n")
    p.add_argument("--cg-tol", type=float, default=None, help="override solver tolerance")
    p.add_argument("--out", default=None, help="output file (default: stdout)")


def build_parser():
    parser = argparse.ArgumentParser(prog="nlhom", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    for name, help_text in (
        ("validate-kernels", "H1-H4 diagnostics for the configured kernels"),
        ("moments", "moment tensor and DMI vectors as JSON"),
        ("cell-solve", "run the corrector cell solves"),
        ("fhom", "sample the homogenized density on random tangent pairs"),
        ("energy", "eps-energies and the homogenized energy of the configured field"),
        ("selftest", "run the verification suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "fhom":
            p.add_argument("--samples", type=int, default=20)
        if name == "cell-solve":
            p.add_argument("--mode", choices=["corrector_a", "corrector_kappa"],
                           default="corrector_a")
            p.add_argument("--dump", default=None, help="write the corrector field dump here")
        if name == "selftest":
            p.add_argument("--draws", type=int, default=5)

    p = sub.add_parser("gamma-sweep", help="recovery-sequence sweep over eps")
    p.add_argument("--scenario", required=True,
                   help="packaged scenario name or a scenario JSON path")
    p.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    return parser


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "n", None) is not None:
        cfg.n = args.n
    if getattr(args, "cg_tol", None) is not None:
        cfg.cg_tol = args.cg_tol
    return cfg


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _lattice(cfg):
    return build_lattice(cfg.rho, cfg.nu, cfg.n, radius=cfg.radius, tail_tol=cfg.tail_tol)


def cmd_validate_kernels(cfg, args):
    lattice = _lattice(cfg)
    report = validate_assumptions(lattice.rho_spec, lattice.nu_spec, lattice)
    h1 = check_h1(cfg.a, lattice)
    payload = {
        "l1_rho": report.l1_rho,
        "l1_nu": report.l1_nu,
        "coercivity_min": report.coercivity_min,
        "ratio_l2": report.ratio_l2,
        "tail_mass": report.tail_mass,
        "failures": report.failures,
        "a_min_sample": h1.min_sample,
        "a_max_sample": h1.max_sample,
        "omitted_origin_cell_volume": lattice.omitted_cell_volume,
    }
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    print(f"validate-kernels: {'ok' if report.passed and h1.passed else 'FAILED'}",
          file=sys.stderr)
    return 0 if report.passed and h1.passed else 1


def cmd_moments(cfg, args):
    lattice = _lattice(cfg)
    Tbar = hg.compute_Tbar(cfg.a, lattice)
    dbar = hg.compute_dbar(cfg.kappa, lattice)
    payload = {
        "Tbar": [float(v) for v in Tbar.ravel()],
        "dbar": [[float(v) for v in row] for row in dbar],
        "n": cfg.n,
        "radius": lattice.radius,
    }
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    print(f"moments: trace(Tbar) = {float(np.trace(Tbar)):.12g}", file=sys.stderr)
    return 0


def cmd_cell_solve(cfg, args):
    lattice = _lattice(cfg)
    problem = CellProblem(
        a=cfg.a, kappa=cfg.kappa, lattice=lattice, mode=args.mode,
        cg_tol=cfg.cg_tol, max_iter_factor=cfg.max_iter_factor,
        preconditioner=cfg.preconditioner, cache_coefficients=cfg.cache_coefficients,
    )
    solution = cg_solve(problem)
    if args.dump:
        write_field(solution.v, args.dump)
    _emit(json.dumps(solution.stats(), indent=2, sort_keys=True) + "\n", args.out)
    print(f"cell-solve[{args.mode}]: energy = {solution.energy:.12g} "
          f"({solution.iterations} iterations)", file=sys.stderr)
    return 0


def cmd_fhom(cfg, args):
    lattice = _lattice(cfg)
    density = hg.build(cfg.a, cfg.kappa, lattice, cg_tol=cfg.cg_tol,
                       max_iter_factor=cfg.max_iter_factor,
                       preconditioner=cfg.preconditioner,
                       cache_coefficients=cfg.cache_coefficients)
    rng = np.random.default_rng(cfg.seed)
    lines = ["s1,s2,s3,A11,A12,A13,A21,A22,A23,A31,A32,A33,fhom_direct,fhom_decomposed,rel_diff"]
    worst = 0.0
    for _ in range(args.samples):
        s, A = verification.random_tangent_pair(rng)
        fd = hg.fhom_direct(density, s, A)
        fdec = hg.fhom_decomposed(density, s, A)
        rel = abs(fd - fdec) / max(abs(fd), 1e-300)
        worst = max(worst, rel)
        values = list(s) + list(A.ravel()) + [fd, fdec, rel]
        lines.append(",".join(f"{v:.17g}" for v in values))
    _emit("\n".join(lines) + "\n", args.out)
    print(f"fhom: {args.samples} samples, max rel diff {worst:.3e}", file=sys.stderr)
    return 0


def cmd_energy(cfg, args):
    if cfg.magnetization is None:
        raise NlhomError("config has no macro.magnetization section")
    lattice = _lattice(cfg)
    density = hg.build(cfg.a, cfg.kappa, lattice, cg_tol=cfg.cg_tol,
                       max_iter_factor=cfg.max_iter_factor,
                       preconditioner=cfg.preconditioner,
                       cache_coefficients=cfg.cache_coefficients)
    lines = ["eps,F_eps,H_eps,E_eps_plain,E_eps_recovery,E_hom,dropped_fraction"]
    summary = ""
    for P in cfg.P_list:
        eps = 1.0 / P
        M = P * cfg.n
        m0 = cfg.magnetization(M)
        w = macro_energy.corrector_field(m0, density)
        plain = macro_energy.energy_eps(m0, cfg.a, cfg.kappa, lattice, eps)
        rec = macro_energy.energy_eps(
            macro_energy.recovery_sequence(m0, w, eps), cfg.a, cfg.kappa, lattice, eps
        )
        E_hom = macro_energy.energy_homogenized(m0, density)
        lines.append(",".join(
            f"{v:.17g}" for v in (eps, plain.F_eps, plain.H_eps, plain.total,
                                  rec.total, E_hom, plain.dropped_fraction)
        ))
        summary = f"energy: eps={eps:g} E_eps={plain.total:.6g} E_hom={E_hom:.6g}"
    _emit("\n".join(lines) + "\n", args.out)
    print(summary, file=sys.stderr)
    return 0


def cmd_gamma_sweep(args):
    scenario = build_scenario(args.scenario)
    report, rows = verification.gamma_sweep(scenario["raw"])
    text = verification.sweep_rows_to_csv(rows, args.out) if args.out else None
    if text is None:
        verification.sweep_rows_to_csv(rows, sys.stdout)
    print(f"gamma-sweep[{scenario['name']}]: final gap "
          f"{report.measured['final_gap']:.6g} "
          f"({'pass' if report.passed else 'FAIL'})", file=sys.stderr)
    return 0 if report.passed else 1


def cmd_selftest(cfg, args):
    reports, code = verification.run_selftest(
        seed=cfg.seed, n=cfg.n, draws=args.draws, scenarios=cfg.scenarios or None
    )
    _emit(verification.reports_to_json(reports), args.out)
    passed = sum(1 for r in reports if r.passed)
    print(f"selftest: {passed}/{len(reports)} checks passed", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        if args.command == "gamma-sweep":
            return cmd_gamma_sweep(args)
        cfg = _apply_overrides(parse_config(args.config), args)
        handler = {
            "validate-kernels": cmd_validate_kernels,
            "moments": cmd_moments,
            "cell-solve": cmd_cell_solve,
            "fhom": cmd_fhom,
            "energy": cmd_energy,
            "selftest": cmd_selftest,
        }[args.command]
        return handler(cfg, args)
    except NlhomError as exc:
        chain = [str(exc)]
        cause = exc.__cause__
        while cause is not None:
            chain.append(str(cause))
            cause = cause.__cause__
        print("error: " + "\n  caused by: ".join(chain), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
