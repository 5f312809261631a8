import math

import numpy as np
import pytest

from nlhom import kernels
from nlhom.errors import AssumptionError, InputError
from nlhom.periodic_cell import build_lattice


def default_pair(normalization="analytic"):
    rho = kernels.bump_quadratic(r=1.0, normalization=normalization)
    nu = kernels.axial_kernel(kernels.indicator_shell(0.0, 1.0),
                              normalization_mode=normalization)
    return rho, nu


class TestEvalRho:
    def test_outside_support_is_zero(self):
        rho = kernels.bump_quadratic(r=1.0)
        assert kernels.eval_rho(rho, (2.0, 0.0, 0.0)) == 0.0

    def test_bump_closed_form_constant(self):
        # c = 1 / int_{B_1} |xi|^2 = 5/(4 pi); rho((0.5,0,0)) = 0.25 * 5/(4 pi)
        rho = kernels.bump_quadratic(r=1.0)
        val = kernels.eval_rho(rho, (0.5, 0.0, 0.0))
        assert val == pytest.approx(0.25 * 5.0 / (4.0 * math.pi), rel=1e-14)

    def test_gaussian_quadrature_l1(self):
        # default validation lattice; expected value from the closed form,
        # cross-checked against a high-resolution midpoint oracle below
        rho = kernels.truncated_gaussian(sigma=0.3, R=1.0)
        nu = default_pair()[1]
        lattice = build_lattice(rho, nu, n=48)
        l1 = lattice.weight * float(np.sum(lattice.rho))
        assert abs(l1 - 1.0) <= 1e-6

    def test_gaussian_l1_against_fine_midpoint_oracle(self):
        # independent oracle: 3D midpoint rule on a fine axis-aligned grid
        rho = kernels.truncated_gaussian(sigma=0.3, R=1.0)
        n = 96
        ax = (np.arange(-n, n) + 0.5) / n
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
        vals = kernels.eval_rho(rho, pts)
        oracle = float(np.sum(vals)) / n**3
        assert abs(oracle - 1.0) <= 1e-5  # midpoint error of the oracle itself
        assert kernels.eval_rho(rho, (0.0, 0.0, 0.0)) > 0.0

    def test_non_finite_input_rejected(self):
        rho = kernels.bump_quadratic(r=1.0)
        with pytest.raises(InputError):
            kernels.eval_rho(rho, (np.nan, 0.0, 0.0))

    def test_negative_expression_kernel_rejected(self):
        rho = kernels.expression_kernel("xi1", support_radius=1.0)
        with pytest.raises(AssumptionError):
            kernels.eval_rho(rho, (-0.5, 0.0, 0.0))


class TestEvalNu:
    def test_axial_direction_and_profile(self):
        # g = indicator of B_1 normalized: 3/(4 pi); at (0,0,0.5) direction e3
        _, nu = default_pair()
        val = kernels.eval_nu(nu, (0.0, 0.0, 0.5))
        assert val == pytest.approx([0.0, 0.0, 3.0 / (4.0 * math.pi)], abs=1e-15)

    def test_axial_zero_at_origin(self):
        _, nu = default_pair()
        assert np.all(kernels.eval_nu(nu, (0.0, 0.0, 0.0)) == 0.0)

    def test_fixed_direction_outside_support(self):
        nu = kernels.fixed_direction_kernel((1.0, 0.0, 0.0),
                                            kernels.indicator_shell(0.0, 1.0))
        assert np.all(kernels.eval_nu(nu, (0.0, 0.0, 2.0)) == 0.0)

    def test_expression_family_substitution(self):
        # nu = (xi2, -xi1, 0)/r * g(r) with g = indicator of B_2; at (1,0,0)
        # the value is (0, -q, 0) with q = g(1)
        nu = kernels.expression_vector_kernel(
            ["xi2/r", "-xi1/r", "0"], support_radius=2.0, normalization="analytic"
        )
        val = kernels.eval_nu(nu, (1.0, 0.0, 0.0))
        assert val == pytest.approx([0.0, -1.0, 0.0], abs=1e-15)


class TestScaleLambda:
    def test_identity_returns_same_object(self):
        rho, nu = default_pair()
        assert kernels.scale_lambda(rho, 1.0) is rho
        assert kernels.scale_lambda(nu, 1.0) is nu

    def test_definition_at_lambda_two(self):
        rho = kernels.bump_quadratic(r=1.0)
        rho2 = kernels.scale_lambda(rho, 2.0)
        assert rho2.support_radius == pytest.approx(2.0)
        base = kernels.eval_rho(rho, (0.5, 0.0, 0.0))
        assert kernels.eval_rho(rho2, (1.0, 0.0, 0.0)) == pytest.approx(base / 8.0, rel=1e-14)

    def test_l1_invariance_on_lattice(self):
        rho, nu = default_pair()
        lam = 2.0
        rho2, nu2 = kernels.scale_lambda(rho, lam), kernels.scale_lambda(nu, lam)
        lattice = build_lattice(rho2, nu2, n=16, radius=lam * 1.0)
        base = build_lattice(rho, nu, n=16, radius=1.0)
        l1_scaled = lattice.weight * float(np.sum(lattice.rho))
        l1_base = base.weight * float(np.sum(base.rho))
        assert abs(l1_scaled - l1_base) <= 1e-6
        l1nu_scaled = lattice.weight * float(np.sum(np.linalg.norm(lattice.nu, axis=-1)))
        l1nu_base = base.weight * float(np.sum(np.linalg.norm(base.nu, axis=-1)))
        assert abs(l1nu_scaled - l1nu_base) <= 1e-6

    def test_bad_lambda(self):
        rho, _ = default_pair()
        with pytest.raises(InputError):
            kernels.scale_lambda(rho, 0.0)
        with pytest.raises(InputError):
            kernels.scale_lambda(rho, -2.0)


class TestValidateAssumptions:
    def test_all_pass_compact_supports(self):
        rho, nu = default_pair()
        lattice = build_lattice(rho, nu, n=8)
        report = kernels.validate_assumptions(rho, nu, lattice)
        assert report.tail_mass == 0.0  # compact supports inside R = 1
        assert report.coercivity_min > 0.0
        assert math.isfinite(report.ratio_l2)
        assert report.passed

    def test_h4_violation_raises(self):
        # nu supported on a shell where rho vanishes
        rho = kernels.indicator_shell(0.0, 0.5)
        nu = kernels.axial_kernel(kernels.indicator_shell(0.6, 1.0))
        lattice = build_lattice(rho, nu, n=8, radius=1.0)
        with pytest.raises(AssumptionError, match="undefined"):
            kernels.validate_assumptions(rho, nu, lattice)

    def test_gaussian_tail_against_radial_oracle(self):
        sigma, R = 0.25, 0.75  # R = 3 sigma
        rho = kernels.truncated_gaussian(sigma=sigma, R=R)
        nu = default_pair()[1]
        lattice = build_lattice(rho, nu, n=32, radius=1.0)
        report = kernels.validate_assumptions(rho, nu, lattice)
        # radial 1D quadrature oracle for the mass of the R^3-normalized
        # gaussian inside B_R
        t = np.linspace(0.0, R, 40001)
        f = t**2 * np.exp(-((t / sigma) ** 2))
        inside = np.trapz(f, t) * 4.0 * math.pi / (math.pi * sigma**2) ** 1.5
        assert abs(report.tail_mass_rho - (1.0 - inside)) <= 1e-6

    def test_shell_kernel_fails_coercivity(self):
        rho = kernels.indicator_shell(0.4, 1.0)
        nu = kernels.axial_kernel(kernels.indicator_shell(0.4, 1.0))
        lattice = build_lattice(rho, nu, n=8)
        report = kernels.validate_assumptions(rho, nu, lattice)
        assert report.coercivity_min == 0.0
        assert not report.passed


class TestMomentIsotropy:
    def test_second_moment_is_identity_over_three(self):
        # trace of int rho (xi x xi / |xi|^2) = L1 mass; matrix isotropic
        rho, nu = default_pair("quadrature")
        lattice = build_lattice(rho, nu, n=8)
        xin = lattice.xi / lattice.xi_norm[:, None]
        M = np.einsum("q,qi,qj->ij", lattice.weight * lattice.rho, xin, xin)
        assert np.trace(M) == pytest.approx(1.0, abs=1e-12)
        assert np.max(np.abs(M - np.eye(3) / 3.0)) <= 1e-12

    def test_eval_rho_nonnegative_all_families(self):
        rho_list = [
            kernels.bump_quadratic(r=0.8),
            kernels.truncated_gaussian(sigma=0.3, R=1.0),
            kernels.indicator_shell(0.2, 0.9),
        ]
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.2, 1.2, size=(500, 3))
        for rho in rho_list:
            assert np.all(kernels.eval_rho(rho, pts) >= 0.0)
