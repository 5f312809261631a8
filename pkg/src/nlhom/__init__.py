"""Nonlocal exchange/DMI energies and their periodic homogenization at desk scale."""

from .dsl import Expression, ExpressionError, parse_expression
from .errors import (
    AssemblyError,
    AssumptionError,
    ConfigError,
    ConvergenceError,
    DomainError,
    InputError,
    NlhomError,
)
from .kernels import (
    KernelSpec,
    VectorKernelSpec,
    axial_kernel,
    bump_quadratic,
    eval_nu,
    eval_rho,
    expression_kernel,
    expression_vector_kernel,
    fixed_direction_kernel,
    indicator_shell,
    scale_lambda,
    truncated_gaussian,
    validate_assumptions,
)
from .microstructure import (
    CoefficientSpec,
    averaged_kernels,
    check_h1,
    constant_coefficient,
    eval_coeff,
    expression_coefficient,
    fourier_coefficient,
    separable_coefficient,
)
from .periodic_cell import (
    PeriodicField,
    TangentFrame,
    XiLattice,
    build_lattice,
    norm_rho,
    project_mean_zero,
    read_field,
    s_rho_adjoint_apply,
    s_rho_apply,
    shift,
    tangent_frame,
    write_field,
)
from .cell_solver import CellProblem, CellSolution, apply_hessian, assemble_rhs, cg_solve, solve_direct
from .homogenized import (
    HomogenizedDensity,
    build,
    compute_Tbar,
    compute_dbar,
    fhom_decomposed,
    fhom_direct,
    fhom_lambda,
)
from .macro_energy import (
    Magnetization,
    bloch_wall_magnetization,
    constant_magnetization,
    corrector_field,
    energy_F_eps,
    energy_H_eps,
    energy_eps,
    energy_homogenized,
    energy_two_scale,
    helix_magnetization,
    recovery_sequence,
)
from .verification import gamma_sweep, run_selftest

__version__ = "0.1.0"
