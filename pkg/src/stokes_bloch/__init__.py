"""Fourier-spectral homogenization and Bloch-wave analysis of periodic Stokes flow."""

from .bloch import (
    BlochBranch,
    DerivativeCheck,
    DivFreeBasis,
    assemble_shifted_operator,
    build_divfree_basis,
    check_first_order_eigenfunction,
    fit_derivatives,
    lowest_branches,
    recover_pressure,
    track_branches,
)
from .cell import CellSolution, homogenized_tensor, solve_cell_problem, solve_cell_problems, trace_identity_residual
from .epsilon import ConvergenceReport, EpsProblem, convergence_study, solve_eps, solve_homogenized
from .fourier import (
    CellGrid,
    EllipticityError,
    ScalarField,
    ShiftParameter,
    VectorField,
    MatrixField,
    ViscosityModel,
    coeff_multiply,
    make_grid,
    sample_viscosity,
    shifted_divergence,
    shifted_gradient,
    shifted_sym_gradient,
)
from .operators import SolverError
from .tensors import (
    EquivalenceDecomposition,
    HomTensor,
    PropagationRecord,
    contract_M,
    decompose_difference,
    decompose_difference_sym,
    i_otimes_i,
    identity_tensor,
    propagation_residual,
    reconstruct_from_bloch,
    symbol_equivalence,
)

__version__ = "0.1.0"

__all__ = [
    "BlochBranch",
    "CellGrid",
    "CellSolution",
    "ConvergenceReport",
    "DerivativeCheck",
    "DivFreeBasis",
    "EllipticityError",
    "EpsProblem",
    "EquivalenceDecomposition",
    "HomTensor",
    "MatrixField",
    "PropagationRecord",
    "ScalarField",
    "ShiftParameter",
    "SolverError",
    "VectorField",
    "ViscosityModel",
    "assemble_shifted_operator",
    "build_divfree_basis",
    "check_first_order_eigenfunction",
    "coeff_multiply",
    "contract_M",
    "convergence_study",
    "decompose_difference",
    "decompose_difference_sym",
    "fit_derivatives",
    "homogenized_tensor",
    "i_otimes_i",
    "identity_tensor",
    "lowest_branches",
    "make_grid",
    "propagation_residual",
    "reconstruct_from_bloch",
    "recover_pressure",
    "sample_viscosity",
    "shifted_divergence",
    "shifted_gradient",
    "shifted_sym_gradient",
    "solve_cell_problem",
    "solve_cell_problems",
    "solve_eps",
    "solve_homogenized",
    "symbol_equivalence",
    "trace_identity_residual",
    "track_branches",
]
