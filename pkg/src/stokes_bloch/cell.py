"""Periodic Stokes cell problems and homogenized viscosity tensors.

For each pair ``(k, alpha)`` the corrector ``chi`` solves, on the unit torus,

    -div(mu (grad chi + G)) + grad pi = 0,   div chi = 0,

with the constant strain ``G = e_alpha (x) e_k`` (gradient of ``y_alpha e_k``
in derivative-first layout) or its symmetric part for the symmetrized kind.
``chi`` and ``pi`` are mean-zero.  The tensor entry is the energy

    A[k, l, alpha, beta] = mean(mu W_{k alpha} : W_{l beta}),   W = G + grad chi.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fourier import (
    ScalarField,
    VectorField,
    ViscosityField,
    _to_padded,
    to_nodal,
)
from .operators import (
    Kind,
    SolveInfo,
    StokesOperator,
    check_kind,
    divfree_frames,
)
from .tensors import HomTensor, random_directions, transverse_min_eigenvalue

log = logging.getLogger(__name__)

__all__ = [
    "CellSolution",
    "TensorReport",
    "unit_strain",
    "solve_cell_problem",
    "solve_cell_problems",
    "homogenized_tensor",
    "weak_form_tensor",
    "trace_identity_residual",
    "legendre_hadamard_margin",
    "check_tensor",
]

DENSE_LIMIT = 4096


def unit_strain(d: int, k: int, alpha: int, kind: Kind = "full_gradient") -> np.ndarray:
    """``grad(y_alpha e_k) = e_alpha (x) e_k`` (symmetrized for the symmetrized kind)."""
    G = np.zeros((d, d))
    G[alpha, k] = 1.0
    if kind == "symmetrized":
        G = 0.5 * (G + G.T)
    return G


def _strain_field(op: StokesOperator, G: np.ndarray) -> np.ndarray:
    d = op.grid.d
    S = np.zeros((d, d) + op.grid.shape, dtype=complex)
    S[(slice(None), slice(None)) + (0,) * d] = G
    return S


def _dense_solve(op: StokesOperator, rhs: np.ndarray) -> np.ndarray:
    """Direct solve in an explicit divergence-free basis (small grids only)."""
    grid = op.grid
    frames = divfree_frames(op.g)
    active = ~grid.nyquist_mask
    active[(0,) * grid.d] = False
    idx = np.flatnonzero(active.ravel())
    ncols = (grid.d - 1) * idx.size
    if ncols > DENSE_LIMIT:
        raise ValueError(f"dense cell solve limited to {DENSE_LIMIT} unknowns, got {ncols}")
    flat_frames = frames.reshape(grid.d - 1, grid.d, -1)
    B = np.zeros((grid.d,) + (grid.size,) + (ncols,), dtype=complex)
    for j in range(grid.d - 1):
        cols = np.arange(idx.size) + j * idx.size
        B[:, idx, cols] = flat_frames[j][:, idx]
    B = B.reshape(grid.d * grid.size, ncols)
    H = np.empty((ncols, ncols), dtype=complex)
    shape = (grid.d,) + grid.shape
    for c in range(ncols):
        H[:, c] = B.conj().T @ op.unprojected(B[:, c].reshape(shape)).ravel()
    H = 0.5 * (H + H.conj().T)
    x = np.linalg.solve(H, B.conj().T @ rhs.ravel())
    return (B @ x).reshape(shape)


@dataclass(frozen=True, eq=False)
class CellSolution:
    """Correctors and pressures for all ``(k, alpha)``.

    ``correctors[(k, alpha)]`` and ``pressures[(k, alpha)]`` are real,
    mean-zero fields; ``info[(k, alpha)]`` holds the solver record.
    """

    kind: str
    mu: ScalarField
    correctors: dict
    pressures: dict
    info: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.mu.grid

    @property
    def d(self) -> int:
        return self.grid.d

    def corrector_array(self) -> np.ndarray:
        """Coefficients stacked as ``chi[k, alpha, component, modes...]``."""
        d = self.d
        return np.stack([np.stack([self.correctors[(k, a)].coeffs for a in range(d)]) for k in range(d)])

    def pressure_array(self) -> np.ndarray:
        d = self.d
        return np.stack([np.stack([self.pressures[(k, a)].coeffs for a in range(d)]) for k in range(d)])

    def max_divergence(self) -> float:
        """Largest |Fourier coefficient| of ``div chi`` over all correctors."""
        g = self.grid.wavevectors()
        return max(float(np.max(np.abs(np.sum(1j * g * c.coeffs, axis=0)))) for c in self.correctors.values())

    def max_mean(self) -> float:
        z = (0,) * self.d
        vals = [np.max(np.abs(c.coeffs[(slice(None),) + z])) for c in self.correctors.values()]
        vals += [abs(p.coeffs[z]) for p in self.pressures.values()]
        return float(max(vals))


def solve_cell_problem(
    mu: ScalarField,
    k: int,
    alpha: int,
    kind: Kind = "full_gradient",
    *,
    tol: float = 1e-11,
    maxiter: int = 2000,
    method: str = "pcg",
    return_info: bool = False,
):
    """Corrector ``chi`` and pressure ``pi`` for the unit strain ``(k, alpha)``.

    Parameters
    ----------
    mu : ScalarField
        Real viscosity.
    k, alpha : int
        0-based indices of the affine datum ``y_alpha e_k``.
    kind : {"full_gradient", "symmetrized"}
    tol : float
        Relative tolerance on the projected residual.
    method : {"pcg", "dense"}
        ``dense`` assembles the Galerkin matrix explicitly; it is meant as an
        independent check on small grids.
    return_info : bool
        Also return the :class:`SolveInfo`.

    Raises
    ------
    SolverError
        If PCG hits ``maxiter``.
    """
    check_kind(kind)
    d = mu.grid.d
    if not (0 <= k < d and 0 <= alpha < d):
        raise ValueError(f"indices out of range for d={d}: ({k}, {alpha})")
    op = StokesOperator(mu, kind)
    G = _strain_field(op, unit_strain(d, k, alpha, kind))
    rhs = -op.unprojected(np.zeros((d,) + mu.grid.shape, dtype=complex), G)
    if method == "pcg":
        chi, info = op.solve(rhs, tol=tol, maxiter=maxiter)
    elif method == "dense":
        chi = _dense_solve(op, op.project(rhs))
        info = SolveInfo(0, 0.0, [])
    else:
        raise ValueError(f"unknown method {method!r}")
    # enforce exact realness (the operator maps real fields to real fields)
    chi = _real_part_coeffs(chi, d)
    residual = op.unprojected(chi, G)
    b = np.linalg.norm(op.project(rhs))
    if b > 0:
        info = SolveInfo(info.iterations, float(np.linalg.norm(op.project(residual)) / b), info.history)
    pi = op.pressure_from_residual(residual)
    pi = _real_part_coeffs(pi, d)
    out = (VectorField(mu.grid, chi, real=True), ScalarField(mu.grid, pi, real=True))
    return out + (info,) if return_info else out


def _real_part_coeffs(c: np.ndarray, d: int) -> np.ndarray:
    """Coefficients of the real part of the field with coefficients ``c``."""
    axes = tuple(range(c.ndim - d, c.ndim))
    flipped = np.roll(np.flip(c, axis=axes), 1, axis=axes)
    out = 0.5 * (c + np.conj(flipped))
    return out


def solve_cell_problems(
    mu: ScalarField,
    kind: Kind = "full_gradient",
    *,
    jobs: int = 1,
    tol: float = 1e-11,
    maxiter: int = 2000,
    method: str = "pcg",
) -> CellSolution:
    """All ``d^2`` cell problems, concurrently when ``jobs > 1``.

    For the symmetrized kind only ``k <= alpha`` is solved; the data is
    symmetric in ``(k, alpha)``.
    """
    check_kind(kind)
    d = mu.grid.d
    pairs = [(k, a) for k in range(d) for a in range(d) if kind == "full_gradient" or k <= a]

    def run(pair):
        return solve_cell_problem(mu, *pair, kind, tol=tol, maxiter=maxiter, method=method, return_info=True)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, pairs))
    else:
        results = [run(p) for p in pairs]
    chis, pis, infos = {}, {}, {}
    for (k, a), (chi, pi, info) in zip(pairs, results):
        for key in {(k, a), (a, k)} if kind == "symmetrized" else {(k, a)}:
            chis[key], pis[key], infos[key] = chi, pi, info
    return CellSolution(kind, mu, chis, pis, infos)


def _total_strains(sol: CellSolution) -> tuple[np.ndarray, StokesOperator]:
    """Padded nodal ``W_{k alpha}``, shape ``(d, d, d, d, m, ..., m)``."""
    op = StokesOperator(sol.mu, sol.kind)
    d = sol.d
    out = np.empty((d, d, d, d) + (op.m,) * d)
    for (k, a), chi in sol.correctors.items():
        S = op.strain(np.asarray(chi.coeffs)) + _strain_field(op, unit_strain(d, k, a, sol.kind))
        out[k, a] = to_nodal(_to_padded(S, op.grid, op.m), d).real
    return out, op


def _provenance(sol: CellSolution, form: str) -> dict:
    mu = sol.mu
    model = mu.model.to_dict() if isinstance(mu, ViscosityField) and mu.model is not None else None
    infos = list(sol.info.values())
    return {
        "model": model,
        "d": sol.d,
        "n": sol.grid.n,
        "kind": sol.kind,
        "form": form,
        "max_solver_residual": max((i.residual for i in infos), default=0.0),
        "max_iterations": max((i.iterations for i in infos), default=0),
    }


def homogenized_tensor(
    mu: ScalarField,
    kind: Kind = "full_gradient",
    *,
    solution: CellSolution | None = None,
    jobs: int = 1,
    tol: float = 1e-11,
) -> HomTensor:
    """Energy-form tensor ``mean(mu W_{k alpha} : W_{l beta})``.

    The mean is an exact sum on the dealiasing grid, so the result is the
    Galerkin energy and is symmetric under ``(k, alpha) <-> (l, beta)`` up to
    roundoff.
    """
    sol = solution or solve_cell_problems(mu, kind, jobs=jobs, tol=tol)
    W, op = _total_strains(sol)
    d = sol.d
    W = W.reshape((d * d, d * d, -1))
    muW = W * op._mu_big.ravel()
    # A[k, a, l, b] = sum_ij mean(mu W[k,a,i,j] W[l,b,i,j])
    E = np.einsum("pis,qis->pq", muW, W, optimize=True).reshape((d,) * 4) / op.m**d
    E = 0.5 * (E + E.transpose(2, 3, 0, 1))
    return HomTensor(E.transpose(0, 2, 1, 3), sol.kind, _provenance(sol, "energy"))


def weak_form_tensor(sol: CellSolution) -> HomTensor:
    """``A[k, l, alpha, beta] = mean(mu W_{k alpha})[beta, l]``.

    Equal to the energy form whenever the correctors solve their equations;
    the difference is a check on the solver.
    """
    W, op = _total_strains(sol)
    d = sol.d
    flux_mean = np.mean(W * op._mu_big, axis=tuple(range(4, 4 + d)))  # [k, a, i, j]
    E = np.empty((d,) * 4)
    for k, l, a, b in np.ndindex(*(d,) * 4):
        G = unit_strain(d, l, b, sol.kind)
        E[k, l, a, b] = np.sum(flux_mean[k, a] * G)
    return HomTensor(E, sol.kind, _provenance(sol, "weak"))


def trace_identity_residual(A: HomTensor, mu: ScalarField) -> float:
    """``max_{k, alpha} |sum_l A[k, l, alpha, l] - mean(mu) delta_{k alpha}|``."""
    E = A.entries
    d = A.d
    T = np.einsum("klal->ka", E)
    return float(np.max(np.abs(T - float(np.real(mu.mean)) * np.eye(d))))


def legendre_hadamard_margin(A: HomTensor, count: int = 64, seed: int = 0) -> float:
    """Smallest transverse eigenvalue of ``M(eta, A)`` over ``count`` random directions."""
    return min(transverse_min_eigenvalue(A, e) for e in random_directions(A.d, count, seed))


@dataclass(frozen=True)
class TensorReport:
    """Invariant measurements for a computed tensor and their tolerances."""

    simple_symmetry: float
    full_symmetry: float | None
    trace_identity: float | None
    weak_energy_gap: float
    lh_margin: float
    lh_bound: float
    max_divergence: float
    tolerances: dict

    @property
    def failures(self) -> list[str]:
        t = self.tolerances
        out = []
        if self.simple_symmetry > t["symmetry"]:
            out.append("simple_symmetry")
        if self.full_symmetry is not None and self.full_symmetry > t["symmetry"]:
            out.append("full_symmetry")
        if self.trace_identity is not None and self.trace_identity > t["trace_identity"]:
            out.append("trace_identity")
        if self.weak_energy_gap > t["weak_energy"]:
            out.append("weak_energy_gap")
        if self.lh_margin < self.lh_bound * (1 - t["lh_relative"]):
            out.append("legendre_hadamard")
        if self.max_divergence > t["divergence"]:
            out.append("divergence")
        return out

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json_dict(self) -> dict:
        return {
            "simple_symmetry": self.simple_symmetry,
            "full_symmetry": self.full_symmetry,
            "trace_identity": self.trace_identity,
            "weak_energy_gap": self.weak_energy_gap,
            "lh_margin": self.lh_margin,
            "lh_bound": self.lh_bound,
            "max_divergence": self.max_divergence,
            "tolerances": self.tolerances,
            "failures": self.failures,
            "ok": self.ok,
        }


DEFAULT_TOLERANCES = {
    "symmetry": 1e-10,
    "trace_identity": 1e-9,
    "weak_energy": 1e-9,
    "lh_relative": 1e-8,
    "divergence": 1e-10,
}


def check_tensor(A: HomTensor, sol: CellSolution, mu0: float, tolerances: dict | None = None, seed: int = 0) -> TensorReport:
    """Measure every tensor invariant.

    The Legendre-Hadamard bound is ``mu0`` for the full gradient and
    ``mu0 / 2`` for the symmetrized kind (a constant viscosity ``c`` gives
    transverse eigenvalue ``c / 2`` there).
    """
    tol = dict(DEFAULT_TOLERANCES, **(tolerances or {}))
    weak = weak_form_tensor(sol)
    full = A.kind == "symmetrized"
    return TensorReport(
        simple_symmetry=A.simple_symmetry_defect(),
        full_symmetry=A.full_symmetry_defect() if full else None,
        trace_identity=None if full else trace_identity_residual(A, sol.mu),
        weak_energy_gap=float(np.max(np.abs(weak.entries - A.entries))),
        lh_margin=legendre_hadamard_margin(A, seed=seed),
        lh_bound=mu0 / 2 if full else mu0,
        max_divergence=sol.max_divergence(),
        tolerances=tol,
    )
