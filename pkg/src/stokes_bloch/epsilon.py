"""Oscillating-coefficient Stokes on the unit torus and its homogenized limit.

The fine problem is

    -div(mu(x / eps) grad u) + grad p = f,   div u = 0,

on the unit torus with mean-zero ``u``, ``p`` and ``f``; ``1 / eps`` is an
integer so the coefficient is exactly periodic.  The limit problem has the
constant tensor ``A`` and is solved mode by mode.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fourier import CellGrid, ScalarField, VectorField, ViscosityModel, make_grid, sample_viscosity
from .operators import Kind, StokesOperator, check_kind
from .tensors import HomTensor, identity_tensor

log = logging.getLogger(__name__)

__all__ = [
    "EpsProblem",
    "EpsSolution",
    "ConvergenceReport",
    "shear_forcing",
    "mixed_forcing",
    "FORCINGS",
    "solve_eps",
    "solve_homogenized",
    "convergence_study",
    "weighted_pressure_norm",
]


def shear_forcing(x: np.ndarray) -> np.ndarray:
    """``f = (sin 2 pi x_2, sin 2 pi x_1)`` in 2D; cyclic analogue in 3D.

    Mean-zero and divergence-free.
    """
    d = x.shape[0]
    return np.stack([np.sin(2 * np.pi * x[(i + 1) % d]) for i in range(d)])


def mixed_forcing(x: np.ndarray) -> np.ndarray:
    """:func:`shear_forcing` plus ``cos(2 pi (x_1 + x_2)) e_1``.

    The added term has a gradient part, so the limit pressure is nonzero and
    the pressure bounds along an eps ladder are informative.
    """
    f = shear_forcing(x)
    f[0] = f[0] + np.cos(2 * np.pi * (x[0] + x[1]))
    return f


FORCINGS = {"shear": shear_forcing, "mixed": mixed_forcing}


@dataclass(frozen=True)
class EpsProblem:
    """Fine-scale problem with ``eps = 1 / n_eps`` and ``n_eps * n_cell`` nodes per axis."""

    model: ViscosityModel
    n_eps: int
    d: int = 2
    n_cell: int = 16
    kind: str = "full_gradient"
    forcing: Callable[[np.ndarray], np.ndarray] = mixed_forcing

    def __post_init__(self):
        check_kind(self.kind)
        if int(self.n_eps) != self.n_eps or self.n_eps < 1:
            raise ValueError("1/eps must be a positive integer")
        if self.n_cell < 8:
            raise ValueError("need at least 8 nodes per period of mu(x/eps)")

    @property
    def eps(self) -> float:
        return 1.0 / self.n_eps

    @property
    def n_fine(self) -> int:
        return self.n_eps * self.n_cell

    @property
    def grid(self) -> CellGrid:
        return make_grid(self.d, self.n_fine)

    def forcing_coeffs(self, grid: CellGrid | None = None) -> np.ndarray:
        grid = grid or self.grid
        f = VectorField.from_nodal(grid, self.forcing(grid.nodes))
        c = np.array(f.coeffs)
        mean = c[(slice(None),) + (0,) * grid.d]
        if np.max(np.abs(mean)) > 1e-12 * max(1.0, np.max(np.abs(c))):
            raise ValueError("forcing must have zero mean")
        c[(slice(None),) + (0,) * grid.d] = 0
        return c


@dataclass(frozen=True, eq=False)
class EpsSolution:
    u: VectorField
    p: ScalarField
    iterations: int
    residual: float
    max_divergence: float
    stress_mean_modes: np.ndarray | None = field(default=None, repr=False)


def _real_part(c: np.ndarray, d: int) -> np.ndarray:
    axes = tuple(range(c.ndim - d, c.ndim))
    return 0.5 * (c + np.conj(np.roll(np.flip(c, axis=axes), 1, axis=axes)))


def solve_eps(problem: EpsProblem, *, tol: float = 1e-11, maxiter: int = 5000) -> EpsSolution:
    """Velocity and pressure of the oscillating problem on the fine grid.

    Raises
    ------
    SolverError
        With the residual history if PCG does not converge.
    """
    grid = problem.grid
    d = grid.d
    mu = sample_viscosity(problem.model, grid, scale=problem.n_eps)
    op = StokesOperator(mu, problem.kind)
    f = problem.forcing_coeffs(grid)
    u, info = op.solve(f, tol=tol, maxiter=maxiter)
    u = _real_part(u, d)
    r = op.unprojected(u) - f
    rel = float(np.linalg.norm(op.project(r)) / max(np.linalg.norm(op.project(f)), 1e-300))
    p = _real_part(op.pressure_from_residual(r), d)
    div = float(np.max(np.abs(np.sum(1j * op.g * u, axis=0))))
    stress = op.flux(op.strain(u))
    return EpsSolution(VectorField(grid, u, real=True), ScalarField(grid, p, real=True), info.iterations, rel, div, stress)


def solve_homogenized(A: HomTensor, f_coeffs: np.ndarray, grid: CellGrid) -> tuple[VectorField, ScalarField]:
    """Constant-tensor Stokes solve, one ``(d + 1)``-system per mode.

    Mode ``xi = 2 pi m`` solves ``L u + i xi p = f``, ``xi . u = 0`` with
    ``L[l, k] = A[k, l, a, b] xi_a xi_b``.  The mean and Nyquist modes are
    set to zero.

    Raises
    ------
    ValueError
        If some mode system is singular (Legendre-Hadamard fails).
    """
    d = grid.d
    E = A.entries
    xi = grid.wavevectors().reshape(d, -1).T  # (N, d)
    keep = ~grid.nyquist_mask.ravel()
    keep[0] = False
    X = xi[keep]
    L = np.einsum("klab,na,nb->nlk", E, X, X)
    S = np.zeros((len(X), d + 1, d + 1), dtype=complex)
    S[:, :d, :d] = L
    S[:, :d, d] = 1j * X
    S[:, d, :d] = X
    F = np.zeros((len(X), d + 1), dtype=complex)
    F[:, :d] = np.asarray(f_coeffs).reshape(d, -1).T[keep]
    cond = np.linalg.cond(S)
    if not np.all(np.isfinite(cond)) or np.max(cond) > 1e14:
        raise ValueError("homogenized mode system is singular; tensor fails Legendre-Hadamard")
    sol = np.linalg.solve(S, F[..., None])[..., 0]
    u = np.zeros((d, grid.size), dtype=complex)
    p = np.zeros(grid.size, dtype=complex)
    u[:, keep] = sol[:, :d].T
    p[keep] = sol[:, d]
    return VectorField(grid, u.reshape((d,) + grid.shape)), ScalarField(grid, p.reshape(grid.shape))


def weighted_pressure_norm(p_coeffs: np.ndarray, grid: CellGrid) -> float:
    """``(sum_{k != 0} |p(k)|^2 / |2 pi k|^2)^(1/2)``."""
    g2 = np.sum(grid.wavevectors() ** 2, axis=0)
    w = np.where(g2 > 0, 1.0 / np.where(g2 > 0, g2, 1.0), 0.0)
    return float(np.sqrt(np.sum(w * np.abs(p_coeffs) ** 2)))


@dataclass(frozen=True)
class ConvergenceReport:
    """Errors of the fine solutions against the homogenized and naive limits."""

    eps: tuple
    err_u: tuple
    err_p: tuple
    err_naive: tuple
    u_norms: tuple
    p_norms: tuple
    iterations: tuple
    stress_low_mode_error: tuple
    slope: float
    naive_plateau: float
    monotone: bool

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ValueError("eps ladder must be strictly decreasing")

    @property
    def bounded(self) -> bool:
        """Uniform bound: the largest norm is at most twice the smallest."""
        return max(self.u_norms) <= 2 * min(self.u_norms) and max(self.p_norms) <= 2 * min(self.p_norms)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "err_u", "err_p", "err_naive"])
        for row in zip(self.eps, self.err_u, self.err_p, self.err_naive):
            w.writerow([f"{x:.17g}" for x in row])
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "eps": list(self.eps),
            "err_u": list(self.err_u),
            "err_p": list(self.err_p),
            "err_naive": list(self.err_naive),
            "u_norms": list(self.u_norms),
            "p_norms": list(self.p_norms),
            "iterations": list(self.iterations),
            "stress_low_mode_error": list(self.stress_low_mode_error),
            "slope": self.slope,
            "naive_plateau": self.naive_plateau,
            "monotone": self.monotone,
            "bounded": self.bounded,
        }


def _low_modes(coeffs: np.ndarray, grid: CellGrid, cutoff: int) -> np.ndarray:
    mask = np.all(np.abs(grid.modes) <= cutoff, axis=0)
    return coeffs[..., mask]


def convergence_study(
    model: ViscosityModel,
    A: HomTensor,
    eps_ladder=(1 / 2, 1 / 4, 1 / 8, 1 / 16),
    *,
    d: int = 2,
    n_cell: int = 16,
    kind: Kind = "full_gradient",
    forcing: Callable = mixed_forcing,
    jobs: int = 1,
) -> ConvergenceReport:
    """Solve the fine problem for each ``eps`` and compare with the limits.

    The homogenized limit uses ``A``; the naive limit uses the mean viscosity
    times the identity tensor.  The stress diagnostic compares the low modes
    (``|k_j| <= 1``) of ``mu(x / eps) grad u_eps`` with ``A : grad u``.
    """
    n_list = [int(round(1 / e)) for e in eps_ladder]
    if any(abs(1 / n - e) > 1e-12 for n, e in zip(n_list, eps_ladder)):
        raise ValueError("every eps must be the reciprocal of an integer")
    problems = [EpsProblem(model, n, d, n_cell, kind, forcing) for n in n_list]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            sols = list(pool.map(solve_eps, problems))
    else:
        sols = [solve_eps(p) for p in problems]

    mean_mu = float(np.real(sample_viscosity(model, make_grid(d, n_cell)).mean))
    naive = HomTensor(mean_mu * identity_tensor(d), kind)
    err_u, err_p, err_n, un, pn, stress = [], [], [], [], [], []
    for prob, s in zip(problems, sols):
        grid = prob.grid
        f = prob.forcing_coeffs(grid)
        u, p = solve_homogenized(A, f, grid)
        un_, _ = solve_homogenized(naive, f, grid)
        err_u.append(float(np.linalg.norm(s.u.coeffs - u.coeffs)))
        err_p.append(weighted_pressure_norm(s.p.coeffs - p.coeffs, grid))
        err_n.append(float(np.linalg.norm(s.u.coeffs - un_.coeffs)))
        un.append(s.u.norm())
        pn.append(s.p.norm())
        # limit stress sigma[b, l] = A[k, l, a, b] d_a u_k
        gu = 1j * grid.wavevectors()[:, None] * u.coeffs[None]  # [a, k, modes]
        sigma = np.einsum("klab,ak...->bl...", A.entries, gu)
        stress.append(
            float(np.max(np.abs(_low_modes(s.stress_mean_modes, grid, 1) - _low_modes(sigma, grid, 1))))
        )
    eps = np.array(eps_ladder, dtype=float)
    slope = float(np.polyfit(np.log(eps), np.log(err_u), 1)[0])
    monotone = all(b < a for a, b in zip(err_u, err_u[1:]))
    if not monotone:
        log.warning("non-monotone error ladder: %s", err_u)
    return ConvergenceReport(
        eps=tuple(float(x) for x in eps),
        err_u=tuple(err_u),
        err_p=tuple(err_p),
        err_naive=tuple(err_n),
        u_norms=tuple(un),
        p_norms=tuple(pn),
        iterations=tuple(s.iterations for s in sols),
        stress_low_mode_error=tuple(stress),
        slope=slope,
        naive_plateau=err_n[-1],
        monotone=monotone,
    )
