"""Variable-viscosity Stokes operators in Leray-projected Fourier space.

The unknown velocity lives in the span of ``exp(2 pi i k.y) b`` with
``b . (2 pi k + theta) = 0``.  Pressure never appears in the iteration; it is
read off afterwards from the longitudinal part of the residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .fourier import (
    CellGrid,
    ScalarField,
    _padded_nodal,
    _to_padded,
    _from_padded,
    padded_size,
    to_coeffs,
    to_nodal,
)

log = logging.getLogger(__name__)

Kind = Literal["full_gradient", "symmetrized"]
KINDS = ("full_gradient", "symmetrized")


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return kind


class SolverError(RuntimeError):
    """Iterative solve did not reach its tolerance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


def leray_project(coeffs: np.ndarray, g: np.ndarray, mean_direction=None) -> np.ndarray:
    """Remove the component of each mode along ``g``.

    Where ``g`` vanishes the component along ``mean_direction`` is removed
    instead, or the whole mode if no direction is given.
    """
    g2 = np.sum(g * g, axis=0)
    zero = g2 == 0
    safe = np.where(zero, 1.0, g2)
    out = coeffs - g * (np.sum(g * coeffs, axis=0) / safe)
    if np.any(zero):
        if mean_direction is None:
            out[:, zero] = 0
        else:
            e = np.asarray(mean_direction, dtype=float)
            v = coeffs[:, zero]
            out[:, zero] = v - e[:, None] * np.tensordot(e, v, axes=1)
    return out


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float
    history: list = field(default_factory=list, repr=False)


def pcg(apply: Callable, rhs: np.ndarray, precond: Callable, tol: float, maxiter: int) -> tuple[np.ndarray, SolveInfo]:
    """Preconditioned conjugate gradients for a Hermitian positive operator.

    Stops on ``||r|| <= tol * ||rhs||`` (plain l2 of the coefficients, i.e.
    the L2 norm of the projected residual).  Raises :class:`SolverError` when
    the iteration cap is hit.
    """
    bnorm = np.linalg.norm(rhs)
    x = np.zeros_like(rhs)
    if bnorm == 0:
        return x, SolveInfo(0, 0.0, [0.0])
    r = rhs.copy()
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    history = [1.0]
    for it in range(1, maxiter + 1):
        Ap = apply(p)
        curv = np.vdot(p, Ap).real
        if not curv > 0:
            raise SolverError(f"nonpositive curvature {curv:.3e} at iteration {it}", history)
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if it % 25 == 0:
            # guard against drift of the recursive residual
            r = rhs - apply(x)
            rel = np.linalg.norm(r) / bnorm
        history.append(rel)
        if rel <= tol:
            r_true = np.linalg.norm(rhs - apply(x)) / bnorm
            if r_true <= tol:
                return x, SolveInfo(it, r_true, history)
            r = rhs - apply(x)
        z = precond(r)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"PCG did not converge in {maxiter} iterations (residual {history[-1]:.3e}, tol {tol:.1e})",
        history,
    )


class StokesOperator:
    """``u -> P[-D(theta).(mu D(theta) u)]`` (or with the symmetric gradient).

    Parameters
    ----------
    mu : ScalarField
        Real viscosity on ``grid``.
    kind : {"full_gradient", "symmetrized"}
    theta : array_like, optional
        Shift vector; ``None`` means the unshifted real-field setting, where
        the mean mode and the Nyquist modes are held at zero.
    mean_direction : array_like, optional
        For shifted problems, the direction removed from the mean mode.
    """

    def __init__(self, mu: ScalarField, kind: Kind = "full_gradient", theta=None, mean_direction=None):
        self.mu = mu
        self.grid: CellGrid = mu.grid
        self.kind = check_kind(kind)
        self.theta = None if theta is None else np.asarray(theta, dtype=float)
        self.real_space = self.theta is None
        self.g = self.grid.wavevectors(self.theta)
        self.mean_direction = mean_direction
        self.m = padded_size(self.grid.n)
        self._mu_big = _padded_nodal(mu)
        self.mu_mean = float(np.real(mu.mean))
        g2 = np.sum(self.g**2, axis=0)
        # constant-coefficient symbol on divergence-free fields
        scale = self.mu_mean if self.kind == "full_gradient" else 0.5 * self.mu_mean
        with np.errstate(divide="ignore"):
            inv = np.where(g2 > 0, 1.0 / (scale * np.where(g2 > 0, g2, 1.0)), 0.0)
        if self.real_space:
            inv[self.grid.nyquist_mask] = 0.0
        self._inv_symbol = inv

    # -- projections ---------------------------------------------------------
    def project(self, coeffs: np.ndarray) -> np.ndarray:
        out = leray_project(coeffs, self.g, None if self.real_space else self.mean_direction)
        if self.real_space:
            out[:, self.grid.nyquist_mask] = 0
        return out

    # -- fluxes --------------------------------------------------------------
    def strain(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients of D(theta)u (or E(theta)u), shape (d, d, ...)."""
        G = 1j * self.g[:, None] * coeffs[None, :]
        if self.kind == "symmetrized":
            G = 0.5 * (G + np.swapaxes(G, 0, 1))
        return G

    def flux(self, strain_coeffs: np.ndarray) -> np.ndarray:
        """Coefficients of mu * strain, dealiased."""
        big = _to_padded(strain_coeffs, self.grid, self.m)
        prod = to_coeffs(to_nodal(big, self.grid.d) * self._mu_big, self.grid.d)
        return _from_padded(prod, self.grid, self.m)

    def divergence(self, matrix_coeffs: np.ndarray) -> np.ndarray:
        return np.sum(1j * self.g[:, None] * matrix_coeffs, axis=0)

    def unprojected(self, coeffs: np.ndarray, extra_strain=None) -> np.ndarray:
        """``-D.(mu (D u + extra_strain))`` before projection."""
        S = self.strain(coeffs)
        if extra_strain is not None:
            S = S + extra_strain
        out = -self.divergence(self.flux(S))
        if self.real_space:
            out[:, self.grid.nyquist_mask] = 0
        return out

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        return self.project(self.unprojected(coeffs))

    def precondition(self, coeffs: np.ndarray) -> np.ndarray:
        return self._inv_symbol * coeffs

    def energy(self, coeffs: np.ndarray, extra_strain=None) -> float:
        """``integral mu |strain|^2`` as a sum of nonnegative nodal terms."""
        S = self.strain(coeffs)
        if extra_strain is not None:
            S = S + extra_strain
        big = to_nodal(_to_padded(S, self.grid, self.m), self.grid.d)
        w = np.sum(np.abs(big) ** 2, axis=(0, 1))
        return float(np.sum(self._mu_big * w) / self.m**self.grid.d)

    # -- solve ---------------------------------------------------------------
    def solve(self, rhs: np.ndarray, tol: float = 1e-11, maxiter: int = 2000):
        """Solve ``apply(u) = P rhs`` on the projected space."""
        b = self.project(rhs)
        if np.linalg.norm(b) <= 1e-15 * np.linalg.norm(rhs):
            # purely longitudinal forcing: balanced by pressure alone
            return np.zeros_like(b), SolveInfo(0, 0.0, [0.0])
        x, info = pcg(
            lambda v: self.apply(v.reshape(b.shape)).ravel(),
            b.ravel(),
            lambda v: self.precondition(v.reshape(b.shape)).ravel(),
            tol,
            maxiter,
        )
        log.debug("PCG converged in %d iterations, residual %.2e", info.iterations, info.residual)
        return x.reshape(b.shape), info

    def pressure_from_residual(self, residual: np.ndarray) -> np.ndarray:
        """Mean-zero ``p`` with ``residual = -D(theta) p`` on the nonzero modes."""
        g2 = np.sum(self.g**2, axis=0)
        safe = np.where(g2 > 0, g2, 1.0)
        p = 1j * np.sum(self.g * residual, axis=0) / safe
        p[g2 == 0] = 0
        p[(0,) * self.grid.d] = 0
        if self.real_space:
            p[self.grid.nyquist_mask] = 0
        return p


def divfree_frames(g: np.ndarray, fallback_direction=None) -> np.ndarray:
    """Real orthonormal frames of the plane orthogonal to ``g`` at every mode.

    Parameters
    ----------
    g : ndarray, shape (d, ...)
        Wavevectors ``2 pi k + theta``.
    fallback_direction : array_like, optional
        Used in place of ``g`` where ``g`` vanishes; defaults to ``e_1``.

    Returns
    -------
    ndarray, shape (d - 1, d, ...)
        ``frames[j]`` is the j-th unit vector field.  In 2D the single vector
        is ``g`` rotated by +90 degrees.  In 3D the first vector is the
        normalized projection of the coordinate axis along which ``|g_j|`` is
        smallest (first such axis on ties), the second is ``g_hat x b1``.
    """
    d = g.shape[0]
    norm = np.sqrt(np.sum(g * g, axis=0))
    zero = norm == 0
    fb = np.zeros(d) if fallback_direction is None else np.asarray(fallback_direction, dtype=float)
    if fallback_direction is None:
        fb[0] = 1.0
    ghat = g / np.where(zero, 1.0, norm)
    ghat = np.where(zero, fb.reshape((d,) + (1,) * (g.ndim - 1)), ghat)
    if d == 2:
        return np.stack([np.stack([-ghat[1], ghat[0]])])
    j = np.argmin(np.abs(ghat), axis=0)
    e = np.stack([(j == i).astype(float) for i in range(d)])
    b1 = e - ghat * np.sum(e * ghat, axis=0)
    b1 /= np.sqrt(np.sum(b1 * b1, axis=0))
    b2 = np.cross(ghat, b1, axis=0)
    return np.stack([b1, b2])
