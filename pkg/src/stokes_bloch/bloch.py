"""Bottom of the Bloch spectrum of the shifted incompressible Stokes operator.

For a direction ``eta`` (unit vector) and ``delta >= 0`` the problem is

    -D.(mu D phi) + D q + q0 eta = lam phi,   D.phi = 0,   eta . mean(phi) = 0,

with ``D = D(delta eta)`` (or the shifted strain ``E`` for the symmetrized
kind).  Discretely ``phi`` is expanded in per-mode divergence-free frames, so
``q`` and ``q0`` drop out of the Hermitian eigenproblem and are recovered from
the residual afterwards.

The ``d - 1`` lowest eigenvalues vanish at ``delta = 0`` and grow like
``delta^2``; :func:`track_branches` follows them along a geometric ladder and
:func:`fit_derivatives` extracts ``lam'(0)`` and ``lam''(0) / 2``.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

from .fourier import CellGrid, ScalarField, VectorField, ShiftParameter
from .operators import Kind, StokesOperator, check_kind, divfree_frames
from .tensors import PropagationRecord

log = logging.getLogger(__name__)

__all__ = [
    "DivFreeBasis",
    "BlochEigenpairs",
    "BlochBranch",
    "FitResult",
    "DerivativeCheck",
    "build_divfree_basis",
    "assemble_shifted_operator",
    "shifted_spectrum",
    "lowest_branches",
    "recover_pressure",
    "track_branches",
    "fit_derivatives",
    "check_first_order_eigenfunction",
    "default_ladder",
    "branches_to_csv",
    "records_from_csv",
]

DENSE_LIMIT = 4096  # largest component for a full-spectrum request
SHIFT_INVERT_MIN = 512  # partial spectra of larger components use shift-invert Lanczos
DEFAULT_DELTA_MAX = 0.5
DEGENERACY_GAP = 1e-12
CLUSTER_RTOL = 1e-9
TRANSVERSE_TOL = 1e-9


def default_ladder(delta0: float = 0.1, levels: int = 6) -> np.ndarray:
    """``delta0 * 2^-j`` for ``j = 0..levels``."""
    return delta0 * 0.5 ** np.arange(levels + 1)


# --------------------------------------------------------------------------
# basis and matrix
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DivFreeBasis:
    """Per-mode orthonormal frames orthogonal to ``2 pi k + delta eta``.

    ``frames`` has shape ``(d - 1, d, n, ..., n)``.  At ``k = 0`` the frame is
    orthogonal to ``eta`` for every ``delta`` (the mean constraint).
    """

    grid: CellGrid
    shift: ShiftParameter
    frames: np.ndarray
    g: np.ndarray

    @property
    def size(self) -> int:
        return (self.grid.d - 1) * self.grid.size

    @property
    def theta(self) -> np.ndarray:
        return self.shift.theta

    @property
    def direction(self) -> np.ndarray:
        return np.asarray(self.shift.direction)

    def to_coeffs(self, a: np.ndarray) -> np.ndarray:
        """Field coefficients ``(d, n, ..., n)`` from unknowns ordered ``j * n^d + mode``."""
        d = self.grid.d
        a = np.asarray(a).reshape(d - 1, *self.grid.shape)
        return np.einsum("jc...,j...->c...", self.frames, a)

    def from_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("jc...,c...->j...", self.frames, coeffs).ravel()


def build_divfree_basis(grid: CellGrid, direction, delta: float) -> DivFreeBasis:
    """Deterministic divergence-free frames for the shift ``delta * direction``.

    The mean mode uses ``direction`` as its normal for every ``delta``, which
    for ``delta > 0`` coincides with the wavevector ``delta * direction``.
    """
    shift = ShiftParameter(tuple(direction), float(delta))
    g = grid.wavevectors(shift.theta)
    g0 = g[(slice(None),) + (0,) * grid.d].copy()
    g[(slice(None),) + (0,) * grid.d] = 0.0  # the mean frame is fixed by eta
    frames = divfree_frames(g, shift.direction)
    g[(slice(None),) + (0,) * grid.d] = g0
    frames.flags.writeable = False
    g.flags.writeable = False
    return DivFreeBasis(grid, shift, frames, g)


def _offset_coefficients(mu: ScalarField, rtol: float = 1e-14):
    """Nonzero coefficients of the dealiased interpolant of ``mu`` by offset.

    A coefficient at ``-n/2`` along some axis is shared equally between
    ``+n/2`` and ``-n/2``, matching the padded nodal products.
    """
    grid = mu.grid
    n, d = grid.n, grid.d
    c = np.asarray(mu.coeffs)
    cutoff = rtol * np.max(np.abs(c))
    out = []
    for idx in zip(*np.nonzero(np.abs(c) > cutoff)):
        m = grid.freqs[list(idx)]
        weight = 1.0
        choices = []
        for mj in m:
            if mj == -n // 2:
                weight *= 0.5
                choices.append((-n // 2, n // 2))
            else:
                choices.append((mj,))
        val = c[idx] * weight
        for combo in np.array(np.meshgrid(*choices, indexing="ij")).reshape(d, -1).T:
            out.append((tuple(int(x) for x in combo), val))
    return out


def assemble_shifted_operator(mu: ScalarField, basis: DivFreeBasis, kind: Kind = "full_gradient") -> sp.csr_matrix:
    """Sparse Hermitian Galerkin matrix of ``mean(mu D phi : conj(D psi))``.

    Unknowns are ordered ``j * n^d + flat_mode`` with ``j`` the frame index.
    """
    check_kind(kind)
    grid = basis.grid
    d, N = grid.d, grid.size
    K = grid.modes.reshape(d, N).T  # (N, d)
    G = basis.g.reshape(d, N).T  # (N, d)
    B = basis.frames.reshape(d - 1, d, N).transpose(2, 0, 1)  # (N, d-1, d)
    lo, hi = -grid.n // 2, grid.n // 2 - 1
    rows, cols, vals = [], [], []
    jj = np.arange(d - 1)
    for m, c in _offset_coefficients(mu):
        target = K + np.asarray(m)
        ok = np.all((target >= lo) & (target <= hi), axis=1)
        src = np.flatnonzero(ok)
        dst = grid.flat_index(target[ok])
        gg = np.einsum("nc,nc->n", G[dst], G[src])
        block = gg[:, None, None] * np.einsum("nic,njc->nij", B[dst], B[src])
        if kind == "symmetrized":
            bg = np.einsum("nic,nc->ni", B[dst], G[src])  # B_{k'} . g_k
            gb = np.einsum("nc,njc->nj", G[dst], B[src])  # g_{k'} . B_k
            block = 0.5 * (block + bg[:, :, None] * gb[:, None, :])
        block = c * block
        r = (jj[None, :, None] * N + dst[:, None, None]) + 0 * jj[None, None, :]
        q = (jj[None, None, :] * N + src[:, None, None]) + 0 * jj[None, :, None]
        rows.append(r.ravel())
        cols.append(q.ravel())
        vals.append(block.ravel())
    size = (d - 1) * N
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()
    H.sum_duplicates()
    return H


def _components(H: sp.csr_matrix):
    pattern = sp.csr_matrix((np.ones(H.nnz), H.indices, H.indptr), shape=H.shape)
    ncomp, labels = connected_components(pattern, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(ncomp + 1))
    return [order[bounds[i] : bounds[i + 1]] for i in range(ncomp)]


def _solve_components(H: sp.csr_matrix, count: int | None, sigma: float):
    """Eigenpairs per connected component: ``[(vals, vecs, idx), ...]``.

    ``count=None`` asks for the full spectrum (dense components only).
    Components of equal size are diagonalized in one batched call.
    """
    comps = _components(H)
    out = []
    by_size: dict[int, list] = {}
    for idx in comps:
        by_size.setdefault(idx.size, []).append(idx)
    for size, group in sorted(by_size.items()):
        if count is None and size > DENSE_LIMIT:
            raise ValueError(f"full spectrum requested for a {size}-dimensional component")
        if count is not None and size > SHIFT_INVERT_MIN:
            for idx in group:
                Hc = H[idx][:, idx].tocsc()
                k = min(count, size - 2)
                w, v = eigsh(Hc, k=k, sigma=sigma, which="LM")
                o = np.argsort(w)
                out.append((w[o], v[:, o], idx))
            continue
        idx_all = np.stack(group)
        if size > 64 and count is not None and count < size:
            for idx in group:
                Hc = H[idx][:, idx].toarray()
                w, v = sla.eigh(Hc, subset_by_index=[0, min(count, size) - 1], driver="evr")
                out.append((w, v, idx))
            continue
        blocks = np.stack([H[idx][:, idx].toarray() for idx in group]) if size > 1 else None
        if size == 1:
            diag = H.diagonal()[idx_all[:, 0]]
            for i, idx in enumerate(group):
                out.append((np.array([diag[i].real]), np.ones((1, 1), dtype=complex), idx))
            continue
        w, v = np.linalg.eigh(blocks)
        for i, idx in enumerate(group):
            keep = size if count is None else min(count, size)
            out.append((w[i, :keep], v[i, :, :keep], idx))
    return out


def shifted_spectrum(mu: ScalarField, basis: DivFreeBasis, kind: Kind = "full_gradient") -> np.ndarray:
    """All eigenvalues of the assembled operator, ascending (dense components only)."""
    H = assemble_shifted_operator(mu, basis, kind)
    parts = _solve_components(H, None, 0.0)
    return np.sort(np.concatenate([w for w, _, _ in parts]))


# --------------------------------------------------------------------------
# lowest eigenpairs and pressure recovery
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlochEigenpairs:
    """The ``count`` lowest eigenpairs at one shift.

    ``coeffs[m]`` are the Fourier coefficients of the L2-normalized
    eigenfunction ``phi_m``; ``eigenvalues`` are energy Rayleigh quotients.
    """

    shift: ShiftParameter
    kind: str
    eigenvalues: np.ndarray
    coeffs: np.ndarray
    matrix_eigenvalues: np.ndarray
    next_eigenvalue: float
    degenerate: bool
    grid: CellGrid

    @property
    def fields(self) -> list[VectorField]:
        return [VectorField(self.grid, c) for c in self.coeffs]

    @property
    def count(self) -> int:
        return len(self.eigenvalues)


def lowest_branches(
    mu: ScalarField,
    direction,
    delta: float,
    count: int | None = None,
    kind: Kind = "full_gradient",
    *,
    delta_max: float = DEFAULT_DELTA_MAX,
    basis: DivFreeBasis | None = None,
) -> BlochEigenpairs:
    """Lowest ``count`` (default ``d - 1``) eigenpairs at ``theta = delta * direction``.

    Eigenvalues are recomputed as ``mean(mu |D phi|^2)`` on the dealiasing
    grid, a sum of nonnegative terms, which keeps small eigenvalues accurate
    to relative roundoff.

    Raises
    ------
    ValueError
        If ``delta`` exceeds ``delta_max``.
    """
    check_kind(kind)
    grid = mu.grid
    count = grid.d - 1 if count is None else count
    if delta > delta_max:
        raise ValueError(f"delta = {delta} exceeds delta_max = {delta_max}")
    basis = basis or build_divfree_basis(grid, direction, delta)
    H = assemble_shifted_operator(mu, basis, kind)
    sigma = -0.01 * float(np.real(mu.mean))
    parts = _solve_components(H, count + 1, sigma)
    cand = [(w[i], c, i) for c, (w, _, _) in enumerate(parts) for i in range(len(w))]
    cand.sort(key=lambda t: (t[0], t[1], t[2]))
    chosen = cand[:count]
    rest = cand[count].__getitem__(0) if len(cand) > count else np.inf
    vecs = np.zeros((count, H.shape[0]), dtype=complex)
    for m, (_, c, i) in enumerate(chosen):
        w, v, idx = parts[c]
        vecs[m, idx] = v[:, i]
    mat_vals = np.array([t[0] for t in chosen])
    coeffs = np.stack([basis.to_coeffs(v) for v in vecs])
    op = StokesOperator(mu, kind, basis.theta, basis.direction)
    lam = np.array([op.energy(c) / np.sum(np.abs(c) ** 2) for c in coeffs])
    allv = np.append(mat_vals, rest)
    gaps = np.diff(allv)
    degenerate = bool(np.any(gaps < DEGENERACY_GAP * np.maximum(1.0, np.abs(allv[1:]))))
    if degenerate:
        log.info("near-degenerate eigenvalues at delta=%g: %s", delta, allv)
    return BlochEigenpairs(basis.shift, kind, lam, coeffs, mat_vals, float(rest), degenerate, grid)


def recover_pressure(
    phi: VectorField,
    lam: float,
    mu: ScalarField,
    direction,
    delta: float,
    kind: Kind = "full_gradient",
    *,
    tol: float = TRANSVERSE_TOL,
):
    """Eigenpressure ``q`` (mean-zero) and multiplier ``q0`` of an eigenpair.

    The residual ``r = -D.(mu D phi) - lam phi`` must equal
    ``-D q - q0 eta``; ``q`` is read off mode by mode and
    ``q0 = -r(0) . eta``.  Returns ``(q, q0, transverse)`` where
    ``transverse`` is the largest residual component that neither term can
    absorb.

    Raises
    ------
    ValueError
        If ``delta <= 0`` or the transverse residual exceeds ``tol``.
    """
    if delta <= 0:
        raise ValueError("pressure recovery needs delta > 0")
    e = np.asarray(direction, dtype=float)
    theta = delta * e
    op = StokesOperator(mu, kind, theta, e)
    c = np.asarray(phi.coeffs)
    r = op.unprojected(c) - lam * c
    q = op.pressure_from_residual(r)
    z = (slice(None),) + (0,) * mu.grid.d
    q0 = complex(-np.dot(r[z], e))
    explained = -1j * op.g * q[None]
    explained[z] = -q0 * e
    transverse = float(np.max(np.abs(r - explained)))
    if transverse > tol:
        raise ValueError(f"inconsistent eigenpair: transverse residual {transverse:.3e} > {tol:.1e}")
    return ScalarField(mu.grid, q), q0, transverse


# --------------------------------------------------------------------------
# branch tracking
# --------------------------------------------------------------------------


def _mean_part(coeffs: np.ndarray, d: int) -> np.ndarray:
    return coeffs[(Ellipsis, slice(None)) + (0,) * d]


def _gram(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``G[m, n] = <b_n, a_m>`` over stacked coefficient arrays."""
    return a.reshape(len(a), -1).conj() @ b.reshape(len(b), -1).T


def _polar(M: np.ndarray) -> np.ndarray:
    U, _, Vh = np.linalg.svd(M)
    return U @ Vh


def _clusters(values: np.ndarray) -> list[list[int]]:
    out = [[0]]
    for i in range(1, len(values)):
        scale = max(abs(values[i]), abs(values[i - 1]), 1e-300)
        if abs(values[i] - values[i - 1]) <= CLUSTER_RTOL * scale:
            out[-1].append(i)
        else:
            out.append([i])
    return out


def _initial_gauge(coeffs: np.ndarray, values: np.ndarray, d: int) -> np.ndarray:
    """Make the mean parts as real as possible, with a deterministic sign.

    A single vector is rotated by ``exp(-i a)`` with ``a = arg(sum v_j^2) / 2``;
    a cluster is rotated onto the best real subspace of its mean parts.
    """
    out = coeffs.copy()
    for cl in _clusters(values):
        V = np.stack([_mean_part(coeffs[m], d) for m in cl], axis=1)  # (d, s)
        if len(cl) == 1:
            v = V[:, 0]
            a = 0.5 * np.angle(np.sum(v * v))
            U = np.array([[np.exp(-1j * a)]])
        else:
            # real s-dimensional subspace closest to span(V), then rotate onto it
            R = np.concatenate([V.real, V.imag], axis=1)
            Ur, _, _ = np.linalg.svd(R, full_matrices=False)
            target = Ur[:, : len(cl)]
            U = _polar(V.conj().T @ target)
        W = np.einsum("m...,mn->n...", coeffs[cl], U)
        for j, m in enumerate(cl):
            w = W[j]
            mean = _mean_part(w, d)
            k = int(np.argmax(np.abs(mean)))
            if mean[k].real < 0:
                w = -w
            out[m] = w
    return out


def _align(prev: np.ndarray, cur: np.ndarray, values: np.ndarray, d: int):
    """Permute and rotate ``cur`` onto ``prev``.

    Returns ``(aligned, order, min_overlap)``; ``order[m]`` is the index in
    ``cur`` matched to branch ``m``.
    """
    O = _gram(prev, cur)
    _, order = linear_sum_assignment(-np.abs(O))
    cur = cur[order]
    values = values[order]
    out = cur.copy()
    overlaps = []
    for cl in _clusters(values):
        if len(cl) > 1:
            # inside a cluster only the subspace is defined
            Pm = np.stack([_mean_part(prev[m], d) for m in cl], axis=1)
            Cm = np.stack([_mean_part(cur[m], d) for m in cl], axis=1)
            U = _polar(Cm.conj().T @ Pm)
            W = np.einsum("m...,mn->n...", cur[cl], U)
            for j, m in enumerate(cl):
                out[m] = W[j]
            S = np.linalg.svd(_gram(prev[cl], cur[cl]), compute_uv=False)
            overlaps.append(float(S.min()))
        else:
            m = cl[0]
            ov = np.vdot(_mean_part(out[m], d), _mean_part(prev[m], d))
            out[m] = out[m] * np.exp(1j * np.angle(ov))
            overlaps.append(float(abs(O[m, order[m]])))
    min_overlap = min(overlaps)
    return out, order, min_overlap


@dataclass(frozen=True)
class FitResult:
    """Pinned-intercept polynomial fit ``y(delta) ~ sum_{p=1}^{degree} c_p delta^p``."""

    coefficients: tuple
    degree: int
    residual: float
    condition: float
    weighting: str

    @property
    def first(self) -> float:
        return self.coefficients[0]

    @property
    def half_second(self) -> float:
        return self.coefficients[1]


@dataclass(frozen=True, eq=False)
class BlochBranch:
    """Tracked bottom branches along one direction.

    Arrays are indexed ``[sample, branch]``; samples follow ``deltas``
    (strictly decreasing).  ``coeffs[j, m]`` and ``pressures[j, m]`` are the
    gauge-aligned eigenfunction and eigenpressure coefficients.
    """

    direction: tuple
    kind: str
    grid: CellGrid
    deltas: np.ndarray
    eigenvalues: np.ndarray
    q0: np.ndarray
    coeffs: np.ndarray
    pressures: np.ndarray
    overlaps: np.ndarray
    degenerate: bool
    crossing: bool
    phi0: np.ndarray
    transverse: np.ndarray
    lambda_fits: tuple = ()
    q0_fits: tuple = ()

    @property
    def count(self) -> int:
        return self.eigenvalues.shape[1]

    def field(self, j: int, m: int) -> VectorField:
        return VectorField(self.grid, self.coeffs[j, m])

    def pressure(self, j: int, m: int) -> ScalarField:
        return ScalarField(self.grid, self.pressures[j, m])

    @property
    def max_q0_imag(self) -> float:
        return float(np.max(np.abs(self.q0.imag)))

    def propagation_records(self) -> list[PropagationRecord]:
        if not self.lambda_fits:
            raise ValueError("fit_derivatives has not been run on this branch")
        return [
            PropagationRecord(
                self.direction,
                m + 1,
                tuple(self.phi0[m]),
                self.lambda_fits[m].half_second,
                self.q0_fits[m].half_second,
            )
            for m in range(self.count)
        ]


def _limit_vectors(coeffs: np.ndarray, deltas: np.ndarray, direction: np.ndarray, d: int) -> np.ndarray:
    """Limit mean vectors by Richardson extrapolation over the two smallest deltas.

    The real part of the gauge-fixed mean component differs from its limit
    by ``O(delta^2)``.  The extrapolated vectors are made orthogonal to
    ``direction`` and then orthonormalized symmetrically.
    """
    v1 = _mean_part(coeffs[-1], d).real
    if len(deltas) >= 2:
        v2 = _mean_part(coeffs[-2], d).real
        r = (deltas[-2] / deltas[-1]) ** 2
        v = (r * v1 - v2) / (r - 1)
    else:
        v = v1
    v = v - np.outer(v @ direction, direction)
    U, _, Vh = np.linalg.svd(v.T, full_matrices=False)
    return (U @ Vh).T


def track_branches(
    mu: ScalarField,
    direction,
    deltas=None,
    kind: Kind = "full_gradient",
    *,
    jobs: int = 1,
    delta_max: float = DEFAULT_DELTA_MAX,
    count: int | None = None,
) -> BlochBranch:
    """Compute and match the bottom branches over a decreasing ``delta`` ladder.

    Consecutive samples are matched by maximal eigenfunction overlap and
    rotated so that the mean-mode inner product with the previous sample is
    real and positive.  An overlap below 0.5 marks the branch as crossing.
    """
    check_kind(kind)
    e = np.asarray(direction, dtype=float)
    d = mu.grid.d
    deltas = default_ladder() if deltas is None else np.asarray(deltas, dtype=float)
    if len(deltas) < 1 or np.any(deltas <= 0) or np.any(np.diff(deltas) >= 0):
        raise ValueError("delta ladder must be positive and strictly decreasing")

    def run(delta):
        return lowest_branches(mu, e, float(delta), count, kind, delta_max=delta_max)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(run, deltas))
    else:
        samples = [run(x) for x in deltas]

    lam = [samples[0].eigenvalues]
    vecs = [_initial_gauge(samples[0].coeffs, samples[0].eigenvalues, d)]
    overlaps = [1.0]
    for s in samples[1:]:
        aligned, order, ov = _align(vecs[-1], s.coeffs, s.eigenvalues, d)
        vecs.append(aligned)
        lam.append(s.eigenvalues[order])
        overlaps.append(ov)
    vecs = np.stack(vecs)
    lam = np.stack(lam)
    crossing = min(overlaps) < 0.5
    if crossing:
        log.warning("branch overlap %.3f below 0.5 along %s", min(overlaps), e)

    pres = np.empty((len(deltas), vecs.shape[1]) + mu.grid.shape, dtype=complex)
    q0 = np.empty(lam.shape, dtype=complex)
    transverse = np.empty(lam.shape)
    for j, delta in enumerate(deltas):
        for m in range(vecs.shape[1]):
            q, q0[j, m], transverse[j, m] = recover_pressure(
                VectorField(mu.grid, vecs[j, m]), lam[j, m], mu, e, delta, kind
            )
            pres[j, m] = q.coeffs
    return BlochBranch(
        direction=tuple(e),
        kind=kind,
        grid=mu.grid,
        deltas=deltas,
        eigenvalues=lam,
        q0=q0,
        coeffs=vecs,
        pressures=pres,
        overlaps=np.array(overlaps),
        degenerate=any(s.degenerate for s in samples) or crossing,
        crossing=crossing,
        phi0=_limit_vectors(vecs, deltas, e, d),
        transverse=transverse,
    )


def _fit(deltas: np.ndarray, y: np.ndarray, degree: int, weighting: str) -> FitResult:
    if len(deltas) < max(4, degree):
        raise ValueError(f"need at least {max(4, degree)} samples for a degree-{degree} fit, got {len(deltas)}")
    V = np.stack([deltas**p for p in range(1, degree + 1)], axis=1)
    w = 1.0 / deltas**2 if weighting == "relative" else np.ones_like(deltas)
    Vw = V * w[:, None]
    # column scaling keeps the condition number meaningful
    scale = np.linalg.norm(Vw, axis=0)
    c, *_ = np.linalg.lstsq(Vw / scale, y * w, rcond=None)
    c = c / scale
    cond = float(np.linalg.cond(Vw / scale))
    resid = float(np.linalg.norm((V @ c - y) * w) / max(np.linalg.norm(y * w), 1e-300))
    return FitResult(tuple(float(x) for x in c), degree, resid, cond, weighting)


def fit_derivatives(branch: BlochBranch, degree: int = 5, weighting: str = "relative") -> BlochBranch:
    """Fit ``lam(delta)`` and ``Re q0(delta)`` with the intercept pinned at 0.

    ``degree`` 3 with ``weighting="uniform"`` is the plain cubic template.
    The default (degree 5, residuals relative to ``delta^2``) removes the
    quartic bias that dominates the cubic template on the standard ladder.
    """
    if weighting not in ("relative", "uniform"):
        raise ValueError("weighting must be 'relative' or 'uniform'")
    lf = tuple(_fit(branch.deltas, branch.eigenvalues[:, m], degree, weighting) for m in range(branch.count))
    qf = tuple(_fit(branch.deltas, branch.q0[:, m].real, degree, weighting) for m in range(branch.count))
    for f in lf + qf:
        if f.condition > 1e10:
            log.warning("ill-conditioned derivative fit (condition %.2e)", f.condition)
    return replace(branch, lambda_fits=lf, q0_fits=qf)


# --------------------------------------------------------------------------
# first-order eigenfunction check
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DerivativeCheck:
    """Finite-difference ``phi'`` and ``q'`` against their corrector predictions.

    ``computed``/``predicted`` are mean-zero coefficient arrays of ``phi'``;
    ``zeta`` is the mean (constant) part of the computed derivative.
    ``phase_drift`` is ``|Im <mean phi(delta), phi0>|`` after gauge fixing.
    """

    direction: tuple
    m: int
    delta: float
    scheme: str
    computed: np.ndarray
    predicted: np.ndarray
    zeta: np.ndarray
    residual: float
    pressure_computed: np.ndarray
    pressure_predicted: np.ndarray
    pressure_residual: float
    phase_drift: float

    @property
    def relative_residual(self) -> float:
        return self.residual / max(float(np.linalg.norm(self.predicted)), 1e-300)

    @property
    def relative_pressure_residual(self) -> float:
        return self.pressure_residual / max(float(np.linalg.norm(self.pressure_predicted)), 1e-300)


def _gauge_to(coeffs: np.ndarray, phi0: np.ndarray, values: np.ndarray, d: int) -> np.ndarray:
    """Rotate eigenfunctions so their mean parts have real positive overlap with ``phi0``."""
    out = coeffs.copy()
    O = np.einsum("mc,nc->mn", phi0, _mean_part(coeffs, d))  # <cur_n mean, phi0_m>, phi0 real
    _, order = linear_sum_assignment(-np.abs(O))
    coeffs, values = coeffs[order], values[order]
    for cl in _clusters(values):
        M = np.stack([_mean_part(coeffs[n], d) for n in cl], axis=1)  # (d, s)
        P = phi0[cl].T
        U = _polar(M.conj().T @ P)
        W = np.einsum("m...,mn->n...", coeffs[cl], U)
        for j, m in enumerate(cl):
            out[m] = W[j]
    return out


def check_first_order_eigenfunction(
    branch: BlochBranch,
    cell,
    mu: ScalarField,
    delta: float | None = None,
    scheme: str = "forward",
) -> list[DerivativeCheck]:
    """Compare finite-difference ``phi'(0)``, ``q'(0)`` with corrector combinations.

    The prediction is ``i eta_a chi[(r, a)] phi0_r`` for the eigenfunction and
    ``i eta_a pi[(r, a)] phi0_r`` for the pressure.  ``scheme="forward"``
    uses ``(phi(delta) - phi0) / delta``; ``"central"`` uses
    ``(phi(delta) - phi(-delta)) / (2 delta)`` with both samples gauged to
    ``phi0``.  Only mean-zero parts are compared.
    """
    if scheme not in ("forward", "central"):
        raise ValueError("scheme must be 'forward' or 'central'")
    if cell.kind != branch.kind:
        raise ValueError("cell solution and branch have different kinds")
    d = mu.grid.d
    e = np.asarray(branch.direction)
    delta = float(branch.deltas[-1]) if delta is None else float(delta)
    chi = cell.corrector_array()  # [r, a, c, modes]
    pis = cell.pressure_array()  # [r, a, modes]

    def sample(sign):
        pairs = lowest_branches(mu, sign * e, delta, branch.count, branch.kind)
        c = _gauge_to(pairs.coeffs, branch.phi0, pairs.eigenvalues, d)
        q = np.empty((branch.count,) + mu.grid.shape, dtype=complex)
        for m in range(branch.count):
            # the constraint direction is e for both signs of the shift
            op = StokesOperator(mu, branch.kind, sign * delta * e, e)
            r = op.unprojected(c[m]) - pairs.eigenvalues[m] * c[m]
            q[m] = op.pressure_from_residual(r)
        return c, q

    plus, qplus = sample(1.0)
    if scheme == "central":
        minus, qminus = sample(-1.0)
        dphi = (plus - minus) / (2 * delta)
        dq = (qplus - qminus) / (2 * delta)
    else:
        base = np.zeros_like(plus)
        base[(slice(None), slice(None)) + (0,) * d] = branch.phi0
        dphi = (plus - base) / delta
        dq = qplus / delta
    out = []
    for m in range(branch.count):
        w = np.outer(branch.phi0[m], e)  # w[r, a] = phi0_r eta_a
        pred = 1j * np.einsum("ra,rac...->c...", w, chi)
        pred_q = 1j * np.einsum("ra,ra...->...", w, pis)
        comp = dphi[m].copy()
        zeta = _mean_part(comp, d).copy()
        comp[(slice(None),) + (0,) * d] = 0
        pq = dq[m].copy()
        pq[(0,) * d] = 0
        drift = abs(float(np.vdot(branch.phi0[m], _mean_part(plus[m], d)).imag))
        out.append(
            DerivativeCheck(
                direction=tuple(e),
                m=m + 1,
                delta=delta,
                scheme=scheme,
                computed=comp,
                predicted=pred,
                zeta=zeta,
                residual=float(np.linalg.norm(comp - pred)),
                pressure_computed=pq,
                pressure_predicted=pred_q,
                pressure_residual=float(np.linalg.norm(pq - pred_q)),
                phase_drift=drift,
            )
        )
    return out


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x)) if np.isfinite(x) else str(x)


def branches_to_csv(branches: list[BlochBranch]) -> str:
    """Rows ``eta_hat_*, m, delta, lambda, q0_re, q0_im, phi0_*`` (17 significant digits)."""
    if not branches:
        return ""
    d = branches[0].grid.d
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"eta_hat_{i}" for i in range(d)] + ["m", "delta", "lambda", "q0_re", "q0_im"] + [f"phi0_{i}" for i in range(d)])
    for b in branches:
        for j, delta in enumerate(b.deltas):
            for m in range(b.count):
                w.writerow(
                    [f"{x:.17g}" for x in b.direction]
                    + [m + 1, f"{delta:.17g}", f"{b.eigenvalues[j, m]:.17g}", f"{b.q0[j, m].real:.17g}", f"{b.q0[j, m].imag:.17g}"]
                    + [f"{x:.17g}" for x in b.phi0[m]]
                )
    return buf.getvalue()


@dataclass(frozen=True)
class BranchTable:
    """Branch samples read back from CSV, grouped by (direction, m)."""

    direction: tuple
    m: int
    deltas: np.ndarray
    eigenvalues: np.ndarray
    q0: np.ndarray
    phi0: np.ndarray


def records_from_csv(text: str) -> list[BranchTable]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return []
    d = sum(1 for k in rows[0] if k.startswith("eta_hat_"))
    groups: dict = {}
    for r in rows:
        key = (tuple(float(r[f"eta_hat_{i}"]) for i in range(d)), int(r["m"]))
        groups.setdefault(key, []).append(r)
    out = []
    for (e, m), rs in groups.items():
        out.append(
            BranchTable(
                e,
                m,
                np.array([float(r["delta"]) for r in rs]),
                np.array([float(r["lambda"]) for r in rs]),
                np.array([complex(float(r["q0_re"]), float(r["q0_im"])) for r in rs]),
                np.array([float(rs[0][f"phi0_{i}"]) for i in range(d)]),
            )
        )
    return out
