"""Fourth-order tensor algebra for homogenized Stokes tensors.

Tensors are numpy arrays ``A[k, l, alpha, beta]`` standing for
``(A)^{kl}_{alpha beta}``.  The contraction with a direction is
``M(eta, A)[k, l] = A[k, l, a, b] eta[a] eta[b]``.

Two reference tensors recur:

* ``identity_tensor``: ``delta_{kl} delta_{alpha beta}`` (constant viscosity 1)
* ``i_otimes_i``: ``delta_{alpha k} delta_{beta l}``, the ``I (x) I`` direction
  that the propagation relation cannot see.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "HomTensor",
    "PropagationRecord",
    "PropagationCheck",
    "EquivalenceDecomposition",
    "Reconstruction",
    "identity_tensor",
    "i_otimes_i",
    "contract_M",
    "transverse_min_eigenvalue",
    "propagation_residual",
    "decompose_difference",
    "decompose_difference_sym",
    "symbol_equivalence",
    "reconstruct_from_bloch",
    "synthetic_records",
    "simple_symmetry_defect",
    "full_symmetry_defect",
    "antisymmetry_defect",
    "symmetric_basis",
    "kernel_condition_matrix",
    "kernel_basis_by_enumeration",
    "random_directions",
    "transverse_basis",
]


# --------------------------------------------------------------------------
# reference tensors and symmetry checks
# --------------------------------------------------------------------------


def identity_tensor(d: int) -> np.ndarray:
    I = np.eye(d)
    return np.einsum("kl,ab->klab", I, I)


def i_otimes_i(d: int) -> np.ndarray:
    I = np.eye(d)
    return np.einsum("ak,bl->klab", I, I)


def simple_symmetry_defect(A: np.ndarray) -> float:
    """max |A^{kl}_{ab} - A^{lk}_{ba}|."""
    return float(np.max(np.abs(A - A.transpose(1, 0, 3, 2))))


def full_symmetry_defect(A: np.ndarray) -> float:
    """Largest violation of A^{kl}_{ab} = A^{al}_{kb} = A^{kb}_{al} = A^{lk}_{ba}."""
    return max(
        float(np.max(np.abs(A - A.transpose(2, 1, 0, 3)))),
        float(np.max(np.abs(A - A.transpose(0, 3, 2, 1)))),
        simple_symmetry_defect(A),
    )


def antisymmetry_defect(N: np.ndarray) -> float:
    """Largest violation of the kernel anti-symmetry conditions on ``N``.

    Checked: N^{jl}_{ab} = -N^{jl}_{ba} = -N^{lj}_{ab} whenever (a, b) is
    neither (j, l) nor (l, j); N^{ii}_{ii} = 0; and, for j != l, the pair
    relations N^{jl}_{jl} + N^{jl}_{lj} = 0.
    """
    d = N.shape[0]
    worst = 0.0
    for j, l, a, b in itertools.product(range(d), repeat=4):
        if (a, b) != (j, l) and (b, a) != (j, l):
            worst = max(worst, abs(N[j, l, a, b] + N[j, l, b, a]), abs(N[j, l, a, b] + N[l, j, a, b]))
    for i in range(d):
        worst = max(worst, abs(N[i, i, i, i]))
    for j, l in itertools.permutations(range(d), 2):
        worst = max(worst, abs(N[j, l, j, l] + N[j, l, l, j]))
    return float(worst)


def _permutation_group(full: bool):
    """Index permutations (of k, l, a, b) generating the symmetry class."""
    swap_pairs = (1, 0, 3, 2)
    if not full:
        return [(0, 1, 2, 3), swap_pairs]
    gens = [swap_pairs, (2, 1, 0, 3), (0, 3, 2, 1)]
    group = {(0, 1, 2, 3)}
    frontier = list(group)
    while frontier:
        p = frontier.pop()
        for g in gens:
            q = tuple(p[i] for i in g)
            if q not in group:
                group.add(q)
                frontier.append(q)
    return sorted(group)


def symmetric_basis(d: int, full: bool = False) -> np.ndarray:
    """Orthonormal basis (columns, flattened ``d^4``) of simple- or fully-symmetric tensors."""
    n = d**4
    P = np.zeros((n, n))
    group = _permutation_group(full)
    eye = np.eye(n).reshape((n, d, d, d, d))
    for perm in group:
        P += eye.transpose((0,) + tuple(1 + p for p in perm)).reshape(n, n)
    P /= len(group)
    w, V = np.linalg.eigh(P)
    return V[:, w > 0.5]


# --------------------------------------------------------------------------
# tensor container
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HomTensor:
    """Homogenized tensor ``entries[k, l, alpha, beta]`` with metadata."""

    entries: np.ndarray
    kind: str = "full_gradient"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        d = e.shape[0]
        if e.shape != (d, d, d, d):
            raise ValueError(f"expected a (d, d, d, d) array, got {e.shape}")
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    def simple_symmetry_defect(self) -> float:
        return simple_symmetry_defect(self.entries)

    def full_symmetry_defect(self) -> float:
        return full_symmetry_defect(self.entries)

    def contract(self, direction) -> np.ndarray:
        return contract_M(self, direction)

    def __add__(self, other):
        other = other.entries if isinstance(other, HomTensor) else np.asarray(other)
        return HomTensor(self.entries + other, self.kind, dict(self.provenance))

    def __sub__(self, other):
        other = other.entries if isinstance(other, HomTensor) else np.asarray(other)
        return HomTensor(self.entries - other, self.kind, dict(self.provenance))

    # -- JSON ------------------------------------------------------------------
    def to_json_dict(self) -> dict:
        """Flat object keyed ``A[k][l][alpha][beta]`` (0-based) plus metadata."""
        out = {"schema_version": 1, "kind": self.kind, "d": self.d}
        for k, l, a, b in itertools.product(range(self.d), repeat=4):
            out[f"A[{k}][{l}][{a}][{b}]"] = float(self.entries[k, l, a, b])
        out["provenance"] = self.provenance
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=False, default=_json_default)

    @classmethod
    def from_json_dict(cls, data: dict) -> "HomTensor":
        d = int(data["d"])
        e = np.zeros((d,) * 4)
        for k, l, a, b in itertools.product(range(d), repeat=4):
            e[k, l, a, b] = data[f"A[{k}][{l}][{a}][{b}]"]
        return cls(e, data.get("kind", "full_gradient"), data.get("provenance", {}))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _entries(A) -> np.ndarray:
    return A.entries if isinstance(A, HomTensor) else np.asarray(A, dtype=float)


# --------------------------------------------------------------------------
# contraction and propagation relation
# --------------------------------------------------------------------------


def contract_M(A, direction, tol: float = 1e-10) -> np.ndarray:
    """``M(eta, A)_{kl} = A^{kl}_{ab} eta_a eta_b``, symmetrized.

    The raw contraction of a simple-symmetric tensor is already symmetric;
    an asymmetry above ``tol`` (relative) raises ``ValueError``.
    """
    E = _entries(A)
    e = np.asarray(direction, dtype=float)
    M = np.einsum("klab,a,b->kl", E, e, e)
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > tol * scale:
        raise ValueError("contraction is not symmetric; tensor lacks the simple symmetry")
    return 0.5 * (M + M.T)


def transverse_basis(direction) -> np.ndarray:
    """Orthonormal basis (columns) of the plane orthogonal to ``direction``."""
    e = np.asarray(direction, dtype=float)
    e = e / np.linalg.norm(e)
    # complete e to an orthonormal basis deterministically via QR
    Q, _ = np.linalg.qr(np.column_stack([e, np.eye(len(e))]))
    return Q[:, 1 : len(e)]


def transverse_min_eigenvalue(A, direction) -> float:
    """Smallest eigenvalue of M(eta, A) restricted to eta-perp (Legendre-Hadamard)."""
    B = transverse_basis(direction)
    return float(np.linalg.eigvalsh(B.T @ contract_M(A, direction) @ B)[0])


def random_directions(d: int, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class PropagationRecord:
    """Bloch data for one direction and branch.

    ``half_lambda2`` and ``half_q02`` are the halved second derivatives at
    zero of the eigenvalue and of the mean-constraint multiplier.
    """

    direction: tuple
    m: int
    phi0: tuple
    half_lambda2: float
    half_q02: float

    def __post_init__(self):
        e = np.asarray(self.direction, dtype=float)
        p = np.asarray(self.phi0, dtype=float)
        if abs(float(p @ e)) > 1e-8:
            raise ValueError("phi0 must be orthogonal to the direction")
        if not np.all(np.isfinite([self.half_lambda2, self.half_q02])):
            raise ValueError("non-finite propagation data")
        object.__setattr__(self, "direction", tuple(float(x) for x in e))
        object.__setattr__(self, "phi0", tuple(float(x) for x in p))

    @property
    def m_phi(self) -> np.ndarray:
        """The vector M(eta, A) phi0 implied by the data."""
        return self.half_lambda2 * np.asarray(self.phi0) - self.half_q02 * np.asarray(self.direction)


@dataclass(frozen=True)
class PropagationCheck:
    residual: float
    eigen_identity: float
    multiplier_identity: float
    predicted: tuple
    measured: tuple

    @property
    def worst(self) -> float:
        return max(self.residual, self.eigen_identity, self.multiplier_identity)


def propagation_residual(rec: PropagationRecord, A) -> PropagationCheck:
    """Norm of ``half_lambda2 phi0 - half_q02 eta - M(eta, A) phi0`` and the two scalar identities."""
    e = np.asarray(rec.direction)
    phi = np.asarray(rec.phi0)
    Mphi = contract_M(A, e) @ phi
    res = float(np.linalg.norm(rec.m_phi - Mphi))
    return PropagationCheck(
        residual=res,
        eigen_identity=abs(rec.half_lambda2 - float(Mphi @ phi)),
        multiplier_identity=abs(-rec.half_q02 - float(Mphi @ e)),
        predicted=tuple(Mphi),
        measured=tuple(rec.m_phi),
    )


def synthetic_records(A, directions) -> list[PropagationRecord]:
    """Exact records for a known tensor: phi0 are eigenvectors of M restricted to eta-perp."""
    out = []
    for e in np.asarray(directions, dtype=float):
        B = transverse_basis(e)
        M = contract_M(A, e)
        w, V = np.linalg.eigh(B.T @ M @ B)
        for m in range(len(w)):
            phi = B @ V[:, m]
            out.append(PropagationRecord(tuple(e), m + 1, tuple(phi), float(w[m]), float(-(M @ phi) @ e)))
    return out


# --------------------------------------------------------------------------
# equivalence algebra
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceDecomposition:
    """``B - A = c (I (x) I) + N`` with the anti-symmetry residual of ``N``."""

    c: float
    N: np.ndarray
    residual: float
    ok: bool

    def to_json_dict(self, kernel_dim=None) -> dict:
        out = {"c": self.c, "residual": self.residual, "equivalent": self.ok}
        if kernel_dim is not None:
            out["kernel_dim"] = kernel_dim
        return out


def _scale(*tensors) -> float:
    return max([1.0] + [float(np.max(np.abs(t))) for t in tensors])


def decompose_difference(A, B, tol: float = 1e-10) -> EquivalenceDecomposition:
    """Split ``B - A`` into ``c (I (x) I) + N`` and test the anti-symmetry of ``N``.

    ``tol`` is relative to the largest entry of ``A`` or ``B`` (at least 1).
    Both inputs must carry the simple symmetry.
    """
    EA, EB = _entries(A), _entries(B)
    s = _scale(EA, EB)
    for name, E in (("A", EA), ("B", EB)):
        if simple_symmetry_defect(E) > tol * s:
            raise ValueError(f"{name} lacks the simple symmetry")
    Nt = EB - EA
    d = Nt.shape[0]
    diag = np.array([Nt[i, i, i, i] for i in range(d)])
    c = float(diag[0])
    spread = float(np.max(np.abs(diag - c)))
    if spread > tol * s:
        return EquivalenceDecomposition(c, Nt - c * i_otimes_i(d), spread, False)
    N = Nt - c * i_otimes_i(d)
    res = antisymmetry_defect(N)
    return EquivalenceDecomposition(c, N, res, res <= tol * s)


def decompose_difference_sym(A_s, B_s, tol: float = 1e-10) -> tuple[float, float]:
    """``(c, residual)`` with residual ``max|B_s - A_s - c (I (x) I)|`` for fully symmetric tensors."""
    EA, EB = _entries(A_s), _entries(B_s)
    s = _scale(EA, EB)
    for name, E in (("A_s", EA), ("B_s", EB)):
        if full_symmetry_defect(E) > tol * s:
            raise ValueError(f"{name} lacks the full (elasticity-type) symmetry")
    Nt = EB - EA
    c = float(Nt[0, 0, 0, 0])
    return c, float(np.max(np.abs(Nt - c * i_otimes_i(Nt.shape[0]))))


def symbol_equivalence(A, B, samples: int = 64, tol: float = 1e-10, seed: int = 0):
    """Do ``A`` and ``B`` define the same operator on divergence-free fields?

    Fits one scalar ``c`` to ``(A - B)^{kl}_{ab} xi_a xi_b = c xi_k xi_l`` over
    random unit ``xi`` and returns ``(equivalent, max_deviation, c)``.
    """
    D = _entries(A) - _entries(B)
    xs = random_directions(D.shape[0], samples, seed)
    S = np.einsum("klab,na,nb->nkl", D, xs, xs)
    P = np.einsum("nk,nl->nkl", xs, xs)
    c = float(np.sum(S * P) / np.sum(P * P))
    dev = float(np.max(np.abs(S - c * P)))
    return dev <= tol * _scale(_entries(A), _entries(B)), dev, c


# --------------------------------------------------------------------------
# kernel enumeration and reconstruction
# --------------------------------------------------------------------------


def kernel_condition_matrix(d: int) -> np.ndarray:
    """Rows are the linear conditions (simple symmetry + anti-symmetry) on ``N``.

    Each row acts on the flattened ``d^4`` entries.
    """
    idx = lambda j, l, a, b: np.ravel_multi_index((j, l, a, b), (d,) * 4)
    rows = []

    def cond(*terms):
        r = np.zeros(d**4)
        for coef, t in terms:
            r[idx(*t)] += coef
        if np.any(r):
            rows.append(r)

    for j, l, a, b in itertools.product(range(d), repeat=4):
        cond((1, (j, l, a, b)), (-1, (l, j, b, a)))
        if (a, b) != (j, l) and (b, a) != (j, l):
            cond((1, (j, l, a, b)), (1, (j, l, b, a)))
            cond((1, (j, l, a, b)), (1, (l, j, a, b)))
    for i in range(d):
        cond((1, (i, i, i, i)))
    for j, l in itertools.permutations(range(d), 2):
        cond((1, (j, l, j, l)), (1, (j, l, l, j)))
    return np.array(rows)


def _null_space(C: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    _, s, Vh = np.linalg.svd(C)
    rank = int(np.sum(s > rtol * s[0]))
    return Vh[rank:].T


def kernel_basis_by_enumeration(d: int) -> np.ndarray:
    """Basis (columns, flattened) of ``span{I (x) I}`` plus all admissible ``N``."""
    N = _null_space(kernel_condition_matrix(d))
    return np.column_stack([i_otimes_i(d).ravel() / np.sqrt(d * d), N])


@dataclass(frozen=True)
class Reconstruction:
    """Least-squares tensor from Bloch data and the kernel it cannot resolve."""

    tensor: HomTensor
    kernel: np.ndarray  # columns: flattened d^4 tensors, orthonormal
    singular_values: np.ndarray
    residual: float
    expected_kernel_dim: int

    @property
    def kernel_dim(self) -> int:
        return self.kernel.shape[1]

    @property
    def rank_deficient(self) -> bool:
        return self.kernel_dim > self.expected_kernel_dim

    def project_out_kernel(self, E: np.ndarray) -> np.ndarray:
        v = np.asarray(E, dtype=float).ravel()
        v = v - self.kernel @ (self.kernel.T @ v)
        return v.reshape(np.shape(E))

    def contains(self, E: np.ndarray, tol: float = 1e-8) -> bool:
        """Is the tensor ``E`` in the span of the kernel?"""
        v = np.asarray(E, dtype=float).ravel()
        return bool(np.linalg.norm(self.project_out_kernel(v)) <= tol * max(1.0, np.linalg.norm(v)))


def reconstruct_from_bloch(records, d: int | None = None, kind: str = "full_gradient", rtol: float = 1e-8) -> Reconstruction:
    """Solve ``M(eta, X) phi0 = half_lambda2 phi0 - half_q02 eta`` over all records.

    ``X`` ranges over simple-symmetric tensors (fully symmetric for the
    symmetrized kind).  Returns the minimal-norm solution together with the
    numerically determined kernel.
    """
    records = list(records)
    if d is None:
        d = len(records[0].direction)
    basis = symmetric_basis(d, full=(kind == "symmetrized"))
    rows, rhs = [], []
    for rec in records:
        e = np.asarray(rec.direction)
        phi = np.asarray(rec.phi0)
        # (M phi)_k = X[k, l, a, b] e_a e_b phi_l
        for k in range(d):
            coef = np.zeros((d,) * 4)
            coef[k] = np.einsum("a,b,l->lab", e, e, phi)
            rows.append(coef.ravel())
        rhs.extend(rec.m_phi)
    G = np.array(rows) @ basis
    U, s, Vh = np.linalg.svd(G, full_matrices=True)
    rank = int(np.sum(s > rtol * s[0]))
    coef = Vh[:rank].T @ ((U[:, :rank].T @ np.asarray(rhs)) / s[:rank])
    X = (basis @ coef).reshape((d,) * 4)
    kernel = basis @ Vh[rank:].T
    residual = float(np.linalg.norm(G @ coef - np.asarray(rhs)))
    if kind == "symmetrized":
        expected = 1
    else:
        expected = kernel_basis_by_enumeration(d).shape[1]
    return Reconstruction(HomTensor(X, kind, {"source": "bloch_reconstruction", "records": len(records)}), kernel, s, residual, expected)
