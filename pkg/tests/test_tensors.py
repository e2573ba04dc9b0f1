import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stokes_bloch.tensors import (
    HomTensor,
    PropagationRecord,
    antisymmetry_defect,
    contract_M,
    decompose_difference,
    decompose_difference_sym,
    full_symmetry_defect,
    i_otimes_i,
    identity_tensor,
    kernel_basis_by_enumeration,
    kernel_condition_matrix,
    propagation_residual,
    random_directions,
    reconstruct_from_bloch,
    simple_symmetry_defect,
    symbol_equivalence,
    symmetric_basis,
    synthetic_records,
    transverse_basis,
    transverse_min_eigenvalue,
)


def random_simple(d, rng, shift=3.0):
    """Random simple-symmetric tensor, made elliptic by a multiple of the identity."""
    P = symmetric_basis(d)
    X = (P @ (P.T @ rng.normal(size=d**4))).reshape((d,) * 4)
    return X + shift * identity_tensor(d)


def random_full(d, rng, shift=3.0):
    P = symmetric_basis(d, full=True)
    S = identity_tensor(d) + identity_tensor(d).transpose(0, 1, 3, 2)
    X = rng.normal(size=d**4) + shift * S.ravel()
    return (P @ (P.T @ X)).reshape((d,) * 4)


def random_kernel_N(d, rng):
    K = kernel_basis_by_enumeration(d)[:, 1:]
    return (K @ rng.normal(size=K.shape[1])).reshape((d,) * 4)


class TestReferenceTensors:
    def test_identity(self):
        E = identity_tensor(2)
        assert E[0, 0, 1, 1] == 1 and E[0, 1, 0, 1] == 0 and E.sum() == 4

    def test_i_otimes_i(self):
        E = i_otimes_i(3)
        # (I x I)^{kl}_{ab} = delta_{ak} delta_{bl}
        assert E[0, 1, 0, 1] == 1 and E[0, 1, 1, 0] == 0 and E.sum() == 9

    @pytest.mark.parametrize("d,simple,full", [(2, 10, 6), (3, 45, 21)])
    def test_symmetric_basis_dimensions(self, d, simple, full):
        assert symmetric_basis(d).shape[1] == simple
        assert symmetric_basis(d, full=True).shape[1] == full

    def test_symmetric_basis_members(self, rng):
        for full in (False, True):
            P = symmetric_basis(3, full)
            X = (P @ rng.normal(size=P.shape[1])).reshape((3,) * 4)
            assert simple_symmetry_defect(X) < 1e-14
            if full:
                assert full_symmetry_defect(X) < 1e-14


class TestHomTensor:
    def test_json_round_trip(self, rng):
        A = HomTensor(random_simple(2, rng), "full_gradient", {"source": "test"})
        data = json.loads(json.dumps(A.to_json_dict()))
        assert "A[0][1][1][0]" in data and data["schema_version"] == 1
        B = HomTensor.from_json_dict(data)
        np.testing.assert_array_equal(A.entries, B.entries)
        assert B.kind == "full_gradient"

    def test_arithmetic(self, rng):
        A = HomTensor(random_simple(2, rng), "full_gradient")
        B = A + A - A
        np.testing.assert_allclose(B.entries, A.entries)

    def test_contract_rejects_asymmetry(self, rng):
        with pytest.raises(ValueError):
            contract_M(rng.normal(size=(2,) * 4), [1.0, 0.0])

    def test_contraction_identity(self):
        e = np.array([0.6, 0.8])
        np.testing.assert_allclose(contract_M(2.0 * identity_tensor(2), e), 2.0 * np.eye(2))
        assert transverse_min_eigenvalue(2.0 * identity_tensor(2), e) == pytest.approx(2.0)

    def test_directions(self):
        a, b = random_directions(3, 8, 5), random_directions(3, 8, 5)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)

    @given(st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_transverse_basis(self, seed):
        e = random_directions(3, 1, seed)[0]
        B = transverse_basis(e)
        np.testing.assert_allclose(B.T @ B, np.eye(2), atol=1e-14)
        assert np.max(np.abs(B.T @ e)) < 1e-14


class TestKernel:
    @pytest.mark.parametrize("d,dim", [(2, 2), (3, 10)])
    def test_enumeration_dimension(self, d, dim):
        assert kernel_basis_by_enumeration(d).shape[1] == dim

    @pytest.mark.parametrize("d", [2, 3])
    def test_members_satisfy_conditions(self, d, rng):
        N = random_kernel_N(d, rng)
        assert antisymmetry_defect(N) < 1e-13
        assert simple_symmetry_defect(N) < 1e-13
        assert np.max(np.abs(kernel_condition_matrix(d) @ N.ravel())) < 1e-13

    @pytest.mark.parametrize("d", [2, 3])
    def test_invisible_to_contraction(self, d, rng):
        N = random_kernel_N(d, rng) + 0.7 * i_otimes_i(d)
        for e in random_directions(d, 10, 2):
            B = transverse_basis(e)
            M = contract_M(N, e)
            # (I x I) contributes e (x) e, which vanishes on the transverse plane
            assert np.max(np.abs(B.T @ M @ B)) < 1e-13
            assert np.max(np.abs(M - 0.7 * np.outer(e, e))) < 1e-13

    def test_defect_detects_violation(self):
        N = np.zeros((2,) * 4)
        N[0, 1, 1, 1] = 1.0
        # a = b: N^{01}_{11} = -N^{01}_{11} is violated by 2 N^{01}_{11}
        assert antisymmetry_defect(N) == 2.0


class TestDecomposition:
    @pytest.mark.parametrize("d", [2, 3])
    def test_round_trip(self, d, rng):
        A = random_simple(d, rng)
        N = random_kernel_N(d, rng)
        dec = decompose_difference(A, A + 0.37 * i_otimes_i(d) + N)
        assert dec.ok
        assert dec.c == pytest.approx(0.37, abs=1e-12)
        np.testing.assert_allclose(dec.N, N, atol=1e-12)

    def test_non_equivalent(self, rng):
        A = random_simple(2, rng)
        dec = decompose_difference(A, random_simple(2, rng))
        assert not dec.ok and dec.residual > 1e-3

    def test_requires_simple_symmetry(self, rng):
        with pytest.raises(ValueError, match="simple symmetry"):
            decompose_difference(random_simple(2, rng), rng.normal(size=(2,) * 4))

    def test_symmetrized(self, rng):
        A = random_full(3, rng)
        c, res = decompose_difference_sym(A, A - 0.25 * i_otimes_i(3))
        assert c == pytest.approx(-0.25) and res < 1e-14

    def test_symmetrized_precondition(self, rng):
        with pytest.raises(ValueError, match="full"):
            decompose_difference_sym(random_simple(2, rng), random_full(2, rng))

    def test_symbol_equivalence_kernel(self, rng):
        for d in (2, 3):
            A = random_simple(d, rng)
            ok, dev, c = symbol_equivalence(A, A + 1.3 * i_otimes_i(d) + random_kernel_N(d, rng))
            assert ok and dev < 1e-12 and c == pytest.approx(-1.3)

    def test_symbol_equivalence_random(self, rng):
        A = random_simple(2, rng)
        assert not any(symbol_equivalence(A, A + 1e-3 * random_simple(2, rng, 0.0))[0] for _ in range(30))


class TestReconstruction:
    @pytest.mark.parametrize("d", [2, 3])
    @pytest.mark.parametrize("kind", ["full_gradient", "symmetrized"])
    def test_synthetic(self, d, kind, rng):
        A = random_full(d, rng) if kind == "symmetrized" else random_simple(d, rng)
        recs = synthetic_records(A, random_directions(d, 24, 3))
        assert max(propagation_residual(r, A).worst for r in recs) < 1e-13
        rec = reconstruct_from_bloch(recs, kind=kind)
        assert rec.kernel_dim == rec.expected_kernel_dim
        assert not rec.rank_deficient
        assert np.linalg.norm(rec.project_out_kernel(rec.tensor.entries - A)) < 1e-10
        assert rec.contains(i_otimes_i(d))

    def test_few_directions_rank_deficient(self, rng):
        A = random_simple(3, rng)
        rec = reconstruct_from_bloch(synthetic_records(A, random_directions(3, 2, 0)))
        assert rec.rank_deficient

    def test_records_one_based(self, rng):
        recs = synthetic_records(random_simple(3, rng), random_directions(3, 1, 0))
        assert [r.m for r in recs] == [1, 2]

    def test_residual_detects_wrong_tensor(self, rng):
        A = random_simple(2, rng)
        rec = synthetic_records(A, random_directions(2, 1, 0))[0]
        assert propagation_residual(rec, A + 0.1 * identity_tensor(2)).worst > 0.05

    def test_record_multiplier_vector(self):
        r = PropagationRecord((1.0, 0.0), 1, (0.0, 1.0), 2.0, 0.5)
        np.testing.assert_allclose(r.m_phi, [-0.5, 2.0])
