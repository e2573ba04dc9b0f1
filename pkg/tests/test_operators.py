import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stokes_bloch import SolverError, ViscosityModel, make_grid, sample_viscosity
from stokes_bloch.operators import StokesOperator, check_kind, divfree_frames, leray_project, pcg

from conftest import PRODUCT, PRODUCT_3D


def random_field(grid, seed):
    rng = np.random.default_rng(seed)
    shape = (grid.d,) + grid.shape
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


class TestPCG:
    def test_matches_direct_solve(self, rng):
        Q = rng.normal(size=(40, 40))
        H = Q @ Q.T + 40 * np.eye(40)
        b = rng.normal(size=40) + 1j * rng.normal(size=40)
        x, info = pcg(lambda v: H @ v, b, lambda v: v / np.diag(H), 1e-13, 200)
        np.testing.assert_allclose(x, np.linalg.solve(H, b), rtol=1e-11)
        assert info.residual <= 1e-13 and info.history[0] == 1.0

    def test_zero_rhs(self):
        x, info = pcg(lambda v: v, np.zeros(5), lambda v: v, 1e-10, 10)
        assert info.iterations == 0 and not np.any(x)

    def test_iteration_cap_raises_with_history(self, rng):
        H = np.diag(np.logspace(0, 6, 50))
        with pytest.raises(SolverError) as err:
            pcg(lambda v: H @ v, rng.normal(size=50), lambda v: v, 1e-14, 3)
        assert len(err.value.history) == 4

    def test_indefinite_raises(self):
        H = np.diag([1.0, -1.0])
        with pytest.raises(SolverError, match="curvature"):
            pcg(lambda v: H @ v, np.array([0.0, 1.0]), lambda v: v, 1e-10, 10)


class TestLeray:
    @given(st.sampled_from([make_grid(2, 6), make_grid(3, 4)]), st.integers(0, 10**6), st.floats(-2, 2))
    @settings(max_examples=20, deadline=None)
    def test_idempotent_and_transverse(self, grid, seed, t):
        g = grid.wavevectors(t * np.ones(grid.d))
        u = random_field(grid, seed)
        Pu = leray_project(u, g)
        np.testing.assert_allclose(leray_project(Pu, g), Pu, atol=1e-12)
        assert np.max(np.abs(np.sum(g * Pu, axis=0))) < 1e-11

    def test_mean_direction(self):
        grid = make_grid(2, 4)
        g = grid.wavevectors()
        u = random_field(grid, 0)
        e = np.array([0.6, 0.8])
        Pu = leray_project(u, g, e)
        assert abs(e @ Pu[:, 0, 0]) < 1e-15
        np.testing.assert_array_equal(leray_project(u, g)[:, 0, 0], 0)


class TestFrames:
    @pytest.mark.parametrize("grid", [make_grid(2, 8), make_grid(3, 6)], ids=["2d", "3d"])
    @pytest.mark.parametrize("theta", [None, (0.3, -0.2, 0.05)])
    def test_orthonormal_and_transverse(self, grid, theta):
        th = None if theta is None else np.asarray(theta[: grid.d])
        g = grid.wavevectors(th)
        F = divfree_frames(g)
        gram = np.einsum("icm,jcm->ijm", F.reshape(grid.d - 1, grid.d, -1), F.reshape(grid.d - 1, grid.d, -1))
        np.testing.assert_allclose(gram, np.eye(grid.d - 1)[..., None] * np.ones(grid.size), atol=1e-14)
        gn = g / np.maximum(np.sqrt(np.sum(g * g, axis=0)), 1e-300)
        assert np.max(np.abs(np.einsum("jc...,c...->j...", F, gn))) <= 1e-13

    def test_fallback_at_zero(self):
        g = np.zeros((3, 1))
        F = divfree_frames(g, fallback_direction=[0.0, 0.0, 1.0])
        np.testing.assert_allclose(F[:, 2, 0], 0, atol=1e-15)


class TestStokesOperator:
    def test_kind_checked(self):
        with pytest.raises(ValueError):
            check_kind("rotational")

    @pytest.mark.parametrize("kind", ["full_gradient", "symmetrized"])
    @pytest.mark.parametrize("theta", [None, (0.2, 0.5)])
    def test_hermitian_positive(self, kind, theta):
        mu = sample_viscosity(PRODUCT, make_grid(2, 8))
        op = StokesOperator(mu, kind, theta, (1.0, 0.0) if theta else None)
        u, v = op.project(random_field(mu.grid, 1)), op.project(random_field(mu.grid, 2))
        a = np.vdot(v, op.apply(u))
        b = np.vdot(op.apply(v), u)
        assert abs(a - b) <= 1e-12 * abs(a)
        assert np.vdot(u, op.apply(u)).real > 0
        assert np.vdot(u, op.apply(u)).real == pytest.approx(op.energy(u), rel=1e-12)

    def test_constant_viscosity_solution(self):
        grid = make_grid(3, 6)
        mu = sample_viscosity(ViscosityModel.constant(2.0), grid)
        op = StokesOperator(mu)
        f = op.project(random_field(grid, 5))
        u, info = op.solve(f, tol=1e-13)
        g2 = np.sum(grid.wavevectors() ** 2, axis=0)
        expected = np.where(g2 > 0, f / (2.0 * np.where(g2 > 0, g2, 1.0)), 0)
        np.testing.assert_allclose(u, expected, atol=1e-14)
        assert info.iterations <= 2

    def test_gradient_forcing_gives_zero_velocity(self):
        grid = make_grid(2, 8)
        op = StokesOperator(sample_viscosity(PRODUCT, grid))
        q = random_field(grid, 3)[0]
        q[grid.nyquist_mask] = 0
        q[0, 0] = 0
        f = 1j * grid.wavevectors() * q
        u, _ = op.solve(f)
        assert not np.any(u)
        np.testing.assert_allclose(op.pressure_from_residual(-f), q, atol=1e-12)

    def test_solve_residual_3d(self):
        grid = make_grid(3, 8)
        op = StokesOperator(sample_viscosity(PRODUCT_3D, grid), "symmetrized")
        f = op.project(random_field(grid, 9))
        u, info = op.solve(f, tol=1e-11)
        assert np.linalg.norm(op.apply(u) - f) <= 1e-11 * np.linalg.norm(f)
        assert info.iterations < 60
