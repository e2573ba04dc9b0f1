import numpy as np
import pytest

from stokes_bloch import ViscosityModel, homogenized_tensor, make_grid, sample_viscosity
from stokes_bloch.epsilon import (
    ConvergenceReport,
    EpsProblem,
    convergence_study,
    mixed_forcing,
    shear_forcing,
    solve_eps,
    solve_homogenized,
    weighted_pressure_norm,
)
from stokes_bloch.operators import StokesOperator
from stokes_bloch.tensors import HomTensor, i_otimes_i, identity_tensor, kernel_basis_by_enumeration

from conftest import LAYERED, PRODUCT


def forcing_on(grid, forcing=mixed_forcing):
    return EpsProblem(ViscosityModel.constant(1.0), 1, grid.d, grid.n, forcing=forcing).forcing_coeffs(grid)


class TestForcing:
    @pytest.mark.parametrize("forcing", [shear_forcing, mixed_forcing])
    def test_mean_zero_real(self, forcing):
        grid = make_grid(2, 16)
        f = forcing(grid.nodes)
        assert np.max(np.abs(f.mean(axis=(1, 2)))) < 1e-15

    def test_shear_divergence_free(self):
        grid = make_grid(3, 8)
        c = forcing_on(grid, shear_forcing)
        assert np.max(np.abs(np.sum(grid.wavevectors() * c, axis=0))) < 1e-13

    def test_rejects_mean(self):
        p = EpsProblem(ViscosityModel.constant(1.0), 1, forcing=lambda x: np.ones_like(x))
        with pytest.raises(ValueError, match="zero mean"):
            p.forcing_coeffs()


class TestProblem:
    @pytest.mark.parametrize("kwargs", [{"n_eps": 0}, {"n_eps": 2.5}, {"n_cell": 4}, {"kind": "other"}])
    def test_validation(self, kwargs):
        base = dict(model=LAYERED, n_eps=2)
        with pytest.raises(ValueError):
            EpsProblem(**{**base, **kwargs})

    def test_sizes(self):
        p = EpsProblem(LAYERED, 8, n_cell=16)
        assert p.eps == 0.125 and p.n_fine == 128 and p.grid.n == 128


class TestHomogenizedSolve:
    def test_constant_tensor_closed_form(self):
        grid = make_grid(2, 16)
        f = forcing_on(grid)
        u, p = solve_homogenized(HomTensor(2.0 * identity_tensor(2), "full_gradient"), f, grid)
        g = grid.wavevectors()
        g2 = np.sum(g**2, axis=0)
        safe = np.where(g2 > 0, g2, 1.0)
        Pf = f - g * np.sum(g * f, axis=0) / safe
        np.testing.assert_allclose(u.coeffs, np.where(g2 > 0, Pf / (2.0 * safe), 0), atol=1e-15)
        # pressure balances the longitudinal part: i xi p = (f . xi) xi / |xi|^2
        np.testing.assert_allclose(p.coeffs, np.where(g2 > 0, -1j * np.sum(g * f, axis=0) / safe, 0), atol=1e-15)

    @pytest.mark.parametrize("d", [2, 3])
    def test_gauge_independence(self, d, rng):
        grid = make_grid(d, 8)
        mu = sample_viscosity(PRODUCT if d == 2 else ViscosityModel.product_cosine(1.0, (0.3, 0.2, 0.1)), make_grid(d, 8))
        A = homogenized_tensor(mu)
        K = kernel_basis_by_enumeration(d)[:, 1:]
        N = (K @ rng.normal(size=K.shape[1])).reshape((d,) * 4)
        B = HomTensor(A.entries + 0.8 * i_otimes_i(d) + N, "full_gradient")
        f = forcing_on(grid)
        u1, p1 = solve_homogenized(A, f, grid)
        u2, p2 = solve_homogenized(B, f, grid)
        np.testing.assert_allclose(u2.coeffs, u1.coeffs, atol=1e-14)
        np.testing.assert_allclose(p2.coeffs, p1.coeffs, atol=1e-13)

    def test_singular_tensor(self):
        grid = make_grid(2, 8)
        with pytest.raises(ValueError, match="Legendre-Hadamard"):
            solve_homogenized(HomTensor(np.zeros((2,) * 4), "full_gradient"), forcing_on(grid), grid)

    def test_weighted_pressure_norm(self):
        grid = make_grid(2, 8)
        p = np.zeros(grid.shape, dtype=complex)
        p[1, 2] = 3.0
        assert weighted_pressure_norm(p, grid) == pytest.approx(3.0 / (2 * np.pi * np.sqrt(5)))


class TestFineSolve:
    def test_eps_one_is_plain_solve(self):
        prob = EpsProblem(PRODUCT, 1, n_cell=16)
        sol = solve_eps(prob)
        op = StokesOperator(sample_viscosity(PRODUCT, prob.grid))
        u, _ = op.solve(prob.forcing_coeffs(), tol=1e-11)
        np.testing.assert_allclose(sol.u.coeffs, u, atol=1e-10)

    def test_incompressible_and_converged(self):
        sol = solve_eps(EpsProblem(LAYERED, 8, n_cell=16))
        assert sol.max_divergence <= 1e-11
        assert sol.residual <= 1e-11
        assert np.max(np.abs(sol.u.nodal.imag)) == 0

    def test_constant_viscosity_matches_limit(self):
        model = ViscosityModel.constant(1.5)
        prob = EpsProblem(model, 4, n_cell=8)
        sol = solve_eps(prob)
        u, p = solve_homogenized(HomTensor(1.5 * identity_tensor(2), "full_gradient"), prob.forcing_coeffs(), prob.grid)
        np.testing.assert_allclose(sol.u.coeffs, u.coeffs, atol=1e-13)
        np.testing.assert_allclose(sol.p.coeffs, p.coeffs, atol=1e-12)


@pytest.fixture(scope="module")
def report():
    mu = sample_viscosity(LAYERED, make_grid(2, 32))
    return convergence_study(LAYERED, homogenized_tensor(mu), (1 / 2, 1 / 4, 1 / 8), n_cell=16)


class TestStudy:
    def test_errors_decrease(self, report):
        assert report.monotone and report.slope > 0.9
        assert report.bounded
        # the naive limit can be closer at coarse eps; the homogenized one wins as eps shrinks
        assert report.err_naive[-1] > 2 * report.err_u[-1]

    def test_stress_low_modes(self, report):
        # the weak limit of the fine stress is the homogenized stress
        s = report.stress_low_mode_error
        assert s[-1] < s[0]

    def test_csv(self, report):
        lines = report.to_csv().splitlines()
        assert lines[0] == "eps,err_u,err_p,err_naive" and len(lines) == 4
        assert float(lines[1].split(",")[0]) == 0.5

    def test_json(self, report):
        data = report.to_json_dict()
        assert data["bounded"] is True and data["naive_plateau"] == report.err_naive[-1]

    def test_rejects_non_reciprocal(self):
        with pytest.raises(ValueError):
            convergence_study(LAYERED, HomTensor(identity_tensor(2), "full_gradient"), (0.3,))

    def test_rejects_increasing_ladder(self):
        with pytest.raises(ValueError):
            ConvergenceReport((0.25, 0.5), (1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 1), 1.0, 1.0, True)
