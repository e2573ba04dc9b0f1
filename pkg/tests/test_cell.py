import itertools

import numpy as np
import pytest

from stokes_bloch import ViscosityModel, homogenized_tensor, make_grid, sample_viscosity
from stokes_bloch.cell import (
    check_tensor,
    legendre_hadamard_margin,
    solve_cell_problem,
    solve_cell_problems,
    trace_identity_residual,
    unit_strain,
    weak_form_tensor,
)
from stokes_bloch.tensors import identity_tensor

from conftest import LAYERED, LAYERED_HARMONIC, PRODUCT, PRODUCT_3D


def laminate_tensor(d, kind, mean, harmonic):
    """Closed form for mu depending on y_0 only.

    Correctors can only relax the shear strains across the layers (derivative
    along axis 0 of a component other than 0); those see the harmonic mean,
    everything else the arithmetic mean.
    """
    c = np.full((d, d), float(mean))
    c[0, 1:] = harmonic
    if kind == "symmetrized":
        c[1:, 0] = harmonic
    A = np.zeros((d,) * 4)
    for k, l, a, b in itertools.product(range(d), repeat=4):
        A[k, l, a, b] = np.sum(c * unit_strain(d, k, a, kind) * unit_strain(d, l, b, kind))
    return A


def smooth_tabulated(n=32):
    y = make_grid(2, n).nodes
    s = 1.5 + 0.3 * np.sin(2 * np.pi * (y[0] + 2 * y[1]) + 0.4)
    s = s + 0.2 * np.cos(2 * np.pi * (3 * y[0] - y[1])) * np.sin(2 * np.pi * y[1])
    return ViscosityModel.tabulated(s)


class TestUnitStrain:
    def test_full_gradient(self):
        G = unit_strain(3, 2, 0)
        assert G[0, 2] == 1 and G.sum() == 1

    def test_symmetrized(self):
        G = unit_strain(2, 1, 0, "symmetrized")
        np.testing.assert_array_equal(G, [[0, 0.5], [0.5, 0]])


class TestLaminate:
    @pytest.mark.parametrize("kind", ["full_gradient", "symmetrized"])
    def test_closed_form_2d(self, kind):
        mu = sample_viscosity(LAYERED, make_grid(2, 32))
        A = homogenized_tensor(mu, kind)
        np.testing.assert_allclose(A.entries, laminate_tensor(2, kind, 1.0, LAYERED_HARMONIC), atol=1e-12)

    @pytest.mark.parametrize("kind", ["full_gradient", "symmetrized"])
    def test_closed_form_3d(self, kind):
        # n = 12 keeps the truncation error of the harmonic mean near 2e-7
        mu = sample_viscosity(LAYERED, make_grid(3, 12))
        A = homogenized_tensor(mu, kind)
        np.testing.assert_allclose(A.entries, laminate_tensor(3, kind, 1.0, LAYERED_HARMONIC), atol=5e-7)

    def test_spectral_convergence(self):
        target = laminate_tensor(2, "full_gradient", 1.0, LAYERED_HARMONIC)
        errs = [
            np.max(np.abs(homogenized_tensor(sample_viscosity(LAYERED, make_grid(2, n))).entries - target))
            for n in (6, 8, 10, 12)
        ]
        # geometric decay at the rate of the coefficients of 1 / mu, r = 2 - sqrt(3)
        rate = (2 - np.sqrt(3)) ** 2
        for a, b in zip(errs, errs[1:]):
            assert b / a == pytest.approx(rate, rel=0.1)

    def test_other_layer_axis(self):
        mu = sample_viscosity(ViscosityModel.layered_cosine(1.0, 0.5, axis=1), make_grid(2, 32))
        A = homogenized_tensor(mu).entries
        assert A[0, 0, 1, 1] == pytest.approx(LAYERED_HARMONIC, abs=1e-12)
        assert A[1, 1, 0, 0] == pytest.approx(1.0, abs=1e-12)


class TestConstant:
    @pytest.mark.parametrize("c", [0.5, 3.0])
    def test_identity(self, c):
        mu = sample_viscosity(ViscosityModel.constant(c), make_grid(2, 16))
        A = homogenized_tensor(mu)
        np.testing.assert_allclose(A.entries, c * identity_tensor(2), atol=1e-13)

    def test_correctors_vanish(self):
        mu = sample_viscosity(ViscosityModel.constant(2.0), make_grid(2, 16))
        sol = solve_cell_problems(mu)
        assert np.max(np.abs(sol.corrector_array())) < 1e-14


class TestSolverRoutes:
    @pytest.mark.parametrize("kind", ["full_gradient", "symmetrized"])
    def test_dense_matches_pcg(self, kind):
        mu = sample_viscosity(PRODUCT, make_grid(2, 8))
        for k, a in [(0, 0), (0, 1), (1, 0)]:
            chi_p, pi_p = solve_cell_problem(mu, k, a, kind, tol=1e-13)
            chi_d, pi_d = solve_cell_problem(mu, k, a, kind, method="dense")
            np.testing.assert_allclose(chi_p.coeffs, chi_d.coeffs, atol=1e-11)
            np.testing.assert_allclose(pi_p.coeffs, pi_d.coeffs, atol=1e-10)

    def test_weak_equals_energy(self, layered_cell, layered_A):
        assert np.max(np.abs(weak_form_tensor(layered_cell).entries - layered_A.entries)) < 1e-11

    def test_jobs_deterministic(self, product_mu, product_A):
        B = homogenized_tensor(product_mu, jobs=3)
        np.testing.assert_array_equal(B.entries, product_A.entries)


class TestInvariants:
    def test_correctors_divergence_free_and_mean_zero(self, layered_cell):
        assert layered_cell.max_divergence() < 1e-12
        assert layered_cell.max_mean() == 0

    @pytest.mark.parametrize(
        "model",
        [LAYERED, PRODUCT, ViscosityModel.constant(1.7), smooth_tabulated()],
        ids=["layered", "product", "constant", "tabulated"],
    )
    def test_trace_identity(self, model):
        mu = sample_viscosity(model, make_grid(2, 32))
        assert trace_identity_residual(homogenized_tensor(mu), mu) < 1e-12

    def test_product_symmetry_and_report(self, product_mu):
        sol = solve_cell_problems(product_mu)
        A = homogenized_tensor(product_mu, solution=sol)
        rep = check_tensor(A, sol, PRODUCT.mu0)
        assert rep.ok, rep.failures
        assert rep.simple_symmetry < 1e-13

    def test_symmetrized_report_3d(self):
        mu = sample_viscosity(PRODUCT_3D, make_grid(3, 8))
        sol = solve_cell_problems(mu, "symmetrized")
        A = homogenized_tensor(mu, "symmetrized", solution=sol)
        rep = check_tensor(A, sol, PRODUCT_3D.mu0)
        assert rep.ok, rep.failures
        assert rep.trace_identity is None and rep.full_symmetry < 1e-13

    def test_legendre_hadamard_above_mu0(self, product_A):
        assert legendre_hadamard_margin(product_A) >= PRODUCT.mu0

    def test_between_harmonic_and_arithmetic(self, product_mu, product_A):
        # Voigt/Reuss-type bounds on the diagonal shear entries
        vals = product_mu.nodal.real
        lo, hi = 1 / np.mean(1 / vals), np.mean(vals)
        for k, a in itertools.product(range(2), repeat=2):
            assert lo - 1e-12 <= product_A.entries[k, k, a, a] <= hi + 1e-12

    def test_report_flags_failure(self, layered_cell, layered_A):
        rep = check_tensor(layered_A, layered_cell, mu0=10.0)
        assert "legendre_hadamard" in rep.failures
