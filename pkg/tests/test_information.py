import numpy as np
import pytest

from nsvol.errors import CoverageError, SchemeError
from nsvol.information import (identifiability_profile, information_matrix,
                               information_matrix_mc, trace_densities)
from nsvol.models import correlated_bm, scalar_bm
from nsvol.scheme import poisson_grid, uniform_grid

from conftest import make_constant_model


class TestTraceDensities:
    def test_synchronous_uniform_closed_form(self):
        # G is the identity: the trace density is constant in time and the
        # resolvent is the scalar geometric value
        n, T = 64, 1.0
        dens = trace_densities([uniform_grid(n, n, 0.0, T)], bins=8)
        for z in (0.0, 0.4, 0.8):
            expected = 1.0 / (2 * T * (1 - z * z))
            assert np.allclose(dens.a_bins(z), expected, rtol=1e-12)
            assert np.allclose(dens.c_bins(z), expected, rtol=1e-12)

    def test_zero_z_counting_density(self):
        n = 40
        g = uniform_grid(n, n // 2, 0.5, 1.0)
        dens = trace_densities([g], bins=10)
        assert dens.a(0.0, 0.55) == pytest.approx(n / (g.bn * g.horizon),
                                                  rel=1e-9)

    def test_identity_residual_small(self):
        grids = [poisson_grid(1.0, 1.4, 1.0, bn=150, seed=s) for s in range(4)]
        dens = trace_densities(grids, bins=16)
        for z in (0.25, 0.6, 0.9):
            assert dens.identity_residual(z) <= 1e-8

    def test_monotone_in_z(self):
        grids = [poisson_grid(1.0, 1.0, 1.0, bn=120, seed=s) for s in range(3)]
        dens = trace_densities(grids, bins=12)
        prev = dens.a_bins(0.0)
        for z in (0.3, 0.6, 0.9):
            cur = dens.a_bins(z)
            assert np.all(cur >= prev - 1e-12)
            prev = cur

    def test_left_continuity_binning(self):
        dens = trace_densities([uniform_grid(16, 16, 0.0, 1.0)], bins=4)
        # a bin edge belongs to the lower bin
        assert dens._bin_index(0.25) == 0
        assert dens._bin_index(0.2500001) == 1
        with pytest.raises(SchemeError):
            dens.a(0.0, 0.0)

    def test_domain_validation(self):
        with pytest.raises(SchemeError):
            trace_densities([])
        g1 = uniform_grid(4, 4, 0.0, 1.0)
        g2 = uniform_grid(4, 4, 0.0, 2.0)
        with pytest.raises(SchemeError):
            trace_densities([g1, g2])
        dens = trace_densities([g1])
        with pytest.raises(SchemeError):
            dens.a(1.0, 0.5)


class TestInformationFormula:
    def test_scalar_closed_form(self):
        # independent components, synchronous grids scaled per side: 4/s^2
        model = scalar_bm()
        n = 256
        dens = trace_densities([uniform_grid(n, n, 0.0, 1.0, bn=n)], bins=8)
        for s in (0.7, 1.0, 1.9):
            res = information_matrix(model, [s], dens)
            assert res.matrix[0, 0] == pytest.approx(4 / s ** 2, rel=1e-9)
            assert res.route == "formula"
        assert len(res.rho_zero_bins) == 8  # orthogonal rows: rho == 0

    def test_sigma_free_zero(self, sigma_free_model):
        dens = trace_densities([uniform_grid(32, 32, 0.0, 1.0)], bins=4)
        res = information_matrix(sigma_free_model, [1.0], dens)
        assert np.allclose(res.matrix, 0.0, atol=1e-12)

    def test_rho_zero_branch_drops_correlation_terms(self):
        # correlation parameter at zero: only the scale couples, through the
        # norm-ratio terms; the correlation slope enters the (2,2) entry
        model = correlated_bm()
        n = 128
        dens = trace_densities([uniform_grid(n, n, 0.0, 1.0)], bins=4)
        res = information_matrix(model, [1.0, 0.0], dens)
        assert len(res.rho_zero_bins) == 4
        a0 = dens.a(0.0, 0.5)
        # with rho = 0 only 2 a0 (dB1)^2 + 2 c0 (dB2)^2 survives
        assert res.matrix[0, 0] == pytest.approx(4 * a0, rel=1e-9)
        assert res.matrix[0, 1] == pytest.approx(0.0, abs=1e-9)
        assert res.matrix[1, 1] == pytest.approx(0.0, abs=1e-9)

    def test_coverage_error_when_rho_too_large(self):
        q = np.sqrt(1 - 0.999999 ** 2)
        model = make_constant_model([[1.0, 0.0], [0.999999, q]])
        dens = trace_densities([uniform_grid(16, 16, 0.0, 1.0)], bins=4)
        with pytest.raises(CoverageError):
            information_matrix(model, [1.0], dens, z_step=1e-4)

    def test_bin_contributions_sum(self):
        model = correlated_bm()
        grids = [poisson_grid(1.0, 1.0, 1.0, bn=100, seed=s) for s in range(3)]
        dens = trace_densities(grids, bins=8)
        res = information_matrix(model, [1.0, 0.5], dens)
        assert np.allclose(res.bin_contributions.sum(axis=0), res.matrix)
        assert np.allclose(res.matrix, res.matrix.T)


class TestInformationEmpirical:
    def test_sigma_free_zero(self, sigma_free_model):
        gen = lambda seed: poisson_grid(1.0, 1.0, 1.0, bn=60, seed=seed)
        res = information_matrix_mc(sigma_free_model, [1.0], gen,
                                    replicates=3, seed=0)
        assert np.allclose(res.matrix, 0.0, atol=1e-4)

    def test_replicate_validation(self):
        with pytest.raises(ValueError):
            information_matrix_mc(scalar_bm(), [1.0], lambda s: None,
                                  replicates=1)

    def test_two_route_consistency_small(self):
        model = correlated_bm()
        sigma = [1.0, 0.5]
        gen = lambda seed: poisson_grid(1.0, 1.0, 1.0, bn=250, seed=seed)
        grids = [gen([77, k]) for k in range(24)]
        dens = trace_densities(grids, bins=32)
        formula = information_matrix(model, sigma, dens)
        mc = information_matrix_mc(model, sigma, gen, replicates=48, seed=19)
        assert np.all(np.abs(formula.matrix - mc.matrix) <= 3.0 * mc.se)

    def test_scalar_closed_form_route(self):
        model = scalar_bm()
        n = 200
        gen = lambda seed: uniform_grid(n, n, 0.0, 1.0, bn=n)
        res = information_matrix_mc(model, [1.0], gen, replicates=32, seed=3)
        assert res.matrix[0, 0] == pytest.approx(4.0, rel=0.05)
        assert res.se.shape == (1, 1)


class TestIdentifiabilityProfile:
    def test_zero_at_truth_negative_elsewhere(self):
        model = correlated_bm()
        grids = [poisson_grid(1.0, 1.0, 1.0, bn=150, seed=s) for s in range(6)]
        dens = trace_densities(grids, bins=16)
        sigma_star = np.array([1.0, 0.5])
        vals = identifiability_profile(
            model, sigma_star, dens,
            [sigma_star, [1.3, 0.5], [1.0, 0.1], [0.7, -0.2]])
        assert vals[0] == pytest.approx(0.0, abs=1e-10)
        assert np.all(vals[1:] < 0)

    def test_curvature_matches_information(self):
        model = correlated_bm()
        grids = [poisson_grid(1.0, 1.0, 1.0, bn=120, seed=s) for s in range(4)]
        dens = trace_densities(grids, bins=16)
        sigma_star = np.array([1.0, 0.4])
        gamma = information_matrix(model, sigma_star, dens).matrix
        h = 1e-4
        hess = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                acc = 0.0
                for si in (1, -1):
                    for sj in (1, -1):
                        p = sigma_star.copy()
                        p[i] += si * h
                        p[j] += sj * h
                        acc += si * sj * identifiability_profile(
                            model, sigma_star, dens, [p])[0]
                hess[i, j] = acc / (4 * h * h)
        assert np.allclose(-hess, gamma, rtol=1e-3, atol=1e-6)

    def test_state_dependent_path_branch(self):
        # non-separable coefficients: the norm ratios depend on the state,
        # so the supplied-path branch must differ from the constant branch
        from nsvol.sde import DiffusionModel, simulate_path

        q0 = np.sqrt(1 - 0.16)

        def shape(u):
            return u / np.sqrt(1.0 + u * u)

        def diffusion(t, x, sigma):
            s1, s2 = sigma
            x = np.atleast_2d(np.asarray(x, dtype=float))
            e1 = s1 + 0.25 * s2 * shape(x[:, 1])
            e2 = s2 + 0.25 * s1 * shape(x[:, 0])
            out = np.zeros((x.shape[0], 2, 2))
            out[:, 0, 0] = e1
            out[:, 1, 0] = 0.4 * e2
            out[:, 1, 1] = q0 * e2
            return out

        model = DiffusionModel(
            dim_param=2,
            drift=lambda t, x, s: 0.0 * np.atleast_2d(x),
            diffusion=diffusion,
            param_box=((0.8, 2.0), (0.8, 2.0)), y0=(0.0, 0.0))
        sigma = np.array([1.0, 1.0])
        grid = poisson_grid(1.0, 1.0, 1.0, bn=200, seed=2)
        path = simulate_path(model, sigma, grid, seed=3)
        grids = [poisson_grid(1.0, 1.0, 1.0, bn=200, seed=s) for s in range(4)]
        dens = trace_densities(grids, bins=16)
        res = information_matrix(model, sigma, dens,
                                 coeff_path=(grid.merged, path))
        assert np.all(np.isfinite(res.matrix))
        assert np.linalg.eigvalsh(res.matrix)[0] > 0
        res0 = information_matrix(model, sigma, dens, coeff_path="constant")
        assert not np.allclose(res.matrix, res0.matrix)

    def test_positive_definite_information(self):
        # identifiable built-ins must yield a PD limit information
        for model, sigma in ((scalar_bm(), [1.2]),
                             (correlated_bm(), [0.9, 0.35])):
            grids = [poisson_grid(1.0, 1.0, 1.0, bn=150, seed=s)
                     for s in range(4)]
            dens = trace_densities(grids, bins=16)
            gamma = information_matrix(model, sigma, dens).matrix
            assert np.linalg.eigvalsh(gamma)[0] > 0
