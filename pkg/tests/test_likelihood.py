"""Tests for the posterior criterion, linearization and profile likelihood."""

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_spec, random_coef, random_latent, random_sample
from simm import (
    DataSet,
    DiagonalAmplitude,
    LatentWarp,
    Matern,
    WarpCovariance,
    WarpModel,
    conditional_warp_moments,
    linearize,
    linearized_nll,
    neg_log_posterior,
    profile_nll,
)
from simm.likelihood import stacked_mean


def dense_posterior(sample, latent, coef, spec):
    y = sample.stacked()
    gamma = stacked_mean(sample, latent, coef, spec)
    W = spec.amplitude_block(sample) + np.diag(spec.noise_diag(sample))
    w = latent.vector(spec.warp)
    r = gamma - y
    return r @ np.linalg.inv(W) @ r + w @ np.linalg.inv(spec.warp.latent_cov()) @ w


def dense_terms(spec, dataset, coefs, latents):
    """Quadratic forms and log-determinants from explicit inverses."""
    quad, logdet = 0.0, 0.0
    for s, lat in zip(dataset, latents):
        lin = linearize(s, lat, coefs[s.subject], spec)
        V = lin.Z @ spec.warp.latent_cov() @ lin.Z.T + spec.amplitude_block(s) + np.diag(spec.noise_diag(s))
        r = s.stacked() - lin.gamma0 + lin.Z @ lin.w0
        quad += r @ np.linalg.inv(V) @ r
        logdet += np.linalg.slogdet(V)[1]
    return quad, logdet


def golden_section(f, lo, hi, tol=1e-13):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * (abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def random_problem(rng, n=3, q=2, m=10, dynamic=False, shift=False, missing=0.0, subjects=1):
    spec = make_spec(rng, q=q, dynamic=dynamic, shift=shift)
    samples = [random_sample(rng, q, m, subject=i % subjects, missing=missing) for i in range(n)]
    data = DataSet(tuple(samples))
    coefs = [random_coef(rng, spec) for _ in range(subjects)]
    latents = [random_latent(rng, spec.warp) for _ in range(n)]
    return spec, data, coefs, latents


class TestNegLogPosterior:
    def test_zero_residual_and_zero_warp(self, rng):
        spec = make_spec(rng)
        coef = random_coef(rng, spec)
        t = np.linspace(0, 1, 15)
        from simm import FunctionalSample

        y = stacked_mean(FunctionalSample(t, np.zeros((15, 2))), LatentWarp.zero(spec.warp), coef, spec).reshape(15, 2)
        assert neg_log_posterior(FunctionalSample(t, y), LatentWarp.zero(spec.warp), coef, spec) == 0.0

    def test_identity_weight_reduction(self, rng):
        spec = make_spec(rng)
        spec = replace(
            spec,
            amplitude=DiagonalAmplitude(Matern(2.0, 0.2), [1e-12, 1e-12]),
            warp=WarpModel(3, WarpCovariance("unstructured", matrix=np.eye(3))),
        )
        s = random_sample(rng)
        lat = random_latent(rng, spec.warp)
        coef = random_coef(rng, spec)
        r = stacked_mean(s, lat, coef, spec) - s.stacked()
        assert neg_log_posterior(s, lat, coef, spec) == pytest.approx(r @ r + lat.w @ lat.w, rel=1e-10)

    @pytest.mark.parametrize("dynamic,shift,missing", [(False, False, 0.0), (True, False, 0.2), (False, True, 0.1)])
    def test_dense_oracle(self, rng, dynamic, shift, missing):
        for _ in range(10):
            spec, data, coefs, latents = random_problem(rng, n=1, dynamic=dynamic, shift=shift, missing=missing)
            got = neg_log_posterior(data[0], latents[0], coefs[0], spec)
            assert got == pytest.approx(dense_posterior(data[0], latents[0], coefs[0], spec), rel=1e-9)

    def test_heterogeneous_noise_enters_weight(self, rng):
        spec = make_spec(rng, rho=np.array([1.0, 4.0]))
        s = random_sample(rng)
        lat = random_latent(rng, spec.warp)
        coef = random_coef(rng, spec)
        assert neg_log_posterior(s, lat, coef, spec) == pytest.approx(dense_posterior(s, lat, coef, spec), rel=1e-9)


class TestLinearize:
    def test_constant_template_gives_zero_jacobian(self, rng):
        spec = make_spec(rng)
        coef = np.tile([1.5, -2.0], (spec.basis.n_basis, 1))
        lin = linearize(random_sample(rng), random_latent(rng, spec.warp), coef, spec)
        np.testing.assert_allclose(lin.Z, 0.0, atol=1e-12)

    @pytest.mark.parametrize("shift", [False, True])
    def test_shape(self, rng, shift):
        spec = make_spec(rng, q=3, m_w=4, shift=shift)
        s = random_sample(rng, q=3, m=9)
        lin = linearize(s, random_latent(rng, spec.warp), random_coef(rng, spec), spec)
        assert lin.Z.shape == (27, 4 + int(shift))
        assert lin.V.shape == (27, 27)

    def test_covariance_identity(self, rng):
        spec, data, coefs, latents = random_problem(rng, n=1, dynamic=True)
        lin = linearize(data[0], latents[0], coefs[0], spec)
        V = lin.Z @ spec.warp.latent_cov() @ lin.Z.T + lin.S + np.diag(lin.noise)
        np.testing.assert_allclose(lin.V, V, atol=1e-13)
        np.linalg.cholesky(lin.V)

    @pytest.mark.parametrize("shift", [False, True])
    def test_jacobian_matches_finite_differences(self, rng, shift):
        h = 1e-6
        for _ in range(20):
            spec, data, coefs, latents = random_problem(rng, n=1, shift=shift, m=15)
            s, lat, coef = data[0], latents[0], coefs[0]
            lin = linearize(s, lat, coef, spec)
            vec = lat.vector(spec.warp)
            for l in range(vec.size):
                e = np.zeros_like(vec)
                e[l] = h
                up = stacked_mean(s, LatentWarp.from_vector(spec.warp, vec + e), coef, spec)
                dn = stacked_mean(s, LatentWarp.from_vector(spec.warp, vec - e), coef, spec)
                fd = (up - dn) / (2 * h)
                assert np.linalg.norm(lin.Z[:, l] - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)


class TestProfile:
    def test_unit_covariance_closed_form(self, rng):
        spec, data, coefs, latents = random_problem(rng, n=2)
        spec = replace(
            spec,
            amplitude=DiagonalAmplitude(Matern(2.0, 0.2), [1e-12, 1e-12]),
            warp=WarpModel(3, WarpCovariance("brownian-bridge", 1e-12)),
        )
        latents = [LatentWarp.zero(spec.warp)] * 2
        _, s2 = profile_nll(spec, data, coefs, latents, return_sigma2=True)
        r = np.concatenate([s.stacked() - stacked_mean(s, lat, coefs[0], spec) for s, lat in zip(data, latents)])
        assert s2 == pytest.approx(r @ r / r.size, rel=1e-10)

    @pytest.mark.parametrize("dynamic,missing", [(False, 0.0), (True, 0.15)])
    def test_dense_oracle(self, rng, dynamic, missing):
        for _ in range(5):
            spec, data, coefs, latents = random_problem(rng, n=3, m=10, dynamic=dynamic, missing=missing, subjects=2)
            value, s2 = profile_nll(spec, data, coefs, latents, return_sigma2=True)
            quad, logdet = dense_terms(spec, data, coefs, latents)
            n = data.n_observed
            assert s2 == pytest.approx(quad / n, rel=1e-8)
            assert value == pytest.approx(n * math.log(quad / n) + logdet + n, rel=1e-8)

    def test_sigma2_is_minimizer_of_unprofiled_criterion(self, rng):
        spec, data, coefs, latents = random_problem(rng, n=2)
        _, s2 = profile_nll(spec, data, coefs, latents, return_sigma2=True)
        best = golden_section(lambda v: linearized_nll(spec, data, coefs, latents, v), s2 / 50, s2 * 50)
        assert best == pytest.approx(s2, rel=1e-6)

    def test_profile_equals_unprofiled_at_estimate(self, rng):
        spec, data, coefs, latents = random_problem(rng, n=2)
        value, s2 = profile_nll(spec, data, coefs, latents, return_sigma2=True)
        assert linearized_nll(spec, data, coefs, latents, s2) == pytest.approx(value, rel=1e-12)

    def test_sample_permutation_invariance(self, rng):
        spec, data, coefs, latents = random_problem(rng, n=6, subjects=2)
        perm = rng.permutation(6)
        shuffled = DataSet(tuple(data[i] for i in perm), data.subjects)
        a = profile_nll(spec, data, coefs, latents)
        b = profile_nll(spec, shuffled, coefs, [latents[i] for i in perm])
        assert a == pytest.approx(b, rel=1e-12)

    def test_threads_do_not_change_value(self, rng):
        spec, data, coefs, latents = random_problem(rng, n=5)
        assert profile_nll(spec, data, coefs, latents, threads=3) == profile_nll(spec, data, coefs, latents)


class TestConditionalMoments:
    def test_prior_recovered_when_jacobian_vanishes(self, rng):
        spec = make_spec(rng)
        coef = np.tile([0.3, 0.7], (spec.basis.n_basis, 1))
        s = random_sample(rng)
        lin = linearize(s, LatentWarp.zero(spec.warp), coef, spec)
        mean, cov = conditional_warp_moments(s, lin, spec, 0.04)
        np.testing.assert_allclose(mean, 0.0, atol=1e-14)
        np.testing.assert_allclose(cov, 0.04 * spec.warp.latent_cov(), rtol=1e-12)

    @pytest.mark.parametrize("dynamic,shift", [(False, False), (True, True)])
    def test_joint_gaussian_oracle(self, rng, dynamic, shift):
        for _ in range(10):
            spec, data, coefs, latents = random_problem(rng, n=1, m=10, dynamic=dynamic, shift=shift)
            s = data[0]
            sigma2 = float(rng.uniform(0.01, 2.0))
            lin = linearize(s, latents[0], coefs[0], spec)
            mean, cov = conditional_warp_moments(s, lin, spec, sigma2)
            # joint law of (w, y*) with y* = Z w + e, shifted by the linearization offset
            C = sigma2 * spec.warp.latent_cov()
            W = sigma2 * (spec.amplitude_block(s) + np.diag(spec.noise_diag(s)))
            cov_wy = C @ lin.Z.T
            cov_yy = lin.Z @ C @ lin.Z.T + W
            y_star = s.stacked() - lin.gamma0 + lin.Z @ lin.w0
            ref_mean = cov_wy @ np.linalg.solve(cov_yy, y_star)
            ref_cov = C - cov_wy @ np.linalg.solve(cov_yy, cov_wy.T)
            np.testing.assert_allclose(mean, ref_mean, atol=1e-8 * max(1.0, np.abs(ref_mean).max()))
            np.testing.assert_allclose(cov, ref_cov, atol=1e-8 * np.abs(C).max())

    def test_loewner_bound(self, rng):
        for _ in range(20):
            spec, data, coefs, latents = random_problem(rng, n=1)
            lin = linearize(data[0], latents[0], coefs[0], spec)
            _, cov = conditional_warp_moments(data[0], lin, spec, 0.5)
            gap = 0.5 * spec.warp.latent_cov() - cov
            assert np.linalg.eigvalsh(gap).min() >= -1e-10
            np.testing.assert_array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() > 0
