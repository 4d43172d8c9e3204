"""Posterior criterion, local linearization and the linearized likelihood.

All covariances are relative to the common variance factor ``sigma**2``.
Stacked vectors are time-major and restricted to the observed entries of
each sample.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .model import DataSet, FunctionalSample, ModelSpec
from .warp import LatentWarp, warp_eval, warp_grad

__all__ = [
    "Linearization",
    "mean_curve",
    "mean_curve_deriv",
    "stacked_mean",
    "neg_log_posterior",
    "linearize",
    "profile_nll",
    "linearized_nll",
    "conditional_warp_moments",
]

# returned by likelihood evaluations when a covariance is not positive definite
PENALTY = 1e20
SIGMA2_FLOOR = 1e-300


def pmap(fn, items, threads=1):
    """Ordered map, optionally over a thread pool."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def mean_curve(basis, coef, x):
    """Mean values ``theta(x)``, shape ``(len(x), q)``; ``x`` is clamped to the basis domain."""
    a, b = basis.domain
    return basis(np.clip(x, a, b)) @ coef


def mean_curve_deriv(basis, coef, x):
    """``d theta / dt`` at ``x``; zero where ``x`` was clamped."""
    a, b = basis.domain
    x = np.asarray(x, float)
    out = basis.deriv(np.clip(x, a, b)) @ coef
    out[(x < a) | (x > b)] = 0.0
    return out


def stacked_mean(sample: FunctionalSample, latent: LatentWarp, coef, spec: ModelSpec):
    v = warp_eval(spec.warp, latent, sample.times)
    return mean_curve(spec.basis, coef, v).ravel()[sample.observed]


def _warped_jacobian(sample, latent, coef, spec):
    """Stacked mean and its Jacobian with respect to the latent vector."""
    v = warp_eval(spec.warp, latent, sample.times)
    G = warp_grad(spec.warp, latent, sample.times)  # (m, n_latent)
    gamma = mean_curve(spec.basis, coef, v)
    dtheta = mean_curve_deriv(spec.basis, coef, v)  # (m, q)
    Z = (dtheta[:, :, None] * G[:, None, :]).reshape(-1, G.shape[1])
    obs = sample.observed
    return gamma.ravel()[obs], Z[obs], v, G


@dataclass(frozen=True, eq=False)
class Linearization:
    """First-order expansion of one sample's mean around ``w0``.

    ``V = Z C Z^T + S + diag(noise)`` is the linearized covariance (relative
    to ``sigma**2``) and ``resid = y - gamma0 + Z w0`` the working response.
    """

    gamma0: np.ndarray
    Z: np.ndarray
    S: np.ndarray
    noise: np.ndarray
    V: np.ndarray
    y: np.ndarray
    w0: np.ndarray
    warped_times: np.ndarray
    warp_gradient: np.ndarray

    @property
    def resid(self):
        return self.y - self.gamma0 + self.Z @ self.w0


def linearize(sample: FunctionalSample, latent: LatentWarp, coef, spec: ModelSpec, S=None) -> Linearization:
    gamma0, Z, v, G = _warped_jacobian(sample, latent, coef, spec)
    S = spec.amplitude_block(sample) if S is None else S
    noise = spec.noise_diag(sample)
    C = spec.warp.latent_cov()
    V = Z @ C @ Z.T + S + np.diag(noise)
    return Linearization(gamma0, Z, S, noise, 0.5 * (V + V.T), sample.stacked(), latent.vector(spec.warp), v, G)


class PosteriorProblem:
    """The negative log posterior of one sample as a function of the latent vector.

    Factorizations of ``S + diag(noise)`` and of the prior covariance are
    computed once, so repeated evaluations only redo the warp and the mean.
    """

    def __init__(self, sample: FunctionalSample, coef, spec: ModelSpec, S=None):
        self.sample, self.coef, self.spec = sample, coef, spec
        S = spec.amplitude_block(sample) if S is None else S
        W = S + np.diag(spec.noise_diag(sample))
        self.L = np.linalg.cholesky(W)
        self.prior = cho_factor(spec.warp.latent_cov(), lower=True)
        self.y = sample.stacked()

    def value_and_grad(self, vec):
        latent = LatentWarp.from_vector(self.spec.warp, vec)
        gamma, Z, _, _ = _warped_jacobian(self.sample, latent, self.coef, self.spec)
        e = solve_triangular(self.L, gamma - self.y, lower=True)
        Je = solve_triangular(self.L, Z, lower=True)
        cinv_w = cho_solve(self.prior, vec)
        value = e @ e + vec @ cinv_w
        grad = 2.0 * (Je.T @ e + cinv_w)
        return value, grad

    def value(self, vec):
        latent = LatentWarp.from_vector(self.spec.warp, vec)
        gamma = stacked_mean(self.sample, latent, self.coef, self.spec)
        e = solve_triangular(self.L, gamma - self.y, lower=True)
        return e @ e + vec @ cho_solve(self.prior, vec)


def neg_log_posterior(sample: FunctionalSample, latent: LatentWarp, coef, spec: ModelSpec):
    """``(gamma_w - y)^T (S + N)^{-1} (gamma_w - y) + w^T C^{-1} w`` (shift term included in ``C``)."""
    return float(PosteriorProblem(sample, coef, spec).value(latent.vector(spec.warp)))


def amplitude_blocks(spec, dataset):
    """Masked amplitude blocks per sample, computed once per distinct grid and mask."""
    cache = {}
    blocks = []
    for s in dataset:
        key = (s.times.tobytes(), s.mask.tobytes())
        if key not in cache:
            cache[key] = spec.amplitude_block(s)
        blocks.append(cache[key])
    return blocks


def _sample_quad_logdet(lin: Linearization, C, S, noise):
    V = lin.Z @ C @ lin.Z.T + S
    V[np.diag_indices_from(V)] += noise
    L = np.linalg.cholesky(V)
    z = solve_triangular(L, lin.resid, lower=True)
    return float(z @ z), 2.0 * float(np.log(np.diag(L)).sum())


def linearized_terms(spec: ModelSpec, dataset: DataSet, lins, threads=1):
    """Per-sample quadratic forms and log-determinants under ``spec``'s variances.

    Returns ``None`` when some ``V_n`` is not positive definite.
    """
    C = spec.warp.latent_cov()
    blocks = amplitude_blocks(spec, dataset)

    def one(i):
        try:
            return _sample_quad_logdet(lins[i], C, blocks[i], spec.noise_diag(dataset[i]))
        except np.linalg.LinAlgError:
            return None

    terms = pmap(one, range(len(lins)), threads)
    if any(t is None for t in terms):
        return None
    return terms


def _profile_from_terms(terms, n_obs):
    quad = math.fsum(t[0] for t in terms)
    logdet = math.fsum(t[1] for t in terms)
    sigma2 = quad / n_obs
    value = n_obs * math.log(max(sigma2, SIGMA2_FLOOR)) + logdet + n_obs
    return value, sigma2


def profile_from_linearizations(spec, dataset, lins, threads=1):
    """Twice the negative profile log-likelihood and the profiled ``sigma**2``."""
    terms = linearized_terms(spec, dataset, lins, threads)
    if terms is None:
        return PENALTY, float("nan")
    return _profile_from_terms(terms, dataset.n_observed)


def linearize_all(spec, dataset, coefs, latents, threads=1):
    return pmap(lambda i: linearize(dataset[i], latents[i], coefs[dataset[i].subject], spec), range(len(dataset)), threads)


def profile_nll(spec: ModelSpec, dataset: DataSet, coefs, latents, return_sigma2=False, threads=1):
    """Profile criterion ``sum(q m_n log s2 + log det V_n) + q m`` at ``s2 = sigma_hat**2``.

    ``sigma_hat**2 = sum(r_n^T V_n^{-1} r_n) / (q m)`` with ``r_n = y_n - gamma_n + Z_n w_n``,
    where ``q m`` counts the observed scalars.
    """
    lins = linearize_all(spec, dataset, coefs, latents, threads)
    value, sigma2 = profile_from_linearizations(spec, dataset, lins, threads)
    return (value, sigma2) if return_sigma2 else value


def linearized_nll(spec: ModelSpec, dataset: DataSet, coefs, latents, sigma2, threads=1):
    """Twice the negative linearized log-likelihood at a fixed ``sigma**2`` (no profiling)."""
    lins = linearize_all(spec, dataset, coefs, latents, threads)
    terms = linearized_terms(spec, dataset, lins, threads)
    if terms is None:
        return PENALTY
    n_obs = dataset.n_observed
    quad = math.fsum(t[0] for t in terms)
    logdet = math.fsum(t[1] for t in terms)
    return n_obs * math.log(sigma2) + logdet + quad / sigma2


def conditional_warp_moments(sample: FunctionalSample, lin: Linearization, spec: ModelSpec, sigma2):
    """Mean and covariance of the latent vector given the data in the linearized model.

    With ``W = S + diag(noise)`` and ``P = Z^T W^{-1} Z + C^{-1}``:
    ``cov = sigma2 * P^{-1}`` and ``mean = P^{-1} Z^T W^{-1} (y - gamma0 + Z w0)``.
    """
    W = cho_factor(lin.S + np.diag(lin.noise), lower=True)
    C = spec.warp.latent_cov()
    WZ = cho_solve(W, lin.Z)
    P = lin.Z.T @ WZ + cho_solve(cho_factor(C, lower=True), np.eye(C.shape[0]))
    Pf = cho_factor(0.5 * (P + P.T), lower=True)
    mean = cho_solve(Pf, WZ.T @ lin.resid)
    cov = sigma2 * cho_solve(Pf, np.eye(P.shape[0]))
    return mean, 0.5 * (cov + cov.T)
