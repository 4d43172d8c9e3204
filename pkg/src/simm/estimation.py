"""Fixed effects, warp prediction, variance estimation and the alternating fit."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import lsq_linear, minimize

from .covariance import CrossCovAnchors, DiagonalAmplitude, DynamicAmplitude
from .likelihood import (
    PENALTY,
    PosteriorProblem,
    amplitude_blocks,
    conditional_warp_moments,
    linearize_all,
    linearized_nll,
    pmap,
    profile_from_linearizations,
    profile_nll,
)
from .model import DataSet, ModelSpec
from .warp import LatentWarp, warp_eval, warp_grad

__all__ = [
    "FitOptions",
    "FittedModel",
    "predict_warp",
    "fit_fixed_effects_gls",
    "em_update_coefficients",
    "estimate_variance",
    "scale_variances",
    "fit",
    "aligned_values",
    "cross_sectional_variance",
]

RIDGE = 1e-8
FD_STEP = 1e-5


class FitWarning(RuntimeWarning):
    """Raised for recoverable numerical trouble during estimation."""


def _warn(msg):
    warnings.warn(msg, FitWarning, stacklevel=3)


# ---------------------------------------------------------------- warps


@dataclass(frozen=True)
class WarpPrediction:
    latent: LatentWarp
    objective: float
    initial_objective: float
    converged: bool


def predict_warp(sample, coef, spec: ModelSpec, w_init: Optional[LatentWarp] = None, maxiter=100, S=None, return_info=False):
    """Most likely latent warp of one sample under the current parameters.

    Minimizes the negative log posterior subject to strictly increasing
    anchor values with SLSQP and an analytic gradient. When the optimizer
    fails or ends infeasible, the start is returned and ``converged`` is False.
    """
    model = spec.warp
    x0 = (w_init or LatentWarp.zero(model)).vector(model)
    if not model.is_feasible(x0):
        raise ValueError("initial warp violates the monotone anchor constraint")
    problem = PosteriorProblem(sample, coef, spec, S)
    f0 = float(problem.value(x0))
    x_best, f_best, converged = x0, f0, True
    if f0 > 0:
        A, lower = model.constraints()

        def fun(x):
            val, grad = problem.value_and_grad(x)
            return val / f0, grad / f0

        cons = [{"type": "ineq", "fun": lambda x: A @ x - lower, "jac": lambda x: A}]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(fun, x0, jac=True, method="SLSQP", constraints=cons, options={"maxiter": maxiter, "ftol": 1e-14})
        x = np.asarray(res.x, float)
        if np.all(np.isfinite(x)) and model.is_feasible(x):
            f = float(problem.value(x))
            if f <= f0:
                x_best, f_best = x, f
        converged = bool(res.success)
        if not res.success and x_best is x0:
            _warn(f"warp prediction did not improve on its start ({res.message})")
    latent = LatentWarp.from_vector(model, x_best)
    if return_info:
        return WarpPrediction(latent, f_best, f0, converged)
    return latent


# ---------------------------------------------------------------- fixed effects


def _design(sample, latent, spec):
    """Kronecker design ``R = kron(F(v), I_q)`` on observed rows, plus warp pieces for EM."""
    a, b = spec.basis.domain
    v = warp_eval(spec.warp, latent, sample.times)
    vc = np.clip(v, a, b)
    F = spec.basis(vc)
    eye = np.eye(sample.q)
    R = np.kron(F, eye)[sample.observed]
    return R, F, v, eye


def _weight_factors(spec, dataset):
    """Cholesky factors of ``S_n + diag(noise)``, shared between samples on the same grid."""
    blocks = amplitude_blocks(spec, dataset)
    cache = {}
    out = []
    for s, S in zip(dataset, blocks):
        key = id(S)
        if key not in cache:
            cache[key] = cho_factor(S + np.diag(spec.noise_diag(s)), lower=True)
        out.append(cache[key])
    return out


def _solve_normal(G, h, nonneg=None, what="normal equations"):
    """Solve ``G c = h`` (``G`` symmetric PSD), optionally with ``c[nonneg] >= 0``."""
    G = 0.5 * (G + G.T)
    evals = np.linalg.eigvalsh(G)
    scale = max(float(evals[-1]), 1e-300)
    if evals[0] <= 1e-12 * scale:
        _warn(f"{what}: rank deficient system, adding ridge {RIDGE:g}")
        G = G + RIDGE * scale * np.eye(G.shape[0])
    L = np.linalg.cholesky(G)
    if nonneg is None or not np.any(nonneg):
        return cho_solve((L, True), h)
    # min |L^T c - L^{-1} h|^2 equals the quadratic c^T G c - 2 c^T h up to a constant
    rhs = solve_triangular(L, h, lower=True)
    lb = np.where(nonneg, 0.0, -np.inf)
    res = lsq_linear(L.T, rhs, bounds=(lb, np.full_like(lb, np.inf)), method="bvls", tol=1e-14)
    return res.x


def _coef_nonneg(spec, q):
    mask = spec.basis.nonnegative_mask()
    return np.repeat(mask, q) if np.any(mask) else None


def fit_fixed_effects_gls(dataset: DataSet, latents, spec: ModelSpec, factors=None):
    """Per-subject GLS coefficients ``(K, q)`` given the warps.

    ``c = (sum R^T W^{-1} R)^{-1} sum R^T W^{-1} y`` with ``W = S_n + diag(noise)``;
    in increasing mode the monotone coefficients are constrained to be nonnegative.
    """
    q = dataset.q
    K = spec.basis.n_basis
    factors = _weight_factors(spec, dataset) if factors is None else factors
    G = np.zeros((dataset.n_subjects, K * q, K * q))
    h = np.zeros((dataset.n_subjects, K * q))
    seen = np.zeros(dataset.n_subjects, bool)
    for s, lat, W in zip(dataset, latents, factors):
        R = _design(s, lat, spec)[0]
        WR = cho_solve(W, R)
        G[s.subject] += R.T @ WR
        h[s.subject] += WR.T @ s.stacked()
        seen[s.subject] = True
    if not np.all(seen):
        raise ValueError("every subject needs at least one sample")
    nonneg = _coef_nonneg(spec, q)
    return [_solve_normal(G[j], h[j], nonneg, "GLS").reshape(K, q) for j in range(dataset.n_subjects)]


def em_update_coefficients(dataset: DataSet, latents, moments, spec: ModelSpec, coefs=None, factors=None):
    """One M-step for the coefficients given conditional warp moments.

    ``moments[n] = (mean, cov)`` with ``cov`` on the absolute scale (including
    ``sigma**2``). With ``K_n = R_n + sum_l (mean_l - w0_l) R_nl``:
    ``c = [sum K^T W^{-1} K + sum_{l1,l2} cov_{l1 l2} R_l1^T W^{-1} R_l2]^{-1} sum K^T W^{-1} y``.
    ``coefs`` is accepted for symmetry with the fit loop; the step does not depend on it.
    """
    q = dataset.q
    K = spec.basis.n_basis
    a, b = spec.basis.domain
    factors = _weight_factors(spec, dataset) if factors is None else factors
    G = np.zeros((dataset.n_subjects, K * q, K * q))
    h = np.zeros((dataset.n_subjects, K * q))
    for s, lat, (wbar, wcov), W in zip(dataset, latents, moments, factors):
        R, F, v, eye = _design(s, lat, spec)
        Fd = spec.basis.deriv(np.clip(v, a, b))
        Fd[(v < a) | (v > b)] = 0.0
        grad = warp_grad(spec.warp, lat, s.times)
        Rl = [np.kron(Fd * grad[:, [l]], eye)[s.observed] for l in range(grad.shape[1])]
        delta = np.asarray(wbar, float) - lat.vector(spec.warp)
        Kbar = R + sum(d * M for d, M in zip(delta, Rl))
        WK = cho_solve(W, Kbar)
        WRl = [cho_solve(W, M) for M in Rl]
        acc = Kbar.T @ WK
        for l1 in range(len(Rl)):
            for l2 in range(len(Rl)):
                if wcov[l1, l2] != 0.0:
                    acc = acc + wcov[l1, l2] * (Rl[l1].T @ WRl[l2])
        G[s.subject] += 0.5 * (acc + acc.T)
        h[s.subject] += WK.T @ s.stacked()
    nonneg = _coef_nonneg(spec, q)
    return [_solve_normal(G[j], h[j], nonneg, "EM step").reshape(K, q) for j in range(dataset.n_subjects)]


# ---------------------------------------------------------------- variances


def estimate_variance(dataset: DataSet, coefs, latents, spec: ModelSpec, maxiter=200, threads=1, return_info=False):
    """Minimize the profile criterion over the encoded variance parameters.

    BFGS with central finite-difference gradients (step 1e-5) in the encoded
    space. The linearization is held fixed at the given warps and coefficients.
    Returns the initial ``spec`` with a warning when no improvement is found.
    """
    lins = linearize_all(spec, dataset, coefs, latents, threads)
    scale = float(max(1, dataset.n_observed))

    def objective(vec):
        try:
            cand = spec._decode(vec)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError, OverflowError):
            return PENALTY
        with np.errstate(over="ignore", invalid="ignore"):
            val = profile_from_linearizations(cand, dataset, lins, threads)[0]
        return val / scale if np.isfinite(val) else PENALTY

    def gradient(vec):
        g = np.empty_like(vec)
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = FD_STEP
            g[i] = (objective(vec + e) - objective(vec - e)) / (2 * FD_STEP)
        return g

    x0 = spec._encode()
    f0 = objective(x0)
    best_spec, best_f = spec, f0
    if x0.size:
        with np.errstate(over="ignore"):
            res = minimize(objective, x0, jac=gradient, method="BFGS", options={"maxiter": maxiter, "gtol": 1e-6})
        f = objective(res.x)
        if np.all(np.isfinite(res.x)) and f < f0:
            best_spec, best_f = spec._decode(res.x), f
        elif not res.success:
            _warn(f"variance estimation made no progress ({res.message})")
    if return_info:
        return best_spec, {"objective": best_f * scale, "initial_objective": f0 * scale}
    return best_spec


def scale_variances(spec: ModelSpec, factor):
    """Multiply every warp and amplitude standard deviation by ``factor``.

    Converts between variances relative to ``sigma**2`` and absolute ones:
    ``scale_variances(spec, sigma)`` gives the absolute parametrization.
    The noise weights are relative by definition and stay unchanged.
    """
    factor = float(factor)
    wc = spec.warp.covariance
    wc = replace(
        wc,
        tau=wc.tau * factor,
        matrix=None if wc.matrix is None else wc.matrix * factor**2,
        shift_sd=None if wc.shift_sd is None else wc.shift_sd * factor,
    )
    amp = spec.amplitude
    if isinstance(amp, DiagonalAmplitude):
        amp = DiagonalAmplitude(amp.kernel, amp.scales * factor)
    else:
        amp = DynamicAmplitude(amp.kernel, CrossCovAnchors(amp.anchors.times, amp.anchors.matrices * factor**2))
    return replace(spec, warp=replace(spec.warp, covariance=wc), amplitude=amp)


def _residual_split(dataset, coefs, spec):
    """Per-coordinate residual variances of the unwarped GLS fit."""
    latents = [LatentWarp.zero(spec.warp)] * len(dataset)
    ss = np.zeros(dataset.q)
    cnt = np.zeros(dataset.q)
    for s, lat in zip(dataset, latents):
        R = _design(s, lat, spec)[0]
        r = np.full(s.values.size, np.nan)
        r[s.observed] = s.stacked() - R @ coefs[s.subject].ravel()
        r = r.reshape(s.values.shape)
        ss += np.nansum(r**2, axis=0)
        cnt += s.mask.sum(axis=0)
    return ss / np.maximum(cnt, 1)


def _mean_square(dataset):
    return float(np.mean(np.concatenate([s.stacked() ** 2 for s in dataset])))


def _split_init(spec, v):
    """Internal parameters with 10% of the residual variance as noise and 90% as amplitude."""
    vbar = float(np.mean(v))
    sigma0 = math.sqrt(0.1 * vbar)
    ratio = 9.0 * np.maximum(v, 1e-12 * vbar) / vbar
    grid = np.linspace(0, 1, 101)
    kernel = spec.amplitude.kernel
    fbar = float(np.mean(np.diag(kernel.gram(grid))))
    if isinstance(spec.amplitude, DiagonalAmplitude):
        amp = DiagonalAmplitude(kernel, np.sqrt(ratio / fbar))
    else:
        anchors = spec.amplitude.anchors
        mats = np.array([np.diag(ratio) / fbar for _ in anchors.times])
        amp = DynamicAmplitude(kernel, CrossCovAnchors(anchors.times, mats))
    return sigma0, amp


# ---------------------------------------------------------------- fit


@dataclass(frozen=True)
class FitOptions:
    """Controls for :func:`fit`.

    ``init="split"`` derives the initial amplitude variances from a 90/10
    split of the unwarped residual variance; ``init="given"`` keeps the
    amplitude parameters of the spec. In both cases the spec's warp and
    amplitude parameters are read as absolute scales (``sigma`` included)
    and converted with the initial ``sigma`` from the residual variance.
    ``init="internal"`` uses the spec's parameters unchanged, as variances
    relative to ``sigma**2``.
    """

    max_outer: int = 5
    rel_tol: float = 1e-4
    em: bool = False
    estimate_variances: bool = True
    init: str = "split"
    warp_maxiter: int = 100
    variance_maxiter: int = 200
    threads: int = 1

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if not self.rel_tol >= 0:
            raise ValueError("rel_tol must be nonnegative")
        if self.init not in ("split", "given", "internal"):
            raise ValueError(f"unknown init mode {self.init!r}")


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Estimated templates, variance parameters and predicted warps.

    ``spec`` holds variances relative to ``sigma2``; :meth:`effective_spec`
    returns them on the absolute scale.
    """

    spec: ModelSpec
    coefficients: tuple
    sigma2: float
    latents: tuple
    trace: tuple
    subjects: tuple = ()
    converged: bool = False
    messages: tuple = ()

    @property
    def sigma(self):
        return math.sqrt(max(self.sigma2, 0.0))

    def effective_spec(self):
        return scale_variances(self.spec, self.sigma)

    def template(self, subject, t):
        from .likelihood import mean_curve

        return mean_curve(self.spec.basis, self.coefficients[subject], np.asarray(t, float))

    def warp_values(self, n, t):
        return warp_eval(self.spec.warp, self.latents[n], t)


def _profile_terms(spec, dataset, coefs, latents, threads):
    return profile_nll(spec, dataset, coefs, latents, return_sigma2=True, threads=threads)


def _with_moments(spec, dataset, coefs, latents, sigma2, threads):
    lins = linearize_all(spec, dataset, coefs, latents, threads)
    return [conditional_warp_moments(s, lin, spec, sigma2) for s, lin in zip(dataset, lins)]


def fit(dataset: DataSet, spec: ModelSpec, options: FitOptions = FitOptions()) -> FittedModel:
    """Alternate fixed effects, warp prediction and variance estimation.

    Each outer iteration runs GLS for the templates, predicts every warp
    (warm-started from the previous ones), optionally takes one EM step for
    the templates, re-estimates the variance parameters and records the
    profile criterion. Iteration stops at ``max_outer`` or when the relative
    criterion change drops below ``rel_tol``. If an iteration increases the
    criterion, its results are discarded and the loop stops.
    """
    if spec.q != dataset.q:
        raise ValueError("model dimension does not match the data")
    a, b = spec.warp.domain
    for s in dataset:
        if s.times[0] < a - 1e-12 or s.times[-1] > b + 1e-12:
            raise ValueError("sample times must lie inside the warp domain")
    threads = options.threads
    messages = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FitWarning)
        latents = [LatentWarp.zero(spec.warp)] * len(dataset)
        if options.init != "internal":
            coefs0 = fit_fixed_effects_gls(dataset, latents, spec)
            v = _residual_split(dataset, coefs0, spec)
            # residuals at rounding level mean the data carry no variance to split
            if np.mean(v) > 1e-20 * _mean_square(dataset):
                sigma0, amp = _split_init(spec, v)
                base = scale_variances(spec, 1.0 / sigma0)
                spec = replace(base, amplitude=amp) if options.init == "split" else base

        coefs = fit_fixed_effects_gls(dataset, latents, spec)
        state = None
        trace = []
        converged = False
        for _ in range(options.max_outer):
            factors = _weight_factors(spec, dataset)
            new_coefs = fit_fixed_effects_gls(dataset, latents, spec, factors)
            blocks = amplitude_blocks(spec, dataset)
            new_latents = pmap(
                lambda i: predict_warp(dataset[i], new_coefs[dataset[i].subject], spec, latents[i], options.warp_maxiter, blocks[i]),
                range(len(dataset)),
                threads,
            )
            if options.em:
                _, s2 = _profile_terms(spec, dataset, new_coefs, new_latents, threads)
                if np.isfinite(s2) and s2 > 0:
                    moments = _with_moments(spec, dataset, new_coefs, new_latents, s2, threads)
                    cand = em_update_coefficients(dataset, new_latents, moments, spec, new_coefs, factors)
                    before = linearized_nll(spec, dataset, new_coefs, new_latents, s2, threads)
                    after = linearized_nll(spec, dataset, cand, new_latents, s2, threads)
                    if after <= before + 1e-8:
                        new_coefs = cand
            new_spec = spec
            if options.estimate_variances and spec.n_free:
                new_spec = estimate_variance(dataset, new_coefs, new_latents, spec, options.variance_maxiter, threads)
            crit, sigma2 = _profile_terms(new_spec, dataset, new_coefs, new_latents, threads)
            if trace and crit > trace[-1] + 1e-6 * abs(trace[-1]):
                messages.append("criterion increased; kept the previous iterate")
                converged = True
                break
            state = (new_spec, new_coefs, new_latents, sigma2)
            spec, coefs, latents = new_spec, new_coefs, new_latents
            trace.append(crit)
            if len(trace) > 1 and abs(trace[-2] - crit) <= options.rel_tol * max(1.0, abs(trace[-2])):
                converged = True
                break
        messages += [str(w.message) for w in caught if issubclass(w.category, FitWarning)]
    for msg in dict.fromkeys(messages):
        warnings.warn(msg, FitWarning, stacklevel=2)
    spec, coefs, latents, sigma2 = state
    return FittedModel(
        spec=spec,
        coefficients=tuple(coefs),
        sigma2=float(sigma2),
        latents=tuple(latents),
        trace=tuple(trace),
        subjects=dataset.subjects,
        converged=converged,
        messages=tuple(dict.fromkeys(messages)),
    )


# ---------------------------------------------------------------- alignment summaries


def aligned_values(dataset: DataSet, latents, spec: ModelSpec, grid):
    """Curves resampled on ``grid`` against warped time, shape ``(N, len(grid), q)``.

    Each coordinate is linearly interpolated in ``(v_n(t_k), y_n(t_k))`` over
    its observed entries; identity latents give the unaligned curves.
    """
    grid = np.asarray(grid, float)
    out = np.empty((len(dataset), grid.size, dataset.q))
    for n, (s, lat) in enumerate(zip(dataset, latents)):
        v = warp_eval(spec.warp, lat, s.times)
        for j in range(s.q):
            ok = s.mask[:, j]
            out[n, :, j] = np.interp(grid, v[ok], s.values[ok, j])
    return out


def cross_sectional_variance(curves):
    """Mean over grid points and coordinates of the across-sample variance."""
    return float(np.mean(np.var(curves, axis=0, ddof=1)))
