"""Simulation, classification and chronological cross-validation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .estimation import FitOptions, FittedModel, fit, predict_warp, scale_variances
from .likelihood import amplitude_blocks, mean_curve
from .model import DataSet, FunctionalSample, ModelSpec
from .warp import LatentWarp, simulate_warps, warp_eval

__all__ = [
    "SimulationSpec",
    "simulate",
    "harmonic_templates",
    "classify_posterior",
    "Centroids",
    "nearest_centroids",
    "classify_nc",
    "FoldPlan",
    "CVResult",
    "cross_validate",
    "nc_method",
    "simm_method",
    "NCW_WEIGHTS",
]

# coordinate weights of the weighted nearest-centroid baseline (x, y, z)
NCW_WEIGHTS = (0.1, 0.7, 0.2)
JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    """Everything needed to draw a synthetic dataset.

    ``spec`` carries variances relative to ``sigma**2``, so ``sigma = 0``
    switches off warps, amplitude and noise at once. ``time_grids`` is one
    grid shared by all samples or one grid per sample.
    """

    spec: ModelSpec
    coefficients: tuple
    sigma: float
    samples_per_subject: int
    time_grids: object
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_subject < 1:
            raise ValueError("samples_per_subject must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        coefs = tuple(np.asarray(c, float) for c in self.coefficients)
        if not coefs:
            raise ValueError("need at least one subject template")
        shape = (self.spec.basis.n_basis, self.spec.q)
        if any(c.shape != shape for c in coefs):
            raise ValueError(f"template coefficients must have shape {shape}")
        object.__setattr__(self, "coefficients", coefs)
        n = self.n_samples
        grids = self.time_grids
        if isinstance(grids, np.ndarray) and grids.ndim == 1 or np.ndim(grids[0]) == 0:
            grids = [np.asarray(grids, float)] * n
        grids = [np.asarray(g, float) for g in grids]
        if len(grids) != n:
            raise ValueError("need one time grid per sample or a single shared grid")
        if any(np.any(np.diff(g) <= 0) for g in grids):
            raise ValueError("time grids must be strictly increasing")
        object.__setattr__(self, "time_grids", tuple(grids))

    @classmethod
    def from_absolute(cls, spec: ModelSpec, sigma, **kwargs):
        """Build from warp and amplitude scales given on the absolute scale (``sigma > 0``)."""
        if not sigma > 0:
            raise ValueError("sigma must be positive to convert absolute scales")
        return cls(scale_variances(spec, 1.0 / sigma), sigma=sigma, **kwargs)

    @property
    def n_subjects(self):
        return len(self.coefficients)

    @property
    def n_samples(self):
        return self.n_subjects * self.samples_per_subject


def _amplitude_factor(S):
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(S + jitter * np.eye(S.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("amplitude covariance is not positive definite even with jitter 1e-6")


def simulate(sim: SimulationSpec, return_latents=False):
    """Draw ``y_n(t) = theta_f(n)(v_n(t)) + x_n(t) + eps_n(t)``.

    Samples are ordered by subject; ``repetition`` numbers them within the
    subject. Identical seeds give bit-identical datasets.
    """
    rng = np.random.default_rng(sim.seed)
    spec = sim.spec
    q = spec.q
    factors = {}
    samples, latents = [], []
    n = 0
    for j, coef in enumerate(sim.coefficients):
        for r in range(sim.samples_per_subject):
            t = sim.time_grids[n]
            key = t.tobytes()
            if key not in factors:
                factors[key] = _amplitude_factor(spec.amplitude.block(t))
            lat = simulate_warps(spec.warp, 1, rng, scale=sim.sigma)[0]
            v = warp_eval(spec.warp, lat, t)
            mean = mean_curve(spec.basis, coef, v)
            amp = sim.sigma * (factors[key] @ rng.standard_normal(t.size * q))
            noise = sim.sigma * np.sqrt(spec.noise.rho) * rng.standard_normal((t.size, q))
            y = mean + amp.reshape(t.size, q) + noise
            samples.append(FunctionalSample(t, y, subject=j, sample_id=f"s{j}_{r}", repetition=r))
            latents.append(lat)
            n += 1
    data = DataSet(tuple(samples), tuple(f"subject{j}" for j in range(sim.n_subjects)))
    return (data, latents) if return_latents else data


def harmonic_templates(basis, n_subjects, q, rng=None, n_harmonics=3, amplitude=1.0):
    """Random smooth templates: sums of sines and cosines projected onto ``basis``."""
    rng = np.random.default_rng(rng)
    a, b = basis.domain
    grid = np.linspace(a, b, 401)
    u = (grid - a) / (b - a)
    F = basis(grid)
    out = []
    for _ in range(n_subjects):
        curves = np.zeros((grid.size, q))
        for h in range(1, n_harmonics + 1):
            ca, cb = rng.standard_normal((2, q)) * amplitude / h
            curves += np.sin(np.pi * h * u)[:, None] * ca + np.cos(np.pi * h * u)[:, None] * cb
        coef, *_ = np.linalg.lstsq(F, curves, rcond=None)
        out.append(coef)
    return out


# ---------------------------------------------------------------- posterior classification


def classify_posterior(sample: FunctionalSample, fitted: FittedModel, restarts=3, seed=0, return_scores=False):
    """Subject whose template gives the smallest minimized negative log posterior.

    For every candidate the warp is refitted from ``w = 0`` and from
    ``restarts`` small random feasible perturbations (the same for every
    candidate). Log-determinant terms are shared across subjects and omitted.
    Ties go to the lowest subject index.
    """
    spec = fitted.spec
    model = spec.warp
    starts = [LatentWarp.zero(model)]
    if restarts:
        starts += simulate_warps(model, restarts, np.random.default_rng(seed), scale=0.5 * fitted.sigma)
    S = spec.amplitude_block(sample)
    scores = np.empty(len(fitted.coefficients))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for j, coef in enumerate(fitted.coefficients):
            scores[j] = min(predict_warp(sample, coef, spec, w, S=S, return_info=True).objective for w in starts)
    best = int(np.argmin(scores))
    return (best, scores) if return_scores else best


# ---------------------------------------------------------------- nearest centroid


@dataclass(frozen=True, eq=False)
class Centroids:
    grid: np.ndarray
    values: np.ndarray  # (J, len(grid), q)


def _interp_sample(sample, grid):
    out = np.full((grid.size, sample.q), np.nan)
    for j in range(sample.q):
        ok = sample.mask[:, j]
        if ok.sum() >= 1:
            t = sample.times[ok]
            inside = (grid >= t[0]) & (grid <= t[-1])
            out[inside, j] = np.interp(grid[inside], t, sample.values[ok, j])
    return out


def nearest_centroids(dataset: DataSet, grid=None, n_grid=101):
    """Per-subject mean curves on a common grid, by linear interpolation of each sample."""
    if grid is None:
        lo = max(s.times[0] for s in dataset)
        hi = min(s.times[-1] for s in dataset)
        if not lo < hi:
            raise ValueError("sample time ranges do not overlap")
        grid = np.linspace(lo, hi, n_grid)
    grid = np.asarray(grid, float)
    values = np.full((dataset.n_subjects, grid.size, dataset.q), np.nan)
    for j in range(dataset.n_subjects):
        members = [_interp_sample(s, grid) for s in dataset if s.subject == j]
        if members:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                values[j] = np.nanmean(np.stack(members), axis=0)
    return Centroids(grid, values)


def classify_nc(sample: FunctionalSample, centroids: Centroids, weights=None, return_distances=False):
    """Subject with the smallest weighted squared distance to its centroid.

    Centroids are linearly interpolated at the sample's times inside the
    centroid grid; entries missing on either side are skipped.
    """
    q = sample.q
    weights = np.ones(q) if weights is None else np.asarray(weights, float)
    if weights.shape != (q,) or np.any(weights < 0):
        raise ValueError("weights must be a nonnegative vector with one entry per coordinate")
    g = centroids.grid
    inside = (sample.times >= g[0]) & (sample.times <= g[-1])
    if not np.any(inside):
        raise ValueError("sample times do not overlap the centroid grid")
    t = sample.times[inside]
    y = np.where(sample.mask[inside], sample.values[inside], np.nan)
    dist = np.full(centroids.values.shape[0], np.inf)
    for j, cent in enumerate(centroids.values):
        c = np.column_stack([np.interp(t, g, cent[:, k]) for k in range(q)])
        d = (y - c) ** 2 * weights
        if np.any(np.isfinite(d)):
            dist[j] = np.nansum(d)
    best = int(np.argmin(dist))
    return (best, dist) if return_distances else best


# ---------------------------------------------------------------- cross-validation


@dataclass(frozen=True)
class FoldPlan:
    """Chronological ``k``-fold plan: each subject's samples, in repetition order, are cut into ``k`` contiguous blocks."""

    k: int = 5

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least two folds")

    def folds(self, dataset: DataSet):
        """Test index arrays, one per fold; together they partition the samples."""
        tests = [[] for _ in range(self.k)]
        for j in range(dataset.n_subjects):
            idx = [i for i, s in enumerate(dataset) if s.subject == j]
            if not idx:
                continue
            if len(idx) < self.k:
                raise ValueError(f"subject {dataset.subjects[j]!r} has fewer than {self.k} samples")
            idx.sort(key=lambda i: (dataset[i].repetition if dataset[i].repetition is not None else i, i))
            for f, chunk in enumerate(np.array_split(np.array(idx), self.k)):
                tests[f].extend(chunk.tolist())
        return [np.array(sorted(t), dtype=int) for t in tests]


@dataclass(frozen=True)
class CVResult:
    fold_correct: tuple
    fold_total: tuple
    predictions: tuple  # (sample index, predicted subject index or -1)

    @property
    def fold_accuracy(self):
        return tuple(c / t for c, t in zip(self.fold_correct, self.fold_total))

    @property
    def accuracy(self):
        return sum(self.fold_correct) / sum(self.fold_total)


Method = Callable[[DataSet], Callable[[FunctionalSample], int]]


def cross_validate(dataset: DataSet, plan: FoldPlan, method: Method):
    """Train on ``k - 1`` folds, classify the held-out fold, for every fold.

    ``method(train)`` returns a predictor mapping a sample to a subject index
    of ``train``. Subjects missing from a training split are dropped from it
    and their test samples count as errors.
    """
    correct, total, preds = [], [], []
    for test in plan.folds(dataset):
        test_set = set(test.tolist())
        train_idx = [i for i in range(len(dataset)) if i not in test_set]
        present = sorted({dataset[i].subject for i in train_idx})
        absent = set(range(dataset.n_subjects)) - set(present)
        if absent:
            warnings.warn(f"subjects {sorted(absent)} absent from a training split; their test samples count as errors")
        remap = {j: r for r, j in enumerate(present)}
        train = DataSet(
            tuple(_relabel(dataset[i], remap[dataset[i].subject]) for i in train_idx),
            tuple(dataset.subjects[j] for j in present),
        )
        predictor = method(train)
        hits = 0
        for i in test:
            p = present[predictor(dataset[i])]
            preds.append((int(i), int(p)))
            hits += int(p == dataset[i].subject)
        correct.append(hits)
        total.append(int(test.size))
    return CVResult(tuple(correct), tuple(total), tuple(sorted(preds)))


def _relabel(sample, subject):
    from dataclasses import replace

    return sample if sample.subject == subject else replace(sample, subject=subject)


def nc_method(weights=None):
    """Nearest-centroid method; ``weights=NCW_WEIGHTS`` gives the weighted variant."""

    def build(train):
        cent = nearest_centroids(train)
        return lambda s: classify_nc(s, cent, weights)

    return build


def simm_method(spec: ModelSpec, options: FitOptions = FitOptions(), restarts=3, seed=0):
    """Fit the model on the training set and classify by posterior distance."""

    def build(train):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fitted = fit(train, spec, options)
        return lambda s: classify_posterior(s, fitted, restarts, seed)

    return build
