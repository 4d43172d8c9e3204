"""Observed curves and the full model specification."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .covariance import AmplitudeModel, NoiseModel
from .splines import SplineBasis
from .warp import WarpModel

__all__ = ["FunctionalSample", "DataSet", "ModelSpec"]


@dataclass(frozen=True, eq=False)
class FunctionalSample:
    """One observed ``q``-dimensional curve.

    ``values`` has shape ``(m, q)``; ``mask`` marks observed entries (missing
    entries may hold NaN). ``times`` are on the model time scale; the affine
    map back to the original time units is ``original = offset + scale * t``.
    """

    times: np.ndarray
    values: np.ndarray
    subject: int = 0
    mask: Optional[np.ndarray] = None
    sample_id: str = ""
    repetition: Optional[int] = None
    time_offset: float = 0.0
    time_scale: float = 1.0
    # exact source times when the model times were rescaled from them
    source_times: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.times, float).ravel()
        y = np.asarray(self.values, float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != t.size:
            raise ValueError("values must have one row per time point")
        if np.any(np.diff(t) <= 0):
            raise ValueError("sample times must be strictly increasing")
        mask = np.isfinite(y) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != y.shape:
            raise ValueError("mask shape does not match values")
        if not np.all(np.isfinite(y[mask])):
            raise ValueError("observed values must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "mask", mask)
        if self.source_times is not None:
            src = np.asarray(self.source_times, float).ravel()
            if src.shape != t.shape:
                raise ValueError("source_times must match times")
            object.__setattr__(self, "source_times", src)

    @property
    def m(self):
        return self.times.size

    @property
    def q(self):
        return self.values.shape[1]

    @property
    def observed(self):
        """Flat boolean index into the time-major stacked vector."""
        return self.mask.ravel()

    @property
    def n_observed(self):
        return int(self.mask.sum())

    def stacked(self):
        """Observed values stacked time-major, ``y(t_1), y(t_2), ...``."""
        return self.values.ravel()[self.observed]

    @property
    def original_times(self):
        if self.source_times is not None:
            return self.source_times
        return self.time_offset + self.time_scale * self.times

    def to_original(self, t):
        """Map model times (for example warped times) back to original units."""
        return self.time_offset + self.time_scale * np.asarray(t, float)


@dataclass(frozen=True, eq=False)
class DataSet:
    samples: tuple
    subjects: tuple = ()

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ValueError("empty dataset")
        q = samples[0].q
        if any(s.q != q for s in samples):
            raise ValueError("all samples must have the same value dimension")
        n_subjects = max(s.subject for s in samples) + 1
        subjects = tuple(self.subjects) if self.subjects else tuple(str(j) for j in range(n_subjects))
        if len(subjects) < n_subjects:
            raise ValueError("subject labels do not cover all subject indices")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "subjects", subjects)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def q(self):
        return self.samples[0].q

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def subject_map(self):
        return np.array([s.subject for s in self.samples])

    @property
    def n_observed(self):
        return sum(s.n_observed for s in self.samples)

    def subset(self, indices: Sequence[int]):
        return DataSet(tuple(self.samples[i] for i in indices), self.subjects)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Mean basis, warp model, amplitude covariance and noise model.

    Variance parameters are carried by the component models and are relative
    to the common factor ``sigma**2``.
    """

    basis: SplineBasis
    warp: WarpModel
    amplitude: AmplitudeModel
    noise: Optional[NoiseModel] = None
    # warp covariance parameters are estimated unless frozen here
    estimate_warp: bool = True

    def __post_init__(self):
        if self.noise is None:
            object.__setattr__(self, "noise", NoiseModel.homogeneous(self.amplitude.q))
        if self.noise.rho.size != self.amplitude.q:
            raise ValueError("noise model dimension does not match amplitude dimension")

    @property
    def q(self):
        return self.amplitude.q

    @property
    def n_free(self):
        n_warp = self.warp.n_free if self.estimate_warp else 0
        return n_warp + self.amplitude.n_free + self.noise.n_free

    def _encode(self):
        parts = [self.warp._encode()] if self.estimate_warp else []
        parts += [self.amplitude._encode(), self.noise._encode()]
        return np.concatenate(parts)

    def _decode(self, vec):
        vec = np.asarray(vec, float)
        i = 0
        warp = self.warp
        if self.estimate_warp:
            k = self.warp.n_free
            warp = self.warp._decode(vec[:k])
            i = k
        k = self.amplitude.n_free
        amplitude = self.amplitude._decode(vec[i : i + k])
        noise = self.noise._decode(vec[i + k :])
        return replace(self, warp=warp, amplitude=amplitude, noise=noise)

    def noise_diag(self, sample: FunctionalSample):
        """Relative noise variances for the observed stacked entries."""
        return np.tile(self.noise.rho, sample.m)[sample.observed]

    def amplitude_block(self, sample: FunctionalSample):
        S = self.amplitude.block(sample.times)
        idx = sample.observed
        return S[np.ix_(idx, idx)]
