"""Temporal covariance kernels, dynamic cross-covariances and parameter encodings.

Kernels operate on unit-interval times. Every parametrized object here
implements ``_encode`` / ``_decode`` so that the positive or positive
definite parameters can be optimized over an unconstrained real vector
(log scale for positive scalars, log-Cholesky for matrices).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import kv

__all__ = [
    "BrownianBridge",
    "BrownianMotion",
    "Matern",
    "Mixture",
    "Product",
    "CrossCovAnchors",
    "DiagonalAmplitude",
    "DynamicAmplitude",
    "NoiseModel",
    "kernel_eval",
    "interp_sqrt",
    "cross_cov_eval",
    "assemble_block_cov",
    "encode_params",
    "decode_params",
    "chol_encode",
    "chol_decode",
    "psd_sqrt",
]

EIGEN_FLOOR = 1e-12


def _positive(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


class _ScalarParams:
    """Mixin for kernels whose parameters are positive scalars."""

    _params: tuple[str, ...] = ()

    def _free(self):
        return [p for p in self._params if p not in self.fixed]

    @property
    def n_free(self):
        return len(self._free())

    def _encode(self):
        return np.log([getattr(self, p) for p in self._free()])

    def _decode(self, vec):
        return replace(self, **{p: float(np.exp(v)) for p, v in zip(self._free(), vec)})

    def gram(self, s, t=None):
        s = np.asarray(s, float)
        t = s if t is None else np.asarray(t, float)
        return self(s[:, None], t[None, :])


@dataclass(frozen=True)
class BrownianBridge(_ScalarParams):
    """``tau**2 * (min(s, t) - s * t)`` on the unit interval."""

    tau: float = 1.0
    fixed: tuple[str, ...] = ()
    _params = ("tau",)

    def __post_init__(self):
        _positive("tau", self.tau)

    def __call__(self, s, t):
        s, t = np.asarray(s, float), np.asarray(t, float)
        return self.tau**2 * (np.minimum(s, t) - s * t)


@dataclass(frozen=True)
class BrownianMotion(_ScalarParams):
    """``tau**2 * min(s, t)``."""

    tau: float = 1.0
    fixed: tuple[str, ...] = ()
    _params = ("tau",)

    def __post_init__(self):
        _positive("tau", self.tau)

    def __call__(self, s, t):
        return self.tau**2 * np.minimum(np.asarray(s, float), np.asarray(t, float))


@dataclass(frozen=True)
class Mixture(_ScalarParams):
    """Stationary plus bridge covariance, ``a + min(s, t) - s * t``."""

    a: float = 1.0
    fixed: tuple[str, ...] = ()
    _params = ("a",)

    def __post_init__(self):
        _positive("a", self.a)

    def __call__(self, s, t):
        s, t = np.asarray(s, float), np.asarray(t, float)
        return self.a + np.minimum(s, t) - s * t


@dataclass(frozen=True)
class Matern(_ScalarParams):
    """Matérn correlation with smoothness ``alpha`` and range ``kappa``.

    ``2**(1 - alpha) / Gamma(alpha) * (d / kappa)**alpha * K_alpha(d / kappa)``,
    equal to 1 at zero lag.
    """

    alpha: float = 2.0
    kappa: float = 0.2
    fixed: tuple[str, ...] = ()
    _params = ("alpha", "kappa")

    def __post_init__(self):
        _positive("alpha", self.alpha)
        _positive("kappa", self.kappa)

    def __call__(self, s, t):
        d = np.abs(np.asarray(s, float) - np.asarray(t, float)) / self.kappa
        out = np.ones(d.shape)
        pos = d > 0
        if np.any(pos):
            x = d[pos]
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                val = 2.0 ** (1 - self.alpha) / gamma_fn(self.alpha) * x**self.alpha * kv(self.alpha, x)
            # kv underflows to 0 for large x; x**alpha * 0 stays 0
            out[pos] = np.nan_to_num(val, nan=0.0)
        return out


@dataclass(frozen=True)
class Product:
    """Pointwise product of kernels (a valid covariance by Schur's theorem)."""

    kernels: tuple = ()

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("product kernel needs at least one factor")
        object.__setattr__(self, "kernels", tuple(self.kernels))

    def __call__(self, s, t):
        out = 1.0
        for k in self.kernels:
            out = out * k(s, t)
        return out

    @property
    def n_free(self):
        return sum(k.n_free for k in self.kernels)

    def _encode(self):
        return np.concatenate([k._encode() for k in self.kernels]) if self.kernels else np.zeros(0)

    def _decode(self, vec):
        parts, i = [], 0
        for k in self.kernels:
            parts.append(k._decode(vec[i : i + k.n_free]))
            i += k.n_free
        return Product(tuple(parts))

    def gram(self, s, t=None):
        s = np.asarray(s, float)
        t = s if t is None else np.asarray(t, float)
        return self(s[:, None], t[None, :])


Kernel = Union[BrownianBridge, BrownianMotion, Mixture, Matern, Product]


def kernel_eval(k: Kernel, s, t):
    """Evaluate a temporal kernel; scalar inputs give a float."""
    out = k(s, t)
    return float(out) if np.ndim(out) == 0 else out


def chol_encode(A):
    """Log-Cholesky vector of a symmetric positive definite matrix.

    The log of the Cholesky diagonal comes first, followed by the strictly
    lower triangle in row-major order.
    """
    L = np.linalg.cholesky(np.asarray(A, float))
    q = L.shape[0]
    return np.concatenate([np.log(np.diag(L)), L[np.tril_indices(q, -1)]])


def chol_decode(vec, q):
    vec = np.asarray(vec, float)
    if vec.size != q * (q + 1) // 2:
        raise ValueError("log-Cholesky vector has the wrong length")
    if not np.all(np.isfinite(vec)):
        raise ValueError("log-Cholesky vector must be finite")
    L = np.zeros((q, q))
    L[np.diag_indices(q)] = np.exp(vec[:q])
    L[np.tril_indices(q, -1)] = vec[q:]
    return L @ L.T


def psd_sqrt(M):
    """Symmetric square root via eigendecomposition, eigenvalues floored at 1e-12."""
    M = np.asarray(M, float)
    vals, vecs = np.linalg.eigh(0.5 * (M + np.swapaxes(M, -1, -2)))
    root = np.sqrt(np.maximum(vals, EIGEN_FLOOR))
    return (vecs * root[..., None, :]) @ np.swapaxes(vecs, -1, -2)


@dataclass(frozen=True, eq=False)
class CrossCovAnchors:
    """Anchor times ``0 = t_1 < ... < t_l = 1`` with SPD matrices ``A_1..A_l``."""

    times: np.ndarray
    matrices: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, float).ravel()
        mats = np.asarray(self.matrices, float)
        if times.size < 2 or times[0] != 0.0 or times[-1] != 1.0 or np.any(np.diff(times) <= 0):
            raise ValueError("anchor times must be increasing from 0 to 1")
        if mats.ndim != 3 or mats.shape[0] != times.size or mats.shape[1] != mats.shape[2]:
            raise ValueError("need one square matrix per anchor time")
        if not np.allclose(mats, np.swapaxes(mats, 1, 2), rtol=0, atol=1e-12 * max(1.0, np.abs(mats).max())):
            raise ValueError("anchor matrices must be symmetric")
        if np.linalg.eigvalsh(mats).min() <= 0:
            raise ValueError("anchor matrices must be positive definite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "matrices", mats)

    @property
    def q(self):
        return self.matrices.shape[1]

    def interpolated(self, t):
        """Linear interpolation of the anchor matrices, shape ``(len(t), q, q)``."""
        t = np.atleast_1d(np.asarray(t, float))
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("cross-covariance times must lie in [0, 1]")
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        lo, hi = self.times[k], self.times[k + 1]
        wt = ((t - lo) / (hi - lo))[:, None, None]
        return (1 - wt) * self.matrices[k] + wt * self.matrices[k + 1]

    def sqrt_at(self, t):
        return psd_sqrt(self.interpolated(t))


def interp_sqrt(anchors: CrossCovAnchors, t):
    """Positive definite ``B_t`` with ``B_t^T B_t`` equal to the interpolated anchors."""
    out = anchors.sqrt_at(t)
    return out[0] if np.ndim(t) == 0 else out


@dataclass(frozen=True, eq=False)
class DiagonalAmplitude:
    """Independent coordinates sharing one temporal kernel, with per-coordinate scales."""

    kernel: Kernel
    scales: np.ndarray

    def __post_init__(self):
        scales = np.atleast_1d(np.asarray(self.scales, float))
        if np.any(~np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("amplitude scales must be positive")
        object.__setattr__(self, "scales", scales)

    @property
    def q(self):
        return self.scales.size

    @property
    def n_free(self):
        return self.kernel.n_free + self.q

    def _encode(self):
        return np.concatenate([self.kernel._encode(), np.log(self.scales)])

    def _decode(self, vec):
        nk = self.kernel.n_free
        return DiagonalAmplitude(self.kernel._decode(vec[:nk]), np.exp(vec[nk:]))

    def cov(self, s, t):
        f = np.asarray(self.kernel(s, t), float)
        return f[..., None, None] * np.diag(self.scales**2)

    def block(self, times):
        times = np.asarray(times, float)
        F = self.kernel.gram(times)
        return np.kron(F, np.diag(self.scales**2))

    def marginal(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        return self.cov(t, t)


@dataclass(frozen=True, eq=False)
class DynamicAmplitude:
    """``K(s, t) = f(s, t) B_s^T B_t`` with ``B`` interpolated between anchors."""

    kernel: Kernel
    anchors: CrossCovAnchors

    @property
    def q(self):
        return self.anchors.q

    @property
    def n_free(self):
        q = self.q
        return self.kernel.n_free + self.anchors.times.size * q * (q + 1) // 2

    def _encode(self):
        parts = [self.kernel._encode()] + [chol_encode(A) for A in self.anchors.matrices]
        return np.concatenate(parts)

    def _decode(self, vec):
        nk = self.kernel.n_free
        q = self.q
        size = q * (q + 1) // 2
        mats = [chol_decode(vec[nk + i * size : nk + (i + 1) * size], q) for i in range(self.anchors.times.size)]
        return DynamicAmplitude(self.kernel._decode(vec[:nk]), CrossCovAnchors(self.anchors.times, np.array(mats)))

    def cov(self, s, t):
        s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        shape = s.shape
        s, t = s.ravel(), t.ravel()
        Bs, Bt = self.anchors.sqrt_at(s), self.anchors.sqrt_at(t)
        f = np.asarray(self.kernel(s, t), float)
        out = f[:, None, None] * (np.swapaxes(Bs, 1, 2) @ Bt)
        return out.reshape(shape + (self.q, self.q))

    def block(self, times):
        times = np.asarray(times, float)
        m, q = times.size, self.q
        F = self.kernel.gram(times)
        B = self.anchors.sqrt_at(times)  # symmetric, so B^T = B
        out = np.einsum("jk,jab,kbc->jakc", F, B, B)
        out = out.reshape(m * q, m * q)
        return 0.5 * (out + out.T)

    def marginal(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        return self.cov(t, t)


AmplitudeModel = Union[DiagonalAmplitude, DynamicAmplitude]


def cross_cov_eval(model: AmplitudeModel, s, t):
    """The ``q x q`` amplitude cross-covariance ``S(s, t)``."""
    out = model.cov(s, t)
    return out.reshape(out.shape[-2:]) if np.ndim(s) == 0 and np.ndim(t) == 0 else out


def assemble_block_cov(model: AmplitudeModel, times):
    """Time-major ``qm x qm`` block matrix with block ``(j, k)`` equal to ``S(t_j, t_k)``."""
    return model.block(times)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Relative measurement-noise variances per coordinate; the first is fixed at 1."""

    rho: np.ndarray
    estimate: bool = False

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho, float))
        if rho[0] != 1.0 or np.any(rho <= 0) or np.any(~np.isfinite(rho)):
            raise ValueError("rho must be positive with rho[0] == 1")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def homogeneous(cls, q):
        return cls(np.ones(q))

    @property
    def n_free(self):
        return self.rho.size - 1 if self.estimate else 0

    def _encode(self):
        return np.log(self.rho[1:]) if self.estimate else np.zeros(0)

    def _decode(self, vec):
        if not self.estimate:
            return self
        return NoiseModel(np.concatenate([[1.0], np.exp(vec)]), True)


def encode_params(obj):
    """Unconstrained vector of the free parameters of ``obj``."""
    return np.asarray(obj._encode(), float)


def decode_params(obj, vec):
    """Copy of ``obj`` with free parameters taken from an encoded vector."""
    vec = np.asarray(vec, float)
    if vec.size != obj.n_free:
        raise ValueError(f"expected {obj.n_free} parameters, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("encoded parameter vector must be finite")
    return obj._decode(vec)
