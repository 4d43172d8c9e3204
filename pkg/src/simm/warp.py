"""Random monotone warping functions.

A warp is the identity plus a Hyman-filtered cubic interpolation of latent
deviations at equidistant interior anchors, optionally plus a random shift:
``v(t) = t + s + E_w(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np

from .covariance import chol_decode, chol_encode
from .splines import MonotoneInterpolant

__all__ = [
    "WarpCovariance",
    "WarpModel",
    "LatentWarp",
    "warp_eval",
    "warp_grad",
    "simulate_warps",
]

WarpFamily = Literal["brownian-bridge", "brownian-motion", "unstructured"]
# minimum increase between consecutive anchor values, relative to the domain length
MIN_GAP = 1e-6


@dataclass(frozen=True, eq=False)
class WarpCovariance:
    """Covariance of the latent warp variables (before the common ``sigma**2`` factor)."""

    family: WarpFamily = "brownian-bridge"
    tau: float = 1.0
    matrix: Optional[np.ndarray] = None
    shift_sd: Optional[float] = None

    def __post_init__(self):
        if self.family not in ("brownian-bridge", "brownian-motion", "unstructured"):
            raise ValueError(f"unknown warp covariance family {self.family!r}")
        if self.family == "unstructured":
            if self.matrix is None:
                raise ValueError("unstructured warp covariance needs a matrix")
            C = np.asarray(self.matrix, float)
            if C.ndim != 2 or C.shape[0] != C.shape[1] or not np.allclose(C, C.T):
                raise ValueError("warp covariance matrix must be square and symmetric")
            if np.linalg.eigvalsh(C).min() <= 0:
                raise ValueError("warp covariance matrix must be positive definite")
            object.__setattr__(self, "matrix", C)
        elif not (np.isfinite(self.tau) and self.tau > 0):
            raise ValueError("tau must be positive")
        if self.shift_sd is not None and not self.shift_sd > 0:
            raise ValueError("shift_sd must be positive")

    def anchor_matrix(self, unit_anchors):
        """Covariance of ``w`` at anchor positions given on the unit interval."""
        u = np.asarray(unit_anchors, float)
        if self.family == "unstructured":
            if self.matrix.shape[0] != u.size:
                raise ValueError("unstructured matrix size does not match the anchor count")
            return self.matrix.copy()
        lo = np.minimum(u[:, None], u[None, :])
        if self.family == "brownian-motion":
            return self.tau**2 * lo
        return self.tau**2 * (lo - u[:, None] * u[None, :])

    def n_free(self, include_shift):
        base = self.matrix.shape[0] * (self.matrix.shape[0] + 1) // 2 if self.family == "unstructured" else 1
        return base + int(include_shift)

    def encode(self, include_shift):
        head = chol_encode(self.matrix) if self.family == "unstructured" else np.log([self.tau])
        tail = np.log([self.shift_sd]) if include_shift else np.zeros(0)
        return np.concatenate([head, tail])

    def decode(self, vec, include_shift):
        vec = np.asarray(vec, float)
        changes = {}
        if self.family == "unstructured":
            m = self.matrix.shape[0]
            k = m * (m + 1) // 2
            changes["matrix"] = chol_decode(vec[:k], m)
        else:
            k = 1
            changes["tau"] = float(np.exp(vec[0]))
        if include_shift:
            changes["shift_sd"] = float(np.exp(vec[k]))
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class WarpModel:
    """Warp family with ``n_anchors`` equidistant interior anchors on ``domain``.

    ``boundary="fixed"`` pins both endpoints (bridge-type warps);
    ``boundary="extrapolate"`` pins the left endpoint and continues linearly
    past the last anchor (motion-type warps).
    """

    n_anchors: int = 3
    covariance: WarpCovariance = field(default_factory=WarpCovariance)
    boundary: Literal["fixed", "extrapolate"] = "fixed"
    include_shift: bool = False
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.n_anchors < 1:
            raise ValueError("need at least one warp anchor")
        if self.boundary not in ("fixed", "extrapolate"):
            raise ValueError(f"unknown boundary rule {self.boundary!r}")
        a, b = (float(v) for v in self.domain)
        if not a < b:
            raise ValueError("invalid warp domain")
        object.__setattr__(self, "domain", (a, b))
        if self.include_shift and self.covariance.shift_sd is None:
            object.__setattr__(self, "covariance", replace(self.covariance, shift_sd=0.1))
        # validates unstructured size
        self.covariance.anchor_matrix(self.unit_anchors)

    @property
    def unit_anchors(self):
        return np.arange(1, self.n_anchors + 1) / (self.n_anchors + 1)

    @property
    def anchor_abscissae(self):
        a, b = self.domain
        return a + (b - a) * self.unit_anchors

    @property
    def n_latent(self):
        return self.n_anchors + int(self.include_shift)

    def latent_cov(self):
        """Full covariance of the latent vector ``(w, [s])``, excluding ``sigma**2``."""
        C = self.covariance.anchor_matrix(self.unit_anchors)
        if self.include_shift:
            out = np.zeros((self.n_latent, self.n_latent))
            out[:-1, :-1] = C
            out[-1, -1] = self.covariance.shift_sd**2
            return out
        return C

    def nodes(self, w):
        """Abscissae and warp values of the interpolation nodes for deviations ``w``."""
        a, b = self.domain
        x = self.anchor_abscissae
        w = np.asarray(w, float)
        if self.boundary == "fixed":
            return np.concatenate([[a], x, [b]]), np.concatenate([[a], x + w, [b]])
        return np.concatenate([[a], x]), np.concatenate([[a], x + w])

    def interpolant(self, w):
        x, y = self.nodes(w)
        return MonotoneInterpolant(x, y, self.boundary)

    def constraints(self):
        """Linear constraints ``A @ latent >= lower`` for strictly increasing node values."""
        a, b = self.domain
        x_nodes, _ = self.nodes(np.zeros(self.n_anchors))
        n_nodes = x_nodes.size
        # node values = x_nodes + E @ w
        E = np.zeros((n_nodes, self.n_latent))
        E[1 : 1 + self.n_anchors, : self.n_anchors] = np.eye(self.n_anchors)
        A = E[1:] - E[:-1]
        lower = MIN_GAP * (b - a) - np.diff(x_nodes)
        return A, lower

    def is_feasible(self, latent, slack=0.0):
        A, lower = self.constraints()
        return bool(np.all(A @ np.asarray(latent, float) >= lower - slack))

    @property
    def n_free(self):
        return self.covariance.n_free(self.include_shift)

    def _encode(self):
        return self.covariance.encode(self.include_shift)

    def _decode(self, vec):
        return replace(self, covariance=self.covariance.decode(vec, self.include_shift))


@dataclass(frozen=True, eq=False)
class LatentWarp:
    w: np.ndarray
    s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "w", np.atleast_1d(np.asarray(self.w, float)))
        object.__setattr__(self, "s", float(self.s))

    @classmethod
    def zero(cls, model: WarpModel):
        return cls(np.zeros(model.n_anchors), 0.0)

    @classmethod
    def from_vector(cls, model: WarpModel, vec):
        vec = np.asarray(vec, float)
        return cls(vec[: model.n_anchors], vec[model.n_anchors] if model.include_shift else 0.0)

    def vector(self, model: WarpModel):
        if model.include_shift:
            return np.concatenate([self.w, [self.s]])
        return self.w.copy()


def _check_domain(model, t):
    t = np.atleast_1d(np.asarray(t, float))
    a, b = model.domain
    tol = 1e-12 * (b - a)
    if np.any(t < a - tol) or np.any(t > b + tol):
        raise ValueError(f"warp argument outside domain [{a}, {b}]")
    return np.clip(t, a, b)


def warp_eval(model: WarpModel, latent: LatentWarp, t):
    """``v(t) = t + s + E_w(t)``."""
    scalar = np.ndim(t) == 0
    tt = _check_domain(model, t)
    out = tt + latent.s + model.interpolant(latent.w).deviation(tt)
    return float(out[0]) if scalar else out


def warp_grad(model: WarpModel, latent: LatentWarp, t):
    """Gradient of ``v(t)`` with respect to ``(w, [s])``, shape ``(len(t), n_latent)``."""
    scalar = np.ndim(t) == 0
    tt = _check_domain(model, t)
    G = model.interpolant(latent.w).value_gradient(tt)
    out = np.empty((tt.size, model.n_latent))
    # node values are (a, x + w, [b]); only the interior ones depend on w
    out[:, : model.n_anchors] = G[:, 1 : 1 + model.n_anchors]
    if model.include_shift:
        out[:, -1] = 1.0
    return out[0] if scalar else out


def simulate_warps(model: WarpModel, count, rng=None, scale=1.0, constrained=True, max_draws=None):
    """Draw latent warps from ``N(0, scale**2 * C)``.

    With ``constrained=True`` draws violating the increasing-anchor constraint
    are rejected and redrawn. Raises ``RuntimeError`` when more than
    ``max_draws`` (default ``1000 * count``) proposals are needed.
    """
    rng = np.random.default_rng(rng)
    cov = scale**2 * model.latent_cov()
    # eigen-factor tolerates the rank-deficient scale == 0 case
    vals, vecs = np.linalg.eigh(cov)
    factor = vecs * np.sqrt(np.maximum(vals, 0.0))
    max_draws = 1000 * count if max_draws is None else max_draws
    accepted = []
    drawn = 0
    batch = max(16, count)
    while len(accepted) < count:
        if drawn >= max_draws:
            raise RuntimeError(
                f"rejection sampling accepted {len(accepted)} of {count} warps after {drawn} draws; "
                "the warp covariance scale is too large for monotone warps"
            )
        z = rng.standard_normal((batch, model.n_latent)) @ factor.T
        drawn += batch
        for row in z:
            if not constrained or model.is_feasible(row):
                accepted.append(LatentWarp.from_vector(model, row))
                if len(accepted) == count:
                    break
    return accepted
