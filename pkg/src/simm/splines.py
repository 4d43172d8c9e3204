"""B-spline bases, increasing (integrated quadratic) bases and monotone cubic
interpolation with Hyman slope filtering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

__all__ = [
    "SplineBasis",
    "MonotoneInterpolant",
    "basis_eval",
    "basis_deriv",
    "bspline_design",
    "bspline_design_deriv",
    "clamped_knots",
    "hyman_slopes",
    "monotone_cubic",
]

BasisMode = Literal["standard", "increasing"]
BoundaryRule = Literal["fixed", "extrapolate"]


def clamped_knots(interior, domain, degree):
    """Full knot vector with ``degree + 1`` repeated knots at each end."""
    a, b = domain
    return np.concatenate([np.full(degree + 1, a), np.asarray(interior, float), np.full(degree + 1, b)])


def _zeroth_order(t, knots):
    # right-continuous indicators; the last non-degenerate span is closed on the right
    B = ((knots[:-1] <= t[:, None]) & (t[:, None] < knots[1:])).astype(float)
    at_end = t == knots[-1]
    if np.any(at_end):
        last = np.nonzero(knots[:-1] < knots[-1])[0][-1]
        B[at_end] = 0.0
        B[at_end, last] = 1.0
    return B


def _safe_ratio(num, den):
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=np.broadcast_to(den, out.shape) > 0)
    return out


def bspline_design(t, knots, degree):
    """Evaluate all B-splines of ``degree`` on ``knots`` at ``t``.

    Uses the Cox-de Boor recursion, vectorized over evaluation points.
    Returns an array of shape ``(len(t), len(knots) - degree - 1)``.
    """
    t = np.atleast_1d(np.asarray(t, float))
    knots = np.asarray(knots, float)
    B = _zeroth_order(t, knots)
    for p in range(1, degree + 1):
        left = _safe_ratio(t[:, None] - knots[: -p - 1], knots[p:-1] - knots[: -p - 1])
        right = _safe_ratio(knots[p + 1 :] - t[:, None], knots[p + 1 :] - knots[1:-p])
        B = left * B[:, :-1] + right * B[:, 1:]
    return B


def bspline_design_deriv(t, knots, degree):
    """First derivatives of all B-splines of ``degree`` (``degree >= 1``)."""
    if degree < 1:
        raise ValueError("derivative of a degree-0 B-spline basis is not supported")
    knots = np.asarray(knots, float)
    lower = bspline_design(t, knots, degree - 1)
    a = _safe_ratio(degree, knots[degree:-1] - knots[: -degree - 1])
    b = _safe_ratio(degree, knots[degree + 1 :] - knots[1:-degree])
    return a * lower[:, :-1] - b * lower[:, 1:]


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Spline basis on a closed interval.

    In ``"standard"`` mode this is the clamped B-spline basis of the given
    degree. In ``"increasing"`` mode the basis is an intercept column followed
    by the antiderivatives of the quadratic B-splines (``degree`` is ignored
    and reported as 3); nonnegative coefficients on the integrated columns give
    nondecreasing functions.
    """

    degree: int
    interior_knots: np.ndarray
    domain: tuple[float, float] = (0.0, 1.0)
    mode: BasisMode = "standard"
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a, b = (float(v) for v in self.domain)
        interior = np.asarray(self.interior_knots, float).ravel()
        if not a < b:
            raise ValueError(f"invalid domain {self.domain}")
        if self.mode not in ("standard", "increasing"):
            raise ValueError(f"unknown basis mode {self.mode!r}")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if interior.size and (np.any(np.diff(interior) <= 0) or interior[0] <= a or interior[-1] >= b):
            raise ValueError("interior knots must be strictly increasing and inside the domain")
        object.__setattr__(self, "domain", (a, b))
        object.__setattr__(self, "interior_knots", interior)
        if self.mode == "increasing":
            object.__setattr__(self, "degree", 3)
            # cubic knot vector: antiderivatives of quadratic B-splines live here
            object.__setattr__(self, "knots", clamped_knots(interior, (a, b), 3))
        else:
            object.__setattr__(self, "knots", clamped_knots(interior, (a, b), self.degree))

    @classmethod
    def uniform(cls, degree, n_interior, domain=(0.0, 1.0), mode: BasisMode = "standard"):
        a, b = domain
        interior = np.linspace(a, b, n_interior + 2)[1:-1]
        return cls(degree, interior, (a, b), mode)

    @property
    def n_basis(self):
        if self.mode == "increasing":
            return self.interior_knots.size + 4
        return self.interior_knots.size + self.degree + 1

    def _check(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        a, b = self.domain
        if np.any(~np.isfinite(t)) or np.any(t < a) or np.any(t > b):
            raise ValueError(f"evaluation points outside basis domain [{a}, {b}]")
        return t

    def _quadratic_knots(self):
        return clamped_knots(self.interior_knots, self.domain, 2)

    def __call__(self, t):
        """Design matrix of shape ``(len(t), n_basis)``."""
        t = self._check(t)
        if self.mode == "standard":
            return bspline_design(t, self.knots, self.degree)
        q = self._quadratic_knots()
        cubic = bspline_design(t, self.knots, 3)
        tail = np.cumsum(cubic[:, ::-1], axis=1)[:, ::-1]
        # integral of B_{k,2} up to t = (q_{k+3} - q_k) / 3 * sum_{i > k} B_{i,3}(t)
        weights = (q[3:] - q[:-3]) / 3.0
        integrated = weights * tail[:, 1:]
        return np.column_stack([np.ones(t.size), integrated])

    def deriv(self, t):
        """Derivative of the design matrix with respect to ``t``."""
        t = self._check(t)
        if self.mode == "standard":
            return bspline_design_deriv(t, self.knots, self.degree)
        quad = bspline_design(t, self._quadratic_knots(), 2)
        return np.column_stack([np.zeros(t.size), quad])

    def nonnegative_mask(self):
        """Boolean mask of coefficients constrained to be nonnegative."""
        mask = np.zeros(self.n_basis, bool)
        if self.mode == "increasing":
            mask[1:] = True
        return mask


def basis_eval(basis: SplineBasis, t):
    """Basis values at a scalar ``t`` (vector) or at an array (matrix)."""
    out = basis(t)
    return out[0] if np.ndim(t) == 0 else out


def basis_deriv(basis: SplineBasis, t):
    out = basis.deriv(t)
    return out[0] if np.ndim(t) == 0 else out


def _three_point_slopes(h, delta):
    n = delta.size + 1
    # d = W @ delta, linear in the secants
    W = np.zeros((n, n - 1))
    if n == 2:
        W[:, 0] = 1.0
        return W
    for i in range(1, n - 1):
        hl, hr = h[i - 1], h[i]
        W[i, i - 1] = hr / (hl + hr)
        W[i, i] = hl / (hl + hr)
    W[0, 0] = (2 * h[0] + h[1]) / (h[0] + h[1])
    W[0, 1] = -h[0] / (h[0] + h[1])
    W[-1, -1] = (2 * h[-1] + h[-2]) / (h[-1] + h[-2])
    W[-1, -2] = -h[-1] / (h[-1] + h[-2])
    return W


def _raw_slopes(h, delta):
    # same values as _three_point_slopes @ delta, written so equal secants are reproduced exactly
    n = delta.size + 1
    if n == 2:
        return np.full(2, delta[0])
    raw = np.empty(n)
    hl, hr = h[:-1], h[1:]
    raw[1:-1] = delta[:-1] + (delta[1:] - delta[:-1]) * (hl / (hl + hr))
    raw[0] = delta[0] + (delta[0] - delta[1]) * (h[0] / (h[0] + h[1]))
    raw[-1] = delta[-1] + (delta[-1] - delta[-2]) * (h[-1] / (h[-1] + h[-2]))
    return raw


def hyman_slopes(x, y):
    """Node slopes for monotone cubic Hermite interpolation.

    Three-point finite-difference slopes are limited by Hyman's filter: where
    the adjacent secants share a sign the slope is clipped to
    ``[0, 3 * min |secant|]`` in that direction, otherwise it is set to zero.

    Returns
    -------
    slopes : ndarray, shape (n,)
    jacobian : ndarray, shape (n, n)
        Derivative of the slopes with respect to ``y``. The filter is
        piecewise linear in ``y``, so this is exact away from switching
        surfaces.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = x.size
    h = np.diff(x)
    D = (np.eye(n, k=1)[:-1] - np.eye(n)[:-1]) / h[:, None]  # secants = D @ y
    delta = np.diff(y) / h
    G = _three_point_slopes(h, delta)  # slopes = G @ delta within the current branch
    d = _raw_slopes(h, delta)
    for i in range(n):
        neighbours = [j for j in (i - 1, i) if 0 <= j < n - 1]
        signs = np.sign(delta[neighbours])
        if np.any(signs == 0) or np.any(signs != signs[0]):
            G[i], d[i] = 0.0, 0.0
            continue
        sgn = signs[0]
        j_min = neighbours[int(np.argmin(np.abs(delta[neighbours])))]
        if sgn * d[i] <= 0:
            G[i], d[i] = 0.0, 0.0
        elif sgn * d[i] > 3 * abs(delta[j_min]):
            G[i] = 0.0
            G[i, j_min] = 3.0
            d[i] = 3.0 * delta[j_min]
    return d, G @ D


@dataclass(frozen=True, eq=False)
class MonotoneInterpolant:
    """C1 cubic Hermite interpolant with Hyman-filtered slopes.

    With ``boundary_rule="extrapolate"`` the interpolant continues linearly to
    the right of the last node using the end slope; otherwise evaluation is
    restricted to ``[x[0], x[-1]]``.
    """

    anchor_abscissae: np.ndarray
    anchor_values: np.ndarray
    boundary_rule: BoundaryRule = "fixed"
    filtered_slopes: np.ndarray = field(init=False, repr=False)
    slope_jacobian: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = np.asarray(self.anchor_abscissae, float).ravel()
        y = np.asarray(self.anchor_values, float).ravel()
        if x.size < 2 or x.size != y.size:
            raise ValueError("need at least two anchors with matching values")
        if np.any(np.diff(x) <= 0):
            raise ValueError("anchor abscissae must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("anchor values must be finite")
        if self.boundary_rule not in ("fixed", "extrapolate"):
            raise ValueError(f"unknown boundary rule {self.boundary_rule!r}")
        d, J = hyman_slopes(x, y)
        object.__setattr__(self, "anchor_abscissae", x)
        object.__setattr__(self, "anchor_values", y)
        object.__setattr__(self, "filtered_slopes", d)
        object.__setattr__(self, "slope_jacobian", J)

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        x = self.anchor_abscissae
        hi = np.inf if self.boundary_rule == "extrapolate" else x[-1]
        if np.any(t < x[0]) or np.any(t > hi):
            raise ValueError("evaluation point outside interpolation range")
        i = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
        beyond = t > x[-1]
        h = x[i + 1] - x[i]
        s = (t - x[i]) / h
        return t, i, h, s, beyond

    @staticmethod
    def _hermite(s):
        s2, s3 = s * s, s * s * s
        return 2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, -2 * s3 + 3 * s2, s3 - s2

    @staticmethod
    def _hermite_ds(s):
        s2 = s * s
        return 6 * s2 - 6 * s, 3 * s2 - 4 * s + 1, -6 * s2 + 6 * s, 3 * s2 - 2 * s

    def __call__(self, t):
        t, i, h, s, beyond = self._locate(t)
        y, d = self.anchor_values, self.filtered_slopes
        h00, h10, h01, h11 = self._hermite(s)
        out = h00 * y[i] + h10 * h * d[i] + h01 * y[i + 1] + h11 * h * d[i + 1]
        if np.any(beyond):
            out[beyond] = y[-1] + d[-1] * (t[beyond] - self.anchor_abscissae[-1])
        return out

    def deviation(self, t):
        """Interpolant minus the identity, ``p(t) - t``.

        Evaluated from the node deviations so that anchor values equal to the
        abscissae give exactly zero.
        """
        t, i, h, s, beyond = self._locate(t)
        x = self.anchor_abscissae
        e, g = self.anchor_values - x, self.filtered_slopes - 1.0
        h00, h10, h01, h11 = self._hermite(s)
        out = h00 * e[i] + h10 * h * g[i] + h01 * e[i + 1] + h11 * h * g[i + 1]
        if np.any(beyond):
            out[beyond] = e[-1] + g[-1] * (t[beyond] - x[-1])
        return out

    def deriv(self, t):
        t, i, h, s, beyond = self._locate(t)
        y, d = self.anchor_values, self.filtered_slopes
        g00, g10, g01, g11 = self._hermite_ds(s)
        out = (g00 * y[i] + g01 * y[i + 1]) / h + g10 * d[i] + g11 * d[i + 1]
        out[beyond] = d[-1]
        return out

    def value_gradient(self, t):
        """Derivative of the interpolant at ``t`` with respect to the anchor values.

        Returns an array of shape ``(len(t), n_anchors)``.
        """
        t, i, h, s, beyond = self._locate(t)
        n = self.anchor_values.size
        J = self.slope_jacobian
        h00, h10, h01, h11 = self._hermite(s)
        rows = np.arange(t.size)
        G = (h10 * h)[:, None] * J[i] + (h11 * h)[:, None] * J[i + 1]
        G[rows, i] += h00
        G[rows, i + 1] += h01
        if np.any(beyond):
            tail = np.zeros((int(beyond.sum()), n))
            tail[:, -1] = 1.0
            tail += (t[beyond] - self.anchor_abscissae[-1])[:, None] * J[-1]
            G[beyond] = tail
        return G


def monotone_cubic(anchors, values, boundary_rule: BoundaryRule = "fixed") -> MonotoneInterpolant:
    """Build a Hyman-filtered cubic Hermite interpolant through ``(anchors, values)``."""
    return MonotoneInterpolant(anchors, values, boundary_rule)
