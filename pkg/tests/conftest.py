"""Shared builders for small random models and samples."""

import numpy as np
import pytest

from simm import (
    CrossCovAnchors,
    DiagonalAmplitude,
    DynamicAmplitude,
    FunctionalSample,
    LatentWarp,
    Matern,
    ModelSpec,
    NoiseModel,
    SplineBasis,
    WarpCovariance,
    WarpModel,
)


def random_spd(rng, q, floor=0.2):
    M = rng.standard_normal((q, q))
    return M @ M.T + floor * np.eye(q)


def make_spec(rng, q=2, m_w=3, dynamic=False, shift=False, family="brownian-bridge", rho=None, n_interior=6):
    basis = SplineBasis.uniform(3, n_interior)
    boundary = "extrapolate" if family == "brownian-motion" else "fixed"
    cov = WarpCovariance(family, float(rng.uniform(0.05, 0.3)), shift_sd=0.05 if shift else None)
    warp = WarpModel(m_w, cov, boundary, shift)
    kernel = Matern(2.0, float(rng.uniform(0.1, 0.4)), fixed=("alpha",))
    if dynamic:
        anchors = CrossCovAnchors([0.0, 0.5, 1.0], np.array([random_spd(rng, q) for _ in range(3)]))
        amp = DynamicAmplitude(kernel, anchors)
    else:
        amp = DiagonalAmplitude(kernel, rng.uniform(0.5, 2.0, q))
    noise = NoiseModel(rho if rho is not None else np.ones(q), rho is not None)
    return ModelSpec(basis, warp, amp, noise)


def random_coef(rng, spec, scale=1.0):
    return scale * rng.standard_normal((spec.basis.n_basis, spec.q))


def random_latent(rng, model, scale=0.05):
    while True:
        vec = scale * rng.standard_normal(model.n_latent)
        if model.is_feasible(vec):
            return LatentWarp.from_vector(model, vec)


def random_sample(rng, q=2, m=12, subject=0, missing=0.0):
    t = np.sort(rng.uniform(0, 1, m))
    t[0], t[-1] = 0.0, 1.0
    y = rng.standard_normal((m, q))
    mask = rng.uniform(size=(m, q)) >= missing
    mask[:, 0] = True
    return FunctionalSample(t, np.where(mask, y, np.nan), subject=subject, mask=mask)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)



def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
