"""Classify held-out curves by subject: posterior distance against nearest centroids.

Run with ``python demos/classify_subjects.py``; takes about a minute.
"""

import warnings

import numpy as np

from simm import DiagonalAmplitude, FitOptions, Matern, ModelSpec, SplineBasis, WarpCovariance, WarpModel, fit
from simm.estimation import FitWarning
from simm.tasks import SimulationSpec, classify_nc, classify_posterior, harmonic_templates, nearest_centroids, simulate

basis = SplineBasis.uniform(3, 8)
truth = ModelSpec(
    basis,
    WarpModel(3, WarpCovariance("brownian-bridge", 0.15)),
    DiagonalAmplitude(Matern(2.0, 0.1, fixed=("alpha",)), [0.05, 0.05]),
)
# templates close enough together that timing variation confuses plain averaging
coefs = harmonic_templates(basis, 5, 2, rng=8, amplitude=0.08)
data = simulate(SimulationSpec.from_absolute(truth, 0.01, coefficients=coefs, samples_per_subject=30, time_grids=np.linspace(0, 1, 30), seed=12))
train = data.subset([i for i, s in enumerate(data) if s.repetition < 20])
test = [s for s in data if s.repetition >= 20]

start = ModelSpec(basis, WarpModel(3, WarpCovariance("brownian-bridge", 0.1)), DiagonalAmplitude(Matern(2.0, 0.2, fixed=("alpha",)), [1.0] * 2))
with warnings.catch_warnings():
    warnings.simplefilter("ignore", FitWarning)
    model = fit(train, start, FitOptions())

cent = nearest_centroids(train)
for name, predict in (
    ("posterior distance", lambda s: classify_posterior(s, model)),
    ("nearest centroid", lambda s: classify_nc(s, cent)),
):
    acc = np.mean([predict(s) == s.subject for s in test])
    print(f"{name:<20} accuracy {acc:.3f} on {len(test)} held-out curves")
