"""Fit a time-varying cross-covariance and tabulate correlations and 95% ellipses.

Run with ``python demos/dynamic_covariance.py``; takes under a minute.
"""

import warnings

import numpy as np

from simm import CrossCovAnchors, DynamicAmplitude, FitOptions, Matern, ModelSpec, SplineBasis, WarpCovariance, WarpModel, fit
from simm.cli import export_cov_tables
from simm.estimation import FitWarning
from simm.tasks import SimulationSpec, harmonic_templates, simulate

basis = SplineBasis.uniform(3, 6)
times = [0.0, 0.5, 1.0]
# correlation between the coordinates flips sign over the time axis
mats = np.array([[[1.0, 0.8], [0.8, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [[1.0, -0.8], [-0.8, 1.0]]]) * 0.05**2
truth = ModelSpec(basis, WarpModel(3, WarpCovariance("brownian-bridge", 0.1)), DynamicAmplitude(Matern(2.0, 0.2), CrossCovAnchors(times, mats)))
coefs = harmonic_templates(basis, 1, 2, rng=2)
data = simulate(SimulationSpec.from_absolute(truth, 0.01, coefficients=coefs, samples_per_subject=40, time_grids=np.linspace(0, 1, 40), seed=5))

start_mats = np.array([np.eye(2)] * 3) * 0.05**2
start = ModelSpec(
    basis,
    WarpModel(3, WarpCovariance("brownian-bridge", 0.1)),
    DynamicAmplitude(Matern(2.0, 0.2, fixed=("alpha",)), CrossCovAnchors(times, start_mats)),
)
with warnings.catch_warnings():
    warnings.simplefilter("ignore", FitWarning)
    model = fit(data, start, FitOptions(init="given"))

cov_header, cov_rows, axes_header, axes_rows = export_cov_tables(model, grid_size=11, include_noise=False)
print("  ".join(f"{h:>9}" for h in cov_header))
for row in cov_rows:
    print("  ".join(f"{x:9.5f}" for x in row))
print()
print("first ellipse axes:", axes_header)
for row in axes_rows[:2]:
    print("  ".join(f"{x:9.5f}" if isinstance(x, float) else f"{x:>9}" for x in row))
