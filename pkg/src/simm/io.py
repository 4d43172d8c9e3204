"""Curve tables, run configuration files and fitted-model serialization.

Curve table: a delimiter-separated file with header
``sample_id,subject_id,t,y1,...,yq``. Missing coordinates are empty fields
or ``NA``. Reals are written with ``repr`` so that tables reload exactly.
"""

from __future__ import annotations

import configparser
import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .covariance import (
    BrownianBridge,
    BrownianMotion,
    CrossCovAnchors,
    DiagonalAmplitude,
    DynamicAmplitude,
    Matern,
    Mixture,
    NoiseModel,
    Product,
)
from .estimation import FitOptions, FittedModel
from .model import DataSet, FunctionalSample, ModelSpec
from .splines import SplineBasis
from .warp import LatentWarp, WarpCovariance, WarpModel

__all__ = [
    "DataError",
    "ConfigError",
    "load",
    "save",
    "write_table",
    "read_table",
    "RunConfig",
    "parse_config",
    "fitted_to_dict",
    "fitted_from_dict",
    "save_fitted",
    "load_fitted",
    "SCHEMA",
]

SCHEMA = "simm.fitted/1"
MISSING = ("", "NA", "NaN", "nan")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(ValueError):
    """Invalid run configuration."""


def fmt(x):
    """Shortest exact decimal form of a real (at most 17 significant digits)."""
    x = float(x)
    return "" if np.isnan(x) else repr(x)


# ---------------------------------------------------------------- tables


def write_table(path, header, rows, delimiter=","):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path, delimiter=","):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


def _parse_real(field, lineno, allow_missing):
    field = field.strip()
    if field in MISSING:
        if allow_missing:
            return np.nan
        raise DataError(f"line {lineno}: missing value")
    try:
        return float(field)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse {field!r} as a number") from None


def load(path, rescale="sample", delimiter=","):
    """Read a curve table into a :class:`DataSet`.

    ``rescale="sample"`` maps every sample's time range onto ``[0, 1]``;
    ``"global"`` uses one map for the whole file; ``"none"`` keeps times.
    Rows are sorted by time within a sample. Rows without any observed
    coordinate are dropped. Subjects and samples keep their order of first
    appearance; the within-subject order defines the repetition number.
    """
    if rescale not in ("sample", "global", "none"):
        raise ValueError(f"unknown rescale mode {rescale!r}")
    header, rows = read_table(path, delimiter)
    header = [h.strip() for h in header]
    if header[:3] != ["sample_id", "subject_id", "t"] or len(header) < 4:
        raise DataError("header must start with sample_id,subject_id,t followed by at least one value column")
    q = len(header) - 3
    samples: dict[str, dict] = {}
    subjects: dict[str, int] = {}
    seen = {}
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != q + 3:
            raise DataError(f"line {lineno}: expected {q + 3} fields, got {len(row)}")
        sid, subj = row[0].strip(), row[1].strip()
        if not sid or not subj:
            raise DataError(f"line {lineno}: empty sample or subject id")
        t = _parse_real(row[2], lineno, False)
        y = [_parse_real(c, lineno, True) for c in row[3:]]
        if (sid, t) in seen:
            raise DataError(f"line {lineno}: duplicate time {row[2].strip()} for sample {sid!r} (first at line {seen[sid, t]})")
        seen[sid, t] = lineno
        if all(np.isnan(y)):
            continue
        entry = samples.setdefault(sid, {"subject": subj, "t": [], "y": []})
        if entry["subject"] != subj:
            raise DataError(f"line {lineno}: sample {sid!r} assigned to two subjects")
        subjects.setdefault(subj, len(subjects))
        entry["t"].append(t)
        entry["y"].append(y)
    if not samples:
        raise DataError(f"{path}: no observations")
    parsed = []
    for sid, e in samples.items():
        t = np.asarray(e["t"])
        order = np.argsort(t, kind="stable")
        parsed.append((sid, subjects[e["subject"]], t[order], np.asarray(e["y"])[order]))
    if rescale == "global":
        lo = min(p[2][0] for p in parsed)
        hi = max(p[2][-1] for p in parsed)
        if not hi > lo:
            raise DataError("all observations share one time point")
    out = []
    reps: dict[int, int] = {}
    for sid, j, t, y in parsed:
        if rescale == "sample":
            lo, hi = t[0], t[-1]
            if not hi > lo:
                raise DataError(f"sample {sid!r} needs at least two time points")
        if rescale == "none":
            offset, scale, tt = 0.0, 1.0, t
        else:
            offset, scale = float(lo), float(hi - lo)
            tt = np.clip((t - lo) / scale, 0.0, 1.0)
        r = reps.get(j, 0)
        reps[j] = r + 1
        try:
            out.append(FunctionalSample(tt, y, subject=j, sample_id=sid, repetition=r, time_offset=offset, time_scale=scale, source_times=t))
        except ValueError as exc:
            raise DataError(f"sample {sid!r}: {exc}") from None
    return DataSet(tuple(out), tuple(subjects))


def save(dataset: DataSet, path, delimiter=","):
    """Write a :class:`DataSet` as a curve table in original time units."""
    header = ["sample_id", "subject_id", "t"] + [f"y{j + 1}" for j in range(dataset.q)]
    rows = []
    for s in dataset:
        label = dataset.subjects[s.subject]
        vals = np.where(s.mask, s.values, np.nan)
        for t, y in zip(s.original_times, vals):
            rows.append([s.sample_id, label, float(t)] + [float(v) for v in y])
    write_table(path, header, rows, delimiter)


# ---------------------------------------------------------------- configuration


def _floats(text):
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _build_kernel(name, sec):
    fixed = tuple(x.strip() for x in sec.get("fixed", "alpha").split(",") if x.strip())
    parts = [p.strip() for p in name.split("*")]
    kernels = []
    for p in parts:
        if p == "matern":
            kernels.append(Matern(sec.getfloat("alpha", 2.0), sec.getfloat("kappa", 0.2), fixed=tuple(f for f in fixed if f in ("alpha", "kappa"))))
        # a kernel scale would duplicate the amplitude scales, so it stays fixed at 1
        elif p == "brownian-bridge":
            kernels.append(BrownianBridge(1.0, fixed=("tau",)))
        elif p == "brownian-motion":
            kernels.append(BrownianMotion(1.0, fixed=("tau",)))
        elif p == "mixture":
            kernels.append(Mixture(sec.getfloat("a", 1.0), fixed=tuple(f for f in fixed if f == "a")))
        else:
            raise ConfigError(f"unknown kernel {p!r}")
    return kernels[0] if len(kernels) == 1 else Product(tuple(kernels))


@dataclass(frozen=True, eq=False)
class RunConfig:
    """A parsed configuration file.

    ``spec`` holds warp and amplitude scales on the absolute scale. When
    ``amplitude_init == "split"`` the amplitude scales in ``spec`` are
    placeholders that the fit replaces by a residual-variance split.
    """

    spec: ModelSpec
    fit: FitOptions
    seed: int
    rescale: str
    delimiter: str
    simulate: dict
    classify: dict


def parse_config(path=None, text=None, q=None, seed=None, threads=None):
    """Parse a configuration file (see the README for the grammar).

    The value dimension ``q`` comes from the argument (usually the data),
    else from ``amplitude.dimension``, else from the number of scales.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        if text is not None:
            cp.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(str(exc)) from None
    for name in ("basis", "warp", "amplitude", "noise", "data", "fit", "simulate", "classify"):
        if not cp.has_section(name):
            cp.add_section(name)
    known = {"basis", "warp", "amplitude", "noise", "data", "fit", "simulate", "classify"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    try:
        return _parse(cp, q, seed, threads)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def data_options(path):
    """``(rescale, delimiter)`` from the ``[data]`` section, readable before the data are."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(str(exc)) from None
    d = cp["data"] if cp.has_section("data") else {}
    rescale = d.get("rescale", "sample")
    if rescale not in ("sample", "global", "none"):
        raise ConfigError(f"unknown data.rescale {rescale!r}")
    delimiter = d.get("delimiter", ",")
    return rescale, "\t" if delimiter in ("tab", "\\t") else delimiter


def _parse(cp, q_data, seed, threads):
    b = cp["basis"]
    domain = tuple(_floats(b.get("domain", "0, 1")))
    if len(domain) != 2:
        raise ConfigError("basis.domain needs two numbers")
    mode = b.get("mode", "standard")
    if "knots" in b:
        basis = SplineBasis(b.getint("degree", 3), _floats(b["knots"]), domain, mode)
    else:
        basis = SplineBasis.uniform(b.getint("degree", 3), b.getint("interior_knots", 8), domain, mode)

    a = cp["amplitude"]
    q = a.getint("dimension", 0) or None
    if q_data is not None:
        if q is not None and q != q_data:
            raise ConfigError(f"amplitude.dimension = {q} but the data have {q_data} value columns")
        q = q_data

    w = cp["warp"]
    family = w.get("family", "brownian-bridge")
    n_anchors = w.getint("anchors", 3)
    include_shift = w.getboolean("shift", False)
    shift_sd = w.getfloat("shift_sd", 0.1) if include_shift else None
    matrix = None
    if family == "unstructured":
        matrix = np.eye(n_anchors) * w.getfloat("tau", 0.1) ** 2
    wcov = WarpCovariance(family, w.getfloat("tau", 0.1), matrix, shift_sd)
    boundary = w.get("boundary", "extrapolate" if family == "brownian-motion" else "fixed")
    warp = WarpModel(n_anchors, wcov, boundary, include_shift, domain)

    kernel = _build_kernel(a.get("kernel", "matern"), a)
    variant = a.get("variant", "diagonal")
    scales_text = a.get("scales", "split")
    amplitude_init = "split" if scales_text.strip() == "split" else "given"
    q = q or (len(_floats(scales_text)) if amplitude_init == "given" else None)
    if q is None:
        raise ConfigError("amplitude.dimension is required when scales = split and no data are given")
    if variant == "diagonal":
        scales = np.ones(q) if amplitude_init == "split" else np.asarray(_floats(scales_text))
        if scales.size == 1:
            scales = np.full(q, scales[0])
        amplitude = DiagonalAmplitude(kernel, scales)
    elif variant == "dynamic":
        times = _floats(a.get("anchor_times", "0, 0.4, 0.6, 1"))
        sc = np.ones(q) if amplitude_init == "split" else np.asarray(_floats(scales_text))
        sc = np.full(q, sc[0]) if sc.size == 1 else sc
        amplitude = DynamicAmplitude(kernel, CrossCovAnchors(times, np.array([np.diag(sc**2)] * len(times))))
    else:
        raise ConfigError(f"unknown amplitude variant {variant!r}")

    n = cp["noise"]
    rho = _floats(n["rho"]) if "rho" in n else [1.0] * q
    noise = NoiseModel(rho, n.getboolean("estimate", False))
    spec = ModelSpec(basis, warp, amplitude, noise, w.getboolean("estimate", True))

    f = cp["fit"]
    options = FitOptions(
        max_outer=f.getint("max_outer", 5),
        rel_tol=f.getfloat("rel_tol", 1e-4),
        em=f.getboolean("em", False),
        estimate_variances=f.getboolean("estimate_variances", True),
        init=amplitude_init,
        threads=threads if threads is not None else f.getint("threads", 1),
    )
    d = cp["data"]
    rescale = d.get("rescale", "sample")
    if rescale not in ("sample", "global", "none"):
        raise ConfigError(f"unknown data.rescale {rescale!r}")
    delimiter = d.get("delimiter", ",")
    delimiter = "\t" if delimiter in ("tab", "\\t") else delimiter
    s = cp["simulate"]
    sim = {
        "subjects": s.getint("subjects", 1),
        "samples_per_subject": s.getint("samples_per_subject", 20),
        "n_times": s.getint("n_times", 50),
        "sigma": s.getfloat("sigma", 0.01),
        "template_amplitude": s.getfloat("template_amplitude", 1.0),
        "template_seed": s.getint("template_seed", 0),
    }
    c = cp["classify"]
    method = c.get("method", "simm")
    if method not in ("simm", "nc", "nc-w"):
        raise ConfigError(f"unknown classify.method {method!r}")
    cls = {
        "method": method,
        "folds": c.getint("folds", 5),
        "restarts": c.getint("restarts", 3),
        "weights": tuple(_floats(c.get("weights", "0.1, 0.7, 0.2"))),
    }
    run_seed = seed if seed is not None else f.getint("seed", 0)
    return RunConfig(spec, options, run_seed, rescale, delimiter, sim, cls)


# ---------------------------------------------------------------- fitted model


def _kernel_to_dict(k):
    if isinstance(k, Product):
        return {"type": "product", "kernels": [_kernel_to_dict(x) for x in k.kernels]}
    name = {BrownianBridge: "brownian-bridge", BrownianMotion: "brownian-motion", Mixture: "mixture", Matern: "matern"}[type(k)]
    out = {"type": name, "fixed": list(k.fixed)}
    for p in k._params:
        out[p] = float(getattr(k, p))
    return out


def _kernel_from_dict(d):
    if d["type"] == "product":
        return Product(tuple(_kernel_from_dict(x) for x in d["kernels"]))
    cls = {"brownian-bridge": BrownianBridge, "brownian-motion": BrownianMotion, "mixture": Mixture, "matern": Matern}[d["type"]]
    return cls(**{p: d[p] for p in cls._params}, fixed=tuple(d["fixed"]))


def spec_to_dict(spec: ModelSpec):
    b, w, a = spec.basis, spec.warp, spec.amplitude
    wc = w.covariance
    out = {
        "basis": {"mode": b.mode, "degree": b.degree, "interior_knots": b.interior_knots.tolist(), "domain": list(b.domain)},
        "warp": {
            "n_anchors": w.n_anchors,
            "family": wc.family,
            "tau": float(wc.tau),
            "matrix": None if wc.matrix is None else wc.matrix.tolist(),
            "shift_sd": wc.shift_sd,
            "boundary": w.boundary,
            "include_shift": w.include_shift,
            "domain": list(w.domain),
            "estimate": spec.estimate_warp,
        },
        "noise": {"rho": spec.noise.rho.tolist(), "estimate": spec.noise.estimate},
    }
    if isinstance(a, DiagonalAmplitude):
        out["amplitude"] = {"variant": "diagonal", "kernel": _kernel_to_dict(a.kernel), "scales": a.scales.tolist()}
    else:
        out["amplitude"] = {
            "variant": "dynamic",
            "kernel": _kernel_to_dict(a.kernel),
            "anchor_times": a.anchors.times.tolist(),
            "anchor_matrices": a.anchors.matrices.tolist(),
        }
    return out


def spec_from_dict(d):
    b, w, a, n = d["basis"], d["warp"], d["amplitude"], d["noise"]
    basis = SplineBasis(b["degree"], b["interior_knots"], tuple(b["domain"]), b["mode"])
    matrix = None if w["matrix"] is None else np.asarray(w["matrix"])
    wc = WarpCovariance(w["family"], w["tau"], matrix, w["shift_sd"])
    warp = WarpModel(w["n_anchors"], wc, w["boundary"], w["include_shift"], tuple(w["domain"]))
    kernel = _kernel_from_dict(a["kernel"])
    if a["variant"] == "diagonal":
        amp = DiagonalAmplitude(kernel, a["scales"])
    else:
        amp = DynamicAmplitude(kernel, CrossCovAnchors(a["anchor_times"], np.asarray(a["anchor_matrices"])))
    return ModelSpec(basis, warp, amp, NoiseModel(n["rho"], n["estimate"]), w["estimate"])


def fitted_to_dict(fitted: FittedModel, dataset: Optional[DataSet] = None, rescale="sample"):
    ids = [s.sample_id for s in dataset] if dataset is not None else [str(i) for i in range(len(fitted.latents))]
    out = {
        "schema": SCHEMA,
        "spec": spec_to_dict(fitted.spec),
        "sigma2": float(fitted.sigma2),
        "coefficients": [np.asarray(c).tolist() for c in fitted.coefficients],
        "subjects": list(fitted.subjects),
        "latents": [{"sample_id": i, "w": lat.w.tolist(), "s": lat.s} for i, lat in zip(ids, fitted.latents)],
        "trace": list(fitted.trace),
        "converged": fitted.converged,
        "messages": list(fitted.messages),
        "time_rescale": rescale,
    }
    if dataset is not None and rescale == "global":
        out["time_offset"] = dataset[0].time_offset
        out["time_scale"] = dataset[0].time_scale
    return out


def fitted_from_dict(d):
    if d.get("schema") != SCHEMA:
        raise DataError(f"unsupported model schema {d.get('schema')!r}")
    return FittedModel(
        spec=spec_from_dict(d["spec"]),
        coefficients=tuple(np.asarray(c, float) for c in d["coefficients"]),
        sigma2=float(d["sigma2"]),
        latents=tuple(LatentWarp(x["w"], x["s"]) for x in d["latents"]),
        trace=tuple(d["trace"]),
        subjects=tuple(d["subjects"]),
        converged=bool(d["converged"]),
        messages=tuple(d["messages"]),
    )


def save_fitted(fitted, path, dataset=None, rescale="sample"):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fitted_to_dict(fitted, dataset, rescale), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_fitted(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return fitted_from_dict(d), d
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read fitted model {path}: {exc}") from None
