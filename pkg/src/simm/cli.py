"""Command line front end.

Subcommands ``fit``, ``align``, ``simulate``, ``classify`` and
``export-cov``. Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
from scipy.stats import chi2

from .estimation import fit, predict_warp
from .io import (
    ConfigError,
    DataError,
    data_options,
    fmt,
    load,
    load_fitted,
    parse_config,
    save,
    save_fitted,
    write_table,
)
from .likelihood import amplitude_blocks
from .tasks import (
    FoldPlan,
    SimulationSpec,
    cross_validate,
    harmonic_templates,
    nc_method,
    simm_method,
    simulate,
)
from .warp import warp_eval

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- outputs


def _warps_rows(dataset, latents, spec):
    header = ["sample_id"] + [f"w{k + 1}" for k in range(spec.warp.n_anchors)] + ["shift"]
    rows = [[s.sample_id] + [float(x) for x in lat.w] + [float(lat.s)] for s, lat in zip(dataset, latents)]
    return header, rows


def _aligned_rows(dataset, latents, spec):
    header = ["sample_id", "t", "v"] + [f"y{j + 1}" for j in range(dataset.q)]
    rows = []
    for s, lat in zip(dataset, latents):
        v = s.to_original(warp_eval(spec.warp, lat, s.times))
        vals = np.where(s.mask, s.values, np.nan)
        for t, vt, y in zip(s.original_times, v, vals):
            rows.append([s.sample_id, float(t), float(vt)] + [float(x) for x in y])
    return header, rows


def _report_lines(fitted, seed):
    eff = fitted.effective_spec()
    wc = eff.warp.covariance
    lines = {
        "sigma2": fitted.sigma2,
        "sigma": fitted.sigma,
        "criterion": fitted.trace[-1],
        "iterations": len(fitted.trace),
        "converged": fitted.converged,
        "seed": seed,
        "warp.family": wc.family,
    }
    if wc.family == "unstructured":
        for i, row in enumerate(wc.matrix):
            lines[f"warp.matrix.{i + 1}"] = " ".join(fmt(x) for x in row)
    else:
        lines["warp.tau"] = wc.tau
    if wc.shift_sd is not None and eff.warp.include_shift:
        lines["warp.shift_sd"] = wc.shift_sd
    amp = eff.amplitude
    kernels = amp.kernel.kernels if hasattr(amp.kernel, "kernels") else (amp.kernel,)
    for i, k in enumerate(kernels):
        for p in k._params:
            lines[f"kernel{i + 1}.{type(k).__name__.lower()}.{p}"] = getattr(k, p)
    if hasattr(amp, "scales"):
        for j, sc in enumerate(amp.scales):
            lines[f"amplitude.scale{j + 1}"] = sc
    else:
        for t, A in zip(amp.anchors.times, amp.anchors.matrices):
            lines[f"amplitude.anchor.{fmt(t)}"] = " ".join(fmt(x) for x in A.ravel())
    for j, r in enumerate(eff.noise.rho):
        lines[f"noise.rho{j + 1}"] = r
    out = []
    for key in sorted(lines):
        val = lines[key]
        text = fmt(val) if isinstance(val, (float, np.floating)) else str(val)
        out.append(f"{key} = {text}")
    return out


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands


def run_fit(args):
    rescale, delimiter = data_options(args.config)
    data = load(args.data, rescale, delimiter)
    cfg = parse_config(args.config, q=data.q, seed=args.seed, threads=args.threads)
    fitted = fit(data, cfg.spec, cfg.fit)
    os.makedirs(args.out, exist_ok=True)
    save_fitted(fitted, os.path.join(args.out, "model.json"), data, cfg.rescale)
    write_table(os.path.join(args.out, "trace.csv"), ["iteration", "criterion"], [[i + 1, float(c)] for i, c in enumerate(fitted.trace)])
    write_table(os.path.join(args.out, "warps.csv"), *_warps_rows(data, fitted.latents, fitted.spec))
    write_table(os.path.join(args.out, "aligned.csv"), *_aligned_rows(data, fitted.latents, fitted.spec))
    _write_lines(os.path.join(args.out, "report.txt"), _report_lines(fitted, cfg.seed))
    return EXIT_OK


def run_align(args):
    fitted, raw = load_fitted(args.model)
    data = load(args.data, raw.get("time_rescale", "sample"))
    labels = {name: j for j, name in enumerate(fitted.subjects)}
    spec = fitted.spec
    blocks = amplitude_blocks(spec, data)
    latents = []
    for s, S in zip(data, blocks):
        label = data.subjects[s.subject]
        if label not in labels:
            raise DataError(f"subject {label!r} of sample {s.sample_id!r} is not in the fitted model")
        latents.append(predict_warp(s, fitted.coefficients[labels[label]], spec, S=S))
    os.makedirs(args.out, exist_ok=True)
    write_table(os.path.join(args.out, "warps.csv"), *_warps_rows(data, latents, spec))
    write_table(os.path.join(args.out, "aligned.csv"), *_aligned_rows(data, latents, spec))
    return EXIT_OK


def run_simulate(args):
    cfg = parse_config(args.config, seed=args.seed)
    if cfg.fit.init == "split":
        raise ConfigError("simulate needs explicit amplitude.scales, not split")
    opts = cfg.simulate
    spec = cfg.spec
    coefs = harmonic_templates(spec.basis, opts["subjects"], spec.q, opts["template_seed"], amplitude=opts["template_amplitude"])
    a, b = spec.basis.domain
    sim = SimulationSpec.from_absolute(
        spec,
        opts["sigma"],
        coefficients=coefs,
        samples_per_subject=opts["samples_per_subject"],
        time_grids=np.linspace(a, b, opts["n_times"]),
        seed=cfg.seed,
    )
    data = simulate(sim)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save(data, args.out, cfg.delimiter)
    return EXIT_OK


def _method(cfg):
    m = cfg.classify
    if m["method"] == "nc":
        return nc_method()
    if m["method"] == "nc-w":
        return nc_method(m["weights"])
    return simm_method(cfg.spec, cfg.fit, m["restarts"], cfg.seed)


def run_classify(args):
    rescale, delimiter = data_options(args.config)
    train = load(args.data, rescale, delimiter)
    cfg = parse_config(args.config, q=train.q, seed=args.seed, threads=args.threads)
    if cfg.classify["method"] == "nc-w" and len(cfg.classify["weights"]) != train.q:
        raise ConfigError("classify.weights needs one weight per value column")
    pred_rows, acc_rows = [], []
    if args.test:
        test = load(args.test, cfg.rescale, cfg.delimiter)
        if test.q != train.q:
            raise DataError("train and test tables have different value columns")
        predictor = _method(cfg)(train)
        correct = 0
        for s in test:
            label = test.subjects[s.subject]
            p = train.subjects[predictor(s)]
            correct += int(p == label)
            pred_rows.append([s.sample_id, label, p, 0])
        acc_rows.append(["test", correct, len(test), correct / len(test)])
        acc_rows.append(["mean", correct, len(test), correct / len(test)])
    else:
        plan = FoldPlan(cfg.classify["folds"])
        res = cross_validate(train, plan, _method(cfg))
        fold_of = {}
        for f, idx in enumerate(plan.folds(train)):
            for i in idx:
                fold_of[int(i)] = f + 1
        for i, p in res.predictions:
            s = train[i]
            pred_rows.append([s.sample_id, train.subjects[s.subject], train.subjects[p], fold_of[i]])
        for f, (c, t) in enumerate(zip(res.fold_correct, res.fold_total)):
            acc_rows.append([str(f + 1), c, t, c / t])
        acc_rows.append(["mean", sum(res.fold_correct), sum(res.fold_total), float(np.mean(res.fold_accuracy))])
    os.makedirs(args.out, exist_ok=True)
    write_table(os.path.join(args.out, "predictions.csv"), ["sample_id", "subject_id", "predicted", "fold"], pred_rows)
    write_table(os.path.join(args.out, "accuracy.csv"), ["fold", "correct", "total", "accuracy"], acc_rows)
    return EXIT_OK


def export_cov_tables(fitted, grid_size=101, include_noise=True, time_offset=0.0, time_scale=1.0):
    """Marginal covariance summaries on a uniform grid.

    Returns ``(cov_header, cov_rows, axes_header, axes_rows)``. The marginal
    covariance is ``sigma2 * (S(t, t) + diag(rho))`` (noise optional). Axis
    rows hold each eigenpair and the 95% ellipsoid radius
    ``sqrt(chi2_q(0.95) * eigenvalue)``.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    spec = fitted.spec
    q = spec.q
    a, b = spec.warp.domain
    grid = np.linspace(a, b, grid_size)
    marg = spec.amplitude.marginal(grid)
    if include_noise:
        marg = marg + np.diag(spec.noise.rho)
    marg = fitted.sigma2 * marg
    quant = float(chi2.ppf(0.95, q))
    pairs = [(j, k) for j in range(q) for k in range(j + 1, q)]
    cov_header = ["t"] + [f"var_{j + 1}" for j in range(q)] + [f"corr_{j + 1}_{k + 1}" for j, k in pairs]
    axes_header = ["t", "axis", "eigenvalue", "radius"] + [f"v_{j + 1}" for j in range(q)]
    cov_rows, axes_rows = [], []
    for t, M in zip(grid, marg):
        M = 0.5 * (M + M.T)
        sd = np.sqrt(np.diag(M))
        corr = [M[j, k] / (sd[j] * sd[k]) if sd[j] * sd[k] > 0 else 0.0 for j, k in pairs]
        t_out = float(time_offset + time_scale * t)
        cov_rows.append([t_out] + [float(x) for x in np.diag(M)] + [float(c) for c in corr])
        vals, vecs = np.linalg.eigh(M)
        for i in range(q - 1, -1, -1):
            lam = float(vals[i])
            axes_rows.append([t_out, q - i, lam, float(np.sqrt(quant * max(lam, 0.0)))] + [float(x) for x in vecs[:, i]])
    return cov_header, cov_rows, axes_header, axes_rows


def run_export_cov(args):
    fitted, raw = load_fitted(args.model)
    offset = raw.get("time_offset", 0.0)
    scale = raw.get("time_scale", 1.0)
    ch, cr, ah, ar = export_cov_tables(fitted, args.grid, not args.exclude_noise, offset, scale)
    os.makedirs(args.out, exist_ok=True)
    write_table(os.path.join(args.out, "covariance.csv"), ch, cr)
    write_table(os.path.join(args.out, "ellipses.csv"), ah, ar)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser():
    p = _Parser(prog="simm", description="Fit, align, simulate and classify misaligned multivariate curves.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True, data=True, threads=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration file (INI sections)")
        if data:
            sp.add_argument("--data", required=True, help="curve table sample_id,subject_id,t,y1..yq")
        sp.add_argument("--out", required=True, help="output directory (output file for simulate)")
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: fit.seed, else 0)")
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker threads (default: fit.threads, else 1)")

    sp = sub.add_parser("fit", help="estimate templates, warps and variance parameters")
    common(sp)
    sp.set_defaults(func=run_fit)

    sp = sub.add_parser("align", help="predict warps for a curve table under a fitted model")
    sp.add_argument("--model", required=True, help="model.json written by fit")
    common(sp, config=False)
    sp.set_defaults(func=run_align)

    sp = sub.add_parser("simulate", help="draw a synthetic curve table")
    common(sp, data=False, threads=False)
    sp.set_defaults(func=run_simulate)

    sp = sub.add_parser("classify", help="classify curves by subject (cross-validated unless --test is given)")
    common(sp)
    sp.add_argument("--test", default=None, help="held-out curve table; omit for chronological cross-validation")
    sp.set_defaults(func=run_classify)

    sp = sub.add_parser("export-cov", help="marginal covariance and ellipsoid tables of a fitted model")
    sp.add_argument("--model", required=True, help="model.json written by fit")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--grid", type=int, default=101, help="number of grid points (default 101)")
    sp.add_argument("--exclude-noise", action="store_true", help="omit the measurement-noise variance")
    sp.set_defaults(func=run_export_cov)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"simm: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"simm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"simm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"simm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
