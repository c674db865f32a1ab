"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/contract error.  Diagnostics go
to stderr; structured outputs go to files (written to a temporary name and
renamed, so a failing command never leaves a partial output).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, evaluation, forest, irmad, migration, synth
from .errors import DataError
from .preprocess import (drop_bands, l2_normalize, masked_median_composite,
                         resample_stack)
from .raster import (BandSpec, RasterStack, extract_features, map_to_pixel,
                     read_class_map, read_mask, read_raster, read_samples,
                     write_class_map, write_mask, write_raster, write_samples)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path, text):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_band_list(path):
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if isinstance(entries, dict) and "bands" in entries:
        entries = entries["bands"]
    return [BandSpec(name=e.get("name", f"b{i}"), center_nm=e.get("center_nm"),
                     fwhm_nm=e.get("fwhm_nm")) for i, e in enumerate(entries)]


def _forest_config(args):
    return forest.ForestConfig(
        n_trees=args.n_trees, max_features=args.max_features,
        min_samples_leaf=args.min_samples_leaf, max_depth=args.max_depth,
        seed=args.seed)


def _add_forest_flags(p):
    p.add_argument("--n-trees", type=int, default=100)
    p.add_argument("--max-features", default="sqrt",
                   type=lambda s: s if s == "sqrt" else int(s))
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--max-depth", type=int, default=None)


def _spec_from_args(args):
    overrides = {"forest": _forest_config(args)}
    if args.confidence_floor is not None:
        overrides["confidence_floor"] = args.confidence_floor
    if getattr(args, "e3_min_per_class", None) is not None:
        overrides["e3_min_per_class"] = args.e3_min_per_class
    if getattr(args, "e3_sample_fraction", None) is not None:
        overrides["e3_sample_fraction"] = args.e3_sample_fraction
    return migration.make_spec(args.experiment, seed=args.seed, **overrides)


def _add_experiment_flags(p):
    p.add_argument("--experiment", required=True,
                   choices=sorted(migration.EXPERIMENT_ALIASES)
                   + list(migration.EXPERIMENTS))
    p.add_argument("--t0-raster", required=True)
    p.add_argument("--t1-raster", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--mask", help="change mask (required for *.2 and 3)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--confidence-floor", type=float, default=None)
    p.add_argument("--e3-min-per-class", type=int, default=None)
    p.add_argument("--e3-sample-fraction", type=float, default=None)
    _add_forest_flags(p)


def _experiment_inputs(args):
    t0 = read_raster(args.t0_raster)
    t1 = read_raster(args.t1_raster)
    samples = read_samples(args.samples)
    spec = _spec_from_args(args)
    change = read_mask(args.mask) if args.mask else None
    if spec.uses_mask and change is None:
        raise DataError(f"experiment {spec.experiment} needs --mask")
    return spec, samples, t0, t1, change


# ---------------------------------------------------------------------------
# subcommand handlers

def _cmd_synth(args):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg_dict = json.load(fh)
        cfg_dict["seed"] = args.seed
        config = synth.SynthConfig(**cfg_dict)
    else:
        preset = synth.PRESETS[args.preset]
        from dataclasses import replace
        config = replace(preset, seed=args.seed)
    scene = synth.generate(config)
    os.makedirs(args.out_dir, exist_ok=True)
    out = lambda name: os.path.join(args.out_dir, name)
    write_raster(scene.raster_t0, out("t0"))
    write_raster(scene.raster_t1, out("t1"))
    write_class_map(scene.classmap_t0, out("classes_t0"))
    write_class_map(scene.classmap_t1, out("classes_t1"))
    write_mask(scene.truth_change_mask, out("truth_change"))
    write_samples(scene.samples, out("samples"))
    _atomic_write_text(out("manifest.json"), json.dumps(
        {"seed": config.seed, "config": config.to_dict()}, indent=2,
        sort_keys=True))
    return EXIT_OK


def _cmd_normalize(args):
    stack = read_raster(args.input)
    out, zero = l2_normalize(stack)
    if zero:
        print(f"warning: {zero} zero-norm pixels set to nodata",
              file=sys.stderr)
    write_raster(out, args.out)
    return EXIT_OK


def _cmd_resample(args):
    stack = read_raster(args.input)
    target = _load_band_list(args.target_bands)
    out, plan = resample_stack(stack, target)
    uncovered = int(np.count_nonzero(~plan.covered))
    if uncovered:
        print(f"note: {uncovered}/{len(target)} target bands uncovered "
              f"({100.0 * uncovered / len(target):.1f}%), set to NaN",
              file=sys.stderr)
    write_raster(out, args.out)
    return EXIT_OK


def _cmd_composite(args):
    stacks = [read_raster(p) for p in args.inputs]
    write_raster(masked_median_composite(stacks), args.out)
    return EXIT_OK


def _cmd_drop_bands(args):
    stack = read_raster(args.input)
    indices = [int(s) for s in args.bands.split(",") if s != ""]
    write_raster(drop_bands(stack, indices), args.out)
    return EXIT_OK


def _cmd_irmad(args):
    t0 = read_raster(args.t0)
    t1 = read_raster(args.t1)
    if (t0.width, t0.height) != (t1.width, t1.height):
        raise DataError(
            f"raster sizes differ: t0 is {t0.width}x{t0.height}, "
            f"t1 is {t1.width}x{t1.height}")
    result = irmad.irmad(t0, t1, max_iter=args.max_iter, tol=args.tol)
    z_stack = RasterStack(result.z.astype(np.float32)[None, :, :],
                          bands=[BandSpec(name="chi2_stat")],
                          transform=t0.transform)
    write_raster(z_stack, args.out)
    if args.report:
        _atomic_write_text(args.report, json.dumps(
            {"iterations": result.iterations, "converged": result.converged,
             "df": result.df,
             "rho_history": [list(map(float, r)) for r in result.rho_history]},
            indent=2))
    return EXIT_OK


def _cmd_mask(args):
    z_stack = read_raster(args.stat)
    z = z_stack.data[0].astype(float)
    if args.percentile is not None:
        mask = irmad.threshold_percentile(z, args.percentile,
                                          transform=z_stack.transform)
    elif args.threshold is not None:
        mask = irmad.apply_threshold(z, args.threshold,
                                     transform=z_stack.transform,
                                     provenance="external")
    else:
        samples = read_samples(args.pr)
        coords = samples.coords()
        cols, rows = map_to_pixel(z_stack.transform, coords[:, 0], coords[:, 1])
        inside = ((cols >= 0) & (cols < z_stack.width)
                  & (rows >= 0) & (rows < z_stack.height))
        z_vals = np.full(len(samples), np.nan)
        z_vals[inside] = z[rows[inside], cols[inside]]
        labels = np.array([p.change_flag == "changed" for p in samples])
        known = np.array([p.change_flag != "unknown" for p in samples])
        theta, precision, recall, f1 = irmad.threshold_pr_optimal(
            z_vals[known], labels[known])
        print(f"pr-optimal threshold {theta:.6g} "
              f"(precision {precision:.3f}, recall {recall:.3f}, f1 {f1:.3f})",
              file=sys.stderr)
        mask = irmad.apply_threshold(z, theta, transform=z_stack.transform,
                                     provenance="irmad_pr")
    write_mask(mask, args.out)
    return EXIT_OK


def _cmd_fit(args):
    samples = read_samples(args.samples)
    x = samples.feature_matrix(args.timestep)
    y = samples.labels(args.timestep)
    model = forest.fit(x, y, _forest_config(args))
    model.save(args.out_model)
    return EXIT_OK


def _cmd_predict(args):
    model = forest.TrainedModel.load(args.model)
    samples = read_samples(args.samples)
    x = samples.feature_matrix(args.timestep)
    pred = model.predict(x)
    proba = model.predict_proba(x)
    lines = ["id,predicted,confidence"]
    for p, lab, conf in zip(samples, pred, proba.max(axis=1)):
        lines.append(f"{p.id},{int(lab)},{conf:.6f}")
    _atomic_write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_predict_raster(args):
    model = forest.TrainedModel.load(args.model)
    stack = read_raster(args.raster)
    write_class_map(model.predict_raster(stack), args.out)
    return EXIT_OK


def _cmd_migrate(args):
    spec, samples, t0, t1, change = _experiment_inputs(args)
    result = migration.run_experiment(spec, samples, t0, t1, change)
    result.model.save(args.out_model)
    if args.out_map:
        write_class_map(result.class_map_t1, args.out_map)
    if args.out_bundle:
        migration.write_bundle(result.bundle, args.out_bundle)
    counts = result.bundle.provenance_counts()
    print("training rows by provenance: "
          + ", ".join(f"{k}={v}" for k, v in counts.items() if v),
          file=sys.stderr)
    return EXIT_OK


def _cmd_eval(args):
    spec, samples, t0, t1, change = _experiment_inputs(args)
    report = evaluation.cross_validate(spec, samples, t0, t1, change,
                                       k=args.k, seed=args.seed)
    _atomic_write_text(args.out, report.to_json())
    return EXIT_OK


def _cmd_sweep(args):
    spec, samples, t0, t1, change = _experiment_inputs(args)
    fractions = [float(s) for s in args.fractions.split(",") if s]
    records = evaluation.fraction_sweep(spec, samples, t0, t1, change,
                                        fractions=fractions, k=args.k,
                                        seed=args.seed)
    _atomic_write_text(args.out, json.dumps(
        [r.to_dict() for r in records], indent=2, sort_keys=True))
    return EXIT_OK


REPRODUCE_LADDER = ("1", "2.1", "2.2", "3", "4.1", "4.2", "5.1", "5.2")


def run_reproduce(out_dir, seed, preset="small", k=5, threads=None):
    """Full experiment ladder on a synthetic benchmark; returns the ranking
    rows and writes ranking.csv / ranking.txt / models / manifest."""
    from dataclasses import replace

    os.makedirs(out_dir, exist_ok=True)
    stage_times = {}
    t_start = time.time()
    config = replace(synth.PRESETS[preset], seed=seed)
    scene = synth.generate(config)
    stage_times["synth"] = time.time() - t_start

    t = time.time()
    result = irmad.irmad(scene.raster_t0, scene.raster_t1)
    # threshold calibrated by precision-recall against the reference points'
    # known change flags, mirroring an analyst picking an operating point
    coords = scene.samples.coords()
    cols, rows = map_to_pixel(scene.raster_t0.transform,
                              coords[:, 0], coords[:, 1])
    z_at_points = result.z[rows, cols]
    changed = np.array([p.change_flag == "changed" for p in scene.samples])
    theta, _, _, _ = irmad.threshold_pr_optimal(z_at_points, changed)
    mask = irmad.apply_threshold(result.z, theta,
                                 transform=scene.raster_t0.transform,
                                 provenance="irmad_pr")
    stage_times["irmad"] = time.time() - t

    rows_out = []
    outputs = {}
    for exp in REPRODUCE_LADDER:
        t = time.time()
        spec = migration.make_spec(exp, seed=seed)
        report = evaluation.cross_validate(
            spec, scene.samples, scene.raster_t0, scene.raster_t1, mask,
            k=k, seed=seed)
        run = migration.run_experiment(spec, scene.samples, scene.raster_t0,
                                       scene.raster_t1, mask, make_map=False)
        model_path = os.path.join(out_dir, f"model_{exp.replace('.', '_')}.bin")
        run.model.save(model_path)
        outputs[os.path.basename(model_path)] = model_path
        rows_out.append({
            "experiment": exp,
            "macro_f1_mean": report.mean["macro_f1"],
            "macro_f1_std": report.std.get("macro_f1"),
            "accuracy_mean": report.mean["overall_accuracy"],
            "accuracy_std": report.std.get("overall_accuracy"),
            "folds": len(report.folds),
        })
        stage_times[f"eval_{exp}"] = time.time() - t

    ranking_csv = os.path.join(out_dir, "ranking.csv")
    lines = ["experiment,macro_f1_mean,macro_f1_std,accuracy_mean,"
             "accuracy_std,folds"]
    for r in rows_out:
        std_f = "" if r["macro_f1_std"] is None else f"{r['macro_f1_std']:.6f}"
        std_a = "" if r["accuracy_std"] is None else f"{r['accuracy_std']:.6f}"
        lines.append(f"{r['experiment']},{r['macro_f1_mean']:.6f},{std_f},"
                     f"{r['accuracy_mean']:.6f},{std_a},{r['folds']}")
    _atomic_write_text(ranking_csv, "\n".join(lines) + "\n")
    outputs["ranking.csv"] = ranking_csv

    width = 14
    txt = [f"{'experiment':<12}{'macro F1':>{width}}{'accuracy':>{width}}"]
    for r in rows_out:
        f1 = f"{r['macro_f1_mean']:.3f}"
        if r["macro_f1_std"] is not None:
            f1 += f" ({r['macro_f1_std']:.3f})"
        acc = f"{r['accuracy_mean']:.3f}"
        if r["accuracy_std"] is not None:
            acc += f" ({r['accuracy_std']:.3f})"
        txt.append(f"{r['experiment']:<12}{f1:>{width}}{acc:>{width}}")
    ranking_txt = os.path.join(out_dir, "ranking.txt")
    _atomic_write_text(ranking_txt, "\n".join(txt) + "\n")
    outputs["ranking.txt"] = ranking_txt

    manifest = {
        "tool_version": __version__,
        "seed": seed,
        "preset": preset,
        "k": k,
        "change_threshold": float(theta),
        "stage_seconds": {k_: round(v, 3) for k_, v in stage_times.items()},
        "outputs": {name: _sha256(path) for name, path in sorted(outputs.items())},
    }
    _atomic_write_text(os.path.join(out_dir, "manifest.json"),
                       json.dumps(manifest, indent=2, sort_keys=True))
    return rows_out


def _cmd_reproduce(args):
    run_reproduce(args.out_dir, args.seed, preset=args.preset, k=args.k)
    with open(os.path.join(args.out_dir, "ranking.txt"), "r",
              encoding="utf-8") as fh:
        sys.stderr.write(fh.read())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = _Parser(prog="commonground",
                     description="Bi-temporal label migration toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (currently single-threaded)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark scene")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", help="JSON file of generator settings")
    g.add_argument("--preset", choices=sorted(synth.PRESETS), default="small")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("normalize", help="per-pixel L2 brightness normalization")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_normalize)

    p = sub.add_parser("resample", help="Gaussian cross-sensor band resampling")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--target-bands", required=True,
                   help="JSON band list or raster sidecar")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_resample)

    p = sub.add_parser("composite", help="masked median composite")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_composite)

    p = sub.add_parser("drop-bands", help="remove bands by 0-based index")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bands", required=True, help="comma-separated indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_drop_bands)

    p = sub.add_parser("irmad", help="IRMAD change statistic")
    p.add_argument("--t0", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iter", type=int, default=irmad.DEFAULT_MAX_ITER)
    p.add_argument("--tol", type=float, default=irmad.DEFAULT_TOL)
    p.add_argument("--report", help="JSON file for rho history")
    p.set_defaults(func=_cmd_irmad)

    p = sub.add_parser("mask", help="threshold a change statistic")
    p.add_argument("--stat", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--percentile", type=float)
    g.add_argument("--pr", help="sample CSV with change flags for PR tuning")
    g.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("fit", help="train the random forest on a sample CSV")
    p.add_argument("--samples", required=True)
    p.add_argument("--timestep", choices=("t0", "t1"), default="t0")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-model", required=True)
    _add_forest_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="predict labels for a sample CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--timestep", choices=("t0", "t1"), default="t1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("predict-raster", help="classify every raster pixel")
    p.add_argument("--model", required=True)
    p.add_argument("--raster", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict_raster)

    p = sub.add_parser("migrate", help="run one migration experiment")
    _add_experiment_flags(p)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-map")
    p.add_argument("--out-bundle")
    p.set_defaults(func=_cmd_migrate)

    p = sub.add_parser("eval", help="cross-validate one experiment")
    _add_experiment_flags(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="training-fraction sweep")
    _add_experiment_flags(p)
    p.add_argument("--fractions", default="0.05,0.1,0.25,0.5,1.0")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("reproduce",
                       help="full experiment ladder on a synthetic benchmark")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default="small")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=_cmd_reproduce)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
