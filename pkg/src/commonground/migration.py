"""Label-migration strategies for bi-temporal classification.

Implements the experiment ladder compared in this package:

  E1        gold standard -- train on fully relabeled t1 reference data
  E2.1/2.2  naive temporal transfer of the t0 model (2.2 adds L2 normalization)
  E3        stable-area sampling from the t0 classification map
  E4.1/4.2  cross-temporal training on t0 data plus the stable t1 subset
  E5.1/5.2  two-stage semi-supervised pipeline: the E4 model pseudo-labels
            the changed t1 samples, then everything is retrained together

The *.1 variants take change/no-change from manual flags on the samples,
the *.2 variants from a change mask (IRMAD- or externally derived).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import forest
from .errors import DataError, ValidationError
from .preprocess import l2_normalize, l2_normalize_features
from .raster import (CHANGE_CHANGED, CHANGE_STABLE, ChangeMask, SamplePoint,
                     SampleSet, extract_features, map_to_pixel, pixel_center)

EXPERIMENTS = ("E1_gold", "E2_1_naive", "E2_2_naive_norm", "E3_wessels",
               "E4_1_stable_manual", "E4_2_stable_auto",
               "E5_1_ssl_manual", "E5_2_ssl_auto")

# CLI shorthand ("5.2") -> canonical name
EXPERIMENT_ALIASES = {"1": "E1_gold", "2.1": "E2_1_naive",
                      "2.2": "E2_2_naive_norm", "3": "E3_wessels",
                      "4.1": "E4_1_stable_manual", "4.2": "E4_2_stable_auto",
                      "5.1": "E5_1_ssl_manual", "5.2": "E5_2_ssl_auto"}

PROVENANCES = ("t0_reference", "t1_stable", "t1_pseudo", "map_sample")


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    change_source: str = "manual_flags"       # "manual_flags" | "mask"
    normalization: bool = False
    forest: forest.ForestConfig = field(default_factory=forest.ForestConfig)
    seed: int = 0
    confidence_floor: float | None = None     # pseudo-label gate, off by default
    e3_sample_fraction: float = 1e-4          # of stable pixels
    e3_min_per_class: int = 50

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}")
        if self.change_source not in ("manual_flags", "mask"):
            raise ValidationError(f"unknown change source {self.change_source!r}")

    @property
    def uses_mask(self):
        return self.change_source == "mask"

    @property
    def forest_config(self):
        """Classifier config with the experiment seed folded in."""
        return replace(self.forest, seed=self.seed)


def make_spec(experiment, seed=0, **overrides):
    """ExperimentSpec with the conventional per-experiment defaults:
    normalization for E2.2/E4/E5, mask-based change for the *.2 variants
    and E3, manual flags for the *.1 variants."""
    experiment = EXPERIMENT_ALIASES.get(experiment, experiment)
    defaults = {
        "normalization": experiment in ("E2_2_naive_norm", "E4_1_stable_manual",
                                        "E4_2_stable_auto", "E5_1_ssl_manual",
                                        "E5_2_ssl_auto"),
        "change_source": "mask" if experiment in (
            "E3_wessels", "E4_2_stable_auto", "E5_2_ssl_auto") else "manual_flags",
    }
    defaults.update(overrides)
    return ExperimentSpec(experiment=experiment, seed=seed, **defaults)


@dataclass(frozen=True)
class TrainingBundle:
    """The exact rows a model was fitted on, with per-row provenance."""

    features: np.ndarray
    labels: np.ndarray
    provenance: tuple
    row_ids: tuple
    weights: np.ndarray = None

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(len(self.labels)))
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.provenance) == len(self.row_ids)
                == len(self.weights) == n):
            raise ValidationError("bundle row counts disagree")
        for p in self.provenance:
            if p not in PROVENANCES:
                raise ValidationError(f"unknown provenance tag {p!r}")

    def __len__(self):
        return self.features.shape[0]

    def provenance_counts(self):
        counts = {p: 0 for p in PROVENANCES}
        for p in self.provenance:
            counts[p] += 1
        return counts


def write_bundle(bundle, path):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_id", "provenance", "label", "weight"])
        for rid, prov, lab, w in zip(bundle.row_ids, bundle.provenance,
                                     bundle.labels, bundle.weights):
            writer.writerow([rid, prov, int(lab), repr(float(w))])
    os.replace(tmp, path)


@dataclass(frozen=True)
class ExperimentResult:
    model: forest.TrainedModel
    bundle: TrainingBundle
    class_map_t1: object                      # ClassMap or None
    stage1_model: forest.TrainedModel = None
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# stable/changed partitioning

def filter_stable(samples, change):
    """Partition samples into (stable, changed) by manual flags or a mask.

    ``change`` is either the string "manual_flags" or a ChangeMask.  Stable
    points come back with label_t1 := label_t0.  Points with unknown flags,
    or falling on mask nodata / outside the mask, are excluded from both
    sets.

    Returns (stable, changed, unknown_count).
    """
    stable_pts, changed_pts, unknown = [], [], 0
    if isinstance(change, ChangeMask):
        coords = samples.coords()
        cols, rows = map_to_pixel(change.transform, coords[:, 0], coords[:, 1])
        for p, c, r in zip(samples, cols, rows):
            if not (0 <= c < change.width and 0 <= r < change.height):
                unknown += 1
                continue
            code = change.flags[r, c]
            if code == CHANGE_STABLE:
                stable_pts.append(p.replace(change_flag="stable",
                                            label_t1=p.label_t0))
            elif code == CHANGE_CHANGED:
                changed_pts.append(p.replace(change_flag="changed"))
            else:
                unknown += 1
    elif change == "manual_flags":
        for p in samples:
            if p.change_flag == "stable":
                stable_pts.append(p.replace(label_t1=p.label_t0))
            elif p.change_flag == "changed":
                changed_pts.append(p)
            else:
                unknown += 1
    else:
        raise ValidationError(
            "change must be a ChangeMask or the string 'manual_flags'")
    legend = samples.class_legend
    return (SampleSet(points=stable_pts, class_legend=legend),
            SampleSet(points=changed_pts, class_legend=legend), unknown)


# ---------------------------------------------------------------------------
# stable-area map sampling (E3)

def area_weighted_allocation(class_pixel_counts, total_target, min_per_class):
    """Per-class sample quotas proportional to class pixel area.

    Largest-remainder rounding (ties go to the larger class id), then each
    class is floored at ``min_per_class`` with no renormalization, so the
    resulting total may exceed ``total_target``.
    """
    classes = sorted(class_pixel_counts)
    if total_target < len(classes):
        raise ValidationError(
            f"total_target={total_target} below one sample per class")
    areas = np.array([class_pixel_counts[c] for c in classes], dtype=float)
    if (areas < 0).any():
        raise ValidationError("negative class pixel count")
    total_area = areas.sum()
    if total_area == 0:
        return {c: int(min_per_class) for c in classes}
    exact = total_target * areas / total_area
    base = np.floor(exact).astype(int)
    frac = exact - base
    leftover = int(total_target - base.sum())
    order = sorted(range(len(classes)), key=lambda i: (-frac[i], -i))
    for i in order[:leftover]:
        base[i] += 1
    return {c: int(max(n, min_per_class)) for c, n in zip(classes, base)}


def stratified_sample_from_map(class_map, stable_mask, allocation, seed):
    """Uniform sampling without replacement within each (class, stable) stratum.

    Strata smaller than their quota are exhausted and the shortfall recorded.
    Returns (SampleSet, shortfalls) where shortfalls maps class id to the
    number of missing samples.
    """
    if not class_map.same_geometry(stable_mask):
        raise ValidationError("class map and mask geometries differ")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1),
                               spawn_key=(3,)))
    stable = stable_mask.flags == CHANGE_STABLE
    points = []
    shortfalls = {}
    for c in sorted(allocation):
        want = allocation[c]
        eligible = np.flatnonzero((class_map.classes == c).ravel()
                                  & stable.ravel())
        take = min(want, eligible.size)
        if take < want:
            shortfalls[c] = want - take
        if take == 0:
            continue
        chosen = np.sort(rng.choice(eligible, size=take, replace=False))
        rows, cols = np.divmod(chosen, class_map.width)
        xs, ys = pixel_center(class_map.transform, cols, rows)
        for j, (x, y) in enumerate(zip(xs, ys)):
            points.append(SamplePoint(id=f"map_{c}_{j}", x=float(x), y=float(y),
                                      label_t0=int(c), change_flag="stable",
                                      label_t1=int(c)))
    legend = dict(class_map.legend)
    return SampleSet(points=points, class_legend=legend), shortfalls


# ---------------------------------------------------------------------------
# pseudo-labeling

def pseudo_label(model, changed_samples, confidence_floor=None):
    """Predict t1 labels for changed samples from their t1 features.

    With a confidence floor set, samples whose top class probability falls
    below the floor are dropped.  Returns (SampleSet, dropped_count).
    """
    if len(changed_samples) == 0:
        return changed_samples, 0
    x = changed_samples.feature_matrix("t1")
    proba = model.predict_proba(x)
    labels = model.classes[np.argmax(proba, axis=1)]
    top = proba.max(axis=1)
    kept, dropped = [], 0
    for p, lab, conf in zip(changed_samples, labels, top):
        if confidence_floor is not None and conf < confidence_floor:
            dropped += 1
            continue
        kept.append(p.replace(label_t1=int(lab), change_flag="changed"))
    return SampleSet(points=kept,
                     class_legend=changed_samples.class_legend), dropped


# ---------------------------------------------------------------------------
# feature preparation

def prepare_features(samples, raster_t0=None, raster_t1=None,
                     normalization=False, require=("t0", "t1")):
    """Attach (and optionally L2-normalize) per-epoch features.

    Features already present on the samples are kept; rasters fill in the
    missing epochs.  Normalization is applied identically to both epochs and
    is idempotent, so prepared sets can safely pass through again.

    Returns (SampleSet, info dict with exclusion counts).
    """
    info = {}
    out = samples
    for ts, raster in (("t0", raster_t0), ("t1", raster_t1)):
        have = getattr(out, f"feature_dim_{ts}") is not None and all(
            getattr(p, f"features_{ts}") is not None for p in out)
        if not have:
            if raster is None:
                if ts not in require:
                    continue
                raise DataError(f"samples lack features_{ts} and no {ts} "
                                "raster was provided")
            out, excluded = extract_features(raster, out, ts)
            info[f"excluded_nodata_{ts}"] = len(excluded)
    if normalization:
        pts = []
        zero = 0
        for p in out:
            kw = {}
            for ts in ("t0", "t1"):
                v = getattr(p, f"features_{ts}")
                if v is not None:
                    norm, z = l2_normalize_features(np.asarray(v))
                    zero += z
                    kw[f"features_{ts}"] = None if np.isnan(norm).any() \
                        else tuple(norm)
            pts.append(p.replace(**kw))
        out = SampleSet(points=pts, class_legend=out.class_legend)
        info["zero_norm_features"] = zero
    return out, info


def prediction_raster(spec, raster_t1):
    """The t1 raster in the same feature space the model was trained in."""
    if spec.normalization:
        stack, _ = l2_normalize(raster_t1)
        return stack
    return raster_t1


# ---------------------------------------------------------------------------
# experiment runner

def _bundle_from(groups):
    """Assemble a TrainingBundle from (points, timestep, label_attr, tag)."""
    feats, labels, prov, ids = [], [], [], []
    for sample_set, timestep, label_attr, tag in groups:
        for p in sample_set:
            vec = getattr(p, f"features_{timestep}")
            lab = getattr(p, label_attr)
            if vec is None or lab is None:
                raise DataError(
                    f"point {p.id}: missing features_{timestep} or {label_attr}")
            feats.append(vec)
            labels.append(lab)
            prov.append(tag)
            ids.append(f"{p.id}@{timestep}")
    if not feats:
        raise DataError("no training rows")
    return TrainingBundle(features=np.asarray(feats, dtype=float),
                          labels=np.asarray(labels, dtype=int),
                          provenance=tuple(prov), row_ids=tuple(ids))


def run_experiment(spec, samples, raster_t0=None, raster_t1=None, change=None,
                   make_map=True):
    """Run one migration experiment end to end.

    ``change`` is a ChangeMask for mask-based specs, ignored for manual ones
    (manual flags ride on the samples).  Returns an ExperimentResult with the
    fitted model, the exact training bundle, and (when ``make_map``) the t1
    class map.
    """
    exp = spec.experiment
    if spec.uses_mask and not isinstance(change, ChangeMask):
        raise DataError(f"{exp} with change_source=mask requires a ChangeMask")
    change_arg = change if spec.uses_mask else "manual_flags"

    info = {}
    if exp == "E3_wessels":
        result = _run_e3(spec, samples, raster_t0, raster_t1, change, info)
    else:
        prepared, prep_info = prepare_features(
            samples, raster_t0, raster_t1,
            normalization=spec.normalization)
        info.update(prep_info)
        result = _run_reference_experiment(spec, prepared, change_arg, info)

    class_map = None
    if make_map and raster_t1 is not None:
        class_map = result.model.predict_raster(
            prediction_raster(spec, raster_t1))
    return replace(result, class_map_t1=class_map)


def _fit_bundle(spec, bundle):
    return forest.fit(bundle.features, bundle.labels, spec.forest_config)


def _run_reference_experiment(spec, prepared, change_arg, info):
    exp = spec.experiment
    if exp == "E1_gold":
        labeled = [p for p in prepared if p.label_t1 is not None]
        info["dropped_unlabeled_t1"] = len(prepared) - len(labeled)
        subset = SampleSet(points=labeled, class_legend=prepared.class_legend)
        bundle = _bundle_from([(subset, "t1", "label_t1", "t0_reference")])
        return ExperimentResult(_fit_bundle(spec, bundle), bundle, None,
                                info=info)

    if exp in ("E2_1_naive", "E2_2_naive_norm"):
        bundle = _bundle_from([(prepared, "t0", "label_t0", "t0_reference")])
        return ExperimentResult(_fit_bundle(spec, bundle), bundle, None,
                                info=info)

    stable, changed, unknown = filter_stable(prepared, change_arg)
    info["stable"] = len(stable)
    info["changed"] = len(changed)
    info["unknown_change"] = unknown

    stage1_bundle = _bundle_from([(prepared, "t0", "label_t0", "t0_reference"),
                                  (stable, "t1", "label_t0", "t1_stable")])
    stage1 = _fit_bundle(spec, stage1_bundle)
    if exp in ("E4_1_stable_manual", "E4_2_stable_auto"):
        return ExperimentResult(stage1, stage1_bundle, None, info=info)

    # E5: pseudo-label the changed subset with the stage-1 (= E4) model
    pseudo, dropped = pseudo_label(stage1, changed, spec.confidence_floor)
    info["pseudo_dropped"] = dropped
    bundle = _bundle_from([(prepared, "t0", "label_t0", "t0_reference"),
                           (stable, "t1", "label_t0", "t1_stable"),
                           (pseudo, "t1", "label_t1", "t1_pseudo")])
    return ExperimentResult(_fit_bundle(spec, bundle), bundle, None,
                            stage1_model=stage1, info=info)


def _run_e3(spec, samples, raster_t0, raster_t1, change, info):
    """Stable-area sampling: classify t0, sample map labels in stable areas,
    train on t1 spectra at the sampled pixels.  Reference labels feed only
    the internal t0 model that produces the map, never the final fit."""
    if raster_t0 is None or raster_t1 is None:
        raise DataError("E3 requires both rasters")
    prepared, prep_info = prepare_features(samples, raster_t0, raster_t1,
                                           normalization=spec.normalization)
    info.update(prep_info)
    t0_bundle = _bundle_from([(prepared, "t0", "label_t0", "t0_reference")])
    t0_model = _fit_bundle(spec, t0_bundle)
    t0_map = t0_model.predict_raster(prediction_raster(spec, raster_t0))

    stable = change.flags == CHANGE_STABLE
    n_stable = int(np.count_nonzero(stable))
    counts = {}
    for c in sorted(np.unique(t0_map.classes[stable & (t0_map.classes != 255)])):
        counts[int(c)] = int(np.count_nonzero(stable & (t0_map.classes == c)))
    for c in samples.class_legend:
        counts.setdefault(int(c), 0)
    total_target = max(int(round(spec.e3_sample_fraction * n_stable)),
                       len(counts))
    allocation = area_weighted_allocation(counts, total_target,
                                          spec.e3_min_per_class)
    map_samples, shortfalls = stratified_sample_from_map(
        t0_map, change, allocation, spec.seed)
    info["allocation"] = allocation
    info["shortfalls"] = shortfalls
    map_samples, excluded = extract_features(raster_t1, map_samples, "t1")
    info["map_samples_on_nodata"] = len(excluded)
    if spec.normalization:
        map_samples, _ = prepare_features(map_samples, normalization=True,
                                          require=("t1",))
    bundle = _bundle_from([(map_samples, "t1", "label_t0", "map_sample")])
    model = _fit_bundle(spec, bundle)
    info["training_coords"] = map_samples.coords()
    return ExperimentResult(model, bundle, None, info=info)
