"""Spatiotemporal cross-validation, metrics, and sample-fraction sweeps.

Leave-location-and-time-out (LLTO) protocol: folds are k-means clusters of
the sample coordinates; each iteration trains on the remaining folds at both
epochs and tests on the held-out fold at t1 only -- the held-out fold's t0
samples appear nowhere.  The map-sampling strategy (E3) is instead scored
once on the full t1 reference set after a 100 m proximity filter against its
map-derived training pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import migration
from .errors import DataError, ValidationError
from .raster import SampleSet

DEFAULT_PROXIMITY_RADIUS_M = 100.0

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300


# ---------------------------------------------------------------------------
# k-means fold construction

def _kmeans_pp_init(coords, k, rng):
    n = coords.shape[0]
    centers = np.empty((k, coords.shape[1]))
    centers[0] = coords[rng.integers(n)]
    d2 = ((coords - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            centers[j] = coords[rng.integers(n)]
        else:
            centers[j] = coords[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((coords - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(coords, centers, max_iter):
    prev_inertia = np.inf
    for _ in range(max_iter):
        d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)          # ties -> lowest centroid index
        inertia = float(d2[np.arange(coords.shape[0]), assign].sum())
        assert inertia <= prev_inertia + 1e-9, "Lloyd inertia increased"
        new_centers = centers.copy()
        for j in range(centers.shape[0]):
            members = coords[assign == j]
            if members.size:
                new_centers[j] = members.mean(axis=0)
            else:
                # deterministic repair: move the empty center to the point
                # farthest from its current center
                far = int(np.argmax(d2[np.arange(coords.shape[0]), assign]))
                new_centers[j] = coords[far]
        if np.allclose(new_centers, centers) and inertia == prev_inertia:
            break
        centers = new_centers
        prev_inertia = inertia
    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(coords.shape[0]), assign].sum())
    return centers, assign, inertia


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_ids: np.ndarray
    centroids: np.ndarray
    seed: int
    inertia: float

    def assign(self, coords):
        """Fold of arbitrary coordinates: nearest centroid, ties -> lowest."""
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        d2 = ((coords[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def kmeans_folds(coords, k, seed):
    """Spatial folds from Lloyd's algorithm with k-means++ initialization,
    10 restarts, best inertia kept; deterministic per seed."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if np.unique(coords, axis=0).shape[0] < k:
        raise DataError(f"need at least {k} distinct coordinates")
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1),
                               spawn_key=(11,)))
    best = None
    for _ in range(KMEANS_RESTARTS):
        centers = _kmeans_pp_init(coords, k, rng)
        centers, assign, inertia = _lloyd(coords, centers, KMEANS_MAX_ITER)
        if best is None or inertia < best[2]:
            best = (centers, assign, inertia)
    centers, assign, inertia = best
    return FoldAssignment(k=k, fold_ids=assign, centroids=centers, seed=seed,
                          inertia=inertia)


# ---------------------------------------------------------------------------
# LLTO splitting

def llto_split(samples_t0, samples_t1, folds, test_fold):
    """((train_t0, train_t1), test_t1) under leave-location-and-time-out.

    Training keeps every fold but ``test_fold`` at both epochs; the test set
    is the held-out fold at t1 only, and that fold's t0 samples are dropped
    entirely.
    """
    ids_t0 = folds.assign(samples_t0.coords()) if len(samples_t0) else np.array([], int)
    ids_t1 = folds.assign(samples_t1.coords()) if len(samples_t1) else np.array([], int)
    train_t0 = samples_t0.subset(np.flatnonzero(ids_t0 != test_fold))
    train_t1 = samples_t1.subset(np.flatnonzero(ids_t1 != test_fold))
    test_t1 = samples_t1.subset(np.flatnonzero(ids_t1 == test_fold))
    if len(test_t1) == 0:
        raise DataError(f"test fold {test_fold} is empty")
    return (train_t0, train_t1), test_t1


def proximity_filter(validation, training_coords, radius_m=DEFAULT_PROXIMITY_RADIUS_M):
    """Drop validation points strictly within ``radius_m`` of any training
    coordinate (points exactly at the radius are kept)."""
    training_coords = np.asarray(training_coords, dtype=float).reshape(-1, 2)
    if len(validation) == 0 or training_coords.shape[0] == 0:
        return validation
    tree = cKDTree(training_coords)
    dists, _ = tree.query(validation.coords())
    keep = np.flatnonzero(dists >= radius_m)
    return validation.subset(keep)


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray        # rows = truth, cols = predicted
    classes: tuple
    overall_accuracy: float
    macro_f1: float
    per_class_f1: dict
    support: dict

    def to_dict(self):
        return {"classes": list(self.classes),
                "confusion": self.confusion.tolist(),
                "overall_accuracy": self.overall_accuracy,
                "macro_f1": self.macro_f1,
                "per_class_f1": {str(k): v for k, v in self.per_class_f1.items()},
                "support": {str(k): v for k, v in self.support.items()}}


def metrics(truth, predicted, legend):
    """Confusion matrix, overall accuracy, and macro F1 over the legend.

    Per-class F1 is 0 when precision + recall is 0; the macro average covers
    only classes with nonzero support in the truth vector.
    """
    truth = np.asarray(truth, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    if truth.shape != predicted.shape or truth.size == 0:
        raise ValidationError("truth and predicted must be equal-length, nonempty")
    classes = tuple(sorted(int(c) for c in legend))
    index = {c: i for i, c in enumerate(classes)}
    for arr, name in ((truth, "truth"), (predicted, "predicted")):
        bad = [int(v) for v in np.unique(arr) if int(v) not in index]
        if bad:
            raise ValidationError(f"{name} labels outside legend: {bad}")
    n = len(classes)
    confusion = np.zeros((n, n), dtype=int)
    for t, p in zip(truth, predicted):
        confusion[index[t], index[p]] += 1
    accuracy = float(np.trace(confusion)) / truth.size
    per_class_f1, support = {}, {}
    f1_values = []
    for c in classes:
        i = index[c]
        tp = confusion[i, i]
        fn = confusion[i].sum() - tp
        fp = confusion[:, i].sum() - tp
        support[c] = int(confusion[i].sum())
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        per_class_f1[c] = float(f1)
        if support[c] > 0:
            f1_values.append(f1)
    macro_f1 = float(np.mean(f1_values)) if f1_values else 0.0
    return Metrics(confusion=confusion, classes=classes,
                   overall_accuracy=accuracy, macro_f1=macro_f1,
                   per_class_f1=per_class_f1, support=support)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class FoldRecord:
    fold: int
    metrics: Metrics
    n_train: int
    n_test: int

    def to_dict(self):
        d = {"fold": self.fold, "n_train": self.n_train, "n_test": self.n_test}
        d.update(self.metrics.to_dict())
        return d


@dataclass(frozen=True)
class EvalReport:
    experiment: str
    seed: int
    k: int
    folds: tuple
    mean: dict
    std: dict            # empty for single-pass protocols (E3)
    info: dict = field(default_factory=dict)

    def to_dict(self):
        return {"experiment": self.experiment, "seed": self.seed, "k": self.k,
                "folds": [f.to_dict() for f in self.folds],
                "mean": self.mean, "std": self.std, "info": self.info}

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def _aggregate(experiment, seed, k, records, info=None, with_std=True):
    macro = [r.metrics.macro_f1 for r in records]
    acc = [r.metrics.overall_accuracy for r in records]
    mean = {"macro_f1": float(np.mean(macro)),
            "overall_accuracy": float(np.mean(acc))}
    std = {}
    if with_std:
        std = {"macro_f1": float(np.std(macro)),
               "overall_accuracy": float(np.std(acc))}
    return EvalReport(experiment=experiment, seed=seed, k=k,
                      folds=tuple(records), mean=mean, std=std,
                      info=info or {})


# ---------------------------------------------------------------------------
# cross-validation driver

def cross_validate(spec, samples, raster_t0=None, raster_t1=None, change=None,
                   k=5, seed=None, proximity_radius_m=DEFAULT_PROXIMITY_RADIUS_M):
    """LLTO cross-validation of one experiment (single-pass protocol for E3).

    ``samples`` carries both epochs: every point has a t0 label and, where
    known, a t1 label used as evaluation truth.
    """
    seed = spec.seed if seed is None else seed
    prepared, prep_info = migration.prepare_features(
        samples, raster_t0, raster_t1, normalization=False)

    if spec.experiment == "E3_wessels":
        return _evaluate_e3(spec, prepared, raster_t0, raster_t1, change,
                            proximity_radius_m, prep_info)

    folds = kmeans_folds(prepared.coords(), k, seed)
    records = []
    for fold in range(k):
        (train, _), test = llto_split(prepared, prepared, folds, fold)
        test_labeled = test.subset(
            [i for i, p in enumerate(test) if p.label_t1 is not None])
        if len(test_labeled) == 0:
            raise DataError(f"fold {fold}: no labeled t1 test samples")
        result = migration.run_experiment(spec, train, raster_t0, raster_t1,
                                          change, make_map=False)
        x_test = _prepared_matrix(spec, test_labeled)
        predicted = result.model.predict(x_test)
        m = metrics(test_labeled.labels("t1"), predicted,
                    prepared.class_legend or _legend_from(prepared))
        records.append(FoldRecord(fold=fold, metrics=m,
                                  n_train=len(result.bundle),
                                  n_test=len(test_labeled)))
    info = dict(prep_info)
    info["fold_sizes"] = [int(np.count_nonzero(folds.fold_ids == f))
                          for f in range(k)]
    return _aggregate(spec.experiment, seed, k, records, info)


def _prepared_matrix(spec, sample_set):
    x = sample_set.feature_matrix("t1")
    if spec.normalization:
        x, _ = migration.l2_normalize_features(x)
    return x


def _legend_from(samples):
    labs = set()
    for p in samples:
        labs.add(p.label_t0)
        if p.label_t1 is not None:
            labs.add(p.label_t1)
    return {c: str(c) for c in sorted(labs)}


def _evaluate_e3(spec, prepared, raster_t0, raster_t1, change, radius_m,
                 prep_info):
    """Paper protocol for the map-sampling strategy: train once from map
    samples, evaluate once on the full t1 reference set after removing
    points near training pixels.  One fold, no std."""
    result = migration.run_experiment(spec, prepared, raster_t0, raster_t1,
                                      change, make_map=False)
    validation = prepared.subset(
        [i for i, p in enumerate(prepared) if p.label_t1 is not None])
    filtered = proximity_filter(validation, result.info["training_coords"],
                                radius_m)
    if len(filtered) == 0:
        raise DataError("proximity filter removed every validation point")
    x = _prepared_matrix(spec, filtered)
    predicted = result.model.predict(x)
    m = metrics(filtered.labels("t1"), predicted,
                prepared.class_legend or _legend_from(prepared))
    record = FoldRecord(fold=0, metrics=m, n_train=len(result.bundle),
                        n_test=len(filtered))
    info = dict(prep_info)
    info["proximity_removed"] = len(validation) - len(filtered)
    return _aggregate(spec.experiment, spec.seed, 1, [record], info,
                      with_std=False)


# ---------------------------------------------------------------------------
# training-fraction sweep

@dataclass(frozen=True)
class SweepRecord:
    fraction: float
    n_samples: int
    report: EvalReport
    gold_report: EvalReport
    delta_macro_f1: float        # report minus gold on the same subsample

    def to_dict(self):
        return {"fraction": self.fraction, "n_samples": self.n_samples,
                "report": self.report.to_dict(),
                "gold_report": self.gold_report.to_dict(),
                "delta_macro_f1": self.delta_macro_f1}


def stratified_subsample(samples, fraction, seed):
    """Deterministic per-class subsample of round(fraction * n_c) points.

    Classes that would end up empty are dropped with a warning entry in the
    returned info dict.
    """
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1.0:
        return samples, {}
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1),
                               spawn_key=(17, int(round(fraction * 1e9)))))
    by_class = {}
    for i, p in enumerate(samples):
        by_class.setdefault(p.label_t0, []).append(i)
    chosen, dropped = [], []
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        n_keep = int(round(fraction * idx.size))
        if n_keep == 0:
            dropped.append(c)
            continue
        chosen.extend(np.sort(rng.choice(idx, size=n_keep, replace=False)))
    info = {"dropped_classes": dropped} if dropped else {}
    return samples.subset(sorted(chosen)), info


def fraction_sweep(spec, samples, raster_t0=None, raster_t1=None, change=None,
                   fractions=(0.05, 0.1, 0.25, 0.5, 1.0), k=5, seed=None):
    """Evaluate the experiment over nested training fractions, reporting the
    per-fraction difference versus a gold-standard run on the same subsample."""
    seed = spec.seed if seed is None else seed
    gold_spec = migration.make_spec("E1_gold", seed=seed, forest=spec.forest)
    records = []
    for fraction in fractions:
        subsample, _ = stratified_subsample(samples, fraction, seed)
        report = cross_validate(spec, subsample, raster_t0, raster_t1, change,
                                k=k, seed=seed)
        gold = cross_validate(gold_spec, subsample, raster_t0, raster_t1,
                              change, k=k, seed=seed)
        records.append(SweepRecord(
            fraction=float(fraction), n_samples=len(subsample), report=report,
            gold_report=gold,
            delta_macro_f1=report.mean["macro_f1"] - gold.mean["macro_f1"]))
    return records
