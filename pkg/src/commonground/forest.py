"""Built-in deterministic Random Forest classifier.

Bagged CART trees with Gini impurity splits and per-node random feature
subsets.  One root seed spawns an independent RNG stream per tree index, so
training is bit-reproducible regardless of execution order.  Probabilities
are vote fractions over trees (each tree votes its leaf majority class).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ValidationError
from .raster import NODATA_U8, ClassMap

_MODEL_MAGIC = b"CGRF0001"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_features: object = "sqrt"   # "sqrt" or an integer
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValidationError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1 or None")
        if self.max_features != "sqrt" and int(self.max_features) < 1:
            raise ValidationError("max_features must be 'sqrt' or a positive int")

    def resolve_max_features(self, n_features):
        if self.max_features == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        m = int(self.max_features)
        if m > n_features:
            raise ValidationError(
                f"max_features={m} exceeds feature dimension {n_features}")
        return m


class _Tree:
    """Flat-array decision tree: feature < 0 marks a leaf, value is the
    majority class index; internal nodes route x[feature] <= threshold left."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.int32)

    def predict(self, x):
        node = np.zeros(x.shape[0], dtype=np.int32)
        while True:
            active = np.flatnonzero(self.feature[node] >= 0)
            if active.size == 0:
                return self.value[node]
            cur = node[active]
            go_left = x[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])


def _best_split(x, y, idx, features, n_classes, min_leaf):
    """Best (feature, threshold, gini) over the candidate features at a node.

    Deterministic: stable sorts, first-best wins on exact ties, features
    scanned in the order drawn.
    """
    n = idx.size
    best = None
    for f in features:
        vals = x[idx, f]
        order = np.argsort(vals, kind="stable")
        v = vals[order]
        if v[0] == v[-1]:
            continue
        labs = y[idx][order]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), labs] = 1.0
        left_counts = np.cumsum(onehot, axis=0)
        total = left_counts[-1]
        n_left = np.arange(1, n + 1, dtype=float)
        n_right = n - n_left
        # candidate split after position i requires a value change at i -> i+1
        cut = (v[:-1] != v[1:])
        cut &= (n_left[:-1] >= min_leaf) & (n_right[:-1] >= min_leaf)
        if not cut.any():
            continue
        lc = left_counts[:-1]
        rc = total - lc
        with np.errstate(invalid="ignore", divide="ignore"):
            gini_l = 1.0 - (lc * lc).sum(axis=1) / (n_left[:-1] ** 2)
            gini_r = 1.0 - (rc * rc).sum(axis=1) / (n_right[:-1] ** 2)
        score = (n_left[:-1] * gini_l + n_right[:-1] * gini_r) / n
        score[~cut] = np.inf
        i = int(np.argmin(score))
        if best is None or score[i] < best[2]:
            thr = 0.5 * (v[i] + v[i + 1])
            if thr <= v[i]:        # midpoint underflow on near-equal floats
                thr = v[i]
            best = (int(f), float(thr), float(score[i]))
    return best


def _grow_tree(x, y, n_classes, config, rng):
    n, d = x.shape
    mtry = config.resolve_max_features(d)
    sample = rng.integers(0, n, size=n)            # bootstrap

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-1)
        return len(feature) - 1

    def majority(idx):
        counts = np.bincount(y[idx], minlength=n_classes)
        return int(np.argmax(counts))              # ties -> smallest class

    root = new_node()
    stack = [(root, sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        labs = y[idx]
        if (labs == labs[0]).all() or idx.size < 2 * config.min_samples_leaf \
                or (config.max_depth is not None and depth >= config.max_depth):
            value[node] = majority(idx)
            continue
        feats = rng.choice(d, size=mtry, replace=False)
        split = _best_split(x, y, idx, feats, n_classes, config.min_samples_leaf)
        if split is None:
            value[node] = majority(idx)
            continue
        f, thr, _ = split
        mask = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        nl = new_node()
        nr = new_node()
        left[node], right[node] = nl, nr
        stack.append((nr, idx[~mask], depth + 1))
        stack.append((nl, idx[mask], depth + 1))
    return _Tree(feature, threshold, left, right, value)


class TrainedModel:
    """Fitted forest: immutable after construction."""

    __slots__ = ("trees", "classes", "n_features", "config", "n_samples")

    def __init__(self, trees, classes, n_features, config, n_samples):
        self.trees = tuple(trees)
        self.classes = np.asarray(classes, dtype=np.int64)
        self.n_features = int(n_features)
        self.config = config
        self.n_samples = int(n_samples)

    # -- inference ---------------------------------------------------------

    def _check_features(self, features):
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValidationError(
                f"feature dimension {x.shape[-1] if x.ndim else '?'} != "
                f"model dimension {self.n_features}")
        return x

    def predict_proba(self, features):
        x = self._check_features(features)
        votes = np.zeros((x.shape[0], self.classes.size))
        for tree in self.trees:
            pred = tree.predict(x)
            votes[np.arange(x.shape[0]), pred] += 1.0
        return votes / len(self.trees)

    def predict(self, features):
        proba = self.predict_proba(features)
        return self.classes[np.argmax(proba, axis=1)]

    def predict_raster(self, stack):
        if stack.n_bands != self.n_features:
            raise ValidationError(
                f"raster has {stack.n_bands} bands, model expects "
                f"{self.n_features}")
        valid = ~stack.nodata_mask
        out = np.full((stack.height, stack.width), NODATA_U8, dtype=np.uint8)
        if valid.any():
            x = stack.data[:, valid].T.astype(float)
            out[valid] = self.predict(x).astype(np.uint8)
        legend = {int(c): str(int(c)) for c in self.classes}
        return ClassMap(out, stack.transform, legend)

    # -- serialization -----------------------------------------------------

    def save(self, path):
        header = {
            "classes": [int(c) for c in self.classes],
            "n_features": self.n_features,
            "n_samples": self.n_samples,
            "config": {"n_trees": self.config.n_trees,
                       "max_features": self.config.max_features,
                       "min_samples_leaf": self.config.min_samples_leaf,
                       "max_depth": self.config.max_depth,
                       "seed": self.config.seed},
            "tree_sizes": [t.feature.size for t in self.trees],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [_MODEL_MAGIC, len(blob).to_bytes(8, "little"), blob]
        for t in self.trees:
            parts += [t.feature.astype("<i4").tobytes(),
                      t.threshold.astype("<f8").tobytes(),
                      t.left.astype("<i4").tobytes(),
                      t.right.astype("<i4").tobytes(),
                      t.value.astype("<i4").tobytes()]
        tmp = os.fspath(path) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, os.fspath(path))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:8] != _MODEL_MAGIC:
            raise FormatError(f"{path}: not a model file")
        hlen = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + hlen])
        off = 16 + hlen
        trees = []
        for size in header["tree_sizes"]:
            arrays = []
            for dtype, width in (("<i4", 4), ("<f8", 8), ("<i4", 4),
                                 ("<i4", 4), ("<i4", 4)):
                arrays.append(np.frombuffer(raw[off:off + size * width], dtype=dtype))
                off += size * width
            trees.append(_Tree(*arrays))
        cfg = header["config"]
        config = ForestConfig(n_trees=cfg["n_trees"], max_features=cfg["max_features"],
                              min_samples_leaf=cfg["min_samples_leaf"],
                              max_depth=cfg["max_depth"], seed=cfg["seed"])
        return cls(trees, header["classes"], header["n_features"], config,
                   header["n_samples"])


def _tree_rng(seed, tree_index):
    entropy = int(seed) & (2 ** 64 - 1)
    return np.random.default_rng(
        np.random.SeedSequence(entropy=entropy, spawn_key=(tree_index,)))


def fit(features, labels, config=None):
    """Train a forest; deterministic for fixed (data, config, seed)."""
    config = config or ForestConfig()
    x = np.asarray(features, dtype=float)
    y_raw = np.asarray(labels)
    if x.ndim != 2:
        raise ValidationError("features must be a (n, d) matrix")
    if x.shape[0] != y_raw.shape[0]:
        raise ValidationError("features and labels lengths differ")
    if x.shape[0] < 2:
        raise DataError("need at least 2 training samples")
    nan_rows = np.flatnonzero(np.isnan(x).any(axis=1))
    if nan_rows.size:
        raise DataError(f"NaN features in rows {nan_rows.tolist()}")
    classes = np.unique(y_raw)
    if classes.size < 2:
        raise DataError("training data contains a single class")
    config.resolve_max_features(x.shape[1])
    y = np.searchsorted(classes, y_raw).astype(np.int32)
    trees = [_grow_tree(x, y, classes.size, config, _tree_rng(config.seed, i))
             for i in range(config.n_trees)]
    return TrainedModel(trees, classes, x.shape[1], config, x.shape[0])
