"""Deterministic synthetic bi-temporal landscape generator.

Produces a pair of co-registered multiband rasters with a known class map at
both epochs, a ground-truth change mask, and geolocated reference points --
the substrate for every property and benchmark test in this package.  Class
maps come from thresholded smoothed noise fields so both the classes and the
change regions are spatially clumped, which keeps spatial cross-validation
folds meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .raster import (CHANGE_CHANGED, CHANGE_STABLE, BandSpec, ChangeMask,
                     ClassMap, RasterStack, SamplePoint, SampleSet,
                     pixel_center)


@dataclass(frozen=True)
class SynthConfig:
    width: int = 128
    height: int = 128
    n_classes: int = 5
    n_bands: int = 6
    class_means: np.ndarray = None      # (n_classes, n_bands) or auto
    mean_range: tuple = (0.15, 0.95)    # sampling window for auto means
    noise_sigma: float = 0.05
    change_fraction: float = 0.1
    drift_gain: object = 1.0            # scalar or per-band sequence
    drift_offset: object = 0.0
    correlation_length: float = 8.0     # pixels
    n_reference_points: int = 500
    pixel_size: float = 30.0            # meters
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.change_fraction < 1:
            raise ValidationError("change_fraction must be in [0, 1)")
        if not self.noise_sigma > 0:
            raise ValidationError("noise_sigma must be > 0")
        if self.n_classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.n_reference_points > self.width * self.height:
            raise ValidationError("more reference points than pixels")
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=float)
            if m.shape != (self.n_classes, self.n_bands):
                raise ValidationError(
                    f"class_means shape {m.shape} != "
                    f"{(self.n_classes, self.n_bands)}")
            object.__setattr__(self, "class_means", m)

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "width", "height", "n_classes", "n_bands", "mean_range",
            "noise_sigma",
            "change_fraction", "drift_gain", "drift_offset",
            "correlation_length", "n_reference_points", "pixel_size", "seed")}
        if self.class_means is not None:
            d["class_means"] = self.class_means.tolist()
        return d


# presets used by the CLI `reproduce` command
PRESETS = {
    "small": SynthConfig(width=128, height=128, n_bands=6, n_classes=5,
                         n_reference_points=600, change_fraction=0.1,
                         drift_gain=1.1, noise_sigma=0.05,
                         correlation_length=8.0),
    "bench": SynthConfig(width=256, height=256, n_bands=6, n_classes=5,
                         n_reference_points=1500, change_fraction=0.15,
                         drift_gain=1.1, noise_sigma=0.05,
                         correlation_length=12.0),
}


@dataclass(frozen=True)
class SynthScene:
    raster_t0: RasterStack
    raster_t1: RasterStack
    classmap_t0: ClassMap
    classmap_t1: ClassMap
    truth_change_mask: ChangeMask
    samples: SampleSet
    class_means: np.ndarray
    config: SynthConfig = field(repr=False, default=None)


def _auto_means(rng, n_classes, n_bands, noise_sigma, mean_range):
    """Random class mean spectra with pairwise separation >= 3 sigma, both
    raw and after L2 normalization (so normalized pipelines stay learnable)."""
    lo, hi = mean_range
    for scale in (1.0, 1.5, 2.0, 3.0):
        for _ in range(200):
            means = rng.uniform(lo, hi, size=(n_classes, n_bands)) * scale
            raw_d = np.linalg.norm(means[:, None] - means[None, :], axis=2)
            norms = np.linalg.norm(means, axis=1, keepdims=True)
            unit = means / norms
            unit_d = np.linalg.norm(unit[:, None] - unit[None, :], axis=2)
            off = ~np.eye(n_classes, dtype=bool)
            # after L2 normalization the noise shrinks by the vector norm,
            # so the angular separation requirement scales accordingly
            unit_sigma = noise_sigma / float(norms.mean())
            if (raw_d[off].min() >= 3 * noise_sigma
                    and unit_d[off].min() >= 3 * unit_sigma):
                return means
    raise ValidationError(
        "could not generate separable class means; lower noise_sigma")


def generate(config):
    """Build a full synthetic scene; bit-identical per seed."""
    rng = np.random.default_rng(int(config.seed) & (2 ** 64 - 1))
    h, w = config.height, config.width
    sigma = config.correlation_length

    means = config.class_means
    if means is None:
        means = _auto_means(rng, config.n_classes, config.n_bands,
                            config.noise_sigma, config.mean_range)

    # smoothed per-class score fields; argmax carves clumped class regions
    fields = np.stack([gaussian_filter(rng.standard_normal((h, w)), sigma)
                       for _ in range(config.n_classes)])
    classmap_t0 = np.argmax(fields, axis=0)

    # clumped change region from one more smoothed field
    change_field = gaussian_filter(rng.standard_normal((h, w)), sigma)
    if config.change_fraction > 0:
        thr = np.quantile(change_field, 1.0 - config.change_fraction)
        changed = change_field > thr
    else:
        changed = np.zeros((h, w), dtype=bool)

    # changed pixels fall to their runner-up class, which always differs
    suppressed = fields.copy()
    suppressed[classmap_t0, np.arange(h)[:, None], np.arange(w)[None, :]] = -np.inf
    runner_up = np.argmax(suppressed, axis=0)
    classmap_t1 = np.where(changed, runner_up, classmap_t0)

    noise_t0 = rng.normal(0.0, config.noise_sigma,
                          size=(config.n_bands, h, w))
    noise_t1 = rng.normal(0.0, config.noise_sigma,
                          size=(config.n_bands, h, w))
    signal_t0 = means[classmap_t0].transpose(2, 0, 1)
    signal_t1 = means[classmap_t1].transpose(2, 0, 1)
    gain = np.broadcast_to(np.asarray(config.drift_gain, dtype=float),
                           (config.n_bands,)).reshape(-1, 1, 1)
    offset = np.broadcast_to(np.asarray(config.drift_offset, dtype=float),
                             (config.n_bands,)).reshape(-1, 1, 1)
    data_t0 = signal_t0 + noise_t0
    data_t1 = gain * (signal_t1 + noise_t1) + offset

    ps = config.pixel_size
    transform = (0.0, 0.0, ps, -ps)
    bands = [BandSpec(name=f"b{i}", center_nm=450.0 + 100.0 * i, fwhm_nm=30.0)
             for i in range(config.n_bands)]
    raster_t0 = RasterStack(data_t0, bands=bands, transform=transform)
    raster_t1 = RasterStack(data_t1, bands=bands, transform=transform)

    legend = {c: f"class_{c}" for c in range(config.n_classes)}
    cmap_t0 = ClassMap(classmap_t0.astype(np.uint8), transform, legend)
    cmap_t1 = ClassMap(classmap_t1.astype(np.uint8), transform, legend)
    truth = ChangeMask(
        np.where(classmap_t0 != classmap_t1, CHANGE_CHANGED,
                 CHANGE_STABLE).astype(np.uint8),
        transform, "manual")

    flat = rng.choice(h * w, size=config.n_reference_points, replace=False)
    rows, cols = np.divmod(np.sort(flat), w)
    xs, ys = pixel_center(transform, cols, rows)
    points = []
    for i, (r, c, x, y) in enumerate(zip(rows, cols, xs, ys)):
        lab0 = int(classmap_t0[r, c])
        lab1 = int(classmap_t1[r, c])
        points.append(SamplePoint(
            id=f"p{i:05d}", x=float(x), y=float(y), label_t0=lab0,
            label_t1=lab1,
            change_flag="changed" if lab0 != lab1 else "stable"))
    samples = SampleSet(points=points, class_legend=legend)

    return SynthScene(raster_t0=raster_t0, raster_t1=raster_t1,
                      classmap_t0=cmap_t0, classmap_t1=cmap_t1,
                      truth_change_mask=truth, samples=samples,
                      class_means=means, config=config)
