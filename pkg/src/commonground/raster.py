"""Core data model and file I/O: rasters, change masks, class maps, samples.

Rasters live in a minimal "BSQ1" format: a JSON sidecar (``<name>.json``)
next to a raw binary payload (``<name>.bsq``) holding little-endian planes,
band-sequential, row-major, no padding.  Float rasters use float32 with NaN
as the nodata sentinel; masks and class maps use uint8 with 255 as nodata.

All objects are immutable after construction and safe to share.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

NODATA_U8 = 255
CHANGE_STABLE = 0
CHANGE_CHANGED = 1

CHANGE_FLAGS = ("stable", "changed", "unknown")
MASK_PROVENANCES = ("irmad_percentile", "irmad_pr", "external", "manual")


# ---------------------------------------------------------------------------
# geotransform helpers

def pixel_center(transform, col, row):
    """Map coordinates of the center of pixel (col, row)."""
    ox, oy, px, py = transform
    return ox + (np.asarray(col) + 0.5) * px, oy + (np.asarray(row) + 0.5) * py


def map_to_pixel(transform, x, y):
    """Integer pixel indices (col, row) containing map point (x, y).

    Nearest-pixel assignment via floor of the fractional index; no
    interpolation anywhere in this package.
    """
    ox, oy, px, py = transform
    col = np.floor((np.asarray(x, dtype=float) - ox) / px).astype(np.int64)
    row = np.floor((np.asarray(y, dtype=float) - oy) / py).astype(np.int64)
    return col, row


def _check_transform(transform):
    if len(transform) != 4:
        raise ValidationError(f"transform must have 4 entries, got {len(transform)}")
    ox, oy, px, py = (float(v) for v in transform)
    if not px > 0:
        raise ValidationError(f"pixel_size_x must be > 0, got {px}")
    if py == 0:
        raise ValidationError("pixel_size_y must be nonzero")
    return (ox, oy, px, py)


# ---------------------------------------------------------------------------
# band metadata

@dataclass(frozen=True)
class BandSpec:
    """Spectral band metadata: center wavelength and FWHM in nanometers."""

    name: str = ""
    center_nm: float | None = None
    fwhm_nm: float | None = None

    def __post_init__(self):
        if self.fwhm_nm is not None:
            if self.center_nm is None:
                raise ValidationError(
                    f"band {self.name!r}: fwhm_nm given without center_nm")
            if not self.fwhm_nm > 0:
                raise ValidationError(
                    f"band {self.name!r}: fwhm_nm must be > 0, got {self.fwhm_nm}")
        if self.center_nm is not None and not self.center_nm > 0:
            raise ValidationError(
                f"band {self.name!r}: center_nm must be > 0, got {self.center_nm}")


# ---------------------------------------------------------------------------
# raster stack

class RasterStack:
    """Multiband float32 image with nodata mask and affine geotransform.

    ``data`` is stored as a (n_bands, height, width) float32 array.  NaN is
    the canonical nodata representation: a pixel masked at construction is
    NaN-ed in every band, and the mask is always exactly "NaN in any band".
    """

    __slots__ = ("width", "height", "bands", "data", "transform", "nodata_mask")

    def __init__(self, data, bands=None, transform=(0.0, 0.0, 1.0, -1.0),
                 nodata_mask=None):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None, :, :]
        if data.ndim != 3:
            raise ValidationError(f"data must be 2-D or 3-D, got ndim={data.ndim}")
        n_bands, height, width = data.shape
        if n_bands < 1 or height < 1 or width < 1:
            raise ValidationError(f"empty raster shape {data.shape} forbidden")
        if bands is None:
            bands = [BandSpec(name=f"b{i}") for i in range(n_bands)]
        bands = tuple(bands)
        if len(bands) != n_bands:
            raise ValidationError(
                f"{len(bands)} band specs for {n_bands} data planes")
        data = data.copy()
        if nodata_mask is not None:
            nodata_mask = np.asarray(nodata_mask, dtype=bool)
            if nodata_mask.shape != (height, width):
                raise ValidationError(
                    f"nodata_mask shape {nodata_mask.shape} != {(height, width)}")
            data[:, nodata_mask] = np.nan
        data.flags.writeable = False
        self.data = data
        self.width = width
        self.height = height
        self.bands = bands
        self.transform = _check_transform(transform)
        mask = np.isnan(data).any(axis=0)
        mask.flags.writeable = False
        self.nodata_mask = mask

    @property
    def n_bands(self):
        return len(self.bands)

    def band_values_at(self, cols, rows):
        """Band vectors at the given pixel indices, shape (n_points, n_bands)."""
        return self.data[:, rows, cols].T

    def with_data(self, data, bands=None):
        """New stack sharing this stack's transform (and bands by default)."""
        return RasterStack(data, bands=self.bands if bands is None else bands,
                           transform=self.transform)

    def same_geometry(self, other):
        return (self.width == other.width and self.height == other.height
                and self.transform == other.transform)


# ---------------------------------------------------------------------------
# change mask / class map

class ChangeMask:
    """Per-pixel stable/changed/nodata layer (uint8 codes 0/1/255)."""

    __slots__ = ("width", "height", "transform", "flags", "provenance", "threshold")

    def __init__(self, flags, transform, provenance, threshold=None):
        flags = np.asarray(flags, dtype=np.uint8)
        if flags.ndim != 2:
            raise ValidationError("change mask flags must be 2-D")
        bad = ~np.isin(flags, (CHANGE_STABLE, CHANGE_CHANGED, NODATA_U8))
        if bad.any():
            idx = np.argwhere(bad)[0]
            raise FormatError(
                f"illegal change-mask code {flags[tuple(idx)]} at pixel "
                f"(row={idx[0]}, col={idx[1]})")
        if provenance not in MASK_PROVENANCES:
            raise ValidationError(f"unknown mask provenance {provenance!r}")
        flags = flags.copy()
        flags.flags.writeable = False
        self.flags = flags
        self.height, self.width = flags.shape
        self.transform = _check_transform(transform)
        self.provenance = provenance
        self.threshold = None if threshold is None else float(threshold)

    def same_geometry(self, other):
        return (self.width == other.width and self.height == other.height
                and self.transform == other.transform)


class ClassMap:
    """Per-pixel class-id layer (uint8, 255 = nodata) with a legend."""

    __slots__ = ("width", "height", "transform", "classes", "legend")

    def __init__(self, classes, transform, legend):
        classes = np.asarray(classes, dtype=np.uint8)
        if classes.ndim != 2:
            raise ValidationError("class map must be 2-D")
        legend = {int(k): str(v) for k, v in legend.items()}
        present = np.unique(classes)
        for c in present:
            if c != NODATA_U8 and int(c) not in legend:
                raise ValidationError(f"class id {int(c)} not in legend")
        classes = classes.copy()
        classes.flags.writeable = False
        self.classes = classes
        self.height, self.width = classes.shape
        self.transform = _check_transform(transform)
        self.legend = legend

    def same_geometry(self, other):
        return (self.width == other.width and self.height == other.height
                and self.transform == other.transform)


# ---------------------------------------------------------------------------
# samples

@dataclass(frozen=True)
class SamplePoint:
    id: str
    x: float
    y: float
    label_t0: int
    label_t1: int | None = None
    change_flag: str = "unknown"
    features_t0: tuple | None = None
    features_t1: tuple | None = None

    def __post_init__(self):
        if self.change_flag not in CHANGE_FLAGS:
            raise ValidationError(
                f"point {self.id}: unknown change flag {self.change_flag!r}")
        if self.label_t0 < 0:
            raise ValidationError(f"point {self.id}: negative class id")
        if (self.change_flag == "stable" and self.label_t1 is not None
                and self.label_t1 != self.label_t0):
            raise ValidationError(
                f"point {self.id}: flagged stable but label_t1="
                f"{self.label_t1} != label_t0={self.label_t0}")
        for attr in ("features_t0", "features_t1"):
            v = getattr(self, attr)
            if v is not None and not isinstance(v, tuple):
                object.__setattr__(self, attr, tuple(float(f) for f in v))

    def replace(self, **kw):
        d = {s: getattr(self, s) for s in (
            "id", "x", "y", "label_t0", "label_t1", "change_flag",
            "features_t0", "features_t1")}
        d.update(kw)
        return SamplePoint(**d)


@dataclass(frozen=True)
class SampleSet:
    points: tuple
    class_legend: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "class_legend",
                           {int(k): str(v) for k, v in self.class_legend.items()})
        seen = set()
        dims = {"t0": None, "t1": None}
        for p in self.points:
            if p.id in seen:
                raise ValidationError(f"duplicate sample id {p.id!r}")
            seen.add(p.id)
            for lab in (p.label_t0, p.label_t1):
                if lab is not None and self.class_legend and lab not in self.class_legend:
                    raise ValidationError(
                        f"point {p.id}: label {lab} not in legend")
            for ts in ("t0", "t1"):
                v = getattr(p, f"features_{ts}")
                if v is not None:
                    if dims[ts] is None:
                        dims[ts] = len(v)
                    elif dims[ts] != len(v):
                        raise ValidationError(
                            f"point {p.id}: features_{ts} length {len(v)} != "
                            f"{dims[ts]}")
        object.__setattr__(self, "_dims", dims)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def feature_dim_t0(self):
        return self._dims["t0"]

    @property
    def feature_dim_t1(self):
        return self._dims["t1"]

    def coords(self):
        """(n, 2) array of map coordinates, in point order."""
        return np.array([(p.x, p.y) for p in self.points], dtype=float).reshape(-1, 2)

    def subset(self, indices):
        return SampleSet(points=[self.points[i] for i in indices],
                         class_legend=self.class_legend)

    def feature_matrix(self, timestep):
        """(n, d) float array of features at the given timestep ('t0'/'t1')."""
        rows = []
        for p in self.points:
            v = getattr(p, f"features_{timestep}")
            if v is None:
                raise ValidationError(
                    f"point {p.id} lacks features_{timestep}")
            rows.append(v)
        return np.asarray(rows, dtype=float)

    def labels(self, timestep):
        out = []
        for p in self.points:
            lab = getattr(p, f"label_{timestep}")
            if lab is None:
                raise ValidationError(f"point {p.id} lacks label_{timestep}")
            out.append(lab)
        return np.asarray(out, dtype=int)


# ---------------------------------------------------------------------------
# BSQ1 file I/O

def _base(path):
    path = os.fspath(path)
    for suffix in (".json", ".bsq"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _atomic_write_bytes(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _read_sidecar(base):
    try:
        with open(base + ".json", "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read sidecar {base}.json: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed sidecar {base}.json: {exc}") from exc
    if header.get("format") != "BSQ1":
        raise FormatError(f"{base}.json: not a BSQ1 sidecar")
    for key in ("width", "height", "transform"):
        if key not in header:
            raise FormatError(f"{base}.json: missing field {key!r}")
    return header


def _read_payload(base, expected_bytes):
    try:
        with open(base + ".bsq", "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read payload {base}.bsq: {exc}") from exc
    if len(payload) != expected_bytes:
        raise FormatError(
            f"{base}.bsq: payload is {len(payload)} bytes, header implies "
            f"{expected_bytes}")
    return payload


def write_raster(stack, path):
    base = _base(path)
    bands = []
    for b in stack.bands:
        entry = {"name": b.name}
        if b.center_nm is not None:
            entry["center_nm"] = b.center_nm
        if b.fwhm_nm is not None:
            entry["fwhm_nm"] = b.fwhm_nm
        bands.append(entry)
    header = {"format": "BSQ1", "width": stack.width, "height": stack.height,
              "bands": bands, "nodata": "nan", "transform": list(stack.transform)}
    payload = stack.data.astype("<f4", copy=False).tobytes(order="C")
    _atomic_write_bytes(base + ".bsq", payload)
    _atomic_write_bytes(base + ".json",
                        json.dumps(header, indent=2).encode("utf-8"))


def read_raster(path):
    base = _base(path)
    header = _read_sidecar(base)
    if "bands" not in header or header.get("dtype", "f4") == "u8":
        raise FormatError(f"{base}.json: not a float raster sidecar")
    width, height = int(header["width"]), int(header["height"])
    bands = [BandSpec(name=b.get("name", f"b{i}"),
                      center_nm=b.get("center_nm"), fwhm_nm=b.get("fwhm_nm"))
             for i, b in enumerate(header["bands"])]
    n_bands = len(bands)
    payload = _read_payload(base, 4 * width * height * n_bands)
    data = np.frombuffer(payload, dtype="<f4").reshape(n_bands, height, width)
    return RasterStack(data, bands=bands, transform=header["transform"])


def _write_u8(base, array, header_extra):
    header = {"format": "BSQ1", "width": array.shape[1], "height": array.shape[0],
              "dtype": "u8", "nodata": NODATA_U8}
    header.update(header_extra)
    _atomic_write_bytes(base + ".bsq", array.astype(np.uint8).tobytes(order="C"))
    _atomic_write_bytes(base + ".json",
                        json.dumps(header, indent=2).encode("utf-8"))


def _read_u8(base):
    header = _read_sidecar(base)
    if header.get("dtype") != "u8":
        raise FormatError(f"{base}.json: expected dtype u8")
    width, height = int(header["width"]), int(header["height"])
    payload = _read_payload(base, width * height)
    return header, np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def write_mask(mask, path):
    extra = {"kind": "change_mask", "provenance": mask.provenance,
             "transform": list(mask.transform)}
    if mask.threshold is not None:
        extra["threshold"] = mask.threshold
    _write_u8(_base(path), mask.flags, extra)


def read_mask(path, provenance=None):
    """Read a u8 change mask; ``provenance`` overrides the stored value
    (used when ingesting externally produced masks)."""
    base = _base(path)
    header, flags = _read_u8(base)
    bad = ~np.isin(flags, (CHANGE_STABLE, CHANGE_CHANGED, NODATA_U8))
    if bad.any():
        flat = int(np.flatnonzero(bad)[0])
        raise FormatError(
            f"{base}.bsq: illegal mask code {int(flags.reshape(-1)[flat])} at "
            f"pixel index {flat}")
    prov = provenance or header.get("provenance", "external")
    return ChangeMask(flags, header["transform"], prov,
                      threshold=header.get("threshold"))


def write_class_map(cmap, path):
    _write_u8(_base(path), cmap.classes,
              {"kind": "class_map", "transform": list(cmap.transform),
               "legend": {str(k): v for k, v in cmap.legend.items()}})


def read_class_map(path):
    base = _base(path)
    header, classes = _read_u8(base)
    legend = {int(k): v for k, v in header.get("legend", {}).items()}
    return ClassMap(classes, header["transform"], legend)


# ---------------------------------------------------------------------------
# sample CSV I/O

def _legend_path(base):
    return base + ".legend.json"


def write_samples(sample_set, path):
    base = path[:-4] if os.fspath(path).endswith(".csv") else os.fspath(path)
    d0 = sample_set.feature_dim_t0 or 0
    d1 = sample_set.feature_dim_t1 or 0
    header = (["id", "x", "y", "label_t0", "label_t1", "change_flag"]
              + [f"f{i}_t0" for i in range(d0)] + [f"f{i}_t1" for i in range(d1)])
    rows = []
    for p in sample_set:
        row = [p.id, repr(p.x), repr(p.y), p.label_t0,
               "" if p.label_t1 is None else p.label_t1, p.change_flag]
        row += ["" for _ in range(d0)] if p.features_t0 is None else \
               [repr(v) for v in p.features_t0]
        row += ["" for _ in range(d1)] if p.features_t1 is None else \
               [repr(v) for v in p.features_t1]
        rows.append(row)
    lines = [",".join(header)]
    lines += [",".join(str(c) for c in row) for row in rows]
    _atomic_write_bytes(base + ".csv", ("\n".join(lines) + "\n").encode("utf-8"))
    _atomic_write_bytes(
        _legend_path(base),
        json.dumps({str(k): v for k, v in sample_set.class_legend.items()},
                   indent=2).encode("utf-8"))


def read_samples(path):
    base = path[:-4] if os.fspath(path).endswith(".csv") else os.fspath(path)
    try:
        with open(base + ".csv", "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            raw = list(reader)
            fields = reader.fieldnames or []
    except OSError as exc:
        raise FormatError(f"cannot read samples {base}.csv: {exc}") from exc
    required = ["id", "x", "y", "label_t0", "label_t1", "change_flag"]
    for col in required:
        if col not in fields:
            raise FormatError(f"{base}.csv: missing column {col!r}")
    fcols = {"t0": sorted((c for c in fields if c.startswith("f") and c.endswith("_t0")),
                          key=lambda c: int(c[1:-3])),
             "t1": sorted((c for c in fields if c.startswith("f") and c.endswith("_t1")),
                          key=lambda c: int(c[1:-3]))}
    legend = {}
    if os.path.exists(_legend_path(base)):
        with open(_legend_path(base), "r", encoding="utf-8") as fh:
            legend = {int(k): v for k, v in json.load(fh).items()}
    points = []
    for i, row in enumerate(raw):
        try:
            x, y = float(row["x"]), float(row["y"])
        except (TypeError, ValueError) as exc:
            raise FormatError(
                f"{base}.csv row {i + 2}: non-numeric coordinate") from exc
        try:
            label_t0 = int(row["label_t0"])
        except (TypeError, ValueError) as exc:
            raise FormatError(
                f"{base}.csv row {i + 2}: bad label_t0 {row['label_t0']!r}") from exc
        label_t1 = None if row["label_t1"] in ("", None) else int(row["label_t1"])
        flag = (row["change_flag"] or "unknown").strip()
        if flag not in CHANGE_FLAGS:
            flag = "unknown"
        feats = {}
        for ts in ("t0", "t1"):
            vals = [row[c] for c in fcols[ts]]
            feats[ts] = None if not vals or any(v in ("", None) for v in vals) \
                else tuple(float(v) for v in vals)
        points.append(SamplePoint(
            id=row["id"], x=x, y=y, label_t0=label_t0, label_t1=label_t1,
            change_flag=flag, features_t0=feats["t0"], features_t1=feats["t1"]))
    return SampleSet(points=points, class_legend=legend)


# ---------------------------------------------------------------------------
# feature extraction

def extract_features(stack, samples, timestep):
    """Attach the band vector under each point as its feature vector.

    Points falling on nodata pixels are dropped from the returned set;
    their ids are returned alongside so callers can report the count.
    Points outside the raster extent are an error.

    Returns (sample_set, excluded_ids).
    """
    if timestep not in ("t0", "t1"):
        raise ValidationError(f"timestep must be 't0' or 't1', got {timestep!r}")
    if len(samples) == 0:
        return samples, []
    coords = samples.coords()
    cols, rows = map_to_pixel(stack.transform, coords[:, 0], coords[:, 1])
    outside = (cols < 0) | (cols >= stack.width) | (rows < 0) | (rows >= stack.height)
    if outside.any():
        ids = [samples.points[i].id for i in np.flatnonzero(outside)]
        raise ValidationError(f"points outside raster extent: {ids}")
    kept, excluded = [], []
    for i, p in enumerate(samples):
        if stack.nodata_mask[rows[i], cols[i]]:
            excluded.append(p.id)
            continue
        vec = tuple(float(v) for v in stack.data[:, rows[i], cols[i]])
        kept.append(p.replace(**{f"features_{timestep}": vec}))
    return SampleSet(points=kept, class_legend=samples.class_legend), excluded
