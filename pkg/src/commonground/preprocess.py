"""Spectral preprocessing: L2 brightness normalization, Gaussian cross-sensor
band resampling, band dropping, and masked median compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .raster import RasterStack

# FWHM -> Gaussian sigma conversion factor, 2*sqrt(2*ln 2)
_FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# a target band counts as covered once its raw Gaussian weight mass exceeds this
COVERAGE_EPS = 1e-6


# ---------------------------------------------------------------------------
# L2 brightness normalization

def l2_normalize_features(features):
    """Normalize each row of a (n, d) feature matrix to unit L2 norm.

    Rows with zero norm (or any NaN) come back as all-NaN.  Returns
    (normalized, zero_norm_count).
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        out, n = l2_normalize_features(x[None, :])
        return out[0], n
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = x / norms[:, None]
    out[zero] = np.nan
    return out, int(np.count_nonzero(zero))


def l2_normalize(stack):
    """Per-pixel L2 normalization of a raster stack.

    Pixels whose band vector has zero norm become nodata.  Returns
    (stack, zero_norm_count).
    """
    data = stack.data.astype(float)
    norms = np.sqrt(np.nansum(data * data, axis=0))
    valid = ~stack.nodata_mask
    zero = valid & (norms == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = data / norms[None, :, :]
    out[:, zero] = np.nan
    return stack.with_data(out), int(np.count_nonzero(zero))


# ---------------------------------------------------------------------------
# Gaussian band resampling

@dataclass(frozen=True)
class ResamplingPlan:
    """Row-normalized Gaussian weights mapping source bands to target bands.

    ``weights`` has shape (n_target, n_source); rows of uncovered target
    bands are all zero and flagged False in ``covered``.
    """

    weights: np.ndarray
    covered: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        c = np.asarray(self.covered, dtype=bool)
        if w.ndim != 2 or c.shape != (w.shape[0],):
            raise ValidationError("inconsistent resampling plan shapes")
        if (w < 0).any():
            raise ValidationError("negative resampling weight")
        sums = w.sum(axis=1)
        if not np.allclose(sums[c], 1.0, atol=1e-9):
            raise ValidationError("covered rows must sum to 1")
        if (sums[~c] != 0).any():
            raise ValidationError("uncovered rows must be all-zero")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "covered", c)


def build_resampling_plan(source_bands, target_bands):
    """Gaussian response-profile weights from source band centers to targets.

    For target band j with center c_j and FWHM f_j, sigma_j = f_j / (2*sqrt(2 ln 2));
    source band i contributes weight exp(-(c_i - c_j)^2 / (2 sigma_j^2)) when
    |c_i - c_j| <= 2*f_j, else nothing.  Rows with any appreciable raw weight
    are normalized to sum 1; the rest are uncovered (no spectral support).
    """
    centers = []
    for i, b in enumerate(source_bands):
        if b.center_nm is None:
            raise ValidationError(f"source band {i} ({b.name!r}) lacks center_nm")
        centers.append(b.center_nm)
    centers = np.asarray(centers, dtype=float)
    weights = np.zeros((len(target_bands), len(centers)))
    covered = np.zeros(len(target_bands), dtype=bool)
    for j, tb in enumerate(target_bands):
        if tb.center_nm is None or tb.fwhm_nm is None:
            raise ValidationError(
                f"target band {j} ({tb.name!r}) needs center_nm and fwhm_nm")
        sigma = tb.fwhm_nm / _FWHM_TO_SIGMA
        d = centers - tb.center_nm
        raw = np.where(np.abs(d) <= 2.0 * tb.fwhm_nm,
                       np.exp(-(d * d) / (2.0 * sigma * sigma)), 0.0)
        total = raw.sum()
        if total > COVERAGE_EPS:
            weights[j] = raw / total
            covered[j] = True
    return ResamplingPlan(weights=weights, covered=covered)


def apply_resampling(plan, spectra):
    """Apply a resampling plan to spectra of shape (..., n_source).

    Covered target bands get the weighted combination of source values;
    uncovered bands get NaN.  NaN in any contributing source band poisons
    the target band (no silent renormalization over missing data).
    """
    x = np.asarray(spectra, dtype=float)
    if x.shape[-1] != plan.weights.shape[1]:
        raise ValidationError(
            f"spectra dimension {x.shape[-1]} != plan source count "
            f"{plan.weights.shape[1]}")
    nan_src = np.isnan(x)
    out = np.where(nan_src, 0.0, x) @ plan.weights.T
    # poison any target band with a NaN among its contributing source bands
    support = (plan.weights > 0).astype(float)
    poisoned = nan_src.astype(float) @ support.T > 0
    out = np.where(poisoned, np.nan, out)
    out[..., ~plan.covered] = np.nan
    return out


def resample_stack(stack, target_bands):
    """Resample a raster stack onto a target band configuration."""
    plan = build_resampling_plan(stack.bands, target_bands)
    flat = stack.data.reshape(stack.n_bands, -1).T
    out = apply_resampling(plan, flat).T.reshape(
        len(target_bands), stack.height, stack.width)
    return RasterStack(out, bands=target_bands, transform=stack.transform), plan


# ---------------------------------------------------------------------------
# compositing and band selection

def masked_median_composite(stacks):
    """Per-pixel, per-band median over stacks, ignoring nodata.

    Even counts take the mean of the two middle values; all-nodata pixels
    stay nodata.
    """
    if not stacks:
        raise ValidationError("need at least one stack to composite")
    first = stacks[0]
    for s in stacks[1:]:
        if not first.same_geometry(s) or s.n_bands != first.n_bands:
            raise ValidationError("composite inputs must share geometry and bands")
    cube = np.stack([s.data for s in stacks], axis=0)
    with np.errstate(invalid="ignore"):
        out = np.nanmedian(cube, axis=0)
    return first.with_data(out)


def drop_bands(stack, indices):
    """Remove the given 0-based band indices, preserving order of the rest."""
    drop = set()
    for i in indices:
        i = int(i)
        if not 0 <= i < stack.n_bands:
            raise ValidationError(
                f"band index {i} out of range for {stack.n_bands}-band stack")
        drop.add(i)
    keep = [i for i in range(stack.n_bands) if i not in drop]
    if not keep:
        raise ValidationError("cannot drop every band")
    return RasterStack(stack.data[keep], bands=[stack.bands[i] for i in keep],
                       transform=stack.transform)
