"""IRMAD bi-temporal change detection.

Iterated canonical correlation analysis between a co-registered image pair:
each pass solves the coupled generalized eigenproblems for canonical
coefficient pairs, forms the MAD variates (differences of paired canonical
variates), scores every pixel with a chi-square statistic, and reweights
pixels by the chi-square survival probability so that stable pixels dominate
the next pass.  Thresholding utilities turn the statistic into a binary
change mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import DataError, ValidationError
from .raster import (CHANGE_CHANGED, CHANGE_STABLE, NODATA_U8, ChangeMask,
                     RasterStack)

COV_REG_SCALE = 1e-10     # ridge added to covariance diagonals, x trace/N
MAD_VAR_FLOOR = 1e-12     # clamp on MAD variances (identical-image degeneracy)
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 50


@dataclass(frozen=True)
class MadStep:
    """One canonical-correlation pass.

    Columns of ``a`` and ``b`` are canonical directions for the two images,
    aligned with ``rho`` (sorted descending); ``sigma2_mad[i] = 2*(1-rho[i])``
    is the variance of the i-th MAD variate under the unit-variance canonical
    convention.  Weighted means of both images are carried so the statistic
    can be evaluated on any co-registered pixels later.
    """

    a: np.ndarray
    b: np.ndarray
    rho: np.ndarray
    sigma2_mad: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if np.any(np.diff(rho) > 1e-12):
            raise ValidationError("rho must be sorted descending")
        if np.any(rho < -1e-9) or np.any(rho > 1 + 1e-9):
            raise ValidationError(f"rho out of [0,1]: {rho}")
        if not np.allclose(self.sigma2_mad, 2.0 * (1.0 - rho), atol=1e-9):
            raise ValidationError("sigma2_mad must equal 2*(1-rho)")


@dataclass(frozen=True)
class IrmadResult:
    final: MadStep
    z: np.ndarray                # per-pixel chi-square statistic, NaN at nodata
    iterations: int
    rho_history: tuple
    converged: bool
    df: int


def _as_pixel_matrix(img):
    """(n_pixels, n_bands) float64 view of a stack or array."""
    if isinstance(img, RasterStack):
        return img.data.reshape(img.n_bands, -1).T.astype(float)
    arr = np.asarray(img, dtype=float)
    if arr.ndim == 3:
        return arr.reshape(arr.shape[0], -1).T
    if arr.ndim != 2:
        raise ValidationError("image must be a RasterStack, (bands,h,w) or (n,bands)")
    return arr


def _weighted_cov(xy, w):
    """Weighted mean and covariance (denominator sum of weights)."""
    wsum = w.sum()
    mean = (w[:, None] * xy).sum(axis=0) / wsum
    centered = xy - mean
    cov = (centered * w[:, None]).T @ centered / wsum
    return mean, cov


def weighted_cca(img_x, img_y, weights=None):
    """One weighted MAD pass: canonical directions, correlations, variances.

    Both images must be co-registered with the same band count N.  Pixels
    that are nodata in either image are excluded; at least 2N+1 valid pixels
    with positive weight are required.
    """
    x = _as_pixel_matrix(img_x)
    y = _as_pixel_matrix(img_y)
    if x.shape != y.shape:
        raise ValidationError(f"image shapes differ: {x.shape} vs {y.shape}")
    n_bands = x.shape[1]
    valid = ~(np.isnan(x).any(axis=1) | np.isnan(y).any(axis=1))
    if weights is None:
        w = valid.astype(float)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1).copy()
        if w.shape[0] != x.shape[0]:
            raise ValidationError("weights length must match pixel count")
        w[~valid] = 0.0
        w = np.nan_to_num(w, nan=0.0)
    n_valid = int(np.count_nonzero(w > 0))
    if n_valid < 2 * n_bands + 1:
        raise DataError(
            f"too few valid pixels for CCA: {n_valid} < {2 * n_bands + 1}")

    mean, cov = _weighted_cov(np.hstack([x, y])[w > 0], w[w > 0])
    s_xx = cov[:n_bands, :n_bands].copy()
    s_yy = cov[n_bands:, n_bands:].copy()
    s_xy = cov[:n_bands, n_bands:]

    # ridge keeps rank-deficient synthetic inputs solvable
    s_xx[np.diag_indices_from(s_xx)] += COV_REG_SCALE * np.trace(s_xx) / n_bands
    s_yy[np.diag_indices_from(s_yy)] += COV_REG_SCALE * np.trace(s_yy) / n_bands

    try:
        m = s_xy @ linalg.solve(s_yy, s_xy.T, assume_a="pos")
        rho2, a = linalg.eigh(m, s_xx)
    except linalg.LinAlgError as exc:
        raise DataError(f"singular covariance in CCA: {exc}") from exc
    order = np.argsort(rho2)[::-1]           # rho descending
    rho2 = np.clip(rho2[order], 0.0, None)
    a = a[:, order]
    rho = np.sqrt(np.clip(rho2, 0.0, 1.0 + 1e-9))

    # b from the coupled problem, then unit-variance scaling and sign fixing
    b = linalg.solve(s_yy, s_xy.T, assume_a="pos") @ a
    for i in range(n_bands):
        va = a[:, i] @ s_xx @ a[:, i]
        a[:, i] /= np.sqrt(max(va, MAD_VAR_FLOOR))
        vb = b[:, i] @ s_yy @ b[:, i]
        b[:, i] /= np.sqrt(max(vb, MAD_VAR_FLOOR))
        if a[:, i] @ s_xy @ b[:, i] < 0:
            b[:, i] = -b[:, i]

    rho = np.minimum(rho, 1.0 + 1e-9)
    sigma2 = 2.0 * (1.0 - rho)
    degenerate = bool(np.all(sigma2 < 10 * MAD_VAR_FLOOR) or np.all(rho > 1 - 1e-9))
    if degenerate:
        warnings.warn("canonical correlations are all ~1; images are "
                      "(near-)identical, chi-square statistic degenerates to 0",
                      RuntimeWarning, stacklevel=2)
    return MadStep(a=a, b=b, rho=rho, sigma2_mad=sigma2,
                   mean_x=mean[:n_bands], mean_y=mean[n_bands:],
                   degenerate=degenerate)


def chi_square_image(img_x, img_y, step):
    """Chi-square change statistic per pixel; NaN where either image is nodata.

    Z = sum_i M_i^2 / sigma2_i with M the MAD variates of ``step``.  When the
    step is degenerate (identical images) the clamped variances would explode
    the statistic, so Z is forced to 0 at valid pixels instead.
    """
    x = _as_pixel_matrix(img_x)
    y = _as_pixel_matrix(img_y)
    if x.shape != y.shape:
        raise ValidationError(f"image shapes differ: {x.shape} vs {y.shape}")
    mads = (x - step.mean_x) @ step.a - (y - step.mean_y) @ step.b
    sigma2 = np.maximum(step.sigma2_mad, MAD_VAR_FLOOR)
    with np.errstate(invalid="ignore"):
        z = (mads * mads / sigma2).sum(axis=1)
    valid = ~(np.isnan(x).any(axis=1) | np.isnan(y).any(axis=1))
    if step.degenerate:
        z[valid] = 0.0
    z[~valid] = np.nan
    shape = _image_shape(img_x)
    return z.reshape(shape) if shape is not None else z


def _image_shape(img):
    if isinstance(img, RasterStack):
        return (img.height, img.width)
    arr = np.asarray(img)
    return arr.shape[1:] if arr.ndim == 3 else None


def chi2_survival(z, df):
    """P(chi2_df > z): the stability weight for the next IRMAD pass."""
    if df < 1:
        raise ValidationError(f"df must be >= 1, got {df}")
    z = np.asarray(z, dtype=float)
    if np.any(z[~np.isnan(z)] < 0):
        raise ValidationError("chi-square statistic must be nonnegative")
    return stats.chi2.sf(z, df)


def irmad(img_x, img_y, max_iter=DEFAULT_MAX_ITER, tol=DEFAULT_TOL):
    """Iterate MAD passes, reweighting by chi-square survival, until the
    canonical correlations settle (max |delta rho| < tol) or max_iter."""
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    x = _as_pixel_matrix(img_x)
    df = x.shape[1]
    weights = None
    prev_rho = np.zeros(df)
    rho_history = []
    converged = False
    step = None
    z = None
    iterations = 0
    for _ in range(max_iter):
        step = weighted_cca(img_x, img_y, weights)
        z = chi_square_image(img_x, img_y, step)
        iterations += 1
        rho_history.append(step.rho.copy())
        if np.max(np.abs(step.rho - prev_rho)) < tol or step.degenerate:
            converged = True
            break
        prev_rho = step.rho
        weights = chi2_survival(np.nan_to_num(np.ravel(z), nan=0.0), df)
    return IrmadResult(final=step, z=z, iterations=iterations,
                       rho_history=tuple(rho_history), converged=converged,
                       df=df)


# ---------------------------------------------------------------------------
# thresholding

def threshold_percentile(z_raster, percentile, transform=None):
    """Flag pixels above the empirical percentile of the statistic as changed."""
    if not 0 < percentile < 100:
        raise ValidationError(f"percentile must be in (0,100), got {percentile}")
    z = np.asarray(z_raster, dtype=float)
    valid = ~np.isnan(z)
    if not valid.any():
        raise DataError("no valid pixels to threshold")
    thr = float(np.percentile(z[valid], percentile))
    flags = np.full(z.shape, NODATA_U8, dtype=np.uint8)
    flags[valid] = np.where(z[valid] > thr, CHANGE_CHANGED, CHANGE_STABLE)
    if transform is None:
        transform = (0.0, 0.0, 1.0, -1.0)
    return ChangeMask(flags, transform, "irmad_percentile", threshold=thr)


def threshold_pr_optimal(z_values, change_labels):
    """Pick the threshold maximizing F1 of the changed class.

    ``change_labels`` is boolean (True = changed).  All distinct statistic
    values are swept as candidates with the rule "changed if Z > theta"; ties
    on F1 go to the larger threshold (fewer false alarms).

    Returns (threshold, precision, recall, f1).
    """
    z = np.asarray(z_values, dtype=float)
    labels = np.asarray(change_labels, dtype=bool)
    if z.shape != labels.shape:
        raise ValidationError("z_values and change_labels must align")
    keep = ~np.isnan(z)
    z, labels = z[keep], labels[keep]
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataError("need at least one changed and one stable label")

    order = np.argsort(z, kind="stable")
    z_sorted = z[order]
    pos_sorted = labels[order].astype(int)
    # predicting "changed" for Z > z_sorted[i]: true positives are the
    # positives strictly to the right of the last index with that value
    distinct_idx = np.flatnonzero(np.r_[np.diff(z_sorted) != 0, True])
    pos_cum = np.cumsum(pos_sorted)
    best = None
    for i in distinct_idx:
        theta = z_sorted[i]
        tp = n_pos - pos_cum[i]
        pred_pos = z_sorted.size - (i + 1)
        fp = pred_pos - tp
        fn = n_pos - tp
        precision = tp / pred_pos if pred_pos else 0.0
        recall = tp / n_pos
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        # thetas ascend, so >= resolves F1 ties to the larger threshold
        if best is None or f1 >= best[3]:
            best = (float(theta), precision, recall, f1)
    return best


def apply_threshold(z_raster, threshold, transform=None, provenance="irmad_pr"):
    """Binary mask from an explicit threshold (changed where Z > threshold)."""
    z = np.asarray(z_raster, dtype=float)
    valid = ~np.isnan(z)
    flags = np.full(z.shape, NODATA_U8, dtype=np.uint8)
    flags[valid] = np.where(z[valid] > threshold, CHANGE_CHANGED, CHANGE_STABLE)
    if transform is None:
        transform = (0.0, 0.0, 1.0, -1.0)
    return ChangeMask(flags, transform, provenance, threshold=float(threshold))


def load_external_mask(path):
    """Ingest an externally produced change mask (e.g. a CCDC product)."""
    from .raster import read_mask
    return read_mask(path, provenance="external")
