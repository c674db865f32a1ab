import numpy as np
import pytest

from commonground.errors import ValidationError
from commonground.preprocess import (apply_resampling, build_resampling_plan,
                                     drop_bands, l2_normalize,
                                     l2_normalize_features,
                                     masked_median_composite, resample_stack)
from commonground.raster import BandSpec, RasterStack


class TestL2Normalize:
    def test_345_triangle(self):
        out, nzero = l2_normalize_features(np.array([[3.0, 4.0]]))
        assert np.allclose(out, [[0.6, 0.8]])
        assert nzero == 0

    def test_unit_norm_rows(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 6))
        out, _ = l2_normalize_features(x)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.1, 2.0, size=(20, 5))
        a, _ = l2_normalize_features(x)
        b, _ = l2_normalize_features(17.5 * x)
        assert np.allclose(a, b)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(10, 4))
        once, _ = l2_normalize_features(x)
        twice, _ = l2_normalize_features(once)
        assert np.allclose(once, twice)

    def test_zero_rows_become_nan_and_counted(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0]])
        out, nzero = l2_normalize_features(x)
        assert nzero == 1
        assert np.isnan(out[0]).all()
        assert np.allclose(out[1], [1.0, 0.0])

    def test_stack_zero_pixel_becomes_nodata(self):
        data = np.ones((2, 2, 2), dtype=np.float32)
        data[:, 0, 1] = 0.0
        s = RasterStack(data, transform=(0, 0, 1, -1))
        out, nzero = l2_normalize(s)
        assert nzero == 1
        assert out.nodata_mask[0, 1]
        assert np.allclose(out.data[:, 1, 1], 1.0 / np.sqrt(2.0))


class TestResamplingPlan:
    # [DERIVED] oracle: source centers 500,510,520,530; target 515 nm FWHM 20.
    # sigma = 20/(2*sqrt(2 ln 2)); raw weights exp(-d^2/(2 sigma^2)) =
    # [0.2102241, 0.84089642, 0.84089642, 0.2102241]; normalized = [.1,.4,.4,.1]
    SRC = [BandSpec(name=f"s{i}", center_nm=c, fwhm_nm=10.0)
           for i, c in enumerate((500.0, 510.0, 520.0, 530.0))]

    def test_symmetric_target_weights(self):
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="t", center_nm=515.0, fwhm_nm=20.0)])
        assert plan.covered[0]
        assert np.allclose(plan.weights[0], [0.1, 0.4, 0.4, 0.1], atol=1e-8)

    def test_value_combination(self):
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="t", center_nm=515.0, fwhm_nm=20.0)])
        out = apply_resampling(plan, np.array([1.0, 2.0, 3.0, 4.0]))
        assert abs(out[0] - 2.5) < 1e-9

    def test_window_cutoff(self):
        # target FWHM 5 => window radius 10 nm; only the 510 source survives
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="t", center_nm=512.0, fwhm_nm=5.0)])
        support = plan.weights[0] > 0
        assert support.tolist() == [False, True, True, False]

    def test_uncovered_band_is_nan(self):
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="far", center_nm=700.0, fwhm_nm=5.0)])
        assert not plan.covered[0]
        out = apply_resampling(plan, np.ones(4))
        assert np.isnan(out[0])

    def test_exact_match_identity(self):
        # a target coincident with one source and a tight window passes through
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="t", center_nm=520.0, fwhm_nm=2.0)])
        out = apply_resampling(plan, np.array([9.0, 8.0, 7.0, 6.0]))
        assert abs(out[0] - 7.0) < 1e-9

    def test_nan_source_poisons_target(self):
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="t", center_nm=515.0, fwhm_nm=20.0),
                       BandSpec(name="u", center_nm=529.0, fwhm_nm=3.0)])
        spectra = np.array([np.nan, 2.0, 3.0, 4.0])
        out = apply_resampling(plan, spectra)
        assert np.isnan(out[0])        # 500 nm contributes here
        assert np.isfinite(out[1])     # narrow band only touches 530 nm

    def test_dimension_mismatch(self):
        plan = build_resampling_plan(
            self.SRC, [BandSpec(name="t", center_nm=515.0, fwhm_nm=20.0)])
        with pytest.raises(ValidationError):
            apply_resampling(plan, np.ones(5))

    def test_resample_stack_shape_and_bands(self):
        data = np.ones((4, 3, 3), dtype=np.float32) * \
            np.array([1, 2, 3, 4], dtype=np.float32)[:, None, None]
        s = RasterStack(data, bands=self.SRC, transform=(0, 0, 1, -1))
        tb = [BandSpec(name="t", center_nm=515.0, fwhm_nm=20.0)]
        out, plan = resample_stack(s, tb)
        assert out.n_bands == 1 and out.bands == tb
        assert np.allclose(out.data, 2.5)


class TestMedianComposite:
    def geom(self, data):
        return RasterStack(np.asarray(data, dtype=np.float32),
                           transform=(0, 0, 1, -1))

    def test_odd_count(self):
        stacks = [self.geom([[[v]]]) for v in (5.0, 1.0, 3.0)]
        assert masked_median_composite(stacks).data[0, 0, 0] == 3.0

    def test_even_count_mean_of_middles(self):
        stacks = [self.geom([[[v]]]) for v in (1.0, 2.0, 10.0, 20.0)]
        assert masked_median_composite(stacks).data[0, 0, 0] == 6.0

    def test_nodata_ignored(self):
        stacks = [self.geom([[[np.nan]]]), self.geom([[[4.0]]])]
        assert masked_median_composite(stacks).data[0, 0, 0] == 4.0

    def test_all_nodata_stays_nodata(self):
        stacks = [self.geom([[[np.nan]]]), self.geom([[[np.nan]]])]
        out = masked_median_composite(stacks)
        assert out.nodata_mask[0, 0]

    def test_geometry_mismatch(self):
        a = self.geom(np.zeros((1, 2, 2)))
        b = RasterStack(np.zeros((1, 2, 2), dtype=np.float32),
                        transform=(5, 0, 1, -1))
        with pytest.raises(ValidationError):
            masked_median_composite([a, b])


class TestDropBands:
    def stack(self):
        bands = [BandSpec(name=f"b{i}") for i in range(4)]
        data = np.arange(16, dtype=np.float32).reshape(4, 2, 2)
        return RasterStack(data, bands=bands, transform=(0, 0, 1, -1))

    def test_drop_preserves_order(self):
        out = drop_bands(self.stack(), [2, 0])
        assert [b.name for b in out.bands] == ["b1", "b3"]
        assert np.array_equal(out.data, self.stack().data[[1, 3]])

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            drop_bands(self.stack(), [4])

    def test_cannot_drop_all(self):
        with pytest.raises(ValidationError):
            drop_bands(self.stack(), [0, 1, 2, 3])
