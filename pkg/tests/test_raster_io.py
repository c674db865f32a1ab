import numpy as np
import pytest

from commonground.errors import FormatError, ValidationError
from commonground.raster import (BandSpec, ChangeMask, ClassMap, RasterStack,
                                 SamplePoint, SampleSet, extract_features,
                                 map_to_pixel, pixel_center, read_mask,
                                 read_raster, read_samples, write_mask,
                                 write_raster, write_samples)


def make_stack(data, **kw):
    return RasterStack(np.asarray(data, dtype=np.float32), **kw)


class TestBandSpec:
    def test_fwhm_requires_center(self):
        with pytest.raises(ValidationError):
            BandSpec(name="bad", fwhm_nm=5.0)

    def test_fwhm_positive(self):
        with pytest.raises(ValidationError):
            BandSpec(name="bad", center_nm=500.0, fwhm_nm=0.0)

    def test_ok(self):
        b = BandSpec(name="green", center_nm=560.0, fwhm_nm=30.0)
        assert b.center_nm == 560.0


class TestRasterStack:
    def test_nan_implies_nodata(self):
        data = np.ones((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        s = make_stack(data)
        assert s.nodata_mask[0, 0]
        assert not s.nodata_mask[1, 1]

    def test_mask_argument_nans_all_bands(self):
        mask = np.zeros((2, 2), dtype=bool)
        mask[1, 0] = True
        s = make_stack(np.ones((3, 2, 2)), nodata_mask=mask)
        assert np.isnan(s.data[:, 1, 0]).all()

    def test_band_count_mismatch(self):
        with pytest.raises(ValidationError):
            make_stack(np.zeros((2, 2, 2)), bands=[BandSpec(name="only")])

    def test_bad_transform(self):
        with pytest.raises(ValidationError):
            make_stack(np.zeros((1, 2, 2)), transform=(0, 0, -1.0, -1.0))
        with pytest.raises(ValidationError):
            make_stack(np.zeros((1, 2, 2)), transform=(0, 0, 1.0, 0.0))

    def test_immutable(self):
        s = make_stack(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            s.data[0, 0, 0] = 5.0


class TestGeotransform:
    def test_roundtrip_pixel_center(self):
        t = (100.0, 5000.0, 10.0, -10.0)
        for col, row in [(0, 0), (3, 2), (17, 41)]:
            x, y = pixel_center(t, col, row)
            c, r = map_to_pixel(t, x, y)
            assert (c, r) == (col, row)
            x2, y2 = pixel_center(t, c, r)
            assert abs(x2 - x) < 1e-9 and abs(y2 - y) < 1e-9


class TestRasterIO:
    def test_roundtrip_identity(self, tmp_path):
        s = make_stack(np.array([[[0.0, 1.0], [2.0, 3.0]]]),
                       bands=[BandSpec(name="b", center_nm=500.0, fwhm_nm=10.0)],
                       transform=(5.0, 10.0, 2.0, -2.0))
        write_raster(s, tmp_path / "r")
        back = read_raster(tmp_path / "r")
        assert back.data.tobytes() == s.data.tobytes()
        assert back.transform == s.transform
        assert back.bands == s.bands

    def test_roundtrip_preserves_nan_nodata(self, tmp_path):
        data = np.ones((1, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        write_raster(make_stack(data), tmp_path / "r")
        back = read_raster(tmp_path / "r")
        assert back.nodata_mask[0, 0]

    def test_size_mismatch_detected(self, tmp_path):
        s = make_stack(np.zeros((2, 2, 2)))
        write_raster(s, tmp_path / "r")
        # corrupt the header to declare a third band
        import json
        header = json.loads((tmp_path / "r.json").read_text())
        header["bands"].append({"name": "ghost"})
        (tmp_path / "r.json").write_text(json.dumps(header))
        with pytest.raises(FormatError):
            read_raster(tmp_path / "r")

    def test_unreadable_path(self, tmp_path):
        with pytest.raises(FormatError):
            read_raster(tmp_path / "missing")


class TestMaskIO:
    def test_roundtrip_counts(self, tmp_path):
        flags = np.array([[0, 1], [255, 0]], dtype=np.uint8)
        m = ChangeMask(flags, (0, 0, 1, -1), "external", threshold=3.5)
        write_mask(m, tmp_path / "m")
        back = read_mask(tmp_path / "m")
        assert np.array_equal(back.flags, flags)
        assert back.threshold == 3.5

    def test_illegal_code(self, tmp_path):
        flags = np.zeros((2, 2), dtype=np.uint8)
        m = ChangeMask(flags, (0, 0, 1, -1), "external")
        write_mask(m, tmp_path / "m")
        payload = bytearray((tmp_path / "m.bsq").read_bytes())
        payload[2] = 7
        (tmp_path / "m.bsq").write_bytes(bytes(payload))
        with pytest.raises(FormatError, match="7"):
            read_mask(tmp_path / "m")


class TestSamplePoint:
    def test_stable_labels_must_agree(self):
        with pytest.raises(ValidationError):
            SamplePoint(id="p1", x=0, y=0, label_t0=2, label_t1=3,
                        change_flag="stable")

    def test_duplicate_ids(self):
        p = SamplePoint(id="p1", x=0, y=0, label_t0=0)
        with pytest.raises(ValidationError):
            SampleSet(points=[p, p], class_legend={0: "a"})

    def test_label_outside_legend(self):
        p = SamplePoint(id="p1", x=0, y=0, label_t0=5)
        with pytest.raises(ValidationError):
            SampleSet(points=[p], class_legend={0: "a"})


class TestSampleIO:
    def make_set(self):
        pts = [
            SamplePoint(id="p1", x=10.0, y=20.0, label_t0=2, label_t1=2,
                        change_flag="stable", features_t0=(0.5, 0.25)),
            SamplePoint(id="p2", x=11.0, y=21.0, label_t0=1,
                        change_flag="changed"),
        ]
        return SampleSet(points=pts, class_legend={1: "one", 2: "two"})

    def test_roundtrip(self, tmp_path):
        s = self.make_set()
        write_samples(s, tmp_path / "s")
        back = read_samples(tmp_path / "s")
        assert back.class_legend == s.class_legend
        assert back.points[0].features_t0 == (0.5, 0.25)
        assert back.points[1].label_t1 is None
        assert back.points[1].features_t0 is None
        assert back.points[0].change_flag == "stable"

    def test_direct_field_mapping(self, tmp_path):
        (tmp_path / "s.csv").write_text(
            "id,x,y,label_t0,label_t1,change_flag\np1,10.0,20.0,2,2,stable\n")
        back = read_samples(tmp_path / "s")
        p = back.points[0]
        assert (p.label_t0, p.label_t1, p.change_flag) == (2, 2, "stable")

    def test_unknown_flag_parsed_as_unknown(self, tmp_path):
        (tmp_path / "s.csv").write_text(
            "id,x,y,label_t0,label_t1,change_flag\np1,0,0,1,,weird\n")
        assert read_samples(tmp_path / "s").points[0].change_flag == "unknown"

    def test_stable_label_conflict(self, tmp_path):
        (tmp_path / "s.csv").write_text(
            "id,x,y,label_t0,label_t1,change_flag\np1,0,0,2,3,stable\n")
        with pytest.raises(ValidationError):
            read_samples(tmp_path / "s")

    def test_non_numeric_coordinate(self, tmp_path):
        (tmp_path / "s.csv").write_text(
            "id,x,y,label_t0,label_t1,change_flag\np1,zero,0,1,,stable\n")
        with pytest.raises(FormatError):
            read_samples(tmp_path / "s")


class TestExtractFeatures:
    def stack(self):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        return RasterStack(data, transform=(0.0, 0.0, 10.0, -10.0))

    def test_origin_lookup(self):
        s = RasterStack(np.full((1, 2, 2), 7.0, dtype=np.float32),
                        transform=(0.0, 0.0, 1.0, -1.0))
        pts = SampleSet(points=[SamplePoint(id="a", x=0.5, y=-0.5, label_t0=0)])
        out, excluded = extract_features(s, pts, "t0")
        assert out.points[0].features_t0 == (7.0,)
        assert excluded == []

    def test_pixel_center_lookup(self):
        s = self.stack()
        # center of pixel (col=3, row=2)
        x, y = pixel_center(s.transform, 3, 2)
        pts = SampleSet(points=[SamplePoint(id="a", x=x, y=y, label_t0=0)])
        out, _ = extract_features(s, pts, "t0")
        expected = tuple(float(v) for v in s.data[:, 2, 3])
        assert out.points[0].features_t0 == expected

    def test_nodata_excluded(self):
        data = np.ones((1, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        s = RasterStack(data, transform=(0.0, 0.0, 1.0, -1.0))
        pts = SampleSet(points=[SamplePoint(id="a", x=0.5, y=-0.5, label_t0=0)])
        out, excluded = extract_features(s, pts, "t0")
        assert len(out) == 0 and excluded == ["a"]

    def test_outside_extent_lists_ids(self):
        s = self.stack()
        pts = SampleSet(points=[SamplePoint(id="far", x=1e6, y=0, label_t0=0)])
        with pytest.raises(ValidationError, match="far"):
            extract_features(s, pts, "t0")

    def test_order_independent(self):
        s = self.stack()
        pts = [SamplePoint(id=f"p{i}", x=5.0 + 10 * i, y=-5.0, label_t0=0)
               for i in range(3)]
        fwd, _ = extract_features(s, SampleSet(points=pts), "t0")
        rev, _ = extract_features(s, SampleSet(points=pts[::-1]), "t0")
        by_id_f = {p.id: p.features_t0 for p in fwd}
        by_id_r = {p.id: p.features_t0 for p in rev}
        assert by_id_f == by_id_r
