"""Connected components against a union-find oracle, exact morphology
thresholds, polygon scan conversion against a ray-casting oracle, mask
algebra, tissue thresholding, and GeoJSON interchange."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restain.errors import FormatError
from restain.maskops import (
    AnnotationSet,
    MorphologyConfig,
    Polygon,
    TissueConfig,
    clean_epithelium_mask,
    connected_components,
    load_geojson,
    mask_intersect,
    mask_subtract,
    mask_union,
    rasterize,
    save_geojson,
    tissue_mask,
)
from restain.raster import BinaryMask, RasterImage

MPP = 0.3448


def oracle_components(data: np.ndarray, connectivity: int):
    """Union-find labeling, written independently of scipy."""
    h, w = data.shape
    parent = list(range(h * w))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    if connectivity == 4:
        offsets = [(-1, 0), (0, -1)]
    else:
        offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    for y in range(h):
        for x in range(w):
            if not data[y, x]:
                continue
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and data[ny, nx]:
                    union(y * w + x, ny * w + nx)

    sizes: dict[int, int] = {}
    for y in range(h):
        for x in range(w):
            if data[y, x]:
                root = find(y * w + x)
                sizes[root] = sizes.get(root, 0) + 1
    return sorted(sizes.values())


class TestConnectedComponents:
    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_matches_union_find_oracle(self, connectivity):
        rng = np.random.default_rng(20)
        for _ in range(25):
            data = rng.random((24, 24)) < 0.45
            labels, regions = connected_components(BinaryMask(data, 1.0), connectivity)
            assert sorted(r.area_px for r in regions) == oracle_components(data, connectivity)
            assert (labels > 0).sum() == data.sum()

    def test_diagonal_touch(self):
        data = np.array([[1, 0], [0, 1]], dtype=bool)
        _, four = connected_components(BinaryMask(data, 1.0), 4)
        _, eight = connected_components(BinaryMask(data, 1.0), 8)
        assert len(four) == 2
        assert len(eight) == 1

    def test_labels_dense_from_one(self):
        data = np.zeros((8, 8), dtype=bool)
        data[1, 1] = data[4, 4] = data[7, 0] = True
        labels, regions = connected_components(BinaryMask(data, 1.0), 8)
        assert sorted(r.label for r in regions) == [1, 2, 3]
        assert set(np.unique(labels)) == {0, 1, 2, 3}

    def test_region_bbox_and_centroid(self):
        data = np.zeros((10, 10), dtype=bool)
        data[2:5, 3:7] = True
        _, regions = connected_components(BinaryMask(data, 1.0), 8)
        assert regions[0].bbox == (3, 2, 4, 3)
        assert regions[0].centroid == (5.0, 3.5)

    def test_rejects_bad_connectivity(self):
        with pytest.raises(ValueError):
            connected_components(BinaryMask(np.zeros((2, 2), dtype=bool), 1.0), 6)


class TestCleanEpithelium:
    def _hole_fixture(self, hole_px: int) -> BinaryMask:
        # 1-px-tall interior slit of exactly hole_px pixels
        data = np.ones((40, hole_px + 20), dtype=bool)
        data[20, 10 : 10 + hole_px] = False
        return BinaryMask(data, MPP)

    def test_hole_below_cutoff_filled(self):
        # 150 um^2 at mpp 0.3448 is 1261.73 px; 1261 < cutoff
        cleaned = clean_epithelium_mask(self._hole_fixture(1261), MorphologyConfig())
        assert cleaned.data.all()

    def test_hole_at_cutoff_kept(self):
        cleaned = clean_epithelium_mask(self._hole_fixture(1262), MorphologyConfig())
        assert (~cleaned.data).sum() == 1262

    def _object_fixture(self, extra: int) -> BinaryMask:
        # 14x15 block is 210 px; extra pixels extend the top row
        data = np.zeros((40, 40), dtype=bool)
        data[10:24, 10:25] = True
        if extra:
            data[9, 10 : 10 + extra] = True
        return BinaryMask(data, MPP)

    def test_object_below_cutoff_removed(self):
        # 25 um^2 at mpp 0.3448 is 210.29 px; 210 < cutoff
        cleaned = clean_epithelium_mask(self._object_fixture(0), MorphologyConfig())
        assert not cleaned.data.any()

    def test_object_at_cutoff_kept(self):
        cleaned = clean_epithelium_mask(self._object_fixture(1), MorphologyConfig())
        assert cleaned.data.sum() == 211

    def test_border_hole_never_filled(self):
        data = np.ones((30, 30), dtype=bool)
        data[0:3, 10:13] = False  # touches the top border
        cleaned = clean_epithelium_mask(BinaryMask(data, MPP), MorphologyConfig())
        assert (~cleaned.data).sum() == 9

    def test_fill_runs_before_removal(self):
        # 5x5 ring of 20 px around a 5-px plus-shaped hole, at mpp 1.0:
        # removal first would drop the 20-px ring (< 25); filling first
        # raises it to 25 px, which survives the strict cut
        data = np.zeros((9, 9), dtype=bool)
        data[2:7, 2:7] = True
        for y, x in [(4, 3), (3, 4), (4, 4), (5, 4), (4, 5)]:
            data[y, x] = False
        cleaned = clean_epithelium_mask(BinaryMask(data, 1.0), MorphologyConfig())
        assert cleaned.data.sum() == 25
        assert cleaned.data[2:7, 2:7].all()

    def test_idempotent_on_examples(self):
        rng = np.random.default_rng(21)
        cfg = MorphologyConfig()
        for _ in range(10):
            mask = BinaryMask(rng.random((48, 48)) < 0.5, 1.0)
            once = clean_epithelium_mask(mask, cfg)
            twice = clean_epithelium_mask(once, cfg)
            assert np.array_equal(once.data, twice.data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent_property(self, seed):
        rng = np.random.default_rng(seed)
        mask = BinaryMask(rng.random((32, 32)) < 0.5, MPP)
        once = clean_epithelium_mask(mask, MorphologyConfig())
        twice = clean_epithelium_mask(once, MorphologyConfig())
        assert np.array_equal(once.data, twice.data)

    def test_rejects_negative_thresholds(self):
        with pytest.raises(ValueError):
            MorphologyConfig(fill_hole_below=-1.0)


def oracle_point_in_polygon(verts: np.ndarray, xc: float, yc: float) -> bool:
    """Even-odd ray cast toward +x, counting edges with a point-by-point
    loop instead of span arithmetic."""
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 <= yc) != (y2 <= yc):
            cross_x = x1 + (yc - y1) / (y2 - y1) * (x2 - x1)
            if cross_x > xc:
                inside = not inside
    return inside


class TestRasterize:
    def test_axis_aligned_rectangle_exact(self):
        poly = Polygon("benign", np.array([[10.0, 10.0], [20.0, 10.0], [20.0, 20.0], [10.0, 20.0]]))
        mask = rasterize(AnnotationSet((poly,)), "benign", 32, 32)
        expected = np.zeros((32, 32), dtype=bool)
        expected[10:20, 10:20] = True
        assert np.array_equal(mask.data, expected)

    def test_matches_ray_cast_oracle_random_polygons(self):
        rng = np.random.default_rng(22)
        for _ in range(15):
            n = int(rng.integers(3, 9))
            verts = rng.uniform(1.0, 31.0, size=(n, 2))
            poly = Polygon("insitu", verts)
            mask = rasterize(AnnotationSet((poly,)), "insitu", 32, 32)
            for y in range(32):
                for x in range(32):
                    assert mask.data[y, x] == oracle_point_in_polygon(verts, x + 0.5, y + 0.5)

    def test_self_intersecting_even_odd(self):
        # bowtie: the crossing region is covered twice and stays empty
        verts = np.array([[2.0, 2.0], [18.0, 18.0], [18.0, 2.0], [2.0, 18.0]])
        poly = Polygon("benign", verts)
        mask = rasterize(AnnotationSet((poly,)), "benign", 20, 20)
        for y in range(20):
            for x in range(20):
                assert mask.data[y, x] == oracle_point_in_polygon(verts, x + 0.5, y + 0.5)
        # both lobes are filled while the crossing pixel stays empty
        assert mask.data[9, 5] and mask.data[9, 14]
        assert not mask.data[9, 9]

    def test_level_factor_and_origin(self):
        poly = Polygon("benign", np.array([[20.0, 10.0], [40.0, 10.0], [40.0, 30.0], [20.0, 30.0]]))
        mask = rasterize(AnnotationSet((poly,)), "benign", 16, 16, level_factor=2, origin=(10.0, 0.0))
        expected = np.zeros((16, 16), dtype=bool)
        expected[5:15, 5:15] = True
        assert np.array_equal(mask.data, expected)

    def test_label_filter(self):
        benign = Polygon("benign", np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]]))
        mask = rasterize(AnnotationSet((benign,)), "insitu", 8, 8)
        assert not mask.data.any()

    def test_polygon_outside_raster_is_empty(self):
        poly = Polygon("benign", np.array([[100.0, 100.0], [110.0, 100.0], [105.0, 110.0]]))
        mask = rasterize(AnnotationSet((poly,)), "benign", 16, 16)
        assert not mask.data.any()

    def test_polygon_needs_three_vertices(self):
        with pytest.raises(FormatError):
            Polygon("benign", np.array([[0.0, 0.0], [1.0, 1.0]]))

    def test_polygon_rejects_unknown_label(self):
        with pytest.raises(FormatError):
            Polygon("tumor", np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]))


class TestMaskAlgebra:
    def _pair(self, seed=23):
        rng = np.random.default_rng(seed)
        a = BinaryMask(rng.random((16, 16)) < 0.5, 1.0)
        b = BinaryMask(rng.random((16, 16)) < 0.5, 1.0)
        return a, b

    def test_subtract(self):
        a, b = self._pair()
        got = mask_subtract(a, b)
        assert np.array_equal(got.data, a.data & ~b.data)

    def test_intersect_and_union(self):
        a, b = self._pair()
        assert np.array_equal(mask_intersect(a, b).data, a.data & b.data)
        assert np.array_equal(mask_union(a, b).data, a.data | b.data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_partition_identity(self, seed):
        # (a - b), (a & b), (b - a) partition (a | b)
        a, b = self._pair(seed)
        left = mask_subtract(a, b).data
        mid = mask_intersect(a, b).data
        right = mask_subtract(b, a).data
        assert not (left & mid).any()
        assert not (mid & right).any()
        assert not (left & right).any()
        assert np.array_equal(left | mid | right, mask_union(a, b).data)

    def test_dimension_mismatch(self):
        a = BinaryMask(np.zeros((4, 4), dtype=bool), 1.0)
        b = BinaryMask(np.zeros((4, 5), dtype=bool), 1.0)
        with pytest.raises(ValueError):
            mask_subtract(a, b)


class TestTissueMask:
    def _solid(self, rgb):
        return RasterImage(np.full((4, 4, 3), rgb, dtype=np.uint8).reshape(4, 4, 3), 1.0)

    def test_white_is_background(self):
        img = RasterImage(np.full((4, 4, 3), 255, dtype=np.uint8), 1.0)
        assert not tissue_mask(img).data.any()

    def test_pink_tissue_detected(self):
        img = RasterImage(np.tile(np.array([230, 180, 200], dtype=np.uint8), (4, 4, 1)), 1.0)
        assert tissue_mask(img).data.all()

    def test_neutral_gray_rejected(self):
        img = RasterImage(np.full((4, 4, 3), 200, dtype=np.uint8), 1.0)
        assert not tissue_mask(img).data.any()

    def test_mean_cut_is_strict(self):
        img = RasterImage(np.tile(np.array([255, 240, 225], dtype=np.uint8), (2, 2, 1)), 1.0)
        assert not tissue_mask(img).data.any()  # mean exactly 240

    def test_spread_cut_is_strict(self):
        img = RasterImage(np.tile(np.array([220, 215, 210], dtype=np.uint8), (2, 2, 1)), 1.0)
        assert not tissue_mask(img).data.any()  # spread exactly 10
        img = RasterImage(np.tile(np.array([221, 215, 210], dtype=np.uint8), (2, 2, 1)), 1.0)
        assert tissue_mask(img).data.all()

    def test_custom_thresholds(self):
        img = RasterImage(np.full((2, 2, 3), 100, dtype=np.uint8), 1.0)
        assert tissue_mask(img, TissueConfig(white_mean=240.0, min_spread=-1.0)).data.all()


class TestGeoJSON:
    def _sample(self):
        square = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
        return AnnotationSet(
            (
                Polygon("benign", square, case_id="caseA"),
                Polygon("insitu", square + 20.0, case_id="caseA"),
                Polygon("exclude", square + 40.0),
            )
        )

    def test_round_trip(self, tmp_path):
        ann = self._sample()
        path = tmp_path / "ann.geojson"
        save_geojson(ann, path)
        back = load_geojson(path)
        assert len(back.polygons) == 3
        for orig, rt in zip(ann.polygons, back.polygons):
            assert rt.label == orig.label
            assert rt.case_id == orig.case_id
            assert np.allclose(rt.vertices, orig.vertices)

    def test_closing_vertex_dropped(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "properties": {"classification": {"name": "Benign"}},
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": [[[0, 0], [5, 0], [5, 5], [0, 5], [0, 0]]],
                    },
                }
            ],
        }
        path = tmp_path / "ann.geojson"
        path.write_text(__import__("json").dumps(doc))
        back = load_geojson(path)
        assert back.polygons[0].vertices.shape == (4, 2)

    def test_unknown_classification_names_feature(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "properties": {"classification": {"name": "Stroma"}},
                    "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1]]]},
                }
            ],
        }
        path = tmp_path / "ann.geojson"
        path.write_text(__import__("json").dumps(doc))
        with pytest.raises(FormatError, match="feature 0"):
            load_geojson(path)

    def test_non_polygon_geometry_rejected(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "properties": {"classification": {"name": "Benign"}},
                    "geometry": {"type": "Point", "coordinates": [0, 0]},
                }
            ],
        }
        path = tmp_path / "ann.geojson"
        path.write_text(__import__("json").dumps(doc))
        with pytest.raises(FormatError):
            load_geojson(path)

    def test_not_a_feature_collection(self, tmp_path):
        path = tmp_path / "ann.geojson"
        path.write_text('{"type": "Feature"}')
        with pytest.raises(FormatError):
            load_geojson(path)

    def test_unreadable_json(self, tmp_path):
        path = tmp_path / "ann.geojson"
        path.write_text("{broken")
        with pytest.raises(FormatError):
            load_geojson(path)
