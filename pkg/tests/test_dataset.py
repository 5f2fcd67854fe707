"""Ground-truth composition rules, the anchor grid, patch cutting with
residual re-registration, augmentation, sampling, and the patch store."""

import zlib

import numpy as np
import pytest

from restain.dataset import (
    AugmentationConfig,
    GroundTruthConfig,
    PatchGridConfig,
    PatchOrigin,
    PatchRecord,
    assign_set,
    augment,
    balanced_sampler,
    build_ground_truth,
    cut_patches,
    patch_grid,
    read_patch_store,
    write_patch_store,
)
from restain.errors import ConfigError, FormatError
from restain.raster import BinaryMask, LabelMask, RasterImage
from restain.register import ShiftVector

from noisefield import smooth_noise


def bmask(data):
    return BinaryMask(np.asarray(data, dtype=bool), 1.0)


class TestBuildGroundTruth:
    def test_class_assignment(self):
        dab = bmask([[1, 1, 1, 0]])
        benign = bmask([[1, 0, 0, 1]])
        insitu = bmask([[0, 1, 0, 0]])
        gt, flagged = build_ground_truth(dab, benign, insitu)
        assert list(gt.data[0]) == [2, 3, 1, 0]
        assert flagged is False

    def test_insitu_beats_benign_on_overlap(self):
        dab = bmask([[1]])
        both = bmask([[1]])
        gt, _ = build_ground_truth(dab, both, both)
        assert gt.data[0, 0] == 3

    def test_benign_wins_when_precedence_disabled(self):
        dab = bmask([[1]])
        both = bmask([[1]])
        gt, _ = build_ground_truth(dab, both, both, cfg=GroundTruthConfig(insitu_precedence=False))
        assert gt.data[0, 0] == 2

    def test_annotations_without_dab_stay_background(self):
        dab = bmask([[0, 0]])
        benign = bmask([[1, 0]])
        insitu = bmask([[0, 1]])
        gt, _ = build_ground_truth(dab, benign, insitu)
        assert list(gt.data[0]) == [0, 0]

    def test_exclusion_forces_background_and_flags(self):
        dab = bmask([[1, 1]])
        empty = bmask([[0, 0]])
        excl = bmask([[1, 0]])
        gt, flagged = build_ground_truth(dab, empty, empty, excl)
        assert list(gt.data[0]) == [0, 1]
        assert flagged is True

    def test_empty_exclusion_does_not_flag(self):
        dab = bmask([[1]])
        empty = bmask([[0]])
        gt, flagged = build_ground_truth(dab, empty, empty, bmask([[0]]))
        assert flagged is False
        assert gt.data[0, 0] == 1

    def test_partition_property(self):
        rng = np.random.default_rng(50)
        dab = bmask(rng.random((32, 32)) < 0.5)
        benign = bmask(rng.random((32, 32)) < 0.3)
        insitu = bmask(rng.random((32, 32)) < 0.3)
        gt, _ = build_ground_truth(dab, benign, insitu)
        # foreground exactly where DAB is positive
        assert np.array_equal(gt.data > 0, dab.data)
        # class 3 exactly dab & insitu (precedence), class 2 dab & benign & ~insitu
        assert np.array_equal(gt.data == 3, dab.data & insitu.data)
        assert np.array_equal(gt.data == 2, dab.data & benign.data & ~insitu.data)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_ground_truth(bmask([[1]]), bmask([[1, 0]]), bmask([[1]]))


class TestPatchGrid:
    def test_anchors_2048_overlap_25(self):
        anchors = patch_grid(2048, 2048, PatchGridConfig(1024, 0.25, 0.0))
        xs = sorted({x for x, _ in anchors})
        ys = sorted({y for _, y in anchors})
        assert xs == [0, 768, 1024]
        assert ys == [0, 768, 1024]
        assert len(anchors) == 9

    def test_anchors_2048_overlap_30(self):
        anchors = patch_grid(2048, 2048, PatchGridConfig(1024, 0.30, 0.0))
        xs = sorted({x for x, _ in anchors})
        assert xs == [0, 717, 1024]
        assert len(anchors) == 9

    def test_small_raster_single_anchor(self):
        assert patch_grid(512, 300, PatchGridConfig(1024, 0.25, 0.0)) == [(0, 0)]

    def test_exact_fit_single_anchor(self):
        assert patch_grid(1024, 1024, PatchGridConfig(1024, 0.25, 0.0)) == [(0, 0)]

    def test_one_pixel_overflow(self):
        anchors = patch_grid(1025, 1024, PatchGridConfig(1024, 0.25, 0.0))
        assert sorted({x for x, _ in anchors}) == [0, 1]

    def test_full_coverage_pixel_count(self):
        for w, h, size, overlap in [
            (2048, 2048, 1024, 0.25),
            (2048, 2048, 1024, 0.30),
            (1500, 900, 512, 0.25),
            (777, 1301, 256, 0.10),
            (100, 100, 64, 0.5),
        ]:
            cover = np.zeros((h, w), dtype=np.int32)
            for x, y in patch_grid(w, h, PatchGridConfig(size, overlap, 0.0)):
                assert 0 <= x <= max(w - size, 0)
                assert 0 <= y <= max(h - size, 0)
                cover[y : y + size, x : x + size] += 1
            assert (cover >= 1).all(), f"gap in {w}x{h} size {size} overlap {overlap}"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PatchGridConfig(0, 0.25, 0.25)
        with pytest.raises(ValueError):
            PatchGridConfig(1024, 1.0, 0.25)
        with pytest.raises(ValueError):
            PatchGridConfig(1024, 0.25, 1.5)


class TestAssignSet:
    def test_insitu_wins(self):
        gt = LabelMask(np.array([[3, 2], [1, 0]], dtype=np.uint8), 1.0)
        assert assign_set(gt) == "insitu"

    def test_benign_next(self):
        gt = LabelMask(np.array([[2, 1], [1, 0]], dtype=np.uint8), 1.0)
        assert assign_set(gt) == "benign"

    def test_invasive_default(self):
        gt = LabelMask(np.array([[1, 0], [0, 0]], dtype=np.uint8), 1.0)
        assert assign_set(gt) == "invasive"
        gt = LabelMask(np.zeros((2, 2), dtype=np.uint8), 1.0)
        assert assign_set(gt) == "invasive"


def tissue_image(height, width, fraction_rows):
    """White image with the top rows painted pink tissue."""
    data = np.full((height, width, 3), 255, dtype=np.uint8)
    data[:fraction_rows] = (230, 180, 200)
    return RasterImage(data, 1.0)


class TestCutPatches:
    def _white(self, h, w):
        return RasterImage(np.full((h, w, 3), 255, dtype=np.uint8), 1.0)

    def test_tissue_filter_drops_below_quarter(self):
        cfg = PatchGridConfig(64, 0.25, 0.25)
        gt = LabelMask(np.zeros((64, 64), dtype=np.uint8), 1.0)
        # 15 of 64 rows is 23.4% tissue
        recs = cut_patches(tissue_image(64, 64, 15), self._white(64, 64), gt, cfg)
        assert recs == []
        # 17 rows is 26.6%
        recs = cut_patches(tissue_image(64, 64, 17), self._white(64, 64), gt, cfg)
        assert len(recs) == 1
        assert recs[0].tissue_fraction == pytest.approx(17 / 64)

    def test_tissue_filter_keeps_exact_quarter(self):
        cfg = PatchGridConfig(64, 0.25, 0.25)
        gt = LabelMask(np.zeros((64, 64), dtype=np.uint8), 1.0)
        recs = cut_patches(tissue_image(64, 64, 16), self._white(64, 64), gt, cfg)
        assert len(recs) == 1

    def test_origin_records_anchor(self):
        cfg = PatchGridConfig(64, 0.25, 0.0)
        gt = LabelMask(np.zeros((96, 96), dtype=np.uint8), 1.0)
        recs = cut_patches(
            tissue_image(96, 96, 96), self._white(96, 96), gt, cfg,
            slide_id="s", core_id=3, level_factor=2,
        )
        anchors = {(r.origin.x, r.origin.y) for r in recs}
        assert anchors == {(0, 0), (32, 0), (0, 32), (32, 32)}
        assert all(r.origin.slide == "s" and r.origin.core == 3 for r in recs)
        assert all(r.origin.level_factor == 2 for r in recs)

    def test_edge_patches_padded_to_size(self):
        cfg = PatchGridConfig(64, 0.25, 0.0)
        gt = LabelMask(np.zeros((80, 80), dtype=np.uint8), 1.0)
        recs = cut_patches(tissue_image(80, 80, 80), self._white(80, 80), gt, cfg)
        for rec in recs:
            assert rec.he.dims == (64, 64)
            assert rec.gt.dims == (64, 64)

    def test_residual_shift_corrects_ground_truth(self):
        # CK content and its ground truth sit 4 px right of the HE frame;
        # per-patch correlation must pull the labels back into register
        rng = np.random.default_rng(51)
        field = smooth_noise(rng, 128, 128).astype(np.float64) / 255.0
        scale = 0.7 + 0.3 * field
        pink = np.array([230, 180, 200], dtype=np.float64)
        he_data = np.floor(pink[None, None, :] * scale[:, :, None] + 0.5).astype(np.uint8)

        truth = np.zeros((128, 128), dtype=np.uint8)
        yy, xx = np.mgrid[0:128, 0:128]
        truth[(xx - 64) ** 2 + (yy - 64) ** 2 <= 30**2] = 1

        ck_data = np.roll(he_data, 4, axis=1)
        gt_shifted = np.roll(truth, 4, axis=1)

        cfg = PatchGridConfig(128, 0.25, 0.25)
        recs = cut_patches(
            RasterImage(he_data, 1.0),
            RasterImage(ck_data, 1.0),
            LabelMask(gt_shifted, 1.0),
            cfg,
            reg_factor=4,
        )
        assert len(recs) == 1
        rec = recs[0]
        assert (rec.shift_applied.dx, rec.shift_applied.dy) == (4, 0)
        assert np.array_equal(rec.gt.data, truth)

    def test_zero_residual_keeps_gt_untouched(self):
        rng = np.random.default_rng(52)
        field = smooth_noise(rng, 64, 64).astype(np.float64) / 255.0
        pink = np.array([230, 180, 200], dtype=np.float64)
        he_data = np.floor(pink[None, None, :] * (0.7 + 0.3 * field)[:, :, None] + 0.5).astype(np.uint8)
        truth = np.zeros((64, 64), dtype=np.uint8)
        truth[20:40, 20:40] = 2
        he = RasterImage(he_data, 1.0)
        recs = cut_patches(he, he, LabelMask(truth, 1.0), PatchGridConfig(64, 0.25, 0.25))
        assert len(recs) == 1
        assert (recs[0].shift_applied.dx, recs[0].shift_applied.dy) == (0, 0)
        assert np.array_equal(recs[0].gt.data, truth)
        assert recs[0].set_tag == "benign"

    def test_dimension_mismatch(self):
        gt = LabelMask(np.zeros((32, 32), dtype=np.uint8), 1.0)
        with pytest.raises(ValueError):
            cut_patches(self._white(32, 32), self._white(32, 16), gt, PatchGridConfig(32, 0.25, 0.0))


class TestSeedWords:
    def test_words_layout(self):
        origin = PatchOrigin("slideA", 4, 96, 128, 2)
        words = origin.seed_words(17)
        assert words == [17, zlib.crc32(b"slideA"), 4, 96, 128, 2]

    def test_distinct_origins_distinct_words(self):
        a = PatchOrigin("s", 0, 0, 64, 1).seed_words(0)
        b = PatchOrigin("s", 0, 64, 0, 1).seed_words(0)
        assert a != b


def make_record(seed=60, size=64, tag="invasive"):
    rng = np.random.default_rng(seed)
    he = RasterImage(rng.integers(0, 256, (size, size, 3), dtype=np.uint8), 1.0)
    gt_data = np.zeros((size, size), dtype=np.uint8)
    gt_data[8 : size // 2, 8 : size // 2] = 1
    gt = LabelMask(gt_data, 1.0)
    return PatchRecord(
        he=he, gt=gt, set_tag=tag,
        origin=PatchOrigin("slide", 0, int(seed) % 1024, 0, 1),
        shift_applied=ShiftVector(0, 0), tissue_fraction=1.0,
    )


def probe_config(**kwargs):
    base = dict(
        p_flip=0.0, p_rot90=0.0, p_brightness=0.0, p_hue=0.0,
        p_saturation=0.0, p_shift=0.0, p_blur=0.0,
    )
    base.update(kwargs)
    return AugmentationConfig(**base)


class TestAugment:
    def test_deterministic_per_seed(self):
        rec = make_record()
        cfg = AugmentationConfig()
        a = augment(rec, cfg, seed=5)
        b = augment(rec, cfg, seed=5)
        assert np.array_equal(a.he.data, b.he.data)
        assert np.array_equal(a.gt.data, b.gt.data)

    def test_different_seeds_differ(self):
        rec = make_record()
        cfg = AugmentationConfig()
        a = augment(rec, cfg, seed=5)
        b = augment(rec, cfg, seed=6)
        assert not np.array_equal(a.he.data, b.he.data)

    def test_all_disabled_is_identity(self):
        rec = make_record()
        out = augment(rec, probe_config(), seed=0)
        assert np.array_equal(out.he.data, rec.he.data)
        assert np.array_equal(out.gt.data, rec.gt.data)

    def test_flip_applies_same_axis_to_labels(self):
        rec = make_record()
        out = augment(rec, probe_config(p_flip=1.0), seed=1)
        matched = False
        for axis in (0, 1):
            if np.array_equal(out.he.data, np.flip(rec.he.data, axis=axis)):
                assert np.array_equal(out.gt.data, np.flip(rec.gt.data, axis=axis))
                matched = True
        assert matched

    def test_rot90_applies_same_k_to_labels(self):
        rec = make_record()
        out = augment(rec, probe_config(p_rot90=1.0), seed=2)
        matched = False
        for k in (1, 2, 3):
            if np.array_equal(out.he.data, np.rot90(rec.he.data, k=k)):
                assert np.array_equal(out.gt.data, np.rot90(rec.gt.data, k=k))
                matched = True
        assert matched

    def test_brightness_leaves_labels(self):
        rec = make_record()
        out = augment(rec, probe_config(p_brightness=1.0), seed=3)
        assert np.array_equal(out.gt.data, rec.gt.data)
        assert not np.array_equal(out.he.data, rec.he.data)
        # scale factor stays within the configured 20% band
        bright = out.he.data[rec.he.data > 10].astype(np.float64)
        orig = rec.he.data[rec.he.data > 10].astype(np.float64)
        ratio = np.median(bright / orig)
        assert 0.79 < ratio < 1.21

    def test_shift_moves_image_and_labels_together(self):
        rec = make_record()
        out = augment(rec, probe_config(p_shift=1.0), seed=4)
        # re-derive the drawn vector: six enable draws come first
        rng = np.random.default_rng(rec.origin.seed_words(4))
        for _ in range(6):
            rng.random()
        dx = int(rng.integers(-32, 33))
        dy = int(rng.integers(-32, 33))
        from restain.register import apply_shift

        assert np.array_equal(out.he.data, apply_shift(rec.he, ShiftVector(dx, dy)).data)
        assert np.array_equal(out.gt.data, apply_shift(rec.gt, ShiftVector(dx, dy)).data)

    def test_blur_leaves_labels_and_smooths(self):
        rec = make_record()
        out = augment(rec, probe_config(p_blur=1.0), seed=5)
        assert np.array_equal(out.gt.data, rec.gt.data)
        assert out.he.data.astype(np.float64).std() < rec.he.data.astype(np.float64).std()

    def test_hue_and_saturation_change_pixels_not_labels(self):
        rec = make_record()
        for probe in (probe_config(p_hue=1.0), probe_config(p_saturation=1.0)):
            out = augment(rec, probe, seed=6)
            assert np.array_equal(out.gt.data, rec.gt.data)
            assert not np.array_equal(out.he.data, rec.he.data)

    def test_enable_rates_over_1000_records(self):
        # count activations by differencing against the untouched record
        flips = 0
        blurs = 0
        flip_cfg = probe_config(p_flip=0.5)
        blur_cfg = probe_config(p_blur=0.1)
        for i in range(1000):
            rec = make_record(seed=i, size=16)
            if not np.array_equal(augment(rec, flip_cfg, seed=99).he.data, rec.he.data):
                flips += 1
            if not np.array_equal(augment(rec, blur_cfg, seed=99).he.data, rec.he.data):
                blurs += 1
        assert abs(flips / 1000 - 0.5) <= 0.04
        assert abs(blurs / 1000 - 0.1) <= 0.03

    def test_probability_validation_lists_offenders(self):
        with pytest.raises(ValueError, match="p_blur"):
            AugmentationConfig(p_blur=1.5)


class TestBalancedSampler:
    def _sets(self):
        return {
            "insitu": [make_record(seed=1, tag="insitu")],
            "benign": [make_record(seed=i, tag="benign") for i in range(2, 12)],
            "invasive": [make_record(seed=i, tag="invasive") for i in range(20, 120)],
        }

    def test_uniform_over_sets(self):
        sampler = balanced_sampler(self._sets(), seed=7)
        counts = {"insitu": 0, "benign": 0, "invasive": 0}
        for _ in range(3000):
            counts[next(sampler).set_tag] += 1
        for tag, n in counts.items():
            assert abs(n / 3000 - 1 / 3) < 0.05, f"{tag} drawn {n}"

    def test_deterministic_stream(self):
        a = balanced_sampler(self._sets(), seed=8)
        b = balanced_sampler(self._sets(), seed=8)
        for _ in range(50):
            ra, rb = next(a), next(b)
            assert ra.origin == rb.origin and ra.set_tag == rb.set_tag

    def test_empty_set_is_named(self):
        sets = self._sets()
        sets["benign"] = []
        with pytest.raises(ConfigError, match="benign"):
            balanced_sampler(sets, seed=0)


class TestPatchStore:
    def test_round_trip(self, tmp_path):
        records = [make_record(seed=i, tag=tag) for i, tag in enumerate(["insitu", "benign", "invasive"])]
        write_patch_store(records, tmp_path / "store")
        back = read_patch_store(tmp_path / "store")
        assert len(back) == 3
        for orig, rt in zip(records, back):
            assert np.array_equal(orig.he.data, rt.he.data)
            assert np.array_equal(orig.gt.data, rt.gt.data)
            assert rt.set_tag == orig.set_tag
            assert rt.origin == orig.origin
            assert rt.he.mpp == pytest.approx(orig.he.mpp)

    def test_empty_store_round_trip(self, tmp_path):
        write_patch_store([], tmp_path / "store")
        assert read_patch_store(tmp_path / "store") == []

    def test_missing_index(self, tmp_path):
        (tmp_path / "store").mkdir()
        with pytest.raises(FormatError):
            read_patch_store(tmp_path / "store")

    def test_missing_image_named(self, tmp_path):
        records = [make_record()]
        write_patch_store(records, tmp_path / "store")
        (tmp_path / "store" / "he_0.png").unlink()
        with pytest.raises(FormatError, match="he_0.png"):
            read_patch_store(tmp_path / "store")

    def test_malformed_index_row(self, tmp_path):
        root = tmp_path / "store"
        root.mkdir()
        (root / "index.jsonl").write_text("{broken\n")
        with pytest.raises(FormatError):
            read_patch_store(root)
