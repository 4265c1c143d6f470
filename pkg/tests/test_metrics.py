import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import allpairs_boundary_distances, counting_dice_iou_f1, naive_boundary
from cascadeseg import rng
from cascadeseg.errors import ShapeError
from cascadeseg.metrics import (CSV_COLUMNS, aggregate_reports,
                                avg_boundary_distance, dice_score,
                                evaluate_segmentation, extract_boundary,
                                hausdorff_distance, iou_f1, write_reports_csv)


def _random_mask(key, shape, classes=2):
    u = rng.uniform(key, int(np.prod(shape))).reshape(shape)
    return (u * classes).astype(np.int64)


class TestDice:
    def test_identical(self):
        m = _random_mask(1, (8, 8))
        assert dice_score(m, m, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice_score(a, b, 1) == 0.0

    def test_nested_blocks(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[2:6, 2:6] = 1  # 4x4 block
        pred = np.zeros((8, 8), dtype=int)
        pred[3:5, 3:5] = 1  # 2x2 block inside
        assert dice_score(pred, gt, 1) == pytest.approx(2 * 4 / (4 + 16))

    def test_empty_conventions(self):
        empty = np.zeros((4, 4), dtype=int)
        one = empty.copy()
        one[1, 1] = 1
        assert dice_score(empty, empty, 1) == 1.0
        assert dice_score(one, empty, 1) == 0.0
        assert dice_score(empty, one, 1) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((3, 3), int), np.zeros((4, 4), int), 1)


class TestIouF1:
    def test_identical(self):
        m = _random_mask(2, (6, 6))
        assert iou_f1(m, m, 1) == (1.0, 1.0)

    def test_nested_blocks_iou(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[2:6, 2:6] = 1
        pred = np.zeros((8, 8), dtype=int)
        pred[3:5, 3:5] = 1
        iou, _ = iou_f1(pred, gt, 1)
        assert iou == pytest.approx(4 / 16)

    def test_f1_equals_dice(self):
        for seed in range(10):
            a = _random_mask(seed * 2 + 10, (8, 8))
            b = _random_mask(seed * 2 + 11, (8, 8))
            _, f1 = iou_f1(a, b, 1)
            assert abs(f1 - dice_score(a, b, 1)) <= 1e-12

    def test_matches_counting_oracle(self):
        a = _random_mask(40, (7, 7), classes=3)
        b = _random_mask(41, (7, 7), classes=3)
        for c in range(3):
            dice_ref, iou_ref, f1_ref = counting_dice_iou_f1(a, b, c)
            iou, f1 = iou_f1(a, b, c)
            assert dice_score(a, b, c) == pytest.approx(dice_ref, abs=0)
            assert iou == pytest.approx(iou_ref, abs=0)
            assert f1 == pytest.approx(f1_ref, abs=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_dice_iou_relation(self, seed):
        a = _random_mask(seed * 2 + 1000, (6, 6))
        b = _random_mask(seed * 2 + 1001, (6, 6))
        iou, _ = iou_f1(a, b, 1)
        assert dice_score(a, b, 1) == pytest.approx(2 * iou / (1 + iou), abs=1e-12)


class TestBoundary:
    def test_full_3x3(self):
        mask = np.ones((3, 3), dtype=bool)
        boundary = extract_boundary(mask)
        assert boundary.sum() == 8
        assert not boundary[1, 1]

    def test_single_cell(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, 2] = True
        assert np.array_equal(extract_boundary(mask), mask)

    def test_disk_matches_naive(self):
        yy, xx = np.indices((5, 5))
        disk = (yy - 2) ** 2 + (xx - 2) ** 2 <= 4
        assert np.array_equal(extract_boundary(disk), naive_boundary(disk))

    def test_3d_matches_naive(self):
        mask = _random_mask(7, (4, 4, 4)).astype(bool)
        assert np.array_equal(extract_boundary(mask), naive_boundary(mask))


class TestDistances:
    def test_identical_masks(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:5, 2:5] = True
        assert avg_boundary_distance(m, m) == 0.0
        assert hausdorff_distance(m, m) == 0.0

    def test_two_pixels_three_apart(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[4, 1] = True
        b[4, 4] = True
        assert avg_boundary_distance(a, b, 1.0) == pytest.approx(3.0)
        assert hausdorff_distance(a, b, 1.0) == pytest.approx(3.0)

    def test_spacing_scales_distances(self):
        a = np.zeros((6, 6), dtype=bool)
        b = np.zeros((6, 6), dtype=bool)
        a[2, 1] = True
        b[2, 3] = True
        assert avg_boundary_distance(a, b, (1.0, 2.0)) == pytest.approx(4.0)
        assert hausdorff_distance(a, b, (2.0, 1.0)) == pytest.approx(2.0)

    def test_random_blobs_match_allpairs(self):
        for seed in range(8):
            a = _random_mask(seed * 2 + 60, (16, 16)).astype(bool)
            b = _random_mask(seed * 2 + 61, (16, 16)).astype(bool)
            if not a.any() or not b.any():
                continue
            adb_ref, hd_ref = allpairs_boundary_distances(a, b, (1.0, 1.0))
            assert abs(avg_boundary_distance(a, b) - adb_ref) <= 1e-9
            assert abs(hausdorff_distance(a, b) - hd_ref) <= 1e-9

    def test_3d_matches_allpairs(self):
        a = _random_mask(80, (6, 6, 6)).astype(bool)
        b = _random_mask(81, (6, 6, 6)).astype(bool)
        spacing = (1.0, 0.5, 2.0)
        adb_ref, hd_ref = allpairs_boundary_distances(a, b, spacing)
        assert abs(avg_boundary_distance(a, b, spacing) - adb_ref) <= 1e-9
        assert abs(hausdorff_distance(a, b, spacing) - hd_ref) <= 1e-9

    def test_adb_le_hd_and_symmetry(self):
        for seed in range(6):
            a = _random_mask(seed + 100, (12, 12)).astype(bool)
            b = _random_mask(seed + 200, (12, 12)).astype(bool)
            if not a.any() or not b.any():
                continue
            adb = avg_boundary_distance(a, b)
            hd = hausdorff_distance(a, b)
            assert adb <= hd + 1e-12
            assert adb == pytest.approx(avg_boundary_distance(b, a), abs=1e-12)
            assert hd == pytest.approx(hausdorff_distance(b, a), abs=1e-12)

    def test_empty_sentinel(self):
        empty = np.zeros((5, 5), dtype=bool)
        full = ~empty
        assert np.isnan(avg_boundary_distance(empty, full))
        assert np.isnan(hausdorff_distance(full, empty))


class TestReports:
    def test_self_comparison_report(self):
        gt = _random_mask(300, (16, 16))
        report = evaluate_segmentation(gt, gt, 1.0, 2, model="self")
        for entry in report.classes:
            assert entry.dice == 1.0
            assert entry.adb_mm == 0.0
            assert entry.hd_mm == 0.0
            assert entry.iou == 1.0 and entry.f1 == 1.0
            assert entry.flags == ""

    def test_empty_class_flagged(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[2:5, 2:5] = 1
        pred = np.zeros((8, 8), dtype=int)  # class 1 never predicted
        report = evaluate_segmentation(pred, gt, 1.0, 2)
        entry = report.classes[1]
        assert "empty_pred" in entry.flags and "distance_undefined" in entry.flags
        assert np.isnan(entry.adb_mm)

    def test_3d_omits_overlap_metrics(self):
        gt = _random_mask(301, (4, 4, 4))
        report = evaluate_segmentation(gt, gt, 1.0, 2)
        assert report.classes[0].iou is None
        assert report.classes[0].f1 is None

    def test_aggregate_excludes_undefined(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[2:5, 2:5] = 1
        good = evaluate_segmentation(gt, gt, 1.0, 2, model="m")
        bad = evaluate_segmentation(np.zeros((8, 8), dtype=int), gt, 1.0, 2,
                                    model="m")
        agg = aggregate_reports([good, bad], model="m")
        entry = agg.classes[1]
        assert entry.dice == pytest.approx(0.5)
        assert entry.adb_mm == 0.0  # the undefined sample is excluded
        assert "distance_excluded:1/2" in entry.flags

    def test_csv_layout(self, tmp_path):
        gt = _random_mask(302, (8, 8))
        report = evaluate_segmentation(gt, gt, 1.0, 2, model="demo")
        path = tmp_path / "metrics.csv"
        write_reports_csv(path, [report])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + 2
        assert lines[1].startswith("demo,0,")
