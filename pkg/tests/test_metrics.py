import json

import numpy as np
import pytest
from PIL import Image

from bbnet.metrics import (
    THRESHOLDS,
    DegenerateGTError,
    MissingPredictionError,
    centroid_split,
    e_measure,
    evaluate_arrays,
    evaluate_dirs,
    evaluate_pair,
    f_measure,
    mae,
    normalize_pred,
    s_measure,
    write_report,
)
from helpers import random_pair
import oracles


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(42)
    return [random_pair(rng) for _ in range(100)]


def _unit(p):
    return p / 255.0 if p.dtype == np.uint8 else p


class TestOracles:
    def test_mae(self, pairs):
        for p, g in pairs:
            assert abs(mae(p, g) - oracles.mae(_unit(p), g)) < 1e-12

    def test_f_measure(self, pairs):
        for p, g in pairs:
            curve, pr = oracles.f_curve(_unit(p), g)
            out = f_measure(p, g)
            np.testing.assert_allclose(out["curve"], curve, atol=1e-9)
            np.testing.assert_allclose(out["pr_curve"], pr, atol=1e-9)
            assert abs(out["f_max"] - curve.max()) < 1e-9
            assert abs(out["f_mean"] - curve.mean()) < 1e-9

    def test_e_measure(self, pairs):
        for p, g in pairs[:30]:
            curve = oracles.e_curve(_unit(p), g)
            out = e_measure(p, g)
            np.testing.assert_allclose(out["curve"], curve, atol=1e-9)

    def test_s_measure(self, pairs):
        for p, g in pairs:
            assert abs(s_measure(p, g) - oracles.s_measure(_unit(p), g)) < 1e-9


class TestExamples:
    def test_mae_hand_example(self):
        assert mae(np.array([[1.0, 0], [0, 1]]), np.array([[1, 1], [0, 0]], bool)) == 0.5

    def test_mae_half(self, rng):
        g = rng.random((8, 8)) > 0.5
        assert mae(np.full((8, 8), 0.5), g) == 0.5

    def test_mae_symmetric_for_binary(self, rng):
        a, b = rng.random((2, 8, 8)) > 0.5
        assert mae(a.astype(float), b) == mae(b.astype(float), a)

    def test_complement_f_at_threshold_zero(self):
        g = np.zeros((4, 4), bool)
        g[1:3, 1:3] = True
        out = f_measure((~g).astype(float), g)
        # at t = 0 every pixel is foreground: precision 4/16, recall 1
        p, r = 4 / 16, 1.0
        assert out["curve"][0] == pytest.approx(1.3 * p * r / (0.3 * p + r))
        assert out["f_max"] == pytest.approx(out["curve"][0])

    def test_f_empty_gt(self):
        with pytest.raises(DegenerateGTError):
            f_measure(np.zeros((4, 4)), np.zeros((4, 4), bool))

    def test_e_degenerate_rules(self):
        empty = np.zeros((6, 6), bool)
        assert e_measure(np.zeros((6, 6)), empty)["e_max"] == 1.0
        p = np.full((6, 6), 0.4)
        curve = e_measure(p, ~empty)["curve"]
        np.testing.assert_array_equal(curve, (THRESHOLDS <= 0.4).astype(float))

    def test_s_degenerate_rules(self):
        assert s_measure(np.zeros((5, 5)), np.zeros((5, 5), bool)) == 1.0
        assert s_measure(np.full((5, 5), 0.7), np.ones((5, 5), bool)) == pytest.approx(0.7)

    def test_centroid_split(self):
        g = np.zeros((10, 10), bool)
        g[2:5, 6:9] = True  # centroid (3, 7) zero-based
        assert centroid_split(g) == (4, 8)

    def test_normalize(self):
        np.testing.assert_allclose(normalize_pred(np.array([0, 255], np.uint8)), [0, 1])
        np.testing.assert_allclose(normalize_pred(np.array([-1.0, 3.0])), [0, 1])
        np.testing.assert_allclose(normalize_pred(np.array([0.2, 0.4])), [0.2, 0.4])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mae(np.zeros((4, 4)), np.zeros((4, 5), bool))


class TestProperties:
    def test_self_evaluation(self, pairs):
        for _, g in pairs:
            row = evaluate_pair(g.astype(np.uint8) * 255, g)
            assert row["mae"] == 0
            assert row["s_alpha"] == pytest.approx(1, abs=1e-9)
            assert row["f_max"] == 1
            assert row["e_max"] == pytest.approx(1, abs=1e-6)

    def test_max_not_below_mean(self, pairs):
        for p, g in pairs:
            row = evaluate_pair(p, g)
            assert row["f_max"] >= row["f_mean"]
            assert row["e_max"] >= row["e_mean"]

    def test_range(self, pairs):
        for p, g in pairs:
            row = evaluate_pair(p, g)
            for k in ("mae", "s_alpha", "e_max", "e_mean", "f_max", "f_mean"):
                assert 0 <= row[k] <= 1, k

    def test_recall_non_increasing(self, pairs):
        for p, g in pairs:
            recall = f_measure(p, g)["pr_curve"][:, 1]
            assert (np.diff(recall) <= 0).all()


class TestAggregation:
    def test_means_are_hand_averages(self, pairs):
        report = evaluate_arrays((f"im{i:03d}", p, g) for i, (p, g) in enumerate(pairs[:10]))
        for key in ("mae", "s_alpha", "f_max"):
            assert report.means[key] == pytest.approx(np.mean([r[key] for r in report.per_image]))
        assert report.pr_curve.shape == (256, 2)

    def test_empty_gt_counted_and_skipped_for_f(self, pairs):
        p, g = pairs[0]
        report = evaluate_arrays([("a", p, g), ("b", p, np.zeros_like(g))])
        assert report.n_degenerate_gt == 1
        assert report.means["f_max"] == pytest.approx(f_measure(p, g)["f_max"])
        assert report.means["mae"] == pytest.approx((mae(p, g) + mae(p, np.zeros_like(g))) / 2)


def _write_masks(directory, arrays):
    directory.mkdir(parents=True, exist_ok=True)
    for stem, arr in arrays.items():
        Image.fromarray(arr).save(directory / f"{stem}.png")


class TestDirectories:
    def test_self_eval_and_report_files(self, pairs, tmp_path):
        masks = {f"m{i}": (g * 255).astype(np.uint8) for i, (_, g) in enumerate(pairs[:6])}
        _write_masks(tmp_path / "gt", masks)
        report = evaluate_dirs(tmp_path / "gt", tmp_path / "gt")
        paths = write_report(report, tmp_path / "out" / "report.json")
        summary = json.loads(paths["json"].read_text())
        assert summary["mae"] == 0 and summary["f_max"] == 1
        assert summary["s_alpha"] == pytest.approx(1)
        assert {"mae", "s_alpha", "e_mean", "e_max", "f_mean", "f_max"} <= set(summary)
        assert len(paths["json"].parent.joinpath("report_per_image.csv").read_text().splitlines()) == 7
        assert len((tmp_path / "out" / "report_pr.csv").read_text().splitlines()) == 257

    def test_missing_prediction(self, pairs, tmp_path):
        masks = {f"m{i}": (g * 255).astype(np.uint8) for i, (_, g) in enumerate(pairs[:3])}
        _write_masks(tmp_path / "gt", masks)
        _write_masks(tmp_path / "pred", {k: v for k, v in masks.items() if k != "m1"})
        with pytest.raises(MissingPredictionError, match="m1"):
            evaluate_dirs(tmp_path / "pred", tmp_path / "gt")

    def test_prediction_resized_to_gt(self, tmp_path):
        g = np.zeros((32, 32), np.uint8)
        g[8:24, 8:24] = 255
        _write_masks(tmp_path / "gt", {"a": g})
        _write_masks(tmp_path / "pred", {"a": g[::2, ::2].copy()})
        report = evaluate_dirs(tmp_path / "pred", tmp_path / "gt")
        assert report.means["mae"] < 0.05
