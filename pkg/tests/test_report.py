import csv

import numpy as np
import pytest

from mtlattack.attacks import CURVE_FIELDS
from mtlattack.report import (
    BLUR_FIELDS,
    EFFECT_FIELDS,
    METRIC_FIELDS,
    aggregate_curves,
    blur_table,
    condition_labels,
    effect_table,
    mean_metrics,
    motion_cross_effect,
    perturbation_size_comparison,
    plot_curves,
    qualitative_lines,
    read_curve_stats_csv,
    write_blur_table_csv,
    write_curve_stats_csv,
    write_effect_table_csv,
)


def _curve(vals):
    return [
        {"step": i, "distance_rmse": v, "seg_miou": v, "motion_miou": v,
         "det_map": v, "attack_loss": v}
        for i, v in enumerate(vals)
    ]


def _means(d=0.0, s=0.5, m=0.5, a=0.5):
    return {"distance_rmse": d, "seg_miou": s, "motion_miou": m, "det_map": a}


def test_aggregate_curves_mean_std():
    stats = aggregate_curves([_curve([0.0, 1.0]), _curve([0.0, 3.0])])
    assert stats["step"] == [0, 1]
    np.testing.assert_allclose(stats["seg_miou_mean"], [0.0, 2.0])
    np.testing.assert_allclose(stats["seg_miou_std"], [0.0, 1.0])


def test_aggregate_curves_ragged_rejected():
    with pytest.raises(ValueError):
        aggregate_curves([_curve([0.0]), _curve([0.0, 1.0])])
    with pytest.raises(ValueError):
        aggregate_curves([])


def test_curve_stats_csv_roundtrip(tmp_path):
    stats = aggregate_curves([_curve([0.0, 1.0, 0.5])])
    path = tmp_path / "curve.csv"
    write_curve_stats_csv(stats, path)
    loaded = read_curve_stats_csv(path)
    assert loaded["step"] == [0, 1, 2]
    for field in CURVE_FIELDS[1:]:
        np.testing.assert_allclose(loaded[field + "_mean"], stats[field + "_mean"])
        np.testing.assert_allclose(loaded[field + "_std"], stats[field + "_std"])


def test_condition_labels_complete_grid():
    labels = condition_labels()
    assert len(labels) == 16
    assert len(set(labels)) == 16
    assert labels[0] == ("distance", "whitebox", "untargeted")


def test_effect_table_full_grid_shape():
    per_condition = {
        key: {"clean": _means(), "attacked": _means(d=0.1, s=0.4, m=0.45, a=0.3),
              "defended": _means(d=0.05, s=0.45, m=0.48, a=0.4)}
        for key in condition_labels()
    }
    rows = effect_table(per_condition)
    assert len(rows) == 16
    assert set(rows[0]) == set(EFFECT_FIELDS)
    # distance absolute, others relative percent
    assert rows[0]["distance_rmse_attack"] == pytest.approx(0.1)
    assert rows[0]["seg_miou_attack_relpct"] == pytest.approx(-20.0)
    assert rows[0]["det_map_defense_relpct"] == pytest.approx(-20.0)


def test_effect_table_missing_defense_is_nan():
    key = ("distance", "whitebox", "untargeted")
    rows = effect_table({key: {"clean": _means(), "attacked": _means(d=0.1)}})
    assert np.isnan(rows[0]["distance_rmse_defense"])


def test_effect_table_csv_schema(tmp_path):
    per_condition = {
        key: {"clean": _means(), "attacked": _means(d=0.1, s=0.4, m=0.45, a=0.3)}
        for key in condition_labels()
    }
    path = tmp_path / "effect.csv"
    write_effect_table_csv(effect_table(per_condition), path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16
    assert tuple(rows[0]) == EFFECT_FIELDS


def test_blur_table_shape_and_na(tmp_path):
    rows = blur_table(_means(), _means(d=0.02, s=0.45, m=0.48, a=0.4))
    assert [r["task"] for r in rows] == ["distance", "segmentation", "motion", "detection"]
    assert rows[0]["effect_pct"] == "NA"  # clean rmse is 0 by construction
    assert float(rows[1]["effect_pct"]) == pytest.approx(-10.0)
    path = tmp_path / "blur.csv"
    write_blur_table_csv(rows, path)
    with open(path, newline="") as fh:
        loaded = list(csv.DictReader(fh))
    assert tuple(loaded[0]) == BLUR_FIELDS
    assert len(loaded) == 4


def test_mean_metrics_averages_dicts():
    out = mean_metrics([_means(d=0.0), _means(d=0.2)])
    assert out["distance_rmse"] == pytest.approx(0.1)
    assert set(out) == set(METRIC_FIELDS)


def test_plot_curves_writes_png(tmp_path):
    stats = aggregate_curves([_curve([0.0, 1.0]), _curve([0.0, 0.5])])
    path = tmp_path / "curve.png"
    plot_curves(stats, "demo", path)
    assert path.exists() and path.stat().st_size > 0


def test_perturbation_size_comparison_truncates_bb():
    wb = [{"loss": [0.0, 1.0], "pert_l2": [0.0, 0.3]}]
    bb = [{"loss": [0.0, 0.4, 1.2, 2.0], "pert_l2": [0.0, 1.0, 2.0, 3.0]}]
    wb_l2, bb_l2 = perturbation_size_comparison(wb, bb)
    assert wb_l2 == pytest.approx(0.3)
    assert bb_l2 == pytest.approx(2.0)  # first step with gain >= 1.0


def test_perturbation_size_comparison_bb_never_matches():
    wb = [{"loss": [0.0, 5.0], "pert_l2": [0.0, 0.3]}]
    bb = [{"loss": [0.0, 0.1], "pert_l2": [0.0, 1.0]}]
    _, bb_l2 = perturbation_size_comparison(wb, bb)
    assert bb_l2 == pytest.approx(1.0)  # last step when never matched


def test_motion_cross_effect_excludes_attacked_and_distance():
    per_condition = {
        ("segmentation", "whitebox", "untargeted"): {
            "clean": _means(), "attacked": _means(s=0.1, m=0.45, a=0.4),
        }
    }
    cross = motion_cross_effect(per_condition)
    assert "segmentation" not in cross  # it was the attacked task
    assert cross["motion"] == pytest.approx(-10.0)
    assert cross["detection"] == pytest.approx(-20.0)


def test_qualitative_lines_annotations():
    lines = qualitative_lines(0.5, 2.0, {"motion": -1.0, "segmentation": -10.0, "detection": -5.0})
    assert "[PASS]" in lines[0]
    assert "[PASS]" in lines[1]
    lines = qualitative_lines(3.0, 2.0, {"motion": -9.0, "segmentation": -1.0, "detection": -5.0})
    assert "[FAIL]" in lines[0]
    assert "[FAIL]" in lines[1]
