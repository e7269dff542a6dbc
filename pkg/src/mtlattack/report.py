"""Curve aggregation, effect tables and plots for the attack/defense protocol.

Outputs mirror the paper-style reporting shapes: per-condition attack curves
with mean +- std bands over the test set (step 0 = clean baseline), a 16-row
attack/defense effect matrix, and a blur-only effect table.
"""

import csv
from pathlib import Path

import numpy as np

from .attacks import CURVE_FIELDS, MODES, OBJECTIVES, TASKS

METRIC_FIELDS = ("distance_rmse", "seg_miou", "motion_miou", "det_map")


def _fmt(v):
    return format(float(v), ".10g")


def aggregate_curves(curves):
    """Elementwise mean/std per step of each metric over per-sample curves."""
    if not curves:
        raise ValueError("no curves to aggregate")
    lengths = {len(c) for c in curves}
    if len(lengths) != 1:
        raise ValueError(f"ragged curve lengths: {sorted(lengths)}")
    steps = [row["step"] for row in curves[0]]
    stats = {"step": steps}
    for field in CURVE_FIELDS[1:]:
        values = np.array([[row[field] for row in curve] for curve in curves], dtype=np.float64)
        stats[field + "_mean"] = values.mean(axis=0)
        stats[field + "_std"] = values.std(axis=0)
    return stats


def write_curve_stats_csv(stats, path):
    fields = ["step"] + [f + suffix for f in CURVE_FIELDS[1:] for suffix in ("_mean", "_std")]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for i, step in enumerate(stats["step"]):
            writer.writerow([step] + [_fmt(stats[f][i]) for f in fields[1:]])


def read_curve_stats_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    stats = {"step": [int(r["step"]) for r in rows]}
    for key in rows[0]:
        if key != "step":
            stats[key] = np.array([float(r[key]) for r in rows])
    return stats


def condition_labels():
    """The 16 attack conditions in fixed row order."""
    labels = []
    for task in TASKS:
        for mode in MODES:
            for objective in OBJECTIVES:
                labels.append((task, mode, objective))
    return labels


def effect_table(per_condition):
    """Table-shaped effect matrix.

    ``per_condition`` maps (task, mode, objective) to a dict with keys
    ``clean``, ``attacked`` and (optionally) ``defended``, each a dict of mean
    metric values.  Distance is reported as absolute RMSE, the other tasks as
    relative percent change versus the clean mean.
    """
    rows = []
    for key in condition_labels():
        if key not in per_condition:
            continue
        entry = per_condition[key]
        clean, attacked = entry["clean"], entry["attacked"]
        defended = entry.get("defended")
        row = {"attacked_task": key[0], "mode": key[1], "objective": key[2]}
        for field in METRIC_FIELDS:
            if field == "distance_rmse":
                row["distance_rmse_attack"] = attacked[field]
                row["distance_rmse_defense"] = defended[field] if defended else float("nan")
            else:
                base = clean[field]
                rel = lambda v: 100.0 * (v - base) / base if base != 0 else float("nan")
                row[field + "_attack_relpct"] = rel(attacked[field])
                row[field + "_defense_relpct"] = rel(defended[field]) if defended else float("nan")
        rows.append(row)
    return rows


EFFECT_FIELDS = (
    "attacked_task",
    "mode",
    "objective",
    "distance_rmse_attack",
    "distance_rmse_defense",
    "seg_miou_attack_relpct",
    "seg_miou_defense_relpct",
    "motion_miou_attack_relpct",
    "motion_miou_defense_relpct",
    "det_map_attack_relpct",
    "det_map_defense_relpct",
)


def write_effect_table_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(EFFECT_FIELDS))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (row[k] if isinstance(row[k], str) else _fmt(row[k])) for k in EFFECT_FIELDS}
            )


BLUR_FIELDS = ("task", "metric", "original", "blurred", "effect_pct")


def blur_table(clean_means, blurred_means):
    """Blur-only effect rows; the distance row has no defined percent change
    because its clean reference value is zero by construction."""
    names = {
        "distance": ("distance_rmse", "rmse"),
        "segmentation": ("seg_miou", "miou"),
        "motion": ("motion_miou", "miou"),
        "detection": ("det_map", "map"),
    }
    rows = []
    for task, (field, metric) in names.items():
        orig, blur = clean_means[field], blurred_means[field]
        effect = "NA" if orig == 0 else _fmt(100.0 * (blur - orig) / orig)
        rows.append(
            {"task": task, "metric": metric, "original": _fmt(orig), "blurred": _fmt(blur), "effect_pct": effect}
        )
    return rows


def write_blur_table_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(BLUR_FIELDS))
        writer.writeheader()
        writer.writerows(rows)


def mean_metrics(rows):
    """Mean of TaskMetrics-like dicts (or TaskMetrics objects)."""
    dicts = [r.as_dict() if hasattr(r, "as_dict") else r for r in rows]
    return {f: float(np.mean([d[f] for d in dicts])) for f in METRIC_FIELDS}


def plot_curves(stats, title, path):
    """2x2 panel of per-task curves with mean +- std bands."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    steps = stats["step"]
    for ax, field in zip(axes.ravel(), METRIC_FIELDS):
        mean = stats[field + "_mean"]
        std = stats[field + "_std"]
        ax.plot(steps, mean, color="tab:blue")
        ax.fill_between(steps, mean - std, mean + std, alpha=0.3, color="tab:blue")
        ax.set_title(field)
        ax.set_xlabel("attack step")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# -- qualitative directional findings (reported, not gated) ----------------


def perturbation_size_comparison(wb_runs, bb_runs):
    """Mean L2 of white-box vs ES perturbations at matched attack-loss increase.

    For each sample the black-box run is truncated at the first step whose
    loss increase reaches the white-box final increase (last step if never).
    ``*_runs`` are lists of dicts with keys ``loss`` (per-step) and ``pert_l2``.
    """
    wb_norms, bb_norms = [], []
    for wb, bb in zip(wb_runs, bb_runs):
        wb_gain = wb["loss"][-1] - wb["loss"][0]
        wb_norms.append(wb["pert_l2"][-1])
        bb_gain = np.asarray(bb["loss"]) - bb["loss"][0]
        hits = np.flatnonzero(bb_gain >= wb_gain)
        idx = int(hits[0]) if len(hits) else len(bb_gain) - 1
        bb_norms.append(bb["pert_l2"][idx])
    return float(np.mean(wb_norms)), float(np.mean(bb_norms))


def motion_cross_effect(per_condition):
    """Mean relative degradation of each task when it is NOT the attacked one."""
    degraded = {t: [] for t in TASKS}
    for (task, _mode, _obj), entry in per_condition.items():
        for other in TASKS:
            if other == task or other == "distance":
                continue
            field = {"segmentation": "seg_miou", "motion": "motion_miou", "detection": "det_map"}[other]
            base = entry["clean"][field]
            if base > 0:
                degraded[other].append(100.0 * (entry["attacked"][field] - base) / base)
    return {t: float(np.mean(v)) for t, v in degraded.items() if v}


def qualitative_lines(wb_l2, bb_l2, cross):
    lines = []
    ok = wb_l2 < bb_l2
    lines.append(
        f"perturbation_l2_at_matched_loss_increase: whitebox={wb_l2:.6g} blackbox={bb_l2:.6g} "
        f"[{'PASS' if ok else 'FAIL'}] (expected whitebox < blackbox)"
    )
    if "motion" in cross:
        others = [v for k, v in cross.items() if k != "motion"]
        ok = bool(others) and all(cross["motion"] >= v for v in others)
        lines.append(
            "motion_least_degraded_when_not_attacked: "
            + " ".join(f"{k}={v:.3f}%" for k, v in sorted(cross.items()))
            + f" [{'PASS' if ok else 'FAIL'}] (expected motion closest to 0)"
        )
    return lines
