"""Batch entry point: data generation, training, attacks, defense, reporting
and gradient self-checks.

Configs come from an optional JSON file (``--config``); explicit flags
override file values.  Exit codes: 0 success, 1 validation error, 2
runtime/numeric error.
"""

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attacks, autodiff, defense, losses, metrics, report, scenegen
from .model import MultiTaskPerceptionModel, forward, init_weights


class ValidationError(Exception):
    pass


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    return json.loads(p.read_text())


def _merged(args, defaults):
    """defaults <- config file <- explicitly passed flags."""
    cfg = dict(defaults)
    cfg.update(_load_config(getattr(args, "config", None)))
    for key in defaults:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    return cfg


# -- gen-data --------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _merged(args, {"n": 600, "seed": 0, "size": 64, "dynamic_fraction": 0.5})
    params = scenegen.SceneParams(size=cfg["size"], dynamic_fraction=cfg["dynamic_fraction"])
    dataset = scenegen.generate_dataset(cfg["n"], params, seed=cfg["seed"])
    for sample in dataset.train + dataset.test:
        scenegen.check_sample(sample)
    out = Path(args.out)
    scenegen.save_dataset(dataset, out)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test samples to {out}")
    return 0


# -- train -----------------------------------------------------------------


def cmd_train(args):
    cfg = _merged(
        args,
        {"epochs": 30, "batch_size": 4, "learning_rate": 0.05, "seed": 0, "max_samples": None},
    )
    dataset = _load_data(args.data)
    samples = dataset.train
    if cfg["max_samples"]:
        samples = samples[: cfg["max_samples"]]
    model = MultiTaskPerceptionModel(
        input_size=dataset.params.size,
        det_grid=dataset.params.size // 8,
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
    )
    model.fit(samples)
    model.save(args.out)
    history_path = Path(args.out).with_suffix(".history.json")
    history_path.write_text(json.dumps(model.history_))
    print(f"trained {cfg['epochs']} epochs on {len(samples)} samples; "
          f"loss {model.history_[0]:.4f} -> {model.history_[-1]:.4f}; saved {args.out}")
    return 0


def _load_data(path):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise ValidationError(f"no dataset manifest under {path}")
    return scenegen.load_dataset(p)


def _load_model(path):
    if not Path(path).exists():
        raise ValidationError(f"checkpoint not found: {path}")
    return MultiTaskPerceptionModel.load(path)


# -- attack ----------------------------------------------------------------


def _conditions(task, mode, objective):
    tasks = [task] if task else list(attacks.TASKS)
    modes = [mode] if mode else list(attacks.MODES)
    objectives = [objective] if objective else list(attacks.OBJECTIVES)
    return [(t, m, o) for t in tasks for m in modes for o in objectives]


def _sample_seed(global_seed, cond_idx, sample_idx):
    return int(np.random.SeedSequence((global_seed, cond_idx, sample_idx)).generate_state(1)[0])


def _run_one(packed):
    model, sample, cfg = packed
    result = attacks.run_attack(sample, model, cfg)
    return result


def cmd_attack(args):
    cfg = _merged(
        args,
        {"steps": 50, "seed": 0, "workers": 1, "max_samples": None, "es_lr": 0.0005},
    )
    model = _load_model(args.checkpoint)
    dataset = _load_data(args.data)
    test = dataset.test
    if cfg["max_samples"]:
        test = test[: cfg["max_samples"]]
    if not test:
        raise ValidationError("dataset has no test samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    conditions = _conditions(args.task, args.mode, args.objective)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("n_samples") != len(test):
            raise ValidationError(
                "results directory was produced with a different sample count; use a fresh --out"
            )
    else:
        manifest = {
            "version": 1,
            "seed": cfg["seed"],
            "steps": cfg["steps"],
            "checkpoint": str(args.checkpoint),
            "data": str(args.data),
            "n_samples": len(test),
            "conditions": {},
        }
    for task, mode, objective in conditions:
        cond_idx = attacks.TASKS.index(task) * 4 + attacks.MODES.index(mode) * 2 + attacks.OBJECTIVES.index(objective)
        acfg_base = dict(task=task, mode=mode, objective=objective, steps=cfg["steps"])
        label = attacks.AttackConfig(**acfg_base).label()
        cond_dir = out / label
        manifest["conditions"][label] = {
            "task": task, "mode": mode, "objective": objective,
            "steps": cfg["steps"], "n_samples": len(test), "complete": False,
            "seeds": [_sample_seed(cfg["seed"], cond_idx, i) for i in range(len(test))],
        }
        manifest_path.write_text(json.dumps(manifest, indent=2))
        jobs = []
        for i, sample in enumerate(test):
            acfg = attacks.AttackConfig(
                **acfg_base,
                seed=manifest["conditions"][label]["seeds"][i],
                es=attacks.ESConfig(lr=cfg["es_lr"]),
            )
            jobs.append((model, sample, acfg))
        if cfg["workers"] > 1:
            with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(job) for job in jobs]
        for i, result in enumerate(results):
            attacks.save_result(result, cond_dir, f"sample_{i:04d}")
        manifest["conditions"][label]["complete"] = True
        manifest_path.write_text(json.dumps(manifest, indent=2))
        print(f"{label}: {len(results)} samples attacked")
    return 0


# -- defend ----------------------------------------------------------------

DEFENSE_FIELDS = ("sample", "step", "distance_rmse", "seg_miou", "motion_miou", "det_map",
                  "attack_loss", "defended")


def cmd_defend(args):
    cfg = _merged(args, {"radius": 1.0})
    model = _load_model(args.checkpoint)
    dataset = _load_data(args.data)
    results_dir = Path(args.results)
    manifest = _read_results_manifest(results_dir)
    dcfg = defense.DefenseConfig(radius=cfg["radius"]).validate()
    test = dataset.test[: manifest["n_samples"]]

    for label, cond in manifest["conditions"].items():
        if not cond["complete"]:
            continue
        cond_dir = results_dir / label
        loaded = []
        for i in range(cond["n_samples"]):
            data = np.load(cond_dir / f"sample_{i:04d}.npz")
            loaded.append(
                attacks.AttackResult(
                    adv_image=data["adv_image"], perturbation=data["perturbation"],
                    curve=[], config=None, clean_distance=data["clean_distance"],
                )
            )
        rows = defense.evaluate_defense(loaded, test[: len(loaded)], model, dcfg)
        with open(cond_dir / "defense.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(DEFENSE_FIELDS))
            writer.writeheader()
            for i, m in enumerate(rows):
                writer.writerow({
                    "sample": i, "step": cond["steps"], "defended": 1, "attack_loss": "",
                    **{k: format(v, ".10g") for k, v in m.as_dict().items()},
                })
        print(f"{label}: defense evaluated on {len(rows)} samples")

    blur_rows = defense.evaluate_blur_only(test, model, dcfg)
    clean_rows = [metrics.evaluate_model(model, s) for s in test]
    for name, rows in (("blur_only.csv", blur_rows), ("clean_metrics.csv", clean_rows)):
        with open(results_dir / name, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["sample"] + list(report.METRIC_FIELDS))
            writer.writeheader()
            for i, m in enumerate(rows):
                writer.writerow({"sample": i, **{k: format(v, ".10g") for k, v in m.as_dict().items()}})
    print(f"blur-only and clean baselines written for {len(test)} samples")
    return 0


def _read_results_manifest(results_dir):
    path = Path(results_dir) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no attack results manifest under {results_dir}")
    return json.loads(path.read_text())


# -- report ----------------------------------------------------------------


def cmd_report(args):
    results_dir = Path(args.results)
    manifest = _read_results_manifest(results_dir)
    out = Path(args.out)
    complete = {k: v for k, v in manifest["conditions"].items() if v["complete"]}
    if not complete:
        raise ValidationError("no completed attack conditions to report on")
    out.mkdir(parents=True, exist_ok=True)

    per_condition = {}
    curves_by_label = {}
    for label, cond in complete.items():
        cond_dir = results_dir / label
        curves = [
            attacks.load_curve(cond_dir / f"sample_{i:04d}_curve.csv")
            for i in range(cond["n_samples"])
        ]
        curves_by_label[label] = curves
        stats = report.aggregate_curves(curves)
        report.write_curve_stats_csv(stats, out / f"curve_{label}.csv")
        if args.plots:
            report.plot_curves(stats, label, out / f"curve_{label}.png")
        entry = {
            "clean": report.mean_metrics([{f: c[0][f] for f in report.METRIC_FIELDS} for c in curves]),
            "attacked": report.mean_metrics([{f: c[-1][f] for f in report.METRIC_FIELDS} for c in curves]),
        }
        defense_csv = cond_dir / "defense.csv"
        if defense_csv.exists():
            with open(defense_csv, newline="") as fh:
                drows = [
                    {f: float(r[f]) for f in report.METRIC_FIELDS} for r in csv.DictReader(fh)
                ]
            entry["defended"] = report.mean_metrics(drows)
        per_condition[(cond["task"], cond["mode"], cond["objective"])] = entry

    report.write_effect_table_csv(report.effect_table(per_condition), out / "effect_table.csv")

    blur_csv = results_dir / "blur_only.csv"
    clean_csv = results_dir / "clean_metrics.csv"
    if blur_csv.exists() and clean_csv.exists():
        blur_means = _csv_means(blur_csv)
        clean_means = _csv_means(clean_csv)
        report.write_blur_table_csv(report.blur_table(clean_means, blur_means), out / "blur_table.csv")

    lines = _qualitative(results_dir, manifest, curves_by_label)
    (out / "qualitative.txt").write_text("\n".join(lines) + "\n")
    print(f"report written to {out}")
    return 0


def _csv_means(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {f: float(np.mean([float(r[f]) for r in rows])) for f in report.METRIC_FIELDS}


def _qualitative(results_dir, manifest, curves_by_label):
    wb_runs, bb_runs = [], []
    for label, cond in manifest["conditions"].items():
        if not cond["complete"] or cond["mode"] != "whitebox":
            continue
        twin = label.replace("_wb_", "_bb_")
        twin_cond = manifest["conditions"].get(twin)
        if not twin_cond or not twin_cond["complete"]:
            continue
        for i in range(min(cond["n_samples"], twin_cond["n_samples"])):
            for runs, lab in ((wb_runs, label), (bb_runs, twin)):
                data = np.load(results_dir / lab / f"sample_{i:04d}.npz")
                curve = curves_by_label[lab][i]
                runs.append({"loss": [r["attack_loss"] for r in curve], "pert_l2": list(data["pert_l2"])})
    per_condition = {}
    for label, cond in manifest["conditions"].items():
        if not cond["complete"]:
            continue
        curves = curves_by_label[label]
        per_condition[(cond["task"], cond["mode"], cond["objective"])] = {
            "clean": report.mean_metrics([{f: c[0][f] for f in report.METRIC_FIELDS} for c in curves]),
            "attacked": report.mean_metrics([{f: c[-1][f] for f in report.METRIC_FIELDS} for c in curves]),
        }
    cross = report.motion_cross_effect(per_condition)
    if wb_runs and bb_runs:
        wb_l2, bb_l2 = report.perturbation_size_comparison(wb_runs, bb_runs)
        return report.qualitative_lines(wb_l2, bb_l2, cross)
    lines = ["perturbation_l2_at_matched_loss_increase: not available (need wb and bb runs)"]
    if cross:
        lines += report.qualitative_lines(0.0, 1.0, cross)[1:]
    return lines


# -- check-grad ------------------------------------------------------------


def cmd_check_grad(args):
    cfg = _merged(args, {"seed": 0, "coords": 2000, "tolerance": 1e-4})
    model_cfg = MultiTaskPerceptionModel(seed=cfg["seed"]).model_config()
    weights = {
        k: autodiff.Tensor(v.data.astype(np.float64))
        for k, v in init_weights(model_cfg).items()
    }
    sample = scenegen.generate_scene(scenegen.SceneParams(size=model_cfg.input_size), cfg["seed"])
    prev = sample.frame_prev.astype(np.float64)

    def f(x):
        out = forward(weights, model_cfg, autodiff.Tensor(prev), x)
        return losses.total_train_loss(out, sample)

    x0 = autodiff.Tensor(sample.frame_curr.astype(np.float64))
    rng = np.random.default_rng(cfg["seed"])
    n = x0.data.size
    coords = None
    if cfg["coords"] and cfg["coords"] < n:
        coords = rng.choice(n, size=cfg["coords"], replace=False)
    err = autodiff.finite_diff_check(f, x0, h=1e-6, coords=coords)
    checked = n if coords is None else len(coords)
    print(f"full-model input-gradient check: max relative error {err:.3e} "
          f"over {checked} coordinates (tolerance {cfg['tolerance']:g})")
    if err >= cfg["tolerance"]:
        print("FAIL: gradient check violated")
        return 2
    print("PASS")
    return 0


# -- entry point -----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mtlattack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--dynamic-fraction", type=float, dest="dynamic_fraction")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the four-task model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--max-samples", type=int, dest="max_samples")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run the attack grid over the test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--task", choices=attacks.TASKS)
    p.add_argument("--mode", choices=attacks.MODES)
    p.add_argument("--objective", choices=attacks.OBJECTIVES)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-samples", type=int, dest="max_samples")
    p.add_argument("--es-lr", type=float, dest="es_lr")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="evaluate the blur defense on attack results")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--config")
    p.add_argument("--radius", type=float)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", help="aggregate curves, effect tables and plots")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check-grad", help="finite-difference gradient self-check")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--coords", type=int)
    p.set_defaults(func=cmd_check_grad)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (autodiff.NonFiniteError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
