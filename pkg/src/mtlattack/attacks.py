"""White-box iterative-gradient and black-box evolution-strategies attacks.

One attack run perturbs only the current frame of a sample, records the
metrics of all four tasks at every step (step 0 = clean), and returns the
final adversarial image plus the per-step curve.
"""

import csv
import dataclasses
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from . import scenegen as sg
from .autodiff import Tensor

TASKS = ("distance", "segmentation", "motion", "detection")
MODES = ("whitebox", "blackbox")
OBJECTIVES = ("untargeted", "targeted")

NEAR_THRESHOLD = 0.3  # clean distance below this counts as "near" for targeting

CURVE_FIELDS = ("step", "distance_rmse", "seg_miou", "motion_miou", "det_map", "attack_loss")


@dataclasses.dataclass
class ESConfig:
    population: int = 25
    sigma: float = 0.05
    mu: float = 0.0
    lr: float = 0.0005
    nes_mode: bool = False
    antithetic: bool = False

    def validate(self):
        if self.population < 2 or self.sigma <= 0:
            raise ValueError("ES needs population >= 2 and sigma > 0")
        if not (0.0001 <= self.lr <= 0.001):
            raise ValueError("ES learning rate must lie in [0.0001, 0.001]")
        return self


@dataclasses.dataclass
class AttackConfig:
    task: str = "segmentation"
    mode: str = "whitebox"
    objective: str = "untargeted"
    steps: int = 50
    alpha: float = 0.00015
    es: ESConfig = dataclasses.field(default_factory=ESConfig)
    seed: int = 0
    linf_budget: float = None
    init_amplitude: float = 0.01  # white-box random start, escapes the zero
    # gradient at the loss minimum of the clean reference

    def validate(self):
        if self.task not in TASKS or self.mode not in MODES or self.objective not in OBJECTIVES:
            raise ValueError(f"invalid attack condition {self.task}/{self.mode}/{self.objective}")
        if self.steps <= 0 or self.alpha <= 0:
            raise ValueError("steps and alpha must be positive")
        self.es.validate()
        return self

    def label(self):
        short = {"whitebox": "wb", "blackbox": "bb", "untargeted": "untarget", "targeted": "target"}
        return f"{self.task}_{short[self.mode]}_{short[self.objective]}"


@dataclasses.dataclass
class TargetSpec:
    """Per-task attack reference, derived from clean predictions only."""

    task: str
    distance_map: np.ndarray = None
    labels: np.ndarray = None  # segmentation / motion label map
    objectness: np.ndarray = None


@dataclasses.dataclass
class AttackResult:
    adv_image: np.ndarray
    perturbation: np.ndarray
    curve: list  # dict rows keyed by CURVE_FIELDS
    config: AttackConfig
    clean_distance: np.ndarray
    pert_l2: list = dataclasses.field(default_factory=list)  # per step, 0 at step 0


def make_untargeted_reference(clean_outputs, task):
    """Reference = the clean prediction itself; the attack maximizes deviation."""
    if task == "distance":
        return TargetSpec(task, distance_map=clean_outputs.distance.data.copy())
    if task == "segmentation":
        return TargetSpec(task, labels=clean_outputs.segmentation.data.argmax(axis=0))
    if task == "motion":
        return TargetSpec(task, labels=clean_outputs.motion.data.argmax(axis=0))
    return TargetSpec(task, objectness=clean_outputs.detection.data[0].copy())


def make_target(clean_outputs, cfg, rng):
    """Targeted references: near->far, vehicle/road->void, dynamic->static,
    per-cell random objectness flips."""
    task = cfg.task
    if task == "distance":
        target = clean_outputs.distance.data.copy()
        target[target < NEAR_THRESHOLD] = 1.0
        return TargetSpec(task, distance_map=target)
    if task == "segmentation":
        labels = clean_outputs.segmentation.data.argmax(axis=0)
        victim = sg.VEHICLE if rng.random() < 0.5 else sg.ROAD
        labels = labels.copy()
        labels[labels == victim] = sg.VOID
        return TargetSpec(task, labels=labels)
    if task == "motion":
        labels = clean_outputs.motion.data.argmax(axis=0)
        labels = np.where(labels == sg.MOTION_DYNAMIC, sg.MOTION_STATIC, labels)
        return TargetSpec(task, labels=labels)
    obj = clean_outputs.detection.data[0]
    return TargetSpec(task, objectness=(rng.random(obj.shape) < 0.5).astype(np.float64))


def attack_loss(outputs, reference, task=None):
    """Per-task attack loss J between current outputs and the reference.

    Distance uses MSE, segmentation/motion cross-entropy against the reference
    label map, detection binary cross-entropy on objectness only.  The pixel
    losses use sum reduction so the fixed white-box step size gets a usable
    gradient scale at this model size.
    """
    task = task or reference.task
    if task != reference.task:
        raise ValueError(f"reference is for {reference.task!r}, not {task!r}")
    if task == "distance":
        return ad.mse(outputs.distance, Tensor(reference.distance_map.astype(outputs.distance.dtype)))
    if task == "segmentation":
        return ad.cross_entropy(outputs.segmentation, reference.labels, reduction="sum")
    if task == "motion":
        return ad.cross_entropy(outputs.motion, reference.labels, reduction="sum")
    npix = reference.objectness.size
    obj = ad.take_flat(ad.reshape(outputs.detection, (-1,)), np.arange(npix))
    return ad.binary_cross_entropy(obj, reference.objectness.reshape(-1), reduction="sum")


class ForwardOracle:
    """Query-only access to a model: plain forward passes, no gradients.

    The returned outputs are detached numpy-backed tensors; the oracle counts
    every evaluation so black-box query budgets can be audited.
    """

    def __init__(self, model):
        self._frozen = _freeze(model)
        self._config = model.model_config()
        self.calls = 0

    def predict(self, frame_prev, frame_curr):
        from .model import forward

        self.calls += 1
        with ad.no_grad():
            out = forward(self._frozen, self._config, frame_prev, frame_curr)
        return type(out)(*(t.detach() for t in (out.distance, out.segmentation, out.motion, out.detection)))


def _freeze(model):
    """Weight dict with requires_grad off: backward skips weight gradients."""
    if not hasattr(model, "_frozen_weights"):
        model._frozen_weights = {k: Tensor(v.data) for k, v in model.weights_.items()}
    return model._frozen_weights


def whitebox_step(image, frame_prev, model, reference, cfg, clean_image=None):
    """One gradient step on the input pixels: ascent for untargeted attacks,
    descent toward the target otherwise.  Returns (new_image, J, outputs)."""
    from .model import forward

    weights = _freeze(model)
    x = Tensor(image, requires_grad=True)
    outputs = forward(weights, model.model_config(), frame_prev, x)
    j = attack_loss(outputs, reference, cfg.task)
    j.backward()
    grad = x.grad
    if not np.all(np.isfinite(grad)):
        raise ad.NonFiniteError("non-finite attack gradient")
    sign = 1.0 if cfg.objective == "untargeted" else -1.0
    new_image = np.clip(image + sign * cfg.alpha * grad, 0.0, 1.0)
    if cfg.linf_budget is not None and clean_image is not None:
        new_image = np.clip(
            new_image, clean_image - cfg.linf_budget, clean_image + cfg.linf_budget
        ).astype(image.dtype)
    return new_image.astype(image.dtype), float(j.data), outputs


def es_recombine(image, candidates, fitness, eps, es):
    """Default mode: convex recombination of candidates with softmax weights;
    NES mode: learning-rate step along the fitness-weighted noise."""
    fitness = np.asarray(fitness, dtype=np.float64)
    if not np.all(np.isfinite(fitness)):
        raise ad.NonFiniteError("non-finite ES fitness")
    if es.nes_mode:
        std = fitness.std() + 1e-8
        w = (fitness - fitness.mean()) / std
        step = np.tensordot(w, eps, axes=(0, 0))
        return np.clip(image + es.lr * step, 0.0, 1.0).astype(image.dtype)
    temp = fitness.std() + 1e-8
    z = (fitness - fitness.max()) / temp
    w = np.exp(z)
    w /= w.sum()
    out = np.tensordot(w, candidates, axes=(0, 0))
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def es_step(image, frame_prev, oracle, reference, cfg, rng):
    """One evolution-strategies step using forward queries only."""
    es = cfg.es
    half = es.population // 2
    if es.antithetic:
        base = rng.normal(es.mu, es.sigma, size=(half,) + image.shape)
        eps = np.concatenate([base, -base])
        if len(eps) < es.population:
            eps = np.concatenate([eps, rng.normal(es.mu, es.sigma, size=(1,) + image.shape)])
    else:
        eps = rng.normal(es.mu, es.sigma, size=(es.population,) + image.shape)
    eps = eps.astype(image.dtype)
    candidates = np.clip(image[None] + eps, 0.0, 1.0)
    fitness = np.empty(es.population)
    for i in range(es.population):
        out = oracle.predict(frame_prev, candidates[i])
        with ad.no_grad():
            j = attack_loss(out, reference, cfg.task)
        fitness[i] = j.data if cfg.objective == "untargeted" else -float(j.data)
    return es_recombine(image, candidates, fitness, eps, es)


def nes_ascend(f, x0, steps, lr, sigma, population, rng, bounds=None, antithetic=False):
    """Generic NES maximizer of a black-box function over a flat vector.

    Plain mode standardizes per-candidate fitness.  Antithetic mode evaluates
    floor(population/2) mirrored pairs and standardizes the paired fitness
    differences, which cancels even-order fitness terms and greatly reduces
    estimator noise on smooth objectives.
    """
    x = np.array(x0, dtype=np.float64)
    for _ in range(steps):
        if antithetic:
            eps = rng.normal(0.0, sigma, size=(population // 2,) + x.shape)
            fitness = np.array([f(x + e) - f(x - e) for e in eps])
        else:
            eps = rng.normal(0.0, sigma, size=(population,) + x.shape)
            fitness = np.array([f(x + e) for e in eps])
        if not np.all(np.isfinite(fitness)):
            raise ad.NonFiniteError("non-finite NES fitness")
        w = (fitness - fitness.mean()) / (fitness.std() + 1e-8)
        x = x + lr * np.tensordot(w, eps, axes=(0, 0))
        if bounds is not None:
            x = np.clip(x, bounds[0], bounds[1])
    return x


def run_attack(sample, model, cfg):
    """Full attack on one sample: per-step curve over all four tasks with the
    clean baseline at step 0, returning the final adversarial image."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    clean = model.predict(sample.frame_prev, sample.frame_curr)
    clean_distance = clean.distance.data.copy()

    if cfg.objective == "untargeted":
        reference = make_untargeted_reference(clean, cfg.task)
    else:
        reference = make_target(clean, cfg, rng)

    def metrics_row(step, outputs):
        with ad.no_grad():
            j = attack_loss(outputs, reference, cfg.task)
        m = mt.evaluate_outputs(outputs, sample, clean_distance, model.seg_classes, model.det_classes)
        return {"step": step, **m.as_dict(), "attack_loss": float(j.data)}

    curve = [metrics_row(0, clean)]
    pert_l2 = [0.0]
    clean_image = sample.frame_curr.copy()
    x = clean_image.copy()

    oracle = ForwardOracle(model) if cfg.mode == "blackbox" else None
    if cfg.mode == "whitebox" and cfg.init_amplitude > 0:
        x = np.clip(
            x + rng.uniform(-cfg.init_amplitude, cfg.init_amplitude, size=x.shape), 0.0, 1.0
        ).astype(x.dtype)

    for step in range(1, cfg.steps + 1):
        try:
            if cfg.mode == "whitebox":
                x, _, _ = whitebox_step(x, sample.frame_prev, model, reference, cfg, clean_image)
            else:
                x = es_step(x, sample.frame_prev, oracle, reference, cfg, rng)
            outputs = model.predict(sample.frame_prev, x)
        except ad.NonFiniteError as exc:
            raise ad.NonFiniteError(f"attack aborted at step {step}: {exc}") from exc
        curve.append(metrics_row(step, outputs))
        pert_l2.append(float(np.linalg.norm(x.astype(np.float64) - clean_image)))

    return AttackResult(
        adv_image=x,
        perturbation=(x.astype(np.float64) - clean_image.astype(np.float64)).astype(np.float32),
        curve=curve,
        config=cfg,
        clean_distance=clean_distance,
        pert_l2=pert_l2,
    )


def render_perturbation(result, gain=10.0):
    """Displayable image of the perturbation: mid-gray plus gain * delta."""
    return np.clip(0.5 + gain * result.perturbation, 0.0, 1.0).astype(np.float32)


# -- persistence -----------------------------------------------------------


def save_result(result, out_dir, name):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out / f"{name}.npz",
        adv_image=result.adv_image,
        perturbation=result.perturbation,
        clean_distance=result.clean_distance,
        render=render_perturbation(result),
        pert_l2=np.asarray(result.pert_l2, dtype=np.float64),
    )
    with open(out / f"{name}_curve.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for row in result.curve:
            writer.writerow({k: _fmt(row[k]) for k in CURVE_FIELDS})


def load_curve(path):
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
    return rows


def _fmt(v):
    return str(v) if isinstance(v, int) else format(float(v), ".10g")
