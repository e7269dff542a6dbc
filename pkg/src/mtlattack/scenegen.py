"""Procedural two-frame driving-like scenes with exact four-task ground truth.

Scenes are flat 2-D compositions: a textured road plane with lane stripes and
a curb band, plus rectangular/elliptical foreground objects.  Dynamic objects
are displaced between the two frames; distance comes from vertical position
with a per-object offset, so occlusion ordering is consistent by construction.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np

SEG_CLASSES = ("void", "road", "lane", "curb", "vehicle", "pedestrian", "rider")
VOID, ROAD, LANE, CURB, VEHICLE, PEDESTRIAN, RIDER = range(7)

DET_CLASSES = ("vehicle", "pedestrian", "rider", "traffic_sign", "traffic_light")
SEG_TO_DET = {VEHICLE: 0, PEDESTRIAN: 1, RIDER: 2}

MOTION_STATIC, MOTION_DYNAMIC = 0, 1

_PALETTE = {
    VEHICLE: np.array([0.75, 0.15, 0.15]),
    PEDESTRIAN: np.array([0.85, 0.75, 0.15]),
    RIDER: np.array([0.15, 0.65, 0.80]),
}


@dataclasses.dataclass
class SceneParams:
    size: int = 64
    object_count: tuple = (2, 4)
    object_size: tuple = (10, 20)
    dynamic_fraction: float = 0.5
    displacement: tuple = (2, 5)
    background_texture_scale: int = 8
    noise_amplitude: float = 0.01

    def validate(self):
        if self.size < 16:
            raise ValueError("scene size too small")
        if not (0 <= self.dynamic_fraction <= 1):
            raise ValueError("dynamic_fraction must be in [0, 1]")
        for name in ("object_count", "object_size", "displacement"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"degenerate range for {name}")
        if self.noise_amplitude < 0 or self.noise_amplitude > 0.05:
            raise ValueError("noise_amplitude out of range")
        return self


@dataclasses.dataclass
class Sample:
    frame_prev: np.ndarray  # (3, H, W) in [0, 1]
    frame_curr: np.ndarray  # (3, H, W) in [0, 1]
    gt_distance: np.ndarray  # (H, W) in [0, 1], 0 = nearest
    gt_seg: np.ndarray  # (H, W) int labels
    gt_motion: np.ndarray  # (H, W) in {static, dynamic}
    gt_boxes: np.ndarray  # (K, 5): det class, cx, cy, w, h normalized


@dataclasses.dataclass
class SceneObject:
    seg_class: int
    shape: str  # "rect" or "ellipse"
    cy: int
    cx: int
    h: int
    w: int
    color: np.ndarray
    dynamic: bool
    disp: tuple  # (dy, dx) pixels from frame_prev to frame_curr
    distance: float


def _horizon(size):
    return max(4, size // 10)


def distance_ramp(size):
    """Background distance per row: 1 at/above the horizon, near at the bottom."""
    h0 = _horizon(size)
    ys = np.arange(size, dtype=np.float64)
    d = np.ones(size)
    below = ys >= h0
    d[below] = 1.0 - 0.85 * (ys[below] - h0) / (size - 1 - h0)
    return d


def _background(params, rng):
    """Road plane, lane stripes and curb band; returns (image, seg, distance)."""
    size = params.size
    h0 = _horizon(size)
    img = np.zeros((3, size, size))
    seg = np.full((size, size), ROAD, dtype=np.intp)

    shade = 0.35 + 0.25 * (np.arange(size) / (size - 1))
    img[:] = shade[None, :, None]
    scale = max(2, params.background_texture_scale)
    grid = rng.uniform(-0.04, 0.04, size=(size // scale + 1, size // scale + 1))
    texture = np.kron(grid, np.ones((scale, scale)))[:size, :size]
    img += texture[None]

    seg[:h0] = VOID
    img[:, :h0] = 0.12
    curb_h = max(2, size // 16)
    seg[h0 : h0 + curb_h] = CURB
    img[:, h0 : h0 + curb_h] = np.array([0.55, 0.5, 0.4])[:, None, None]

    lane_w = max(2, size // 32)
    c0 = size // 2 - lane_w // 2
    dash = max(4, size // 12)
    for y0 in range(h0 + curb_h, size, 2 * dash):
        rows = slice(y0, min(y0 + dash, size))
        seg[rows, c0 : c0 + lane_w] = LANE
        img[:, rows, c0 : c0 + lane_w] = 0.88

    dist = np.broadcast_to(distance_ramp(size)[:, None], (size, size)).copy()
    return img, seg, dist


def _object_mask(obj, size, offset=(0, 0)):
    """Boolean mask of the object at its position shifted by ``offset``."""
    cy, cx = obj.cy + offset[0], obj.cx + offset[1]
    ys = np.arange(size)[:, None] - cy
    xs = np.arange(size)[None, :] - cx
    if obj.shape == "rect":
        return (np.abs(ys) <= obj.h / 2) & (np.abs(xs) <= obj.w / 2)
    return (ys / (obj.h / 2)) ** 2 + (xs / (obj.w / 2)) ** 2 <= 1.0


def _sample_objects(params, rng):
    size = params.size
    h0 = _horizon(size)
    ramp = distance_ramp(size)
    count = rng.integers(params.object_count[0], params.object_count[1] + 1)
    objects = []
    for _ in range(count):
        for _attempt in range(40):
            seg_class = rng.choice([VEHICLE, PEDESTRIAN, RIDER])
            s = rng.integers(params.object_size[0], params.object_size[1] + 1)
            if seg_class == VEHICLE:
                h, w = max(6, int(0.6 * s)), s
                shape = "rect"
            elif seg_class == PEDESTRIAN:
                h, w = s, max(5, int(0.45 * s))
                shape = "ellipse"
            else:
                h, w = max(6, int(0.8 * s)), max(5, int(0.6 * s))
                shape = "ellipse"
            dynamic = rng.random() < params.dynamic_fraction
            if dynamic:
                mag = rng.integers(params.displacement[0], params.displacement[1] + 1)
                axis = rng.integers(0, 2)
                sign = 1 if rng.random() < 0.5 else -1
                disp = (0, sign * mag) if axis == 0 else (sign * mag, 0)
            else:
                disp = (0, 0)
            margin_y = abs(disp[0]) + 1
            margin_x = abs(disp[1]) + 1
            lo_y = h0 + 3 + h // 2 + margin_y
            hi_y = size - 1 - h // 2 - margin_y
            lo_x = w // 2 + margin_x
            hi_x = size - 1 - w // 2 - margin_x
            if lo_y >= hi_y or lo_x >= hi_x:
                continue
            cy = int(rng.integers(lo_y, hi_y + 1))
            cx = int(rng.integers(lo_x, hi_x + 1))
            bottom = min(size - 1, cy + h // 2)
            dist = max(0.02, ramp[bottom] - 0.05)
            color = np.clip(_PALETTE[seg_class] + rng.uniform(-0.08, 0.08, 3), 0.05, 0.95)
            cand = SceneObject(seg_class, shape, cy, cx, h, w, color, dynamic, disp, dist)
            mask = _object_mask(cand, size)
            prev_mask = _object_mask(cand, size, (-disp[0], -disp[1]))
            clash = False
            for other in objects:
                omask = _object_mask(other, size) | _object_mask(other, size, (-other.disp[0], -other.disp[1]))
                if ((mask | prev_mask) & omask).any():
                    clash = True
                    break
            if not clash:
                objects.append(cand)
                break
    return objects


def _render(objects, background, params, rng, at_prev=False):
    img = background.copy()
    size = params.size
    for obj in sorted(objects, key=lambda o: -o.distance):
        offset = (-obj.disp[0], -obj.disp[1]) if at_prev else (0, 0)
        mask = _object_mask(obj, size, offset)
        img[:, mask] = obj.color[:, None]
    if params.noise_amplitude > 0:
        img = img + rng.normal(0.0, params.noise_amplitude, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _ground_truth(objects, seg_bg, dist_bg, size):
    seg = seg_bg.copy()
    dist = dist_bg.copy()
    motion = np.zeros((size, size), dtype=np.intp)
    boxes = []
    for obj in sorted(objects, key=lambda o: -o.distance):
        mask = _object_mask(obj, size)
        seg[mask] = obj.seg_class
        dist[mask] = obj.distance
        if obj.dynamic:
            motion[mask] = MOTION_DYNAMIC
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        cy = (rows[0] + rows[-1] + 1) / 2 / size
        cx = (cols[0] + cols[-1] + 1) / 2 / size
        bh = (rows[-1] - rows[0] + 1) / size
        bw = (cols[-1] - cols[0] + 1) / size
        boxes.append((SEG_TO_DET[obj.seg_class], cx, cy, bw, bh))
    gt_boxes = np.array(boxes, dtype=np.float64).reshape(-1, 5)
    return seg, dist, motion, gt_boxes


def generate_scene(params, seed):
    """Deterministically generate one two-frame Sample from (params, seed)."""
    params.validate()
    rng = np.random.default_rng(seed)
    bg_img, seg_bg, dist_bg = _background(params, rng)
    objects = _sample_objects(params, rng)
    noise_rng_prev = np.random.default_rng(rng.integers(2**63))
    noise_rng_curr = np.random.default_rng(rng.integers(2**63))
    frame_prev = _render(objects, bg_img, params, noise_rng_prev, at_prev=True)
    frame_curr = _render(objects, bg_img, params, noise_rng_curr, at_prev=False)
    seg, dist, motion, boxes = _ground_truth(objects, seg_bg, dist_bg, params.size)
    return Sample(
        frame_prev=frame_prev,
        frame_curr=frame_curr,
        gt_distance=dist.astype(np.float32),
        gt_seg=seg,
        gt_motion=motion,
        gt_boxes=boxes,
    )


def check_sample(sample):
    """Assert the cross-task ground-truth consistency invariants."""
    size = sample.gt_seg.shape[0]
    fg = np.isin(sample.gt_seg, (VEHICLE, PEDESTRIAN, RIDER))
    if ((sample.gt_motion == MOTION_DYNAMIC) & ~fg).any():
        raise AssertionError("dynamic pixel outside foreground objects")
    det_to_seg = {v: k for k, v in SEG_TO_DET.items()}
    for cls, cx, cy, w, h in sample.gt_boxes:
        seg_cls = det_to_seg[int(cls)]
        x0 = int(round((cx - w / 2) * size))
        x1 = int(round((cx + w / 2) * size)) - 1
        y0 = int(round((cy - h / 2) * size))
        y1 = int(round((cy + h / 2) * size)) - 1
        region = sample.gt_seg[max(0, y0) : y1 + 1, max(0, x0) : x1 + 1] == seg_cls
        if not region.any():
            raise AssertionError("box does not cover its class region")
        # tight within 1 px: class pixels touch every box side
        if not (region[0].any() and region[-1].any() and region[:, 0].any() and region[:, -1].any()):
            raise AssertionError("box not tight around its class region")
    fg_dist = sample.gt_distance[fg]
    if fg.any():
        ramp = distance_ramp(size)
        bg_at = np.broadcast_to(ramp[:, None], (size, size))[fg]
        if not (fg_dist < bg_at + 1e-9).all():
            raise AssertionError("object distance not nearer than occluded background")
    if sample.frame_curr.min() < 0 or sample.frame_curr.max() > 1:
        raise AssertionError("frame out of range")
    return True


@dataclasses.dataclass
class Dataset:
    train: list
    test: list
    train_seeds: list
    test_seeds: list
    params: SceneParams
    seed: int


def generate_dataset(n, params, seed=0):
    """n samples from disjoint child seeds; the last n // 6 form the test split."""
    if n <= 0:
        raise ValueError("n must be positive")
    params.validate()
    children = np.random.SeedSequence(seed).spawn(n)
    samples = [generate_scene(params, child) for child in children]
    seeds = [list(c.spawn_key) for c in children]
    n_test = n // 6
    n_train = n - n_test
    return Dataset(
        train=samples[:n_train],
        test=samples[n_train:],
        train_seeds=seeds[:n_train],
        test_seeds=seeds[n_train:],
        params=params,
        seed=seed,
    )


# -- on-disk layout --------------------------------------------------------

DATASET_VERSION = 1


def save_dataset(dataset, out_dir):
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in (("train", dataset.train), ("test", dataset.test)):
        for i, sample in enumerate(samples):
            name = f"{split}_{i:05d}.npz"
            np.savez_compressed(out / "samples" / name, **dataclasses.asdict(sample))
            entries.append({"file": f"samples/{name}", "split": split, "index": i})
    manifest = {
        "version": DATASET_VERSION,
        "seed": dataset.seed,
        "params": dataclasses.asdict(dataset.params),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(in_dir):
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["version"] != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest['version']}")
    p = manifest["params"]
    for key in ("object_count", "object_size", "displacement"):
        p[key] = tuple(p[key])
    params = SceneParams(**p)
    splits = {"train": [], "test": []}
    for entry in manifest["samples"]:
        data = np.load(root / entry["file"])
        splits[entry["split"]].append(Sample(**{k: data[k] for k in data.files}))
    return Dataset(
        train=splits["train"],
        test=splits["test"],
        train_seeds=[],
        test_seeds=[],
        params=params,
        seed=manifest["seed"],
    )
