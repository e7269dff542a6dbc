"""The scaled-down four-task perception network.

A shared three-block strided conv encoder feeds four decoders: distance
(sigmoid map), segmentation (7-way softmax), motion (2-way softmax over the
fused siamese features of both frames) and single-scale grid detection.
Training is plain SGD on the weighted multi-task loss.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import losses
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class ModelConfig:
    input_size: int = 64
    encoder_channels: tuple = (16, 32, 64)
    seg_classes: int = 7
    det_classes: int = 5
    det_grid: int = 8
    seed: int = 0

    def validate(self):
        depth = len(self.encoder_channels)
        if self.input_size % (2**depth) != 0:
            raise ValueError("input_size must be divisible by 2^len(encoder_channels)")
        if self.seg_classes != 7 or self.det_classes != 5:
            raise ValueError("this model is fixed at 7 seg classes and 5 det classes")
        if self.det_grid != self.input_size // (2**depth):
            raise ValueError("det_grid must equal input_size / 2^len(encoder_channels)")
        return self


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 0.05
    loss_weights: dict = None
    focal_gamma: float = 2.0
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("hyperparameters must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.loss_weights is not None and any(w < 0 for w in self.loss_weights.values()):
            raise ValueError("loss weights must be non-negative")
        return self


@dataclasses.dataclass
class TaskOutputs:
    distance: Tensor  # (H, W), sigmoid, 0 = nearest
    segmentation: Tensor  # (seg_classes, H, W) channel-softmax
    motion: Tensor  # (2, H, W) channel-softmax: static / dynamic
    detection: Tensor  # (1 + 4 + det_classes, G, G)

    def detached(self):
        return TaskOutputs(*(t.detach() for t in _fields(self)))


def _fields(outputs):
    return (outputs.distance, outputs.segmentation, outputs.motion, outputs.detection)


def _he_conv(rng, out_ch, in_ch, k, dtype=np.float32):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return ad.parameter(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype))


def init_weights(config, dtype=np.float32):
    """He-initialized weight dict for the given config, deterministic in seed."""
    rng = np.random.default_rng(config.seed)
    chans = config.encoder_channels
    w = {}

    def conv(name, out_ch, in_ch, k=3):
        w[name + ".w"] = _he_conv(rng, out_ch, in_ch, k, dtype)
        w[name + ".b"] = ad.parameter(np.zeros(out_ch, dtype=dtype))

    prev = 3
    for i, c in enumerate(chans):
        conv(f"enc{i}", c, prev)
        prev = c

    def decoder(prefix, out_ch, in_ch):
        mids = list(reversed(chans[:-1])) + [8]
        p = in_ch
        for i, m in enumerate(mids):
            conv(f"{prefix}{i}", m, p)
            p = m
        conv(f"{prefix}_head", out_ch, p, k=1)

    deep = chans[-1]
    decoder("dist", 1, deep)
    decoder("seg", config.seg_classes, deep)
    conv("motion_fuse", deep, 2 * deep)
    decoder("motion", 2, deep)
    conv("det0", chans[-2] if len(chans) > 1 else deep, deep)
    conv("det_head", 1 + 4 + config.det_classes, chans[-2] if len(chans) > 1 else deep)
    return w


def _conv_block(x, w, name, stride=1):
    return ad.relu(ad.conv2d(x, w[name + ".w"], w[name + ".b"], stride=stride, padding=1))


def _encode(x, w, config):
    for i in range(len(config.encoder_channels)):
        x = _conv_block(x, w, f"enc{i}", stride=2)
    return x


def _decode(x, w, prefix, config):
    # conv at the coarse scale, then upsample: full-resolution convs are the
    # dominant cost at this model size, a 1x1 head at full res is enough
    n_stages = len(config.encoder_channels)
    for i in range(n_stages):
        x = _conv_block(x, w, f"{prefix}{i}")
        x = ad.upsample2x_nearest(x)
    return ad.conv2d(x, w[f"{prefix}_head.w"], w[f"{prefix}_head.b"], padding=0)


def forward(weights, config, frame_prev, frame_curr):
    """Run the network on one frame pair; inputs are (3, H, W) tensors/arrays.

    Distance, segmentation and detection depend only on ``frame_curr``;
    motion additionally consumes the shared-encoder features of ``frame_prev``.
    """
    s = config.input_size
    prev_t = frame_prev if isinstance(frame_prev, Tensor) else Tensor(frame_prev)
    curr_t = frame_curr if isinstance(frame_curr, Tensor) else Tensor(frame_curr)
    if prev_t.shape != (3, s, s) or curr_t.shape != (3, s, s):
        raise ad.ShapeError(f"expected (3, {s}, {s}) frames, got {prev_t.shape} / {curr_t.shape}")

    curr = ad.reshape(curr_t, (1, 3, s, s))
    prev = ad.reshape(prev_t, (1, 3, s, s))
    f_curr = _encode(curr, weights, config)
    f_prev = _encode(prev, weights, config)

    dist = ad.sigmoid(_decode(f_curr, weights, "dist", config))
    seg = ad.channel_softmax(_decode(f_curr, weights, "seg", config))

    fused = _conv_block(ad.concat_channels([f_prev, f_curr]), weights, "motion_fuse")
    motion = ad.channel_softmax(_decode(fused, weights, "motion", config))

    det_mid = _conv_block(f_curr, weights, "det0")
    det_raw = ad.conv2d(det_mid, weights["det_head.w"], weights["det_head.b"], padding=1)
    g = config.det_grid
    obj_box = ad.sigmoid(_slice_channels(det_raw, 0, 5))
    cls = ad.channel_softmax(_slice_channels(det_raw, 5, 5 + config.det_classes))
    det = ad.concat_channels([obj_box, cls])

    return TaskOutputs(
        distance=ad.reshape(dist, (s, s)),
        segmentation=ad.reshape(seg, (config.seg_classes, s, s)),
        motion=ad.reshape(motion, (2, s, s)),
        detection=ad.reshape(det, (1 + 4 + config.det_classes, g, g)),
    )


def _slice_channels(x, c0, c1):
    n, c, h, w = x.shape
    idx = np.arange(n * c * h * w).reshape(n, c, h, w)[:, c0:c1].reshape(-1)
    return ad.reshape(ad.take_flat(x, idx), (n, c1 - c0, h, w))


class MultiTaskPerceptionModel(BaseEstimator):
    """sklearn-style estimator wrapping the four-task network.

    ``fit`` trains on a list of scenegen Samples with plain SGD; ``predict``
    returns detached TaskOutputs for one frame pair.
    """

    def __init__(
        self,
        input_size=64,
        encoder_channels=(16, 32, 64),
        seg_classes=7,
        det_classes=5,
        det_grid=8,
        epochs=30,
        batch_size=4,
        learning_rate=0.05,
        loss_weights=None,
        focal_gamma=2.0,
        seed=0,
    ):
        self.input_size = input_size
        self.encoder_channels = encoder_channels
        self.seg_classes = seg_classes
        self.det_classes = det_classes
        self.det_grid = det_grid
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.loss_weights = loss_weights
        self.focal_gamma = focal_gamma
        self.seed = seed

    # -- config plumbing --------------------------------------------------

    def model_config(self):
        return ModelConfig(
            input_size=self.input_size,
            encoder_channels=tuple(self.encoder_channels),
            seg_classes=self.seg_classes,
            det_classes=self.det_classes,
            det_grid=self.det_grid,
            seed=self.seed,
        ).validate()

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            loss_weights=self.loss_weights,
            focal_gamma=self.focal_gamma,
            seed=self.seed,
        ).validate()

    def init_weights(self):
        self.weights_ = init_weights(self.model_config())
        self.history_ = []
        return self

    @property
    def is_fitted(self):
        return hasattr(self, "weights_")

    # -- train / predict --------------------------------------------------

    def fit(self, samples):
        """SGD training on Samples; records per-epoch mean loss in history_."""
        cfg = self.model_config()
        tcfg = self.train_config()
        if not samples:
            raise ValueError("fit: empty dataset")
        if not self.is_fitted:
            self.init_weights()
        if hasattr(self, "_frozen_weights"):
            del self._frozen_weights  # stale read-only views of the weights
        rng = np.random.default_rng(tcfg.seed)
        lr = tcfg.learning_rate
        for _epoch in range(tcfg.epochs):
            order = rng.permutation(len(samples))
            epoch_losses = []
            for start in range(0, len(order), tcfg.batch_size):
                batch = order[start : start + tcfg.batch_size]
                for w in self.weights_.values():
                    w.zero_grad()
                for idx in batch:
                    sample = samples[idx]
                    out = forward(self.weights_, cfg, sample.frame_prev, sample.frame_curr)
                    loss = losses.total_train_loss(
                        out,
                        sample,
                        weights=tcfg.loss_weights,
                        focal_gamma=tcfg.focal_gamma,
                        det_classes=cfg.det_classes,
                    )
                    loss.backward()
                    epoch_losses.append(loss.item())
                step = lr / len(batch)
                for w in self.weights_.values():
                    if w.grad is not None:
                        w.data = w.data - step * w.grad
            self.history_.append(float(np.mean(epoch_losses)))
        return self

    def forward(self, frame_prev, frame_curr):
        """Graph-recording forward pass (inputs may be requires_grad tensors)."""
        self._check_fitted()
        return forward(self.weights_, self.model_config(), frame_prev, frame_curr)

    def predict(self, frame_prev, frame_curr):
        """Forward pass returning detached TaskOutputs."""
        self._check_fitted()
        with ad.no_grad():
            out = self.forward(frame_prev, frame_curr)
        return TaskOutputs(*(t.detach() for t in _fields(out)))

    def _check_fitted(self):
        if not self.is_fitted:
            raise ValueError("model has no weights; call fit(), init_weights() or load()")

    def as_float64(self):
        """Copy of this model with float64 weights (for gradient checks)."""
        clone = MultiTaskPerceptionModel(**self.get_params())
        clone.weights_ = {
            k: ad.parameter(v.data.astype(np.float64)) for k, v in self.weights_.items()
        }
        clone.history_ = list(getattr(self, "history_", []))
        return clone

    # -- checkpoints ------------------------------------------------------

    def save(self, path):
        self._check_fitted()
        meta = {
            "version": CHECKPOINT_VERSION,
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
            "history": list(getattr(self, "history_", [])),
        }
        np.savez(
            path,
            __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            **{k: v.data for k, v in self.weights_.items()},
        )

    @classmethod
    def load(cls, path, expect_params=None):
        path = Path(path)
        data = np.load(path)
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = meta["params"]
        for key in ("encoder_channels",):
            params[key] = tuple(params[key])
        if expect_params is not None:
            for k, v in expect_params.items():
                if params.get(k) != v:
                    raise ValueError(f"checkpoint config mismatch on {k!r}: {params.get(k)} != {v}")
        model = cls(**params)
        model.weights_ = {k: ad.parameter(data[k]) for k in data.files if k != "__meta__"}
        model.history_ = meta.get("history", [])
        # shape manifest sanity
        fresh = init_weights(model.model_config())
        if set(fresh) != set(model.weights_) or any(
            fresh[k].shape != model.weights_[k].shape for k in fresh
        ):
            raise ValueError("checkpoint weight shapes do not match config")
        return model
