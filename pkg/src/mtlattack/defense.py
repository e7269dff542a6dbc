"""Gaussian-blur input preprocessing defense and its evaluation."""

import dataclasses

import numpy as np
from scipy.ndimage import gaussian_filter1d
from sklearn.base import BaseEstimator, TransformerMixin

from . import metrics as mt


@dataclasses.dataclass
class DefenseConfig:
    kind: str = "gaussian_blur"
    radius: float = 1.0  # Gaussian sigma in pixels
    truncate: float = 3.0  # kernel cut-off in sigmas

    def validate(self):
        if self.kind != "gaussian_blur":
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.radius <= 0 or self.truncate <= 0:
            raise ValueError("radius and truncate must be positive")
        return self


def gaussian_kernel(radius, truncate=3.0):
    """Normalized 1-d Gaussian kernel, truncated at ``truncate`` sigmas."""
    half = int(truncate * radius + 0.5)
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / radius) ** 2)
    return k / k.sum()


def gaussian_blur(image, radius=1.0, truncate=3.0):
    """Per-channel separable Gaussian blur with reflective borders."""
    img = np.asarray(image, dtype=np.float64)
    chw = img.ndim == 3
    planes = img if chw else img[None]
    out = gaussian_filter1d(planes, sigma=radius, axis=-1, mode="reflect", truncate=truncate)
    out = gaussian_filter1d(out, sigma=radius, axis=-2, mode="reflect", truncate=truncate)
    out = np.clip(out, 0.0, 1.0)
    out = out if chw else out[0]
    return out.astype(np.asarray(image).dtype)


class GaussianBlurDefense(BaseEstimator, TransformerMixin):
    """Stateless input-filter transformer; ``transform`` blurs a batch of
    (3, H, W) images (or a single image)."""

    def __init__(self, radius=1.0, truncate=3.0):
        self.radius = radius
        self.truncate = truncate

    def fit(self, X=None, y=None):
        DefenseConfig(radius=self.radius, truncate=self.truncate).validate()
        return self

    def transform(self, X):
        X = np.asarray(X)
        if X.ndim == 3:
            return gaussian_blur(X, self.radius, self.truncate)
        return np.stack([gaussian_blur(x, self.radius, self.truncate) for x in X])


def evaluate_defense(results, samples, model, config=None):
    """Re-run the model on blurred adversarial inputs.

    Both frames are blurred (a deployed input filter sees every frame).  The
    distance reference stays the clean unblurred prediction stored with each
    result.  Returns one TaskMetrics per (result, sample) pair.
    """
    config = (config or DefenseConfig()).validate()
    rows = []
    for result, sample in zip(results, samples):
        blurred_curr = gaussian_blur(result.adv_image, config.radius, config.truncate)
        blurred_prev = gaussian_blur(sample.frame_prev, config.radius, config.truncate)
        out = model.predict(blurred_prev, blurred_curr)
        rows.append(
            mt.evaluate_outputs(
                out, sample, result.clean_distance, model.seg_classes, model.det_classes
            )
        )
    return rows


def evaluate_blur_only(samples, model, config=None):
    """Blur-only protocol: defense applied to clean inputs, no attack."""
    config = (config or DefenseConfig()).validate()
    rows = []
    for sample in samples:
        clean = model.predict(sample.frame_prev, sample.frame_curr)
        blurred_curr = gaussian_blur(sample.frame_curr, config.radius, config.truncate)
        blurred_prev = gaussian_blur(sample.frame_prev, config.radius, config.truncate)
        out = model.predict(blurred_prev, blurred_curr)
        rows.append(
            mt.evaluate_outputs(
                out, sample, clean.distance.data, model.seg_classes, model.det_classes
            )
        )
    return rows
