"""Training losses for the four-task network.

All losses take channel-first predictions as autodiff tensors and plain numpy
ground truth, and return scalar tensors, so they can be backpropagated either
to the weights (training) or to the input pixels (attacks).
"""

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, Tensor


def lovasz_grad_coeffs(fg_sorted):
    """Jaccard-loss increments along the sorted error sequence.

    ``fg_sorted`` is the 0/1 foreground indicator permuted by decreasing error.
    """
    fg_sorted = np.asarray(fg_sorted, dtype=np.float64)
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if len(jaccard) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels):
    """Lovász-Softmax loss: mean over classes present in ``labels`` of the
    Lovász extension of the Jaccard loss applied to sorted per-pixel errors.

    probs: (C, H, W) channel-softmaxed tensor; labels: (H, W) ints in [0, C).
    """
    labels = np.asarray(labels)
    c = probs.shape[0]
    if labels.shape != probs.shape[1:]:
        raise ad.ShapeError(f"lovasz_softmax: labels {labels.shape} vs probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("lovasz_softmax: label out of range")
    npix = labels.size
    flat = ad.reshape(probs, (c, npix))
    lab = labels.reshape(-1)
    terms = []
    for cls in np.unique(lab):
        fg = (lab == cls).astype(np.float64)
        p_c = ad.take_flat(flat, np.arange(npix) + cls * npix)
        # |fg - p| written without abs: fg + (1 - 2 fg) * p
        errors = ad.add(ad.mul(p_c, ad.constant(1.0 - 2.0 * fg, dtype=probs.dtype)),
                        ad.constant(fg, dtype=probs.dtype))
        perm = np.argsort(-errors.data, kind="stable")
        e_sorted = ad.take_flat(errors, perm)
        coeffs = lovasz_grad_coeffs(fg[perm])
        terms.append(ad.tensor_sum(ad.mul(e_sorted, ad.constant(coeffs, dtype=probs.dtype))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def focal_loss(probs, labels, gamma=2.0):
    """Mean of -(1 - p_t)^gamma * log(p_t) over pixels, p_t floored at 1e-7."""
    if gamma < 0:
        raise ValueError("focal_loss: gamma must be >= 0")
    labels = np.asarray(labels)
    c = probs.shape[0]
    if labels.shape != probs.shape[1:]:
        raise ad.ShapeError(f"focal_loss: labels {labels.shape} vs probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("focal_loss: label out of range")
    npix = labels.size
    gather = labels.reshape(-1).astype(np.intp) * npix + np.arange(npix)
    p_t = ad.take_flat(ad.reshape(probs, (c, npix)), gather)
    nll = ad.mul(ad.log(p_t, floor=PROB_FLOOR), -1.0)
    if gamma == 0:
        weighted = nll
    else:
        weighted = ad.mul(ad.power(ad.add(ad.mul(p_t, -1.0), 1.0), gamma), nll)
    return ad.scale(ad.tensor_sum(weighted), 1.0 / npix)


def build_detection_targets(gt_boxes, grid):
    """Encode ground-truth boxes on a G x G grid.

    Returns (tobj (G,G), tbox (4,G,G), tcls (G,G)).  A cell is positive iff a
    box center falls in it; later boxes in sample order win ties.  Box targets
    are (cx, cy) relative to the cell and (w, h) in image-normalized units.
    """
    g = grid
    tobj = np.zeros((g, g), dtype=np.float64)
    tbox = np.zeros((4, g, g), dtype=np.float64)
    tcls = np.zeros((g, g), dtype=np.intp)
    for cls, cx, cy, w, h in np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5):
        if w <= 0 or h <= 0:
            raise ValueError(f"malformed box: w={w}, h={h}")
        col = min(int(cx * g), g - 1)
        row = min(int(cy * g), g - 1)
        tobj[row, col] = 1.0
        tbox[:, row, col] = (cx * g - col, cy * g - row, w, h)
        tcls[row, col] = int(cls)
    return tobj, tbox, tcls


def detection_loss(det, gt_boxes, det_classes=5):
    """Single-scale grid detection loss.

    ``det`` is a (1 + 4 + det_classes, G, G) tensor: sigmoid objectness,
    sigmoid box (cx, cy, w, h), channel-softmax class probabilities.  The loss
    is mean objectness BCE over all cells, plus mean squared box error and
    mean class cross-entropy over positive cells.
    """
    g = det.shape[-1]
    if det.shape != (5 + det_classes, g, g):
        raise ad.ShapeError(f"detection_loss: bad prediction shape {det.shape}")
    tobj, tbox, tcls = build_detection_targets(gt_boxes, g)
    ncell = g * g
    flat = ad.reshape(det, (5 + det_classes, ncell))

    obj = ad.take_flat(flat, np.arange(ncell))
    loss = ad.binary_cross_entropy(obj, tobj.reshape(-1), reduction="mean")

    pos = np.flatnonzero(tobj.reshape(-1) > 0.5)
    if len(pos) == 0:
        return loss
    box_idx = (np.arange(1, 5)[:, None] * ncell + pos[None, :]).reshape(-1)
    pbox = ad.take_flat(flat, box_idx)
    diff = ad.add(pbox, ad.constant(-tbox.reshape(4, ncell)[:, pos].reshape(-1), dtype=det.dtype))
    box_loss = ad.scale(ad.tensor_sum(ad.mul(diff, diff)), 1.0 / len(pos))

    cls_idx = ((5 + tcls.reshape(-1)[pos]) * ncell + pos).astype(np.intp)
    p_cls = ad.take_flat(flat, cls_idx)
    cls_loss = ad.scale(ad.tensor_sum(ad.mul(ad.log(p_cls, floor=PROB_FLOOR), -1.0)), 1.0 / len(pos))

    return ad.add(loss, ad.add(box_loss, cls_loss))


DEFAULT_LOSS_WEIGHTS = {"distance": 0.25, "segmentation": 0.25, "motion": 0.25, "detection": 0.25}


def total_train_loss(outputs, sample, weights=None, focal_gamma=2.0, det_classes=5):
    """Weighted multi-task training loss.

    ``outputs`` is a TaskOutputs (tensors), ``sample`` a scenegen Sample.
    Raises NonFiniteError naming the offending task if a term degenerates.
    """
    if weights is None:
        weights = DEFAULT_LOSS_WEIGHTS
    wsum = sum(weights.values())
    terms = {
        "distance": ad.mse(outputs.distance, Tensor(sample.gt_distance.astype(outputs.distance.dtype))),
        "segmentation": lovasz_softmax(outputs.segmentation, sample.gt_seg),
        "motion": ad.add(
            lovasz_softmax(outputs.motion, sample.gt_motion),
            focal_loss(outputs.motion, sample.gt_motion, gamma=focal_gamma),
        ),
        "detection": detection_loss(outputs.detection, sample.gt_boxes, det_classes=det_classes),
    }
    total = None
    for task, term in terms.items():
        if not np.isfinite(term.data):
            raise ad.NonFiniteError(f"non-finite {task} loss term")
        piece = ad.scale(term, weights[task] / wsum)
        total = piece if total is None else ad.add(total, piece)
    return total
