"""Task metrics: distance RMSE, segmentation/motion mIoU, detection mAP.

Reference policy follows the reporting protocol: the distance metric is
measured against the clean model's own prediction (so clean input scores 0),
the other tasks against synthetic ground truth.
"""

import dataclasses

import numpy as np


@dataclasses.dataclass
class TaskMetrics:
    distance_rmse: float
    seg_miou: float
    motion_miou: float
    det_map: float

    def as_dict(self):
        return dataclasses.asdict(self)


def rmse(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {ref.shape}")
    return float(np.sqrt(np.mean((pred - ref) ** 2)))


def miou(pred_labels, ref_labels, num_classes):
    """Mean IoU over classes present in ref or pred; absent classes excluded."""
    pred = np.asarray(pred_labels)
    ref = np.asarray(ref_labels)
    if pred.shape != ref.shape:
        raise ValueError("miou: shape mismatch")
    if pred.min() < 0 or pred.max() >= num_classes or ref.min() < 0 or ref.max() >= num_classes:
        raise ValueError("miou: label out of range")
    ious = []
    for c in range(num_classes):
        p = pred == c
        r = ref == c
        union = (p | r).sum()
        if union == 0:
            continue
        ious.append((p & r).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


def box_iou(a, b):
    """IoU of two (cx, cy, w, h) boxes in normalized coordinates."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def average_precision(tp_flags, n_gt):
    """All-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - np.asarray(tp_flags))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, integrated over recall steps
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def mean_ap(pred_boxes, gt_boxes, iou_threshold=0.5):
    """Mean over classes with >= 1 ground-truth instance of the AP of
    score-ranked predictions greedily matched one-to-one at IoU >= threshold.

    pred_boxes rows: (class, score, cx, cy, w, h); gt rows: (class, cx, cy, w, h).
    """
    preds = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 6)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5)
    for boxes, off in ((preds, 2), (gts, 1)):
        if len(boxes) and ((boxes[:, off + 2] <= 0).any() or (boxes[:, off + 3] <= 0).any()):
            raise ValueError("malformed box: non-positive extent")
    classes = sorted(set(gts[:, 0].astype(int)))
    if not classes:
        return 0.0 if len(preds) else 1.0
    aps = []
    for c in classes:
        cls_gt = gts[gts[:, 0] == c][:, 1:]
        cls_pred = preds[preds[:, 0] == c]
        order = np.argsort(-cls_pred[:, 1], kind="stable")
        cls_pred = cls_pred[order][:, 2:]
        matched = np.zeros(len(cls_gt), dtype=bool)
        tp_flags = []
        for p in cls_pred:
            best, best_iou = -1, iou_threshold
            for j, g in enumerate(cls_gt):
                if matched[j]:
                    continue
                iou = box_iou(p, g)
                if iou >= best_iou:
                    best, best_iou = j, iou
            if best >= 0:
                matched[best] = True
                tp_flags.append(1)
            else:
                tp_flags.append(0)
        aps.append(average_precision(tp_flags, len(cls_gt)) if tp_flags else 0.0)
    return float(np.mean(aps))


def decode_detections(det, det_classes=5, obj_threshold=0.5):
    """Grid detection output -> (K, 6) scored boxes (class, score, cx, cy, w, h).

    ``det`` is the (1 + 4 + det_classes, G, G) array: sigmoid objectness, box
    (cx, cy within cell; w, h global) and class probabilities.
    """
    det = np.asarray(det)
    g = det.shape[-1]
    boxes = []
    for row in range(g):
        for col in range(g):
            score = det[0, row, col]
            if score < obj_threshold:
                continue
            cx = (col + det[1, row, col]) / g
            cy = (row + det[2, row, col]) / g
            w = max(float(det[3, row, col]), 1e-6)
            h = max(float(det[4, row, col]), 1e-6)
            cls = int(np.argmax(det[5:, row, col]))
            boxes.append((cls, float(score), cx, cy, w, h))
    return np.array(boxes, dtype=np.float64).reshape(-1, 6)


def evaluate_outputs(outputs, sample, clean_distance, seg_classes=7, det_classes=5):
    """TaskMetrics for one set of model outputs.

    ``clean_distance`` is the clean model prediction the distance RMSE is
    measured against; pass the outputs' own distance map for a clean run.
    """
    dist = np.asarray(outputs.distance.data if hasattr(outputs.distance, "data") else outputs.distance)
    seg = np.asarray(outputs.segmentation.data if hasattr(outputs.segmentation, "data") else outputs.segmentation)
    motion = np.asarray(outputs.motion.data if hasattr(outputs.motion, "data") else outputs.motion)
    det = np.asarray(outputs.detection.data if hasattr(outputs.detection, "data") else outputs.detection)
    return TaskMetrics(
        distance_rmse=rmse(dist, clean_distance),
        seg_miou=miou(seg.argmax(axis=0), sample.gt_seg, seg_classes),
        motion_miou=miou(motion.argmax(axis=0), sample.gt_motion, 2),
        det_map=mean_ap(decode_detections(det, det_classes), sample.gt_boxes),
    )


def evaluate_model(model, sample):
    """Clean evaluation: distance reference is the model's own prediction."""
    out = model.predict(sample.frame_prev, sample.frame_curr)
    return evaluate_outputs(out, sample, out.distance.data, model.seg_classes, model.det_classes)
