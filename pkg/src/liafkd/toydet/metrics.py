"""COCO-style mean average precision with greedy IoU matching.

Predictions of one class are visited from the highest score down. Equal
scores are ordered by box coordinates (x1, y1, x2, y2) and then by image
index, so the result does not depend on the order predictions are listed
in. Each prediction matches the unmatched ground truth of the same image
with the highest IoU, provided that IoU reaches the threshold. AP is the
area under the all-point interpolated precision-recall curve.
"""
import numpy as np

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from a score-ordered true-positive indicator."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def _class_ap(preds, gts, cls, thresholds):
    """AP of one class at every threshold, or ``None`` if the class has no ground truth."""
    gt_boxes = {}
    num_gt = 0
    for n, (boxes, labels) in enumerate(gts):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        sel = boxes[np.asarray(labels).reshape(-1) == cls]
        if len(sel):
            gt_boxes[n] = sel
            num_gt += len(sel)
    if num_gt == 0:
        return None

    records = []  # (score, box, image)
    for n, (boxes, scores, labels) in enumerate(preds):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        for i in np.nonzero(labels == cls)[0]:
            records.append((scores[i], tuple(boxes[i]), n))
    records.sort(key=lambda r: (-r[0], r[1], r[2]))

    ious = []
    for _, box, n in records:
        if n in gt_boxes:
            ious.append(box_iou(np.asarray([box]), gt_boxes[n])[0])
        else:
            ious.append(None)

    out = []
    for thr in thresholds:
        taken = {n: np.zeros(len(b), dtype=bool) for n, b in gt_boxes.items()}
        tp = np.zeros(len(records))
        for k, (_, _, n) in enumerate(records):
            iou = ious[k]
            if iou is None:
                continue
            cand = np.where(taken[n], -1.0, iou)
            j = int(np.argmax(cand))
            if cand[j] >= thr:
                taken[n][j] = True
                tp[k] = 1.0
        out.append(average_precision(tp, num_gt))
    return out


def evaluate_map(predictions, ground_truths, num_classes: int, iou_thresholds=COCO_THRESHOLDS):
    """mAP over ``iou_thresholds`` plus AP50 / AP75, averaged over classes with ground truth.

    ``predictions``: per image ``(boxes [k, 4], scores [k], labels [k])``.
    ``ground_truths``: per image ``(boxes [g, 4], labels [g])``.
    Images with neither predictions nor ground truth do not affect the
    result. Values are fractions in [0, 1]; a toy-mAP "point" is 0.01.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths cover different image counts")
    thresholds = [float(t) for t in iou_thresholds]
    for extra in (0.5, 0.75):
        if not any(abs(t - extra) < 1e-9 for t in thresholds):
            thresholds.append(extra)
    per_class = {}
    for c in range(num_classes):
        aps = _class_ap(predictions, ground_truths, c, thresholds)
        if aps is not None:
            per_class[c] = dict(zip(thresholds, aps))
    if not per_class:
        return {"map": 0.0, "ap50": 0.0, "ap75": 0.0, "per_class": {}}

    def pick(t):
        return next(k for k in thresholds if abs(k - t) < 1e-9)

    main = [float(t) for t in iou_thresholds]
    cls_map = {c: float(np.mean([aps[pick(t)] for t in main])) for c, aps in per_class.items()}
    return {
        "map": float(np.mean(list(cls_map.values()))),
        "ap50": float(np.mean([aps[pick(0.5)] for aps in per_class.values()])),
        "ap75": float(np.mean([aps[pick(0.75)] for aps in per_class.values()])),
        "per_class": cls_map,
    }
