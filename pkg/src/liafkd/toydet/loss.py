"""Dense detection loss: sigmoid focal classification plus L1 box regression.

Assignment rule: a feature location is positive for a ground-truth box when
its center ``((j + 0.5) * stride, (i + 0.5) * stride)`` lies inside the box.
A location inside several boxes takes the one with the smallest area.
Regression targets are the distances to the four box sides divided by the
stride.
"""
import torch
import torch.nn.functional as F
from torch import Tensor


def assign_targets(gts, H: int, W: int, stride: int, num_classes: int, dtype=torch.float32):
    """Dense targets for a batch: one-hot classes ``[N, K, H, W]``, ltrb ``[N, 4, H, W]``, positives ``[N, H, W]``."""
    N = len(gts)
    cls_t = torch.zeros(N, num_classes, H, W, dtype=dtype)
    reg_t = torch.zeros(N, 4, H, W, dtype=dtype)
    pos = torch.zeros(N, H, W, dtype=torch.bool)
    cy = (torch.arange(H, dtype=dtype) + 0.5) * stride
    cx = (torch.arange(W, dtype=dtype) + 0.5) * stride
    for n, (boxes, labels) in enumerate(gts):
        boxes = torch.as_tensor(boxes, dtype=dtype).reshape(-1, 4)
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if boxes.shape[0] == 0:
            continue
        area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        best_area = torch.full((H, W), float("inf"), dtype=dtype)
        # larger boxes first so that smaller ones overwrite them
        for b in torch.argsort(area, descending=True, stable=True).tolist():
            x1, y1, x2, y2 = boxes[b]
            inside = ((cy >= y1) & (cy < y2))[:, None] & ((cx >= x1) & (cx < x2))[None, :]
            take = inside & (area[b] < best_area)
            if not bool(take.any()):
                continue
            best_area[take] = area[b]
            pos[n] |= take
            cls_t[n, :, take] = 0.0
            cls_t[n, labels[b], take] = 1.0
            ltrb = torch.stack([
                (cx[None, :] - x1).expand(H, W), (cy[:, None] - y1).expand(H, W),
                (x2 - cx[None, :]).expand(H, W), (y2 - cy[:, None]).expand(H, W),
            ]) / stride
            reg_t[n][:, take] = ltrb[:, take]
    return cls_t, reg_t, pos


def focal_loss(logits: Tensor, targets: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss (summed by the caller)."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def detection_task_loss(output, gts, reg_weight: float = 1.0, return_parts: bool = False,
                        targets=None):
    """Focal classification over all locations plus L1 regression on positives.

    Both terms are normalized by ``max(1, #positives)``. Batches without any
    instance contribute the classification term only. ``targets`` may carry
    precomputed :func:`assign_targets` output, in which case ``gts`` is unused.
    """
    cls_logits, box_deltas = output.class_logits, output.box_deltas
    N, K, H, W = cls_logits.shape
    if targets is None:
        targets = assign_targets(gts, H, W, output.stride, K, cls_logits.dtype)
    cls_t, reg_t, pos = targets
    num_pos = max(int(pos.sum()), 1)
    cls_loss = focal_loss(cls_logits, cls_t).sum() / num_pos
    if bool(pos.any()):
        pred = box_deltas.permute(0, 2, 3, 1)[pos]
        target = reg_t.permute(0, 2, 3, 1)[pos]
        reg_loss = (pred - target).abs().sum() / num_pos
    else:
        reg_loss = box_deltas.sum() * 0.0
    total = cls_loss + reg_weight * reg_loss
    if return_parts:
        return total, {"cls": float(cls_loss.detach()), "reg": float(reg_loss.detach())}
    return total
