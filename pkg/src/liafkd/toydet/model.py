"""Tiny single-level dense detector (stride 8) used as teacher and student."""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

STRIDE = 8


@dataclass
class DetectorOutput:
    neck_features: Tensor  # [N, C, H, W]
    class_logits: Tensor  # [N, num_classes, H, W]
    box_deltas: Tensor  # [N, 4, H, W], (left, top, right, bottom) / stride
    stride: int = STRIDE


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU(inplace=True))


class TinyDetector(nn.Module):
    """Three stride-2 stages, one neck conv, and shared-trunk dense heads."""

    def __init__(self, width: int = 32, num_classes: int = 3, prior: float = 0.01):
        super().__init__()
        self.width = width
        self.num_classes = num_classes
        self.backbone = nn.Sequential(
            _conv(3, max(width // 4, 8), 2),
            _conv(max(width // 4, 8), max(width // 2, 8), 2),
            _conv(max(width // 2, 8), width, 2),
        )
        self.neck = _conv(width, width)
        self.head_trunk = _conv(width, width)
        self.cls_out = nn.Conv2d(width, num_classes, 1)
        self.reg_out = nn.Conv2d(width, 4, 1)
        nn.init.constant_(self.cls_out.bias, -math.log((1 - prior) / prior))
        nn.init.constant_(self.reg_out.bias, 1.0)

    @property
    def stride(self) -> int:
        return STRIDE

    def features(self, images: Tensor) -> Tensor:
        return self.neck(self.backbone(images))

    def heads(self, feats: Tensor):
        t = self.head_trunk(feats)
        return self.cls_out(t), self.reg_out(t)

    def forward(self, images: Tensor) -> DetectorOutput:
        feats = self.features(images)
        cls, reg = self.heads(feats)
        return DetectorOutput(feats, cls, reg, STRIDE)


def build_detector(width: int, num_classes: int, seed: int) -> TinyDetector:
    """Initialize deterministically from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return TinyDetector(width, num_classes)


def detector_forward(model: nn.Module, images: Tensor) -> DetectorOutput:
    return model(images)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def nms(boxes: Tensor, scores: Tensor, iou_threshold: float) -> Tensor:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.argsort(scores, descending=True, stable=True)
    x1, y1, x2, y2 = boxes.unbind(1)
    areas = (x2 - x1).clamp(min=0) * (y2 - y1).clamp(min=0)
    keep = []
    suppressed = torch.zeros(len(boxes), dtype=torch.bool)
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        ix = (torch.minimum(x2[i], x2) - torch.maximum(x1[i], x1)).clamp(min=0)
        iy = (torch.minimum(y2[i], y2) - torch.maximum(y1[i], y1)).clamp(min=0)
        inter = ix * iy
        iou = inter / (areas[i] + areas - inter).clamp(min=1e-12)
        suppressed |= iou > iou_threshold
    return torch.tensor(keep, dtype=torch.long)


@torch.no_grad()
def decode(output: DetectorOutput, score_thresh: float = 0.05, topk: int = 100,
           nms_iou: float = 0.5, image_size=None):
    """Turn dense head outputs into per-image ``(boxes, scores, labels)`` numpy triples."""
    N, K, H, W = output.class_logits.shape
    s = output.stride
    ys, xs = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
    cx = ((xs + 0.5) * s).reshape(-1).float()
    cy = ((ys + 0.5) * s).reshape(-1).float()
    results = []
    for n in range(N):
        prob = torch.sigmoid(output.class_logits[n].float()).reshape(K, -1)  # [K, HW]
        ltrb = F.relu(output.box_deltas[n].float()).reshape(4, -1) * s
        boxes_all = torch.stack([cx - ltrb[0], cy - ltrb[1], cx + ltrb[2], cy + ltrb[3]], 1)
        if image_size is not None:
            boxes_all = boxes_all.clamp(0, image_size)
        cls_idx, loc_idx = (prob > score_thresh).nonzero(as_tuple=True)
        scores = prob[cls_idx, loc_idx]
        if scores.numel() > topk * 4:
            top = torch.topk(scores, topk * 4).indices
            cls_idx, loc_idx, scores = cls_idx[top], loc_idx[top], scores[top]
        boxes = boxes_all[loc_idx]
        kept = []
        for c in torch.unique(cls_idx).tolist():
            sel = (cls_idx == c).nonzero(as_tuple=True)[0]
            kept.append(sel[nms(boxes[sel], scores[sel], nms_iou)])
        if kept:
            kept = torch.cat(kept)
            kept = kept[torch.argsort(scores[kept], descending=True, stable=True)][:topk]
        else:
            kept = torch.zeros(0, dtype=torch.long)
        results.append((boxes[kept].numpy(), scores[kept].numpy(), cls_idx[kept].numpy()))
    return results
