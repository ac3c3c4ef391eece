"""Box geometry and RoIAlign pooling of instance features.

Coordinate convention (frozen, the oracle tests depend on it):

* Boxes are continuous, half-open rectangles ``[x1, x2) x [y1, y2)`` in
  feature-map units.
* Feature pixel ``(i, j)`` has its center at ``(x, y) = (j + 0.5, i + 0.5)``.
* A sample point is evaluated by bilinear interpolation between the four
  nearest pixel centers. Points closer than half a pixel to the border are
  clamped onto the outermost pixel centers (edge replication).
* Each output bin averages ``samples_per_bin x samples_per_bin`` points laid
  out on a regular grid at the centers of equal sub-cells of the bin.

Flattening of pooled features is channel-major: ``(c, row, col)``.
"""
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "BoxOutOfBounds",
    "InstanceSet",
    "RoiFeatureBatch",
    "clip_and_scale_box",
    "is_degenerate",
    "roi_align",
    "roi_align_many",
    "extract_roi_batch",
]


class BoxOutOfBounds(ValueError):
    """Box does not intersect the feature map at all."""


def clip_and_scale_box(box, stride, bounds):
    """Map an image-space box onto a feature map of size ``bounds = (H, W)``.

    The box is divided by ``stride`` and clipped to ``[0, W] x [0, H]``. A box
    that only touches the border comes back with zero area; check it with
    :func:`is_degenerate`. A box lying strictly outside raises
    :class:`BoxOutOfBounds`.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"box has non-positive area: {box}")
    H, W = bounds
    x1, y1, x2, y2 = x1 / stride, y1 / stride, x2 / stride, y2 / stride
    if x1 > W or y1 > H or x2 < 0 or y2 < 0:
        raise BoxOutOfBounds(f"box {tuple(box)} lies outside a {H}x{W} map at stride {stride}")
    return (
        min(max(x1, 0.0), W),
        min(max(y1, 0.0), H),
        min(max(x2, 0.0), W),
        min(max(y2, 0.0), H),
    )


def is_degenerate(box):
    x1, y1, x2, y2 = box
    return not (x2 > x1 and y2 > y1)


@dataclass
class InstanceSet:
    """Instance boxes (feature coordinates) with image indices and labels."""

    boxes: Tensor  # [I, 4] (x1, y1, x2, y2)
    batch_index: Tensor  # [I] long
    labels: Tensor  # [I] long

    @property
    def count(self) -> int:
        return int(self.boxes.shape[0])

    def __len__(self):
        return self.count

    @classmethod
    def empty(cls, dtype=torch.float32):
        return cls(
            torch.zeros((0, 4), dtype=dtype),
            torch.zeros(0, dtype=torch.long),
            torch.zeros(0, dtype=torch.long),
        )

    @classmethod
    def from_image_boxes(cls, per_image, stride, bounds, dtype=torch.float32):
        """Build from ``[(boxes_xyxy, labels), ...]`` given in image pixels.

        Boxes that end up with zero area after clipping are dropped with a
        warning; boxes outside the map propagate :class:`BoxOutOfBounds`.
        """
        boxes, bidx, labels = [], [], []
        for n, (img_boxes, img_labels) in enumerate(per_image):
            for box, label in zip(img_boxes, img_labels):
                fbox = clip_and_scale_box(box, stride, bounds)
                if is_degenerate(fbox):
                    log.warning("dropping degenerate box %s in image %d", tuple(box), n)
                    continue
                boxes.append(fbox)
                bidx.append(n)
                labels.append(int(label))
        if not boxes:
            return cls.empty(dtype)
        return cls(
            torch.tensor(boxes, dtype=dtype),
            torch.tensor(bidx, dtype=torch.long),
            torch.tensor(labels, dtype=torch.long),
        )

    def validate(self, N, H, W):
        b = self.boxes
        if b.ndim != 2 or b.shape[1] != 4:
            raise ValueError(f"boxes must be [I, 4], got {tuple(b.shape)}")
        if not (len(self.batch_index) == len(self.labels) == self.count):
            raise ValueError("boxes, batch_index and labels disagree in length")
        if self.count == 0:
            return
        ok = (
            (b[:, 0] >= 0) & (b[:, 0] < b[:, 2]) & (b[:, 2] <= W)
            & (b[:, 1] >= 0) & (b[:, 1] < b[:, 3]) & (b[:, 3] <= H)
        )
        if not bool(ok.all()):
            bad = int((~ok).nonzero()[0, 0])
            raise ValueError(f"box {b[bad].tolist()} invalid for a {H}x{W} map")
        if int(self.batch_index.min()) < 0 or int(self.batch_index.max()) >= N:
            raise ValueError(f"batch_index out of range for N={N}")

    def permute(self, order):
        order = torch.as_tensor(order, dtype=torch.long)
        return InstanceSet(self.boxes[order], self.batch_index[order], self.labels[order])


@dataclass
class RoiFeatureBatch:
    values: Tensor  # [I, C*h*w]
    pool_h: int
    pool_w: int
    batch_index: Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    instance_ids: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


def _sample_coords(lo: Tensor, hi: Tensor, bins: int, samples: int) -> Tensor:
    # lo, hi: [R] -> [R, bins * samples], sub-cell centers ordered bin-major
    size = (hi - lo) / bins
    steps = torch.arange(bins * samples, dtype=lo.dtype, device=lo.device)
    offsets = (steps + 0.5) / samples
    return lo[:, None] + offsets[None, :] * size[:, None]


def _to_index_space(coord: Tensor, extent: int):
    # continuous coordinate -> (low index, high index, weight of high index)
    u = (coord - 0.5).clamp(0.0, extent - 1)
    lo = u.floor().long().clamp(max=max(extent - 2, 0))
    hi = (lo + 1).clamp(max=extent - 1)
    frac = u - lo.to(u.dtype)
    return lo, hi, frac


def _axis_weights(lo: Tensor, hi: Tensor, bins: int, samples: int, extent: int) -> Tensor:
    # [R, bins, extent]: bilinear weight of each feature row/column, averaged over the bin's samples
    coords = _sample_coords(lo, hi, bins, samples)
    i0, i1, frac = _to_index_space(coords, extent)
    w = coords.new_zeros(coords.shape + (extent,))
    w.scatter_add_(2, i0[..., None], (1 - frac)[..., None])
    w.scatter_add_(2, i1[..., None], frac[..., None])
    return w.reshape(lo.shape[0], bins, samples, extent).mean(dim=2)


def roi_align_many(features: Tensor, boxes: Tensor, batch_index: Tensor,
                   out_h: int, out_w: int, samples_per_bin: int = 2) -> Tensor:
    """Pool ``R`` boxes at once; returns ``[R, C, out_h, out_w]``.

    Bilinear sampling is separable, so each box reduces to a row-weight and a
    column-weight matrix contracted with its feature map. Differentiable with
    respect to ``features`` through autograd.
    """
    if out_h < 1 or out_w < 1 or samples_per_bin < 1:
        raise ValueError("out_h, out_w and samples_per_bin must be >= 1")
    N, C, H, W = features.shape
    R = boxes.shape[0]
    if R == 0:
        return features.new_zeros((0, C, out_h, out_w))
    boxes = boxes.detach().to(features.dtype)
    wy = _axis_weights(boxes[:, 1], boxes[:, 3], out_h, samples_per_bin, H)
    wx = _axis_weights(boxes[:, 0], boxes[:, 2], out_w, samples_per_bin, W)
    return torch.einsum("rih,rchw,rjw->rcij", wy, features[batch_index], wx)


def roi_align(features: Tensor, box: Sequence[float], batch_index: int,
              h: int, w: int, samples_per_bin: int = 2) -> Tensor:
    """Pool a single feature-coordinate box from image ``batch_index``; ``[C, h, w]``."""
    N, _, H, W = features.shape
    if not 0 <= batch_index < N:
        raise ValueError(f"batch_index {batch_index} out of range for N={N}")
    box_t = torch.as_tensor(box, dtype=features.dtype).reshape(1, 4)
    x1, y1, x2, y2 = box_t[0].tolist()
    if not (0 <= x1 < x2 <= W and 0 <= y1 < y2 <= H):
        raise ValueError(f"box {box} invalid for a {H}x{W} map")
    idx = torch.tensor([batch_index], dtype=torch.long)
    return roi_align_many(features, box_t, idx, h, w, samples_per_bin)[0]


def extract_roi_batch(features: Tensor, instances: InstanceSet, h: int, w: int,
                      samples_per_bin: int = 2) -> RoiFeatureBatch:
    """RoIAlign every instance and flatten channel-major into ``[I, C*h*w]``."""
    N, C, H, W = features.shape
    instances.validate(N, H, W)
    pooled = roi_align_many(features, instances.boxes, instances.batch_index, h, w, samples_per_bin)
    return RoiFeatureBatch(
        values=pooled.reshape(instances.count, C * h * w),
        pool_h=h,
        pool_w=w,
        batch_index=instances.batch_index.clone(),
        instance_ids=list(range(instances.count)),
    )

