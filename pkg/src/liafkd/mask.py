"""Instance soft masks and masked feature-distillation losses."""
import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .roi import InstanceSet
from .selector import AttentionScores

RESCALE_MODES = ("none", "mean_one")


class ChannelProjection(nn.Module):
    """1x1 convolution mapping student channels onto teacher channels."""

    def __init__(self, c_student: int, c_teacher: int, bias: bool = True, generator=None):
        super().__init__()
        bound = 1.0 / math.sqrt(c_student)
        w = torch.empty(c_teacher, c_student).uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        if bias:
            self.bias = nn.Parameter(torch.zeros(c_teacher))
        else:
            self.register_parameter("bias", None)

    @classmethod
    def identity(cls, channels: int, dtype=torch.float32):
        proj = cls(channels, channels, bias=False)
        with torch.no_grad():
            proj.weight.copy_(torch.eye(channels, dtype=proj.weight.dtype))
        return proj.to(dtype)

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[0])

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"projection expects {self.weight.shape[1]} channels, got {x.shape[1]}")
        return F.conv2d(x, self.weight[:, :, None, None], self.bias)


def raster_bounds(box, H: int, W: int):
    """Outward integer rounding of a feature-coordinate box, clipped to the map."""
    x1, y1, x2, y2 = (float(v) for v in box)
    return (
        max(int(math.floor(x1)), 0),
        max(int(math.floor(y1)), 0),
        min(int(math.ceil(x2)), W),
        min(int(math.ceil(y2)), H),
    )


def rescale_scores(scores: Tensor, batch_index: Tensor, rescale: str, scope: str = "batch") -> Tensor:
    """``mean_one``: multiply by the size of the softmax group, then cap at 1."""
    if rescale not in RESCALE_MODES:
        raise ValueError(f"rescale must be one of {RESCALE_MODES}, got {rescale!r}")
    if rescale == "none" or scores.numel() == 0:
        return scores
    if scope == "batch":
        sizes = torch.full_like(scores, float(scores.numel()))
    else:
        counts = torch.bincount(batch_index)
        sizes = counts[batch_index].to(scores.dtype)
    return (scores * sizes).clamp(max=1.0)


def build_soft_mask(instances: InstanceSet, scores, shape, rescale: str = "none",
                    scope: str = "batch") -> Tensor:
    """Start from ones and multiply every instance region by its score.

    Returns ``[N, 1, H, W]``; overlapping instances multiply. Differentiable
    with respect to ``scores``.
    """
    N, H, W = shape
    a = scores.values if isinstance(scores, AttentionScores) else scores
    a = torch.as_tensor(a).reshape(-1)
    if a.numel() != instances.count:
        raise ValueError(f"{a.numel()} scores for {instances.count} instances")
    dtype = a.dtype if a.is_floating_point() else torch.float32
    if instances.count == 0:
        return torch.ones(N, 1, H, W, dtype=dtype)
    a = rescale_scores(a, instances.batch_index, rescale, scope)

    # one multiply per instance slot: images advance through their instances in
    # order, so every pixel sees the same sequential product as the per-pixel rule
    boxes = instances.boxes.detach().to(torch.float64)
    x1 = boxes[:, 0].floor().clamp(min=0).long()
    y1 = boxes[:, 1].floor().clamp(min=0).long()
    x2 = boxes[:, 2].ceil().clamp(max=W).long()
    y2 = boxes[:, 3].ceil().clamp(max=H).long()
    ys = torch.arange(H)[None, :, None]
    xs = torch.arange(W)[None, None, :]
    region = ((ys >= y1[:, None, None]) & (ys < y2[:, None, None])
              & (xs >= x1[:, None, None]) & (xs < x2[:, None, None]))
    bidx = instances.batch_index
    slot = torch.zeros_like(bidx)
    seen = {}
    for i, n in enumerate(bidx.tolist()):
        slot[i] = seen.get(n, 0)
        seen[n] = slot[i].item() + 1
    one = torch.ones((), dtype=dtype)
    mask = torch.ones(N, H, W, dtype=dtype)
    for j in range(int(slot.max()) + 1):
        sel = (slot == j).nonzero().flatten()
        factor = torch.where(region[sel], a[sel, None, None].to(dtype), one)
        mask = mask * torch.ones(N, H, W, dtype=dtype).index_put((bidx[sel],), factor)
    return mask.unsqueeze(1)


def apply_mask(features: Tensor, mask: Tensor) -> Tensor:
    """Broadcast a ``[N, 1, H, W]`` mask over channels and multiply."""
    N, C, H, W = features.shape
    if mask.shape != (N, 1, H, W):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match features {tuple(features.shape)}")
    return features * mask.expand(N, C, H, W)


def masked_distill_loss(f_teacher: Tensor, f_student: Tensor, mask_teacher: Tensor,
                        mask_student: Tensor, proj: nn.Module) -> Tensor:
    """Mean squared gap between separately reweighted teacher and projected student maps.

    ``|F_T * M_T - proj(F_S) * M_S|^2 / (N*C*H*W)``.
    """
    projected = proj(f_student)
    if projected.shape != f_teacher.shape:
        raise ValueError(f"projected student {tuple(projected.shape)} != teacher {tuple(f_teacher.shape)}")
    diff = apply_mask(f_teacher, mask_teacher) - apply_mask(projected, mask_student)
    return diff.pow(2).sum() / diff.numel()


def generic_masked_loss(f_teacher: Tensor, f_student: Tensor, mask: Tensor, proj: nn.Module) -> Tensor:
    projected = proj(f_student)
    if projected.shape != f_teacher.shape:
        raise ValueError(f"projected student {tuple(projected.shape)} != teacher {tuple(f_teacher.shape)}")
    diff = apply_mask(f_teacher - projected, mask)
    return diff.pow(2).sum() / diff.numel()


def ones_mask(N: int, H: int, W: int, dtype=torch.float32) -> Tensor:
    return torch.ones(N, 1, H, W, dtype=dtype)
