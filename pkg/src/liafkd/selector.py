"""Learnable instance selectors: scoring, diversity penalty and stage-1 loss."""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, save_checkpoint
from .roi import RoiFeatureBatch

SCOPES = ("batch", "image")


class SelectorEnsemble(nn.Module):
    """``K`` selector vectors of length ``C*h*w`` stored as one ``[K, D]`` parameter."""

    def __init__(self, vectors: Tensor):
        super().__init__()
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise ValueError(f"selector vectors must be [K>=1, D>=1], got {tuple(vectors.shape)}")
        self.vectors = nn.Parameter(vectors.clone())

    @property
    def K(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class AttentionScores:
    values: Tensor  # [I, 1]
    source: str = "teacher"
    per_selector: Optional[Tensor] = None  # [K, I, 1]

    def flat(self) -> Tensor:
        return self.values.reshape(-1)


def init_ensemble(K: int, dim: int, seed: int, dtype=torch.float32) -> SelectorEnsemble:
    """Gaussian init with std ``1/sqrt(dim)``, fully determined by ``seed``."""
    if K < 1 or dim < 1:
        raise ValueError(f"need K >= 1 and dim >= 1, got K={K}, dim={dim}")
    gen = torch.Generator().manual_seed(int(seed))
    vecs = torch.randn(K, dim, generator=gen, dtype=torch.float64) / math.sqrt(dim)
    # a zero row would make the diversity ratio undefined; redraw it
    for k in range(K):
        while float(vecs[k].norm()) == 0.0:
            vecs[k] = torch.randn(dim, generator=gen, dtype=torch.float64) / math.sqrt(dim)
    return SelectorEnsemble(vecs.to(dtype))


def vectors_of(ensemble) -> Tensor:
    """The ``[K, D]`` selector matrix of an ensemble or of a raw tensor."""
    return ensemble.vectors if isinstance(ensemble, SelectorEnsemble) else ensemble


def _softmax(logits: Tensor, groups: Optional[Tensor]) -> Tensor:
    if groups is None:
        return torch.softmax(logits, dim=0)
    out = torch.empty_like(logits)
    for g in torch.unique(groups):
        sel = groups == g
        out = out.masked_scatter(sel, torch.softmax(logits[sel], dim=0))
    return out


def _groups(roi: RoiFeatureBatch, scope: str) -> Optional[Tensor]:
    if scope not in SCOPES:
        raise ValueError(f"softmax scope must be one of {SCOPES}, got {scope!r}")
    if scope == "batch":
        return None
    if len(roi.batch_index) != roi.count:
        raise ValueError("per-image softmax needs batch_index on the ROI batch")
    return roi.batch_index


def score_instances(roi: RoiFeatureBatch, ensemble: SelectorEnsemble, k: int,
                    scope: str = "batch") -> Tensor:
    """Scores of selector ``k``: softmax over instances of ``F_roi @ E_k``; ``[I, 1]``.

    With ``scope="image"`` the softmax runs separately over the instances of
    each image instead of over the whole batch.
    """
    E = vectors_of(ensemble)
    if roi.values.shape[1] != E.shape[1]:
        raise ValueError(f"ROI width {roi.values.shape[1]} != selector width {E.shape[1]}")
    if roi.count == 0:
        return roi.values.new_zeros((0, 1))
    logits = roi.values @ E[k].to(roi.values.dtype)
    return _softmax(logits, _groups(roi, scope)).unsqueeze(1)


def average_scores(roi: RoiFeatureBatch, ensemble: SelectorEnsemble, scope: str = "batch",
                   source: str = "teacher") -> AttentionScores:
    E = vectors_of(ensemble)
    K = E.shape[0]
    if roi.values.shape[1] != E.shape[1]:
        raise ValueError(f"ROI width {roi.values.shape[1]} != selector width {E.shape[1]}")
    if roi.count == 0:
        empty = roi.values.new_zeros((0, 1))
        return AttentionScores(empty, source, roi.values.new_zeros((K, 0, 1)))
    groups = _groups(roi, scope)
    logits = roi.values @ E.to(roi.values.dtype).t()  # [I, K]
    per = torch.stack([_softmax(logits[:, k], groups) for k in range(K)]).unsqueeze(2)
    return AttentionScores(per.mean(dim=0), source, per)


def diversity_loss(ensemble) -> Tensor:
    """Normalized sum of cross dot products between distinct selectors.

    ``2 * sum_{i != j} E_i.E_j / (sum_i |E_i|^2 + sum_j |E_j|^2)``. Returns 0
    for a single selector. Accepts a :class:`SelectorEnsemble` or a raw
    ``[K, D]`` tensor.
    """
    E = vectors_of(ensemble)
    if E.shape[0] == 1:
        return (E * 0).sum()
    gram = E @ E.t()
    sq = torch.diagonal(gram).sum()
    if sq.detach().item() == 0.0:
        raise ZeroDivisionError("all selector vectors are zero")
    cross = gram.sum() - sq
    return 2 * cross / (2 * sq)


def selector_training_loss(task_loss: Tensor, ensemble, mu: float) -> Tensor:
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if mu == 0:
        return task_loss
    return task_loss + mu * diversity_loss(ensemble)


def save_ensemble(path, ensemble: SelectorEnsemble, meta: dict):
    """Write ``E`` plus metadata (K, C, h, w, seed, step, ...) to an npz container."""
    meta = dict(meta, K=ensemble.K, dim=ensemble.dim, kind="selector_ensemble")
    save_checkpoint(path, {"E": ensemble.vectors.detach().cpu().numpy()}, meta)


def load_ensemble(path, dtype=torch.float32):
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "selector_ensemble":
        raise ValueError(f"{path} is not a selector ensemble checkpoint")
    E = torch.from_numpy(np.asarray(arrays["E"])).to(dtype)
    return SelectorEnsemble(E), meta
