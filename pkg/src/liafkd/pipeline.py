"""Two-stage training: frozen teacher, selector learning, student distillation.

Randomness is split into named streams derived from the config seeds so
that, for example, the student initialization does not depend on whether
a projection layer was built first. Teacher and selectors draw from
``teacher_seed``; the student, projection and batch order draw from ``seed``.
"""
import csv
import hashlib
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .checkpoint import arrays_digest, arrays_to_state, load_checkpoint, save_checkpoint, state_to_arrays
from .config import VARIANTS, DistillConfig
from .mask import ChannelProjection, build_soft_mask, generic_masked_loss, masked_distill_loss, ones_mask
from .roi import InstanceSet, extract_roi_batch
from .selector import (SelectorEnsemble, average_scores, diversity_loss, init_ensemble,
                       selector_training_loss)
from .toydet import STRIDE, Corpus, DetectorOutput, assign_targets, build_detector, decode
from .toydet import detection_task_loss, evaluate_map

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, step, values):
        super().__init__(f"{stage}: non-finite loss at step {step}: {values}")
        self.stage = stage
        self.step = step


def stream_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generator(root: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(root, name))


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------- data


class Dataset:
    """A corpus plus its precomputed dense targets and feature-space instances."""

    def __init__(self, corpus: Corpus, num_classes: int):
        self.corpus = corpus
        size = corpus.spec.image_size
        if size % STRIDE:
            raise ValueError(f"image size {size} is not a multiple of the stride {STRIDE}")
        self.H = self.W = size // STRIDE
        gts = [(corpus.boxes[i], corpus.labels[i]) for i in range(len(corpus))]
        cls_t, reg_t, pos = assign_targets(gts, self.H, self.W, STRIDE, num_classes) if gts else (None,) * 3
        self.cls_t, self.reg_t, self.pos = cls_t, reg_t, pos

    def __len__(self):
        return len(self.corpus)

    def batch(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        images, gts = self.corpus.batch(idx)
        t = torch.from_numpy(idx)
        targets = (self.cls_t[t], self.reg_t[t], self.pos[t])
        instances = InstanceSet.from_image_boxes(gts, STRIDE, (self.H, self.W))
        return images, gts, targets, instances

    def ground_truths(self):
        return [(self.corpus.boxes[i], self.corpus.labels[i]) for i in range(len(self.corpus))]


@dataclass
class Data:
    train: Dataset
    eval: Dataset


def make_data(cfg: DistillConfig) -> Data:
    spec = cfg.scene_spec()
    train = Corpus.generate(cfg.data_seed, cfg.train_scenes, spec, offset=0)
    held_out = Corpus.generate(cfg.data_seed, cfg.eval_scenes, spec, offset=cfg.train_scenes)
    return Data(Dataset(train, cfg.num_classes), Dataset(held_out, cfg.num_classes))


def batch_order(n: int, batch_size: int, epochs: int, gen: torch.Generator):
    """Shuffled index batches for every epoch; the last partial batch is kept."""
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen).numpy()
        for start in range(0, n, batch_size):
            yield epoch, perm[start:start + batch_size]


# ------------------------------------------------------------------ records


class RunRecord:
    """Append-only log of step losses and epoch evaluations."""

    def __init__(self, cfg: DistillConfig, stage: str, variant: Optional[str] = None):
        self.header = {
            "stage": stage,
            "variant": variant,
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "code_hash": code_hash(),
        }
        self.rows = []
        self._t0 = time.perf_counter()

    def log(self, kind: str, step: int, **values):
        row = {"kind": kind, "step": int(step), "wall_time": round(time.perf_counter() - self._t0, 4)}
        row.update(values)
        self.rows.append(row)
        return row

    def curve(self, name: str, kind: str = "step") -> np.ndarray:
        return np.array([r[name] for r in self.rows if r["kind"] == kind and name in r], dtype=np.float64)

    def evals(self):
        return [r for r in self.rows if r["kind"] == "eval"]

    @property
    def final_metrics(self) -> dict:
        evals = self.evals()
        return {k: evals[-1][k] for k in ("map", "ap50", "ap75")} if evals else {}

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", **self.header}, sort_keys=True) + "\n")
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def write_summary_csv(self, path):
        final = self.final_metrics
        steps = [r for r in self.rows if r["kind"] == "step"]
        last = steps[-1] if steps else {}
        row = {
            "stage": self.header["stage"],
            "variant": self.header["variant"] or "",
            "seed": self.header["config"]["seed"],
            "steps": len(steps),
            "final_task": last.get("task", ""),
            "final_distill": last.get("distill", ""),
            "map": final.get("map", ""),
            "ap50": final.get("ap50", ""),
            "ap75": final.get("ap75", ""),
            "config_hash": self.header["config_hash"],
        }
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)


def _check_finite(stage, step, **values):
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(stage, step, values)


def _sgd(params, lr, cfg: DistillConfig):
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _cosine(base_lr, step, total):
    return 0.5 * base_lr * (1 + math.cos(math.pi * step / max(total, 1)))


def _steps_per_epoch(n, batch_size):
    return (n + batch_size - 1) // batch_size


# --------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(model: nn.Module, dataset: Dataset, cfg: DistillConfig, batch_size: int = 100):
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, len(dataset), batch_size):
        images, *_ = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        out = model(images)
        preds.extend(decode(out, cfg.score_thresh, nms_iou=cfg.nms_iou, image_size=cfg.image_size))
    model.train(was_training)
    return preds


def evaluate(model: nn.Module, dataset: Dataset, cfg: DistillConfig) -> dict:
    if len(dataset) == 0:
        return {"map": 0.0, "ap50": 0.0, "ap75": 0.0}
    metrics = evaluate_map(predict(model, dataset, cfg), dataset.ground_truths(), cfg.num_classes)
    return {k: metrics[k] for k in ("map", "ap50", "ap75")}


@torch.no_grad()
def neck_features(model: nn.Module, dataset: Dataset, batch_size: int = 100) -> torch.Tensor:
    was_training = model.training
    model.eval()
    chunks = []
    for start in range(0, len(dataset), batch_size):
        images, *_ = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        chunks.append(model.features(images))
    model.train(was_training)
    return torch.cat(chunks) if chunks else torch.zeros(0)


# ------------------------------------------------------------------ teacher


@dataclass
class TeacherResult:
    model: nn.Module
    record: RunRecord
    metrics: dict = field(default_factory=dict)


def train_teacher(data: Data, cfg: DistillConfig, evaluate_final: bool = True) -> TeacherResult:
    """Train the wide detector on the task loss only; it stays frozen afterwards."""
    if len(data.train) == 0:
        raise ValueError("cannot train a teacher on an empty corpus")
    model = build_detector(cfg.teacher_width, cfg.num_classes, stream_seed(cfg.teacher_seed, "teacher_init"))
    record = RunRecord(cfg, "teacher")
    total = cfg.teacher_epochs * _steps_per_epoch(len(data.train), cfg.batch_size)
    opt = _sgd(model.parameters(), cfg.lr_teacher, cfg)
    order = generator(cfg.teacher_seed, "teacher_order")
    model.train()
    step = 0
    last_epoch = 0
    for epoch, idx in batch_order(len(data.train), cfg.batch_size, cfg.teacher_epochs, order):
        if epoch != last_epoch:
            _maybe_eval(record, model, data, cfg, last_epoch, step)
            last_epoch = epoch
        images, _, targets, _ = data.train.batch(idx)
        for group in opt.param_groups:
            group["lr"] = _cosine(cfg.lr_teacher, step, total)
        loss, parts = detection_task_loss(model(images), None, targets=targets, return_parts=True)
        _check_finite("teacher", step, task=loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        record.log("step", step, epoch=epoch, task=loss.item(), **parts)
        step += 1
    metrics = {}
    if evaluate_final:
        metrics = evaluate(model, data.eval, cfg)
        record.log("eval", step, epoch=cfg.teacher_epochs, **metrics)
    freeze(model)
    return TeacherResult(model, record, metrics)


def _maybe_eval(record, model, data, cfg, epoch, step):
    # intermediate evaluations; the final one is always run by the caller
    if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
        record.log("eval", step, epoch=epoch + 1, **evaluate(model, data.eval, cfg))


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------- selectors


@dataclass
class SelectorResult:
    ensemble: SelectorEnsemble
    record: RunRecord
    initial_diversity: float
    final_diversity: float


def train_selectors(teacher: nn.Module, data: Data, cfg: DistillConfig,
                    teacher_feats: Optional[torch.Tensor] = None) -> SelectorResult:
    """Learn the selector vectors through the frozen teacher's task loss.

    Each batch: pool teacher ROI features, average the selector scores,
    build the soft mask, run the teacher heads on the masked neck features
    and step ``task + mu * diversity`` with respect to the selectors only.
    """
    freeze(teacher)
    feats = neck_features(teacher, data.train) if teacher_feats is None else teacher_feats
    C = feats.shape[1]
    ensemble = init_ensemble(cfg.K, C * cfg.pool_h * cfg.pool_w, stream_seed(cfg.teacher_seed, "selectors"))
    record = RunRecord(cfg, "selectors")
    initial = diversity_loss(ensemble).item()
    opt = _sgd([ensemble.vectors], cfg.lr_selector, cfg)
    order = generator(cfg.teacher_seed, "selector_order")
    step = 0
    for epoch, idx in batch_order(len(data.train), cfg.batch_size, cfg.selector_epochs, order):
        _, _, targets, inst = data.train.batch(idx)
        if inst.count == 0:
            continue
        f = feats[torch.from_numpy(idx)]
        N, _, H, W = f.shape
        roi = extract_roi_batch(f, inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin)
        scores = average_scores(roi, ensemble, cfg.softmax_scope, "teacher")
        mask = build_soft_mask(inst, scores, (N, H, W), cfg.rescale, cfg.softmax_scope)
        masked = f * mask
        cls, reg = teacher.heads(masked)
        task = detection_task_loss(DetectorOutput(masked, cls, reg), None, targets=targets)
        div = diversity_loss(ensemble)
        loss = selector_training_loss(task, ensemble, cfg.mu)
        _check_finite("selectors", step, task=task.item(), div=div.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
        record.log("step", step, epoch=epoch, task=task.item(), diversity=div.item(), total=loss.item())
        step += 1
    ensemble.vectors.requires_grad_(False)
    return SelectorResult(ensemble, record, initial, diversity_loss(ensemble).item())


# ------------------------------------------------------------------ distill


def distill_loss(f_teacher, f_student, inst: InstanceSet, ensemble: SelectorEnsemble,
                 proj: nn.Module, cfg: DistillConfig, variant: str = "liaf", return_masks: bool = False):
    """Distillation term for one batch under the mask policy of ``variant``.

    ``liaf``: teacher and student scores from their own ROI features (the
    student after projection), combined per ``cfg.mask_mode``.
    ``teacher_only_mask``: teacher scores drive both masks.
    ``fitnet_allones``: all-ones mask. Batches without instances also fall
    back to the all-ones mask.
    """
    N, _, H, W = f_teacher.shape
    if variant == "fitnet_allones" or inst.count == 0:
        m = ones_mask(N, H, W, f_teacher.dtype)
        loss = generic_masked_loss(f_teacher, f_student, m, proj)
        return (loss, m, m) if return_masks else loss

    E = ensemble
    roi_t = extract_roi_batch(f_teacher.detach(), inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin)
    a_t = average_scores(roi_t, E, cfg.softmax_scope, "teacher").values.detach()
    if variant == "teacher_only_mask":
        a_s = a_t
    elif variant == "liaf":
        with torch.set_grad_enabled(torch.is_grad_enabled() and not cfg.detach_scores):
            roi_s = extract_roi_batch(proj(f_student), inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin)
            a_s = average_scores(roi_s, E, cfg.softmax_scope, "student").values
        if cfg.detach_scores:
            a_s = a_s.detach()
    else:
        raise ValueError(f"unknown variant {variant!r}")

    if cfg.mask_mode == "shared_mean" or variant == "teacher_only_mask":
        shared = build_soft_mask(inst, (a_t + a_s) / 2, (N, H, W), cfg.rescale, cfg.softmax_scope)
        m_t = m_s = shared
    else:
        m_t = build_soft_mask(inst, a_t, (N, H, W), cfg.rescale, cfg.softmax_scope)
        m_s = build_soft_mask(inst, a_s, (N, H, W), cfg.rescale, cfg.softmax_scope)
    loss = masked_distill_loss(f_teacher, f_student, m_t, m_s, proj)
    return (loss, m_t, m_s) if return_masks else loss


@torch.no_grad()
def mask_snapshot(teacher: nn.Module, ensemble: SelectorEnsemble, dataset: Dataset, idx, cfg: DistillConfig,
                  student: Optional[nn.Module] = None, proj: Optional[nn.Module] = None) -> dict:
    """Teacher (and optionally student) scores and masks for the images ``idx``."""
    images, gts, _, inst = dataset.batch(idx)
    was_training = teacher.training
    teacher.eval()
    f_t = teacher.features(images)
    teacher.train(was_training)
    N, _, H, W = f_t.shape
    a_t = average_scores(extract_roi_batch(f_t, inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin),
                         ensemble, cfg.softmax_scope, "teacher").values
    out = {"images": images, "instances": inst, "teacher_scores": a_t.flatten(),
           "teacher_mask": build_soft_mask(inst, a_t, (N, H, W), cfg.rescale, cfg.softmax_scope)}
    if student is not None and proj is not None:
        was_training = student.training
        student.eval()
        f_s = proj(student.features(images))
        student.train(was_training)
        a_s = average_scores(extract_roi_batch(f_s, inst, cfg.pool_h, cfg.pool_w, cfg.samples_per_bin),
                             ensemble, cfg.softmax_scope, "student").values
        out["student_scores"] = a_s.flatten()
        out["student_mask"] = build_soft_mask(inst, a_s, (N, H, W), cfg.rescale, cfg.softmax_scope)
    return out


@dataclass
class DistillResult:
    student: nn.Module
    proj: nn.Module
    record: RunRecord
    metrics: dict
    snapshots: dict = field(default_factory=dict)
    batches: dict = field(default_factory=dict)


def build_student(cfg: DistillConfig, teacher_channels: int):
    student = build_detector(cfg.student_width, cfg.num_classes, stream_seed(cfg.seed, "student_init"))
    proj = ChannelProjection(cfg.student_width, teacher_channels, generator=generator(cfg.seed, "proj_init"))
    return student, proj


def distill(teacher: nn.Module, ensemble: Optional[SelectorEnsemble], data: Data, cfg: DistillConfig,
            variant: str = "liaf", teacher_feats: Optional[torch.Tensor] = None,
            snapshot_steps=(), evaluate_final: bool = True) -> DistillResult:
    """Train a student with ``task + lam * distill`` (lam warmed up linearly).

    Teacher and selectors are frozen throughout. ``snapshot_steps`` keeps the
    student/projection state (before the update) and batch indices of those
    steps so a logged distillation loss can be recomputed offline.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    freeze(teacher)
    if variant in ("liaf", "teacher_only_mask"):
        if ensemble is None:
            raise ValueError(f"variant {variant!r} needs a selector ensemble")
        ensemble = SelectorEnsemble(ensemble.vectors.detach())
        ensemble.vectors.requires_grad_(False)
    use_teacher = variant != "no_kd"
    if use_teacher and teacher_feats is None:
        teacher_feats = neck_features(teacher, data.train)
    c_teacher = teacher.width
    student, proj = build_student(cfg, c_teacher)
    record = RunRecord(cfg, "distill", variant)
    params = list(student.parameters()) + (list(proj.parameters()) if use_teacher else [])
    opt = _sgd(params, cfg.lr_student, cfg)
    order = generator(cfg.seed, "student_order")
    total = cfg.student_epochs * _steps_per_epoch(len(data.train), cfg.batch_size)
    warmup = cfg.warmup_frac * total
    snapshot_steps = set(snapshot_steps)
    result = DistillResult(student, proj, record, {})
    student.train()
    step = 0
    last_epoch = 0
    for epoch, idx in batch_order(len(data.train), cfg.batch_size, cfg.student_epochs, order):
        if epoch != last_epoch:
            _maybe_eval(record, student, data, cfg, last_epoch, step)
            last_epoch = epoch
        if step in snapshot_steps:
            result.snapshots[step] = {
                "student": {k: v.clone() for k, v in student.state_dict().items()},
                "proj": {k: v.clone() for k, v in proj.state_dict().items()},
            }
            result.batches[step] = idx.copy()
        images, _, targets, inst = data.train.batch(idx)
        for group in opt.param_groups:
            group["lr"] = _cosine(cfg.lr_student, step, total)
        out = student(images)
        task = detection_task_loss(out, None, targets=targets)
        lam = cfg.lam * (min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0)
        values = {"task": task.item()}
        loss = task
        if use_teacher:
            f_t = teacher_feats[torch.from_numpy(idx)]
            dist = distill_loss(f_t, out.neck_features, inst, ensemble, proj, cfg, variant)
            loss = task + lam * dist
            values.update(distill=dist.item(), lam=lam)
        values["total"] = loss.item()
        _check_finite(f"distill[{variant}]", step, **values)
        opt.zero_grad()
        loss.backward()
        opt.step()
        record.log("step", step, epoch=epoch, **values)
        step += 1
    if evaluate_final:
        result.metrics = evaluate(student, data.eval, cfg)
        record.log("eval", step, epoch=cfg.student_epochs, **result.metrics)
    student.eval()
    return result


def run_baseline(variant: str, teacher, ensemble, data: Data, cfg: DistillConfig, **kwargs) -> DistillResult:
    if variant not in ("no_kd", "fitnet_allones", "teacher_only_mask"):
        raise ValueError(f"unknown baseline {variant!r}")
    return distill(teacher, ensemble, data, cfg, variant=variant, **kwargs)


# ------------------------------------------------------------- experiments


def compare(teacher, ensemble, data: Data, cfg: DistillConfig, variants=VARIANTS, seeds=(0, 1, 2),
            teacher_feats=None, progress=None):
    """Run every variant for every student seed; one row per run."""
    if teacher_feats is None:
        teacher_feats = neck_features(teacher, data.train)
    rows = []
    for seed in seeds:
        for variant in variants:
            t0 = time.perf_counter()
            res = distill(teacher, ensemble, data, cfg.replace(seed=int(seed)), variant, teacher_feats)
            row = {"variant": variant, "seed": int(seed), **res.metrics,
                   "seconds": round(time.perf_counter() - t0, 1)}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize(rows, keys=("variant",), metric="map"):
    """Mean and standard deviation of ``metric`` for each group of ``keys``."""
    groups = {}
    for r in rows:
        if r.get("status", "ok") != "ok" and "status" in r:
            continue
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[metric])
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


ABLATION_KEYS = ("K", "mu", "mask_mode", "softmax_scope", "rescale", "detach_scores")


def expand_grid(grid: dict):
    unknown = set(grid) - set(ABLATION_KEYS)
    if unknown:
        raise ValueError(f"cannot ablate over {sorted(unknown)}")
    cells = [{}]
    for key, values in grid.items():
        cells = [dict(c, **{key: v}) for c in cells for v in values]
    return cells


def ablate(teacher, data: Data, cfg: DistillConfig, grid: dict, seeds=(0,), teacher_feats=None, progress=None):
    """Distill once per (grid cell, seed). Selectors are retrained when a cell changes
    anything they depend on. A failing cell is recorded and the grid continues."""
    if teacher_feats is None:
        teacher_feats = neck_features(teacher, data.train)
    selector_cache = {}
    rows = []
    for cell in expand_grid(grid):
        try:
            cell_cfg = cfg.replace(**cell)
        except ValueError as exc:
            for seed in seeds:
                rows.append({**cell, "seed": int(seed), "status": f"error: {exc}", "map": float("nan"),
                             "ap50": float("nan"), "ap75": float("nan")})
            continue
        sel_key = (cell_cfg.K, cell_cfg.mu, cell_cfg.softmax_scope, cell_cfg.rescale)
        for seed in seeds:
            row = {k: getattr(cell_cfg, k) for k in ABLATION_KEYS}
            row["seed"] = int(seed)
            try:
                if sel_key not in selector_cache:
                    selector_cache[sel_key] = train_selectors(teacher, data, cell_cfg, teacher_feats).ensemble
                res = distill(teacher, selector_cache[sel_key], data, cell_cfg.replace(seed=int(seed)),
                              "liaf", teacher_feats)
                row.update(status="ok", **res.metrics)
            except Exception as exc:  # noqa: BLE001 - recorded and skipped by contract
                log.exception("ablation cell %s seed %s failed", cell, seed)
                row.update(status=f"error: {exc}", map=float("nan"), ap50=float("nan"), ap75=float("nan"))
            rows.append(row)
            if progress:
                progress(row)
    return rows


def write_rows_csv(rows, path, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames.extend(k for k in r if k not in fieldnames)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# -------------------------------------------------------------- checkpoints


def save_detector(path, model: nn.Module, cfg: DistillConfig, stage: str, step: int,
                  proj: Optional[nn.Module] = None, extra: Optional[dict] = None):
    arrays = state_to_arrays(model, "model.")
    if proj is not None:
        arrays.update(state_to_arrays(proj, "proj."))
    meta = {
        "kind": "detector",
        "stage": stage,
        "step": int(step),
        "width": int(model.width),
        "num_classes": int(model.num_classes),
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "code_hash": code_hash(),
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, arrays, meta)
    return arrays_digest(arrays)


def load_detector(path):
    """Returns ``(model, proj_or_None, meta)``; the model comes back frozen."""
    from .toydet import TinyDetector

    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    model = TinyDetector(meta["width"], meta["num_classes"])
    model.load_state_dict(arrays_to_state(arrays, "model."))
    proj = None
    proj_state = arrays_to_state(arrays, "proj.")
    if proj_state:
        c_t, c_s = proj_state["weight"].shape
        proj = ChannelProjection(c_s, c_t, bias="bias" in proj_state)
        proj.load_state_dict(proj_state)
    return freeze(model), proj, meta


def module_digest(module: nn.Module) -> str:
    return arrays_digest(state_to_arrays(module))
