"""Procedural scenes of colored shapes on a textured background."""
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List

import numpy as np

SHAPES = ("circle", "square", "triangle", "diamond", "cross")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 4
    num_classes: int = 3
    min_size: int = 16
    max_size: int = 48
    noise: float = 0.05
    max_overlap: float = 0.3

    def validate(self):
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("need 0 <= min_instances <= max_instances")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 2 <= min_size <= max_size <= image_size")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SyntheticScene:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    boxes: np.ndarray  # [k, 4] float32, image pixels, xyxy
    labels: np.ndarray  # [k] int64
    seed: int


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _shape_mask(kind, box, yy, xx):
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    half = (x2 - x1) / 2
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    if kind == "square":
        return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    if kind == "triangle":
        # apex at top center, base along the bottom edge
        t = (yy - y1) / (y2 - y1)
        return (yy >= y1) & (yy < y2) & (np.abs(xx - cx) <= t * half)
    if kind == "diamond":
        return np.abs(xx - cx) + np.abs(yy - cy) <= half
    if kind == "cross":
        bar = half / 3
        inside = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
        return inside & ((np.abs(xx - cx) <= bar) | (np.abs(yy - cy) <= bar))
    raise ValueError(kind)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.1, 0.4, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    img = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
    freq = rng.uniform(2, 6, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    stripes = 0.05 * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase[0])
    return img + stripes[None]


def generate_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Render one scene; identical ``(seed, spec)`` gives an identical scene."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4E]))
    S = spec.image_size
    img = _background(rng, S)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    boxes, labels = [], []
    attempts = 0
    while len(boxes) < count and attempts < 50 * max(count, 1):
        attempts += 1
        side = int(rng.integers(spec.min_size, spec.max_size + 1))
        x1 = int(rng.integers(0, S - side + 1))
        y1 = int(rng.integers(0, S - side + 1))
        box = (float(x1), float(y1), float(x1 + side), float(y1 + side))
        if any(_iou(box, b) > spec.max_overlap for b in boxes):
            continue
        boxes.append(box)
        labels.append(int(rng.integers(0, spec.num_classes)))
    for box, label in zip(boxes, labels):
        color = rng.uniform(0.55, 1.0, size=3)
        color[rng.integers(0, 3)] *= rng.uniform(0.2, 0.6)
        m = _shape_mask(SHAPES[label], box, yy, xx)
        img[:, m] = color[:, None]
    img = img + spec.noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SyntheticScene(
        image=img,
        boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        seed=int(seed),
    )


def scene_seed(corpus_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(corpus_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class Corpus:
    """An indexed set of scenes with images cached as uint8."""

    def __init__(self, scenes: List[SyntheticScene], spec: SceneSpec):
        self.spec = spec
        self.seeds = [s.seed for s in scenes]
        self.boxes = [s.boxes for s in scenes]
        self.labels = [s.labels for s in scenes]
        if scenes:
            stack = np.stack([s.image for s in scenes])
        else:
            stack = np.zeros((0, 3, spec.image_size, spec.image_size), np.float32)
        self.images = np.round(stack * 255).astype(np.uint8)

    @classmethod
    def generate(cls, corpus_seed: int, count: int, spec: SceneSpec = SceneSpec(), offset: int = 0):
        seeds = [scene_seed(corpus_seed, offset + i) for i in range(count)]
        return cls.from_seeds(seeds, spec)

    @classmethod
    def from_seeds(cls, seeds, spec: SceneSpec = SceneSpec()):
        return cls([generate_scene(s, spec) for s in seeds], spec)

    def __len__(self):
        return len(self.seeds)

    def batch(self, indices):
        """Float images ``[B, 3, H, W]`` and ground truth for the given indices."""
        import torch

        idx = np.asarray(indices, dtype=np.int64)
        imgs = torch.from_numpy(self.images[idx].astype(np.float32) / 255.0)
        gts = [(self.boxes[i], self.labels[i]) for i in idx]
        return imgs, gts

    def manifest_records(self):
        digest = self.spec.digest()
        for seed, boxes, labels in zip(self.seeds, self.boxes, self.labels):
            yield {
                "seed": seed,
                "spec_hash": digest,
                "boxes": [[float(v) for v in b] for b in boxes],
                "labels": [int(v) for v in labels],
            }

    def write_manifest(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"spec": asdict(self.spec)}, sort_keys=True) + "\n")
            for rec in self.manifest_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    """Regenerate a corpus from its manifest and check the stored ground truth."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh if line.strip()]
    spec = SceneSpec(**header["spec"])
    digest = spec.digest()
    for rec in records:
        if rec["spec_hash"] != digest:
            raise ValueError(f"manifest record for seed {rec['seed']} has a foreign spec hash")
    corpus = Corpus.from_seeds([r["seed"] for r in records], spec)
    for rec, boxes in zip(records, corpus.boxes):
        if not np.allclose(np.asarray(rec["boxes"]).reshape(-1, 4), boxes):
            raise ValueError(f"scene {rec['seed']} no longer regenerates its stored boxes")
    return corpus
