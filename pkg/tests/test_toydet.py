import json
from collections import Counter

import numpy as np
import pytest
import torch

from liafkd.toydet import (STRIDE, Corpus, DetectorOutput, SceneSpec, assign_targets, build_detector,
                           decode, detection_task_loss, evaluate_map, generate_scene, read_manifest)
from liafkd.toydet.metrics import average_precision, box_iou
from fd import directional_probe


class TestScenes:
    def test_deterministic(self):
        a, b = generate_scene(42), generate_scene(42)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.boxes, b.boxes)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds(self):
        assert not np.array_equal(generate_scene(1).image, generate_scene(2).image)

    def test_single_instance(self):
        spec = SceneSpec(min_instances=1, max_instances=1)
        for seed in range(20):
            assert len(generate_scene(seed, spec).boxes) == 1

    def test_ground_truth_valid(self):
        spec = SceneSpec()
        for seed in range(50):
            s = generate_scene(seed, spec)
            assert s.image.shape == (3, 128, 128)
            assert s.image.min() >= 0 and s.image.max() <= 1
            b = s.boxes
            assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
            assert np.all(b >= 0) and np.all(b <= 128)
            assert np.all((s.labels >= 0) & (s.labels < 3))

    def test_class_balance(self):
        counts = Counter()
        for seed in range(1000):
            counts.update(generate_scene(seed).labels.tolist())
        total = sum(counts.values())
        for c in range(3):
            assert abs(counts[c] / total - 1 / 3) <= 0.1 / 3

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            generate_scene(0, SceneSpec(min_instances=3, max_instances=2))

    def test_manifest_roundtrip(self, tmp_path):
        corpus = Corpus.generate(7, 12)
        path = tmp_path / "manifest.jsonl"
        corpus.write_manifest(path)
        lines = path.read_text().splitlines()
        assert len(lines) == 13
        rec = json.loads(lines[1])
        assert set(rec) == {"seed", "spec_hash", "boxes", "labels"}
        again = read_manifest(path)
        assert np.array_equal(again.images, corpus.images)
        assert again.seeds == corpus.seeds

    def test_corpus_bit_exact(self):
        a = Corpus.generate(3, 10)
        b = Corpus.generate(3, 10)
        assert np.array_equal(a.images, b.images)


class TestDetector:
    def test_zero_input_finite(self):
        out = build_detector(16, 3, 0)(torch.zeros(2, 3, 64, 64))
        for t in (out.neck_features, out.class_logits, out.box_deltas):
            assert torch.isfinite(t).all()

    def test_teacher_student_same_grid(self):
        x = torch.rand(1, 3, 128, 128)
        t = build_detector(64, 3, 0)(x)
        s = build_detector(32, 3, 0)(x)
        assert t.neck_features.shape[2:] == s.neck_features.shape[2:] == (16, 16)
        assert t.neck_features.shape[1] == 64 and s.neck_features.shape[1] == 32
        assert t.class_logits.shape == s.class_logits.shape

    def test_doubling_input_doubles_grid(self):
        m = build_detector(16, 3, 0)
        a = m(torch.rand(1, 3, 64, 48))
        b = m(torch.rand(1, 3, 128, 96))
        assert a.neck_features.shape[2:] == (64 // STRIDE, 48 // STRIDE)
        assert b.neck_features.shape[2:] == (2 * a.neck_features.shape[2], 2 * a.neck_features.shape[3])

    def test_seeded_init(self):
        a, b = build_detector(16, 3, 5), build_detector(16, 3, 5)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)


def perfect_output(gts, H=16, W=16, K=3):
    cls_t, reg_t, pos = assign_targets(gts, H, W, STRIDE, K, torch.float64)
    logits = torch.where(cls_t > 0, 20.0, -20.0).to(torch.float64)
    return DetectorOutput(torch.zeros(len(gts), 1, H, W), logits, reg_t.clone())


GTS = [
    (np.array([[10, 20, 50, 60], [70, 70, 110, 100]], dtype=np.float32), np.array([0, 2])),
    (np.array([[0, 0, 30, 30]], dtype=np.float32), np.array([1])),
]


class TestTaskLoss:
    def test_assignment_center_rule(self):
        cls_t, reg_t, pos = assign_targets([GTS[1]], 16, 16, STRIDE, 3)
        # centers 4, 12, 20, 28 fall inside [0, 30)
        assert pos[0].nonzero().tolist() == [[i, j] for i in range(4) for j in range(4)]
        assert reg_t[0, :, 0, 0].tolist() == pytest.approx([0.5, 0.5, 26 / 8, 26 / 8])

    def test_overlap_prefers_smaller_box(self):
        gts = [(np.array([[0, 0, 64, 64], [8, 8, 24, 24]], dtype=np.float32), np.array([0, 1]))]
        cls_t, _, _ = assign_targets(gts, 16, 16, STRIDE, 3)
        assert cls_t[0, :, 1, 1].tolist() == [0, 1, 0]
        assert cls_t[0, :, 5, 5].tolist() == [1, 0, 0]

    def test_perfect_predictions(self):
        loss = detection_task_loss(perfect_output(GTS), GTS)
        assert 0 <= float(loss) < 1e-3

    def test_no_instances_regression_zero(self):
        empty = [(np.zeros((0, 4), np.float32), np.zeros(0, np.int64))] * 2
        out = DetectorOutput(torch.zeros(2, 1, 16, 16), torch.randn(2, 3, 16, 16), torch.randn(2, 4, 16, 16))
        total, parts = detection_task_loss(out, empty, return_parts=True)
        assert parts["reg"] == 0.0
        assert float(total) == pytest.approx(parts["cls"])

    def test_non_negative(self, gen):
        for _ in range(10):
            out = DetectorOutput(torch.zeros(2, 1, 16, 16), 5 * torch.randn(2, 3, 16, 16, generator=gen),
                                 5 * torch.randn(2, 4, 16, 16, generator=gen))
            assert float(detection_task_loss(out, GTS)) >= 0

    def test_gradient_wrt_head_outputs(self, gen):
        targets = assign_targets(GTS, 16, 16, STRIDE, 3, torch.float64)
        for _ in range(20):
            cls = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
            reg = torch.randn(2, 4, 16, 16, generator=gen, dtype=torch.float64) * 3

            def fn(xs):
                return detection_task_loss(DetectorOutput(None, xs[0], xs[1]), None, targets=targets)

            assert directional_probe(fn, [cls, reg], gen) < 1e-4

    def test_gradient_two_parameter_probe(self, gen):
        # the "model" scales two fixed maps: logits = a * U, deltas = b * V
        U = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
        V = torch.rand(2, 4, 16, 16, generator=gen, dtype=torch.float64) * 4
        for _ in range(20):
            theta = torch.randn(2, generator=gen, dtype=torch.float64)

            def fn(xs):
                a, b = xs[0]
                return detection_task_loss(DetectorOutput(None, a * U, b * V), GTS)

            assert directional_probe(fn, [theta], gen) < 1e-3


class TestDecode:
    def test_perfect_output_decodes_ground_truth(self):
        preds = decode(perfect_output(GTS))
        m = evaluate_map(preds, GTS, 3)
        assert m["map"] == pytest.approx(1.0)


class TestMap:
    def test_identical(self):
        preds = [(b, np.ones(len(b)), l) for b, l in GTS]
        m = evaluate_map(preds, GTS, 3)
        assert m["map"] == 1.0 and m["ap50"] == 1.0 and m["ap75"] == 1.0

    def test_no_predictions(self):
        preds = [(np.zeros((0, 4)), np.zeros(0), np.zeros(0, int))] * 2
        assert evaluate_map(preds, GTS, 3)["map"] == 0.0

    def test_one_of_two_at_iou_06(self):
        gts = [(np.array([[0, 0, 10, 10], [50, 50, 60, 60]]), np.array([0, 0]))]
        pred = np.array([[0, 0, 10, 6]])  # IoU 60 / 100
        assert box_iou(pred, gts[0][0])[0, 0] == pytest.approx(0.6)
        m = evaluate_map([(pred, np.array([0.9]), np.array([0]))], gts, 1)
        assert m["ap50"] == pytest.approx(0.5)
        assert m["ap75"] == 0.0

    def test_empty_images_skipped(self):
        gts = GTS + [(np.zeros((0, 4)), np.zeros(0, int))]
        preds = [(b, np.ones(len(b)), l) for b, l in gts]
        assert evaluate_map(preds, gts, 3)["map"] == 1.0

    def test_all_point_interpolation(self):
        # tp pattern 1, 0, 1 with 2 ground truths: area = 0.5 * 1 + 0.5 * 2/3
        assert average_precision(np.array([1, 0, 1]), 2) == pytest.approx(0.5 + 1 / 3)
        assert average_precision(np.array([0, 1]), 1) == pytest.approx(0.5)

    def test_greedy_highest_score_first(self):
        gts = [(np.array([[0, 0, 10, 10]]), np.array([0]))]
        boxes = np.array([[0, 0, 10, 9], [0, 0, 10, 10]])
        # the lower-scored exact box becomes a false positive
        m = evaluate_map([(boxes, np.array([0.9, 0.5]), np.array([0, 0]))], gts, 1, iou_thresholds=(0.5,))
        assert m["map"] == pytest.approx(1.0)
        m = evaluate_map([(boxes, np.array([0.9, 0.5]), np.array([0, 0]))], gts, 1, iou_thresholds=(0.95,))
        assert m["map"] == pytest.approx(0.5)

    def test_permutation_invariant_at_equal_scores(self):
        rng = np.random.default_rng(0)
        gts = [(np.array([[0, 0, 20, 20], [30, 30, 50, 50]]), np.array([0, 0]))]
        boxes = np.array([[1, 1, 20, 21], [0, 0, 19, 20], [30, 31, 50, 50], [60, 60, 70, 70]], dtype=float)
        scores = np.array([0.5, 0.5, 0.5, 0.5])
        labels = np.zeros(4, int)
        base = evaluate_map([(boxes, scores, labels)], gts, 1)
        for _ in range(10):
            p = rng.permutation(4)
            assert evaluate_map([(boxes[p], scores[p], labels[p])], gts, 1) == base
