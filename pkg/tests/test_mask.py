import numpy as np
import pytest
import torch

from liafkd.mask import (ChannelProjection, apply_mask, build_soft_mask, generic_masked_loss, masked_distill_loss,
                         ones_mask, rescale_scores)
from liafkd.roi import InstanceSet
from fd import directional_probe
from oracles import brute_force_mask, loop_masked_loss, loop_projection


def instances(boxes, bidx):
    return InstanceSet(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4), torch.tensor(bidx, dtype=torch.long),
                       torch.zeros(len(bidx), dtype=torch.long))


def random_instances(rng, N, H, W, count):
    boxes = []
    for _ in range(count):
        x1, x2 = np.sort(rng.uniform(0, W, 2))
        y1, y2 = np.sort(rng.uniform(0, H, 2))
        boxes.append((x1, y1, max(x2, x1 + 0.1), max(y2, y1 + 0.1)))
    boxes = np.clip(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), 0, [W, H, W, H])
    return instances(boxes, rng.integers(0, N, count))


class TestBuildSoftMask:
    def test_no_instances(self):
        m = build_soft_mask(InstanceSet.empty(), torch.zeros(0), (2, 4, 5))
        assert torch.equal(m, torch.ones(2, 1, 4, 5))

    def test_single_instance(self):
        m = build_soft_mask(instances([(1, 1, 3, 3)], [0]), torch.tensor([0.5]), (1, 4, 4))
        expected = torch.ones(1, 1, 4, 4)
        expected[0, 0, 1:3, 1:3] = 0.5
        assert torch.equal(m, expected)

    def test_overlap_multiplies(self):
        inst = instances([(0, 0, 2, 2), (1, 1, 3, 3)], [0, 0])
        m = build_soft_mask(inst, torch.tensor([0.5, 0.4], dtype=torch.float64), (1, 4, 4))
        assert float(m[0, 0, 1, 1]) == pytest.approx(0.2, abs=1e-15)
        assert float(m[0, 0, 0, 0]) == 0.5
        assert float(m[0, 0, 2, 2]) == 0.4
        assert float(m[0, 0, 3, 3]) == 1.0

    def test_outward_rounding(self):
        m = build_soft_mask(instances([(0.5, 1.2, 1.5, 1.8)], [0]), torch.tensor([0.25]), (1, 3, 3))
        covered = (m[0, 0] < 1).nonzero().tolist()
        assert covered == [[1, 0], [1, 1]]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            N, H, W = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
            count = int(rng.integers(0, 7))
            inst = random_instances(rng, N, H, W, count)
            scores = rng.uniform(0.01, 1.0, count)
            got = build_soft_mask(inst, torch.tensor(scores), (N, H, W)).numpy()
            want = brute_force_mask(inst.boxes.tolist(), inst.batch_index.tolist(), scores, N, H, W)
            assert np.array_equal(got, want)

    def test_order_independent(self):
        rng = np.random.default_rng(1)
        inst = random_instances(rng, 2, 6, 6, 6)
        scores = torch.tensor(rng.uniform(0.1, 1, 6))
        perm = torch.from_numpy(rng.permutation(6))
        a = build_soft_mask(inst, scores, (2, 6, 6))
        b = build_soft_mask(inst.permute(perm), scores[perm], (2, 6, 6))
        assert torch.allclose(a, b, rtol=0, atol=1e-15)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(2)
        inst = random_instances(rng, 2, 8, 8, 5)
        m = build_soft_mask(inst, torch.tensor(rng.uniform(1e-3, 1, 5)), (2, 8, 8))
        assert bool(((m > 0) & (m <= 1)).all())

    def test_unit_scores_give_ones(self):
        rng = np.random.default_rng(3)
        inst = random_instances(rng, 2, 5, 5, 4)
        assert torch.equal(build_soft_mask(inst, torch.ones(4, dtype=torch.float64), (2, 5, 5)),
                           torch.ones(2, 1, 5, 5, dtype=torch.float64))

    def test_mean_one_rescale(self):
        inst = instances([(0, 0, 1, 1), (2, 2, 3, 3), (0, 2, 1, 3), (2, 0, 3, 1)], [0, 0, 1, 1])
        scores = torch.tensor([0.1, 0.4, 0.2, 0.3], dtype=torch.float64)
        assert rescale_scores(scores, inst.batch_index, "mean_one", "batch").tolist() == pytest.approx(
            [0.4, 1.0, 0.8, 1.0])
        per_image = rescale_scores(scores, inst.batch_index, "mean_one", "image")
        assert per_image.tolist() == pytest.approx([0.2, 0.8, 0.4, 0.6])
        m = build_soft_mask(inst, scores, (2, 3, 3), rescale="mean_one")
        assert float(m[0, 0, 0, 0]) == pytest.approx(0.4)

    def test_score_count_mismatch(self):
        with pytest.raises(ValueError):
            build_soft_mask(instances([(0, 0, 1, 1)], [0]), torch.tensor([0.5, 0.5]), (1, 2, 2))

    def test_differentiable_in_scores(self, gen):
        inst = instances([(0, 0, 2, 2), (1, 1, 3, 3), (0.5, 0, 3, 1.5)], [0, 0, 1])
        w = torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64)
        for _ in range(20):
            a = torch.rand(3, generator=gen, dtype=torch.float64) * 0.8 + 0.1
            rel = directional_probe(lambda xs: (build_soft_mask(inst, xs[0], (2, 3, 3)) * w).sum(), [a], gen)
            assert rel < 1e-4


class TestApplyMask:
    def test_identity(self, gen):
        F = torch.randn(2, 3, 4, 4, generator=gen)
        assert torch.equal(apply_mask(F, torch.ones(2, 1, 4, 4)), F)

    def test_annihilation(self, gen):
        F = torch.randn(1, 3, 4, 4, generator=gen)
        M = torch.ones(1, 1, 4, 4)
        M[0, 0, :2] = 0.0
        out = apply_mask(F, M)
        assert bool((out[:, :, :2] == 0).all())
        assert torch.equal(out[:, :, 2:], F[:, :, 2:])

    def test_elementwise(self, gen):
        F = torch.randn(2, 5, 3, 4, generator=gen, dtype=torch.float64)
        M = torch.rand(2, 1, 3, 4, generator=gen, dtype=torch.float64)
        out = apply_mask(F, M)
        for n in range(2):
            for c in range(5):
                assert torch.equal(out[n, c], F[n, c] * M[n, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(torch.zeros(2, 3, 4, 4), torch.ones(2, 1, 4, 3))


class TestLosses:
    def setup_method(self):
        g = torch.Generator().manual_seed(9)
        self.ft = torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)
        self.fs = torch.randn(2, 3, 3, 3, generator=g, dtype=torch.float64)
        self.proj = ChannelProjection(3, 4, generator=g).double()
        with torch.no_grad():
            self.proj.bias.copy_(torch.randn(4, generator=g, dtype=torch.float64))
        self.mt = torch.rand(2, 1, 3, 3, generator=g, dtype=torch.float64)
        self.ms = torch.rand(2, 1, 3, 3, generator=g, dtype=torch.float64)

    def test_projection_matches_loop(self):
        got = self.proj(self.fs).detach().numpy()
        want = loop_projection(self.proj.weight.detach().numpy(), self.proj.bias.detach().numpy(), self.fs.numpy())
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_projection_channel_check(self):
        with pytest.raises(ValueError):
            self.proj(torch.zeros(1, 5, 2, 2, dtype=torch.float64))

    def test_zero_when_identical(self):
        ft = self.proj(self.fs).detach()
        assert masked_distill_loss(ft, self.fs, self.mt, self.mt, self.proj).item() == 0.0

    def test_scalar_case(self):
        ident = ChannelProjection.identity(1, torch.float64)
        ft = torch.full((1, 1, 1, 1), 3.0, dtype=torch.float64)
        fs = torch.full((1, 1, 1, 1), 1.0, dtype=torch.float64)
        half = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        assert float(masked_distill_loss(ft, fs, half, half, ident)) == pytest.approx(1.0)

    def test_matches_loop_oracle(self):
        got = float(masked_distill_loss(self.ft, self.fs, self.mt, self.ms, self.proj))
        want = loop_masked_loss(self.ft.numpy(), self.proj(self.fs).detach().numpy(), self.mt.numpy(),
                                self.ms.numpy())
        assert got == pytest.approx(want, rel=1e-12)

    def test_generic_matches_loop_oracle(self):
        got = float(generic_masked_loss(self.ft, self.fs, self.mt, self.proj))
        want = loop_masked_loss(self.ft.numpy(), self.proj(self.fs).detach().numpy(), self.mt.numpy(),
                                self.mt.numpy())
        assert got == pytest.approx(want, rel=1e-12)

    def test_generic_constant_gap(self):
        ident = ChannelProjection.identity(4, torch.float64)
        fs = self.ft - 1.5
        ones = ones_mask(2, 3, 3, torch.float64)
        assert float(generic_masked_loss(self.ft, fs, ones, ident)) == pytest.approx(2.25)

    def test_all_ones_reduces_to_mse(self):
        ones = ones_mask(2, 3, 3, torch.float64)
        mse = torch.mean((self.ft - self.proj(self.fs)) ** 2)
        a = masked_distill_loss(self.ft, self.fs, ones, ones, self.proj)
        b = generic_masked_loss(self.ft, self.fs, ones, self.proj)
        assert float(a) == pytest.approx(float(mse), abs=1e-12)
        assert float(b) == pytest.approx(float(mse), abs=1e-12)

    def test_non_negative(self, gen):
        for _ in range(10):
            ft = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
            assert float(masked_distill_loss(ft, self.fs[:1, :, :2, :2], self.mt[:1, :, :2, :2],
                                             self.ms[:1, :, :2, :2], self.proj)) >= 0

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            masked_distill_loss(self.ft[:, :3], self.fs, self.mt, self.ms, self.proj)

    def test_gradient_student_and_projection(self, gen):
        for _ in range(20):
            fs = torch.randn(2, 3, 3, 3, generator=gen, dtype=torch.float64)
            w = torch.randn(4, 3, generator=gen, dtype=torch.float64)
            b = torch.randn(4, generator=gen, dtype=torch.float64)

            def fn(xs):
                proj = lambda x: torch.nn.functional.conv2d(x, xs[1][:, :, None, None], xs[2])  # noqa: E731
                return masked_distill_loss(self.ft, xs[0], self.mt, self.ms, proj)

            assert directional_probe(fn, [fs, w, b], gen) < 1e-4
