import math

import numpy as np
import pytest
import torch

from pixfuse.augment import ShiftSpec, overlap_mask
from pixfuse.contrastive import (
    LossConfig, SuperpixelMap, composite_loss, info_nce, pair_score,
    pool_over_superpixels, segment_superpixels, transport_superpixels,
)
from pixfuse.errors import ConfigError, DegenerateBatchError, NumericalError
from pixfuse.scenes import generate_synthetic


def naive_info_nce(anchors, positives, tau):
    """Double-loop oracle without the stabilization trick."""
    n = len(anchors)
    total = 0.0
    for i in range(n):
        denom = sum(pair_score(anchors[i], positives[j], tau) for j in range(n))
        total += -math.log(pair_score(anchors[i], positives[i], tau) / denom)
    return total / n


class TestSlic:
    def test_degenerate_one_pixel_segments(self):
        scene = generate_synthetic(seed=0, n_scenes=1, size=16)[0]
        sp = segment_superpixels(scene, 16 * 16)
        assert sp.n_segments == 256
        assert (np.bincount(sp.labels.ravel(), minlength=256) == 1).all()

    def test_partition_exact_k_nonempty(self):
        scene = generate_synthetic(seed=1, n_scenes=1, size=32)[0]
        for k in (7, 16, 64):
            sp = segment_superpixels(scene, k)
            counts = np.bincount(sp.labels.ravel(), minlength=k)
            assert sp.labels.min() >= 0 and sp.labels.max() == k - 1
            assert counts.sum() == 32 * 32
            assert (counts > 0).all()

    def test_near_degenerate_counts(self):
        img = np.random.default_rng(0).uniform(0, 1, (5, 16, 16)).astype(np.float32)
        for k in (129, 250, 255):
            sp = segment_superpixels(img, k)
            counts = np.bincount(sp.labels.ravel(), minlength=k)
            assert counts.sum() == 256 and (counts > 0).all()

    def test_segments_contiguous(self):
        from scipy import ndimage
        scene = generate_synthetic(seed=2, n_scenes=1, size=32)[0]
        sp = segment_superpixels(scene, 25)
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        for sid in range(sp.n_segments):
            _, n = ndimage.label(sp.labels == sid, structure=structure)
            assert n == 1

    def test_constant_tile_near_regular_grid(self):
        img = np.full((5, 32, 32), 0.5, dtype=np.float32)
        sp = segment_superpixels(img, 16)
        counts = np.bincount(sp.labels.ravel(), minlength=16)
        target = 32 * 32 / 16
        assert (counts >= target * 0.5).all() and (counts <= target * 1.5).all()

    def test_deterministic(self):
        scene = generate_synthetic(seed=3, n_scenes=1, size=32)[0]
        a = segment_superpixels(scene, 30)
        b = segment_superpixels(scene, 30)
        assert np.array_equal(a.labels, b.labels)

    def test_too_many_segments_raises(self):
        scene = generate_synthetic(seed=0, n_scenes=1, size=16)[0]
        with pytest.raises(ConfigError):
            segment_superpixels(scene, 16 * 16 + 1)


class TestPooling:
    def _simple_map(self, h=8, w=8, k=4):
        labels = np.zeros((h, w), np.int32)
        labels[:, w // 2:] = 1
        labels[h // 2:, : w // 2] = 2
        labels[h // 2:, w // 2:] = 3
        sizes = np.bincount(labels.ravel(), minlength=k)
        return SuperpixelMap(labels, k, sizes)

    def test_constant_features_pool_to_unit_direction(self):
        sp = self._simple_map()
        c = torch.tensor([3.0, 4.0])
        fm = c[:, None, None].expand(2, 8, 8).clone()
        pooled = pool_over_superpixels(fm, sp, np.ones((8, 8), bool))
        expected = c / c.norm()
        assert pooled.rows.shape == (4, 2)
        assert torch.allclose(pooled.rows, expected.expand(4, 2), atol=1e-6)

    def test_single_pixel_segments_identity(self):
        h = w = 4
        labels = np.arange(16, dtype=np.int32).reshape(4, 4)
        sp = SuperpixelMap(labels, 16, np.ones(16, np.int64))
        fm = torch.randn(3, 4, 4)
        pooled = pool_over_superpixels(fm, sp, np.ones((4, 4), bool))
        flat = fm.reshape(3, -1).T
        flat = flat / flat.norm(dim=1, keepdim=True)
        assert torch.allclose(pooled.rows, flat, atol=1e-6)

    def test_matches_accumulation_oracle(self):
        rng = np.random.default_rng(0)
        h = w = 10
        labels = rng.integers(0, 6, (h, w)).astype(np.int32)
        sizes = np.bincount(labels.ravel(), minlength=6)
        sp = SuperpixelMap(labels, 6, sizes)
        mask = rng.random((h, w)) > 0.3
        fm = torch.from_numpy(rng.normal(size=(5, h, w))).float()
        pooled = pool_over_superpixels(fm, sp, mask, min_frac=0.0)
        for row, sid in zip(pooled.rows, pooled.segment_ids):
            member = (labels == sid) & mask
            acc = np.zeros(5)
            for i in range(h):
                for j in range(w):
                    if member[i, j]:
                        acc += fm[:, i, j].numpy()
            acc /= member.sum()
            acc /= np.linalg.norm(acc)
            assert np.allclose(row.numpy(), acc, atol=1e-6)

    def test_min_frac_threshold(self):
        sp = self._simple_map()
        mask = np.zeros((8, 8), bool)
        mask[:4, 4:] = True     # segment 1 fully inside
        mask[0, 0] = True       # segment 0: 1/16 of pixels
        fm = torch.randn(2, 8, 8)
        pooled = pool_over_superpixels(fm, sp, mask, min_frac=0.5)
        assert pooled.segment_ids == (1,)

    def test_empty_mask_degenerates(self):
        sp = self._simple_map()
        with pytest.raises(DegenerateBatchError):
            pool_over_superpixels(torch.randn(2, 8, 8), sp, np.zeros((8, 8), bool))

    def test_pooling_commutes_with_linear_map(self):
        rng = np.random.default_rng(1)
        sp = self._simple_map()
        fm = torch.from_numpy(rng.normal(size=(3, 8, 8)))
        m = torch.from_numpy(rng.normal(size=(3, 3)))
        mask = np.ones((8, 8), bool)

        def pooled_unnormalized(x):
            rows = []
            for sid in range(4):
                member = torch.from_numpy(sp.labels == sid)
                rows.append(x[:, member].mean(dim=1))
            return torch.stack(rows)

        left = pooled_unnormalized(torch.einsum("ij,jhw->ihw", m, fm))
        right = pooled_unnormalized(fm) @ m.T
        assert torch.allclose(left, right, atol=1e-10)

    def test_transport_matches_shift(self):
        scene = generate_synthetic(seed=4, n_scenes=1, size=16)[0]
        sp = segment_superpixels(scene, 8)
        spec = ShiftSpec(dx=3, dy=-2, flip_h=True)
        moved = transport_superpixels(sp, spec)
        assert moved.labels.shape == sp.labels.shape
        assert (moved.labels[~overlap_mask(spec, 16, 16)] == -1).all()
        assert np.array_equal(moved.sizes, sp.sizes)


class TestPairScore:
    def test_identical_vectors_tau1(self):
        v = np.array([1.0, 2.0, 3.0])
        assert pair_score(v, v, 1.0) == pytest.approx(math.e, abs=1e-6)

    def test_orthogonal_vectors(self):
        assert pair_score(np.array([1.0, 0.0]), np.array([0.0, 2.0]), 1.0) == pytest.approx(1.0)

    def test_small_tau(self):
        v = np.array([0.5, -0.5])
        assert pair_score(v, v, 0.1) == pytest.approx(math.exp(10.0), rel=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        f1, f2 = rng.normal(size=4), rng.normal(size=4)
        base = pair_score(f1, f2, 0.5)
        assert pair_score(3.7 * f1, 0.2 * f2, 0.5) == pytest.approx(base, rel=1e-9)

    def test_zero_norm_raises(self):
        with pytest.raises(NumericalError):
            pair_score(np.zeros(3), np.ones(3), 1.0)


class TestInfoNCE:
    def test_two_pair_hand_case(self):
        # cos(a_i, p_i) = 1, cross cosines = 0 -> -log(e / (e + 1))
        anchors = torch.eye(2)
        positives = torch.eye(2)
        loss = info_nce(anchors, positives, tau=1.0)
        assert float(loss) == pytest.approx(0.313262, abs=1e-6)

    def test_identical_candidates_log_n(self):
        for n in (2, 5, 11):
            rows = torch.ones(n, 3)
            loss = info_nce(rows, rows, tau=0.1)
            assert float(loss) == pytest.approx(math.log(n), abs=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(2, 17))
            d = int(rng.integers(2, 9))
            a = rng.normal(size=(n, d))
            p = rng.normal(size=(n, d))
            tau = float(rng.choice([0.07, 0.1, 1.0]))
            got = float(info_nce(torch.from_numpy(a), torch.from_numpy(p), tau))
            assert got == pytest.approx(naive_info_nce(a, p, tau), abs=1e-6)

    def test_loss_positive(self):
        rng = np.random.default_rng(8)
        a = torch.from_numpy(rng.normal(size=(6, 4)))
        p = torch.from_numpy(rng.normal(size=(6, 4)))
        assert float(info_nce(a, p, 0.1)) > 0.0

    def test_single_pair_degenerate(self):
        with pytest.raises(DegenerateBatchError):
            info_nce(torch.ones(1, 3), torch.ones(1, 3), 1.0)

    def test_image_scope_groups(self):
        rng = np.random.default_rng(9)
        a = torch.from_numpy(rng.normal(size=(6, 4)))
        p = torch.from_numpy(rng.normal(size=(6, 4)))
        groups = np.array([0, 0, 0, 1, 1, 1])
        got = float(info_nce(a, p, 0.5, groups=groups))
        want = (naive_info_nce(a[:3].numpy(), p[:3].numpy(), 0.5)
                + naive_info_nce(a[3:].numpy(), p[3:].numpy(), 0.5)) / 2
        assert got == pytest.approx(want, abs=1e-6)


class TestCompositeLoss:
    def _pairs(self, rng, n=6, d=4):
        return (torch.from_numpy(rng.normal(size=(n, d))),
                torch.from_numpy(rng.normal(size=(n, d))))

    def test_weight_identity(self):
        rng = np.random.default_rng(0)
        da, dp = self._pairs(rng)
        ga, gp = self._pairs(rng)
        cfg = LossConfig(weights={"pixel": 1.0, "global": 0.0, "global_concat": 0.0})
        total, parts = composite_loss("pixef", da, dp, {"global": (ga, gp)}, cfg)
        assert float(total) == pytest.approx(float(info_nce(da, dp, cfg.tau)), abs=1e-9)

    def test_pixif_third_term_zero_matches_two_term_sum(self):
        rng = np.random.default_rng(1)
        da, dp = self._pairs(rng)
        g1, g2 = self._pairs(rng)
        c1, c2 = self._pairs(rng)
        cfg0 = LossConfig(weights={"pixel": 1.0, "global": 1.0, "global_concat": 0.0})
        total, _ = composite_loss("pixif", da, dp,
                                  {"global": (g1, g2), "global_concat": (c1, c2)}, cfg0)
        want = float(info_nce(da, dp, cfg0.tau)) + float(info_nce(g1, g2, cfg0.tau))
        assert float(total) == pytest.approx(want, abs=1e-9)

    def test_degenerate_batch_identical_outputs_matches_oracle(self):
        # zero shift, shared branches: anchors == positives row-for-row
        rng = np.random.default_rng(2)
        rows = torch.from_numpy(rng.normal(size=(8, 5)))
        cfg = LossConfig(weights={"pixel": 1.0, "global": 0.0, "global_concat": 0.0})
        total, _ = composite_loss("pixef", rows, rows.clone(),
                                  {"global": (rows, rows)}, cfg)
        want = naive_info_nce(rows.numpy(), rows.numpy(), cfg.tau)
        assert float(total) == pytest.approx(want, abs=1e-6)

    def test_missing_term_raises(self):
        rng = np.random.default_rng(3)
        da, dp = self._pairs(rng)
        with pytest.raises(ConfigError):
            composite_loss("pixif", da, dp, {"global": (da, dp)}, LossConfig())

    def test_mcl_uses_global_only(self):
        rng = np.random.default_rng(4)
        ga, gp = self._pairs(rng)
        total, parts = composite_loss("mcl", None, None, {"global": (ga, gp)}, LossConfig())
        assert set(parts) == {"global"}
        assert float(total) == pytest.approx(float(info_nce(ga, gp, 0.1)), abs=1e-9)

    def test_unknown_mode_raises(self):
        with pytest.raises(ConfigError):
            composite_loss("bad", None, None, {}, LossConfig())
