import math

import numpy as np
import pytest

from shapemix.errors import DimensionError
from shapemix.experts import topk_sparsify, dense_coding
from shapemix.metrics import dice_coeff, hausdorff, utilization_report
from shapemix.losses import cv_ratio
from shapemix.rng import Rng
from shapemix.tensor import constant


def hausdorff_oracle(pred, gt):
    """All-pairs scan with integer squared distances."""
    p = [tuple(q) for q in np.argwhere(pred.astype(bool))]
    g = [tuple(q) for q in np.argwhere(gt.astype(bool))]
    if not p and not g:
        return 0.0
    if not p or not g:
        return math.sqrt(pred.shape[0] ** 2 + pred.shape[1] ** 2)

    def directed(src, dst):
        worst = 0
        for (y, x) in src:
            best = min((y - v) * (y - v) + (x - u) * (x - u) for (v, u) in dst)
            worst = max(worst, best)
        return worst

    return math.sqrt(max(directed(p, g), directed(g, p)))


def random_mask(rng, h, w, density):
    return (rng.uniform(0.0, 1.0, (h, w)) < density).astype(np.uint8)


class TestDice:
    def test_identical(self):
        m = random_mask(Rng(0, ("dice",)), 8, 8, 0.4)
        assert dice_coeff(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice_coeff(a, b) == 0.0

    def test_half_overlap_blocks(self):
        # P is a 2x2 block; G the adjacent 2x2 block sharing one 2x1 column
        p = np.zeros((4, 5), dtype=np.uint8)
        g = np.zeros((4, 5), dtype=np.uint8)
        p[1:3, 1:3] = 1
        g[1:3, 2:4] = 1
        assert dice_coeff(p, g) == 0.5

    def test_both_empty_convention(self):
        z = np.zeros((4, 4), dtype=np.uint8)
        assert dice_coeff(z, z) == 1.0

    def test_symmetry(self):
        rng = Rng(1, ("dice_sym",))
        a = random_mask(rng.substream("a"), 10, 10, 0.3)
        b = random_mask(rng.substream("b"), 10, 10, 0.3)
        assert dice_coeff(a, b) == dice_coeff(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice_coeff(np.zeros((3, 3)), np.zeros((4, 4)))


class TestHausdorff:
    def test_identical_zero(self):
        m = random_mask(Rng(2, ("hd",)), 8, 8, 0.4)
        assert hausdorff(m, m) == 0.0

    def test_three_four_five(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert hausdorff(a, b) == 5.0

    def test_empty_side_is_diagonal(self):
        m = np.zeros((6, 8), dtype=np.uint8)
        m2 = m.copy()
        m2[2, 2] = 1
        assert hausdorff(m, m2) == math.sqrt(36 + 64)
        assert hausdorff(m, m) == 0.0

    def test_symmetry_and_identity(self):
        rng = Rng(3, ("hd_sym",))
        a = random_mask(rng.substream("a"), 12, 12, 0.2)
        b = random_mask(rng.substream("b"), 12, 12, 0.2)
        assert hausdorff(a, b) == hausdorff(b, a)
        if a.any() and b.any() and not np.array_equal(a, b):
            assert hausdorff(a, b) > 0.0

    @pytest.mark.parametrize("chunk", range(5))
    def test_matches_bruteforce_oracle_exactly(self, chunk):
        rng = Rng(4, ("hd_oracle", chunk))
        for case in range(100):
            sub = rng.substream(case)
            h = int(sub.integers(1, 17))
            w = int(sub.integers(1, 17))
            density = float(sub.uniform(0.0, 0.5))
            a = random_mask(sub.substream("a"), h, w, density)
            b = random_mask(sub.substream("b"), h, w, density)
            assert hausdorff(a, b) == hausdorff_oracle(a, b)


class TestUtilization:
    def test_k_equals_n_no_dead(self):
        rng = Rng(5, ("util",))
        field = rng.normal((6, 6, 4))
        field[field == 0.0] = 1.0
        report = utilization_report([topk_sparsify(constant(field), 4)])
        assert report.dead_expert_count == 0

    def test_one_hot_collapse(self):
        field = np.zeros((5, 5, 4))
        field[:, :, 0] = 2.0
        report = utilization_report([topk_sparsify(constant(field), 1)])
        assert report.dead_expert_count == 3
        assert report.usage[0] == 2.0 * 25

    def test_usage_cv_matches_penalty_formula(self):
        rng = Rng(6, ("util_cv",))
        codings = [topk_sparsify(constant(rng.substream(i).normal((4, 4, 5))), 2)
                   for i in range(3)]
        report = utilization_report(codings)
        manual = np.zeros(5)
        for c in codings:
            manual += np.abs(c.dense.data).reshape(-1, 5).sum(axis=0)
        assert report.usage_cv == cv_ratio(manual)

    def test_dense_coding_counts_all_retained(self):
        field = Rng(7, ("util_dense",)).normal((3, 3, 4))
        report = utilization_report([dense_coding(constant(field))])
        assert report.dead_expert_count == 0
        assert np.all(report.retained_counts == 9)
