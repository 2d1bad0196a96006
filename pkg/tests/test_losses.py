import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shapemix.errors import ValidationError
from shapemix.experts import init_bank, init_gating, topk_sparsify, gate, compose_shape_map
from shapemix.gradcheck import grad_check
from shapemix.losses import (
    LossConfig,
    UtilizationAccumulator,
    bce_with_logits,
    ce_loss,
    cv_penalty,
    cv_penalty_op,
    cv_ratio,
    dice_loss,
    dice_loss_binary,
    l1_penalty,
    one_hot,
    seg_loss,
    seg_loss_binary,
    softmax,
    usage_sums,
    pooled_target,
)
from shapemix.rng import Rng
from shapemix.tensor import Tensor, constant, parameter, tsum


def ce_oracle(logits, y):
    """Scalar per-pixel evaluation via math.log/exp."""
    c, h, w = logits.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            z = [logits[ci, i, j] for ci in range(c)]
            m = max(z)
            lse = m + math.log(sum(math.exp(v - m) for v in z))
            true = max(range(c), key=lambda ci: y[ci, i, j])
            total += lse - z[true]
    return total / (h * w)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = constant(np.zeros((2, 4, 4)))
        y = one_hot(Rng(0).integers(0, 2, (4, 4)), 2)
        assert ce_loss(logits, y).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_margin(self):
        mask = Rng(1).integers(0, 2, (4, 4))
        y = one_hot(mask, 2)
        logits = constant(40.0 * (2.0 * y - 1.0))
        assert ce_loss(logits, y).item() < 1e-15

    def test_matches_scalar_oracle(self):
        rng = Rng(2, ("ce",))
        logits = rng.normal((3, 4, 4))
        y = one_hot(rng.integers(0, 3, (4, 4)), 3)
        got = ce_loss(constant(logits), y).item()
        assert got == pytest.approx(ce_oracle(logits, y), rel=1e-12)

    def test_rejects_non_one_hot(self):
        logits = constant(np.zeros((2, 2, 2)))
        bad = np.full((2, 2, 2), 0.5)
        with pytest.raises(ValidationError):
            ce_loss(logits, bad)

    def test_gradient(self):
        rng = Rng(3, ("ce_grad",))
        logits = parameter(rng.normal((2, 3, 3)), name="logits")
        y = one_hot(rng.integers(0, 2, (3, 3)), 2)
        assert grad_check(lambda: ce_loss(logits, y), [logits]) < 1e-4


class TestDice:
    def test_perfect_overlap(self):
        y = one_hot(Rng(4).integers(0, 2, (4, 4)), 2)
        loss = dice_loss(constant(y), y)
        assert loss.item() <= 1e-5

    def test_total_miss(self):
        probs = np.zeros((2, 4, 4))
        probs[1] = 1.0  # all foreground predicted
        y = one_hot(np.zeros((4, 4), dtype=int), 2)  # all background
        s = 1e-5
        expected = 1.0 - s / (16.0 + s)
        assert dice_loss(constant(probs), y).item() == pytest.approx(expected, rel=1e-12)

    def test_binary_half_overlap_closed_form(self):
        probs = constant(np.full((2, 2), 0.5))
        target = np.array([[1.0, 1.0], [0.0, 0.0]])
        s = 1e-5
        expected = 1.0 - (2.0 * 1.0 + s) / (2.0 + 2.0 + s)
        assert dice_loss_binary(probs, target, s).item() == pytest.approx(expected, rel=1e-12)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            dice_loss_binary(constant(np.full((2, 2), 1.5)), np.ones((2, 2)))

    def test_2d_dispatch_matches_binary(self):
        rng = Rng(5, ("dice2d",))
        probs = rng.uniform(0.0, 1.0, (4, 4))
        target = (rng.uniform(0.0, 1.0, (4, 4)) > 0.5).astype(float)
        a = dice_loss(constant(probs), target).item()
        b = dice_loss_binary(constant(probs), target).item()
        assert a == b

    def test_gradients(self):
        rng = Rng(6, ("dice_grad",))
        logits = parameter(rng.normal((2, 3, 3)), name="logits")
        y = one_hot(rng.integers(0, 2, (3, 3)), 2)
        assert grad_check(lambda: dice_loss(softmax(logits), y), [logits]) < 1e-4
        m = parameter(rng.normal((3, 3)), name="map")
        t = rng.uniform(0.0, 1.0, (3, 3))
        from shapemix.tensor import sigmoid
        assert grad_check(lambda: dice_loss_binary(sigmoid(m), t), [m]) < 1e-4


class TestSegLoss:
    def test_endpoints(self):
        rng = Rng(7, ("seg",))
        logits = constant(rng.normal((2, 4, 4)))
        y = one_hot(rng.integers(0, 2, (4, 4)), 2)
        assert seg_loss(logits, y, 0.0).item() == ce_loss(logits, y).item()
        assert seg_loss(logits, y, 1.0).item() == dice_loss(softmax(logits), y).item()

    def test_affine_combination(self):
        rng = Rng(8, ("seg_mix",))
        logits = constant(rng.normal((2, 4, 4)))
        y = one_hot(rng.integers(0, 2, (4, 4)), 2)
        lam = 0.8
        expected = (1 - lam) * ce_loss(logits, y).item() \
            + lam * dice_loss(softmax(logits), y).item()
        assert seg_loss(logits, y, lam).item() == pytest.approx(expected, rel=1e-15)

    def test_binary_gradient(self):
        rng = Rng(9, ("seg_bin",))
        m = parameter(rng.normal((4, 4)), name="map")
        t = pooled_target((rng.uniform(0, 1, (8, 8)) > 0.6).astype(float), 2)
        assert grad_check(lambda: seg_loss_binary(m, t, 0.8), [m]) < 1e-4

    def test_bce_matches_ce_of_sigmoid(self):
        rng = Rng(10, ("bce",))
        m = rng.normal((4, 4))
        t = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
        from shapemix.tensor import sigmoid_array
        p = sigmoid_array(m)
        expected = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
        assert bce_with_logits(constant(m), t).item() == pytest.approx(expected, rel=1e-10)


class TestCvPenalty:
    def test_uniform_is_zero(self):
        assert cv_penalty(np.full(8, 3.7)) == 0.0

    def test_two_expert_case(self):
        assert cv_penalty(np.array([1.0, 3.0])) == pytest.approx(0.25, abs=1e-15)

    @given(st.floats(1e-6, 1e6), st.lists(st.floats(0.0, 100.0), min_size=2, max_size=16))
    def test_scale_invariance(self, c, sums):
        sums = np.array(sums)
        assert abs(cv_ratio(c * sums) - cv_ratio(sums)) <= 1e-12 * max(1.0, cv_ratio(sums))

    def test_all_zero_defined_as_zero(self):
        acc = UtilizationAccumulator.empty(4)
        assert cv_penalty(acc) == 0.0
        alpha = parameter(np.zeros(4), name="alpha")
        node = cv_penalty_op(alpha)
        node.backward()
        assert node.item() == 0.0
        assert np.all(alpha.grad == 0.0)

    def test_zero_iff_uniform(self):
        assert cv_ratio(np.array([2.0, 2.0, 2.0])) == 0.0
        assert cv_ratio(np.array([2.0, 2.1, 2.0])) > 0.0

    def test_gradient(self):
        alpha = parameter(np.array([1.0, 3.0, 0.5, 2.0]), name="alpha")
        assert grad_check(lambda: cv_penalty_op(alpha), [alpha]) < 1e-4

    def test_accumulator_matches_formula(self):
        rng = Rng(11, ("acc",))
        acc = UtilizationAccumulator.empty(4)
        fields = [rng.normal((3, 3, 4)) for _ in range(2)]
        for f in fields:
            acc.add(f)
        manual = sum(np.abs(f).reshape(-1, 4).sum(axis=0) for f in fields)
        assert np.allclose(acc.sums, manual)
        assert acc.count == 2
        assert cv_penalty(acc) == cv_ratio(manual)


class TestL1Penalty:
    def test_zero_field(self):
        assert l1_penalty(constant(np.zeros((2, 2, 3)))).item() == 0.0

    def test_definition(self):
        field = constant(np.array([1.0, -2.0, 0.5]).reshape(1, 1, 3))
        assert l1_penalty(field).item() == 3.5

    def test_batch_additivity(self):
        rng = Rng(12, ("l1",))
        a, b = rng.normal((2, 2, 3)), rng.normal((2, 2, 3))
        both = l1_penalty([constant(a), constant(b)]).item()
        assert both == l1_penalty(constant(a)).item() + l1_penalty(constant(b)).item()

    def test_subgradient_sign(self):
        field = parameter(np.array([1.0, -2.0, 0.0]).reshape(1, 1, 3), name="f")
        l1_penalty(field).backward()
        assert np.array_equal(field.grad.ravel(), [1.0, -1.0, 0.0])


class TestTotalLoss:
    @pytest.fixture()
    def batch(self):
        from shapemix.model import forward, init_params
        rng = Rng(20, ("total",))
        params = init_params(rng.substream("p"), image_size=16, n_experts=4)
        xs = rng.substream("x").normal((2, 1, 16, 16))
        masks = np.zeros((2, 16, 16), dtype=np.int64)
        masks[:, 4:12, 5:11] = 1
        return params, xs, masks

    def test_beta_zero_is_seg_terms_alone(self, batch):
        from shapemix.model import forward
        from shapemix.losses import total_loss
        params, xs, masks = batch
        out = forward(xs, params, phase="warmup")
        cfg = LossConfig(beta=0.0, t_warmup=5)
        total, parts = total_loss(out, masks, cfg, iteration=1)
        assert parts.penalty == 0.0
        assert total.item() == pytest.approx(parts.seg_sam + parts.seg_shape, rel=1e-12)

    def test_schedule_switches_exactly_at_t_warmup(self, batch):
        from shapemix.model import forward
        from shapemix.losses import total_loss, l1_penalty, cv_penalty_op, usage_sums
        params, xs, masks = batch
        cfg = LossConfig(beta=1e-2, t_warmup=5)

        out = forward(xs, params, phase="warmup")
        _, at_boundary = total_loss(out, masks, cfg, iteration=5)
        assert at_boundary.phase == "warmup"
        assert at_boundary.penalty == l1_penalty(out.coding.dense).item()

        out2 = forward(xs, params, phase="sparse", k=2)
        _, after = total_loss(out2, masks, cfg, iteration=6)
        assert after.phase == "sparse"
        assert after.penalty == cv_penalty_op(usage_sums(out2.coding.dense)).item()

    def test_exactly_one_regularizer_contributes(self, batch):
        from shapemix.model import forward
        from shapemix.losses import total_loss
        params, xs, masks = batch
        cfg = LossConfig(beta=1.0, t_warmup=5)
        out = forward(xs, params, phase="warmup")
        total_warm, parts_warm = total_loss(out, masks, cfg, iteration=5)
        seg = parts_warm.seg_sam + parts_warm.seg_shape
        assert total_warm.item() == pytest.approx(seg + parts_warm.penalty, rel=1e-12)

    def test_no_prompt_output_has_no_penalty_or_shape_loss(self, batch):
        from shapemix.model import forward
        from shapemix.losses import total_loss
        params, xs, masks = batch
        out = forward(xs, params, use_prompt=False, k=2)
        total, parts = total_loss(out, masks, LossConfig(beta=1.0, t_warmup=5), 1)
        assert parts.seg_shape == 0.0 and parts.penalty == 0.0
        assert total.item() == parts.seg_sam


class TestUsageSums:
    def test_values_and_gradient(self):
        rng = Rng(13, ("usage",))
        dense = parameter(rng.normal((2, 3, 3, 4)), name="coding")
        sums = usage_sums(dense)
        expected = np.abs(dense.data).reshape(-1, 4).sum(axis=0)
        assert np.allclose(sums.data, expected)
        assert grad_check(lambda: cv_penalty_op(usage_sums(dense)), [dense]) < 1e-4

    def test_cv_reaches_gating_through_selection(self):
        rng = Rng(15, ("usage_e2e",))
        n, k = 4, 2
        net = init_gating(rng.substream("net"), in_channels=2, n=n, hidden=8)
        emb = constant(rng.substream("emb").normal((2, 4, 4)))

        def loss():
            coding = topk_sparsify(gate(emb, net), k)
            return cv_penalty_op(usage_sums(coding.dense))

        params = [net.w1, net.b1, net.w2, net.b2]
        assert grad_check(loss, params) < 1e-4
