import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eqfusion import (
    FusionPlan,
    classification_loss,
    consistent_equalization_loss,
    hinge_d_loss,
    hinge_g_loss,
    local_fuse,
    local_reconstruction_loss,
    total_d_loss,
    total_g_loss,
)
from eqfusion.errors import PlanError
from eqfusion.losses import LossWeights, fusion_replay_target

from oracles import (
    finite_difference_gradient,
    image_fusion_target_bruteforce,
    l1_mean_bruteforce,
    relative_error,
    softmax_cross_entropy_bruteforce,
)


class TestConsistentEqualization:
    def test_identity_is_zero(self):
        x = torch.randn(4, 8, 8)
        assert float(consistent_equalization_loss(x, x)) == 0.0

    def test_unit_gap_under_mean_reduction(self):
        ones = torch.ones(2, 4, 4)
        zeros = torch.zeros(2, 4, 4)
        assert float(consistent_equalization_loss(ones, zeros)) == pytest.approx(1.0)

    def test_matches_elementwise_oracle(self, rng):
        a = torch.tensor(rng.normal(size=(3, 5, 5)))
        b = torch.tensor(rng.normal(size=(3, 5, 5)))
        expected = l1_mean_bruteforce(a.numpy(), b.numpy())
        assert float(consistent_equalization_loss(a, b)) == pytest.approx(expected, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            consistent_equalization_loss(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetry_and_triangle_inequality(self, seed):
        gen = np.random.default_rng(seed)
        a, b, c = (torch.tensor(gen.normal(size=(2, 3, 3))) for _ in range(3))
        d_ab = float(consistent_equalization_loss(a, b))
        d_ba = float(consistent_equalization_loss(b, a))
        d_ac = float(consistent_equalization_loss(a, c))
        d_cb = float(consistent_equalization_loss(c, b))
        assert d_ab == pytest.approx(d_ba, abs=1e-12)
        assert d_ab <= d_ac + d_cb + 1e-12


class TestLocalReconstruction:
    def _fused_plan(self, rng, k=3, grid=2, size=8):
        features = torch.tensor(rng.normal(size=(k, 4, grid, grid)))
        plan = FusionPlan(alpha=rng.dirichlet(np.ones(k)), base_index=int(rng.integers(k)))
        _, plan_out = local_fuse(features, plan)
        images = torch.tensor(rng.uniform(-1, 1, size=(k, 3, size, size)))
        return images, plan_out

    def test_zero_when_generated_equals_target(self, rng):
        images, plan = self._fused_plan(rng)
        target = fusion_replay_target(images, plan)
        assert float(local_reconstruction_loss(target, images, plan)) == 0.0

    def test_one_hot_alpha_targets_base_image(self, rng):
        images, plan = self._fused_plan(rng)
        alpha = np.zeros(3)
        alpha[plan.base_index] = 1.0
        one_hot = FusionPlan(alpha=alpha, base_index=plan.base_index,
                             match_indices=plan.match_indices)
        generated = torch.tensor(rng.uniform(-1, 1, size=(3, 8, 8)))
        got = float(local_reconstruction_loss(generated, images, one_hot))
        expected = float((generated - images[plan.base_index]).abs().mean())
        assert got == pytest.approx(expected, abs=1e-12)

    def test_matches_replay_oracle(self, rng):
        for _ in range(5):
            images, plan = self._fused_plan(rng, k=int(rng.integers(2, 5)))
            generated = torch.tensor(rng.uniform(-1, 1, size=(3, 8, 8)))
            target = image_fusion_target_bruteforce(
                images.numpy(), plan.alpha, plan.base_index, plan.match_indices
            )
            expected = l1_mean_bruteforce(generated.numpy(), target)
            got = float(local_reconstruction_loss(generated, images, plan))
            assert got == pytest.approx(expected, abs=1e-5)

    def test_plan_without_matches_rejected(self, rng):
        images = torch.zeros(3, 3, 8, 8)
        plan = FusionPlan(alpha=np.ones(3) / 3, base_index=0)
        with pytest.raises(PlanError, match="match indices"):
            local_reconstruction_loss(torch.zeros(3, 8, 8), images, plan)


class TestHinge:
    def test_margin_violations_sum(self):
        assert float(hinge_d_loss(torch.tensor([0.5]), torch.tensor([-0.3]))) == pytest.approx(1.2)

    def test_satisfied_margins_are_free(self):
        assert float(hinge_d_loss(torch.tensor([2.0]), torch.tensor([-2.0]))) == 0.0

    def test_generator_side_negates_score(self):
        assert float(hinge_g_loss(torch.tensor([-2.0]))) == pytest.approx(2.0)

    def test_batch_terms_average(self):
        real = torch.tensor([0.0, 2.0])  # violations 1, 0
        fake = torch.tensor([0.0, -2.0])  # violations 1, 0
        assert float(hinge_d_loss(real, fake)) == pytest.approx(1.0)


class TestClassification:
    def test_confident_correct_prediction_is_zero(self):
        logits = torch.tensor([100.0, 0.0, 0.0])
        assert float(classification_loss(logits, 0)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits_give_log_c(self):
        for c in (2, 5, 85):
            logits = torch.zeros(c)
            assert float(classification_loss(logits, 0)) == pytest.approx(math.log(c), abs=1e-6)

    def test_matches_softmax_oracle(self, rng):
        logits = torch.tensor(rng.normal(size=(7,)))
        label = int(rng.integers(7))
        expected = softmax_cross_entropy_bruteforce(logits.numpy(), label)
        assert float(classification_loss(logits, label)) == pytest.approx(expected, abs=1e-6)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="range"):
            classification_loss(torch.zeros(4), 4)


class TestTotals:
    def test_weighted_sum_with_default_weights(self):
        assert total_g_loss((1.0, 2.0, 4.0, 6.0), LossWeights()) == pytest.approx(11.0)

    def test_all_zero_parts(self):
        assert total_g_loss((0.0, 0.0, 0.0, 0.0), LossWeights()) == 0.0
        assert total_d_loss((0.0, 0.0), LossWeights()) == 0.0

    def test_zero_weights_reduce_to_adversarial(self):
        weights = LossWeights(lambda_cls_g=0.0, lambda_rec_g=0.0, lambda_con_g=0.0)
        assert total_g_loss((3.5, 9.0, 9.0, 9.0), weights) == pytest.approx(3.5)

    def test_d_total(self):
        assert total_d_loss((1.5, 2.0), LossWeights()) == pytest.approx(3.5)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            total_g_loss((1.0, 1.0, 1.0, 1.0), LossWeights(lambda_rec_g=-0.1))


class TestGradients:
    """Autodiff against central finite differences, float64 throughout."""

    def _check(self, fn, x0, tol=1e-3):
        x = torch.tensor(x0, requires_grad=True)
        fn(x).backward()
        fd = finite_difference_gradient(lambda arr: float(fn(torch.tensor(arr))), x0.copy())
        assert relative_error(x.grad.numpy(), fd) < tol

    def test_consistent_equalization_gradient(self, rng):
        target = torch.tensor(rng.normal(size=(2, 3, 3)) * 3)
        x0 = rng.normal(size=(2, 3, 3))
        self._check(lambda x: consistent_equalization_loss(x, target), x0)

    def test_reconstruction_gradient(self, rng):
        features = torch.tensor(rng.normal(size=(3, 4, 2, 2)))
        plan = FusionPlan(alpha=rng.dirichlet(np.ones(3)), base_index=0)
        _, plan_out = local_fuse(features, plan)
        images = torch.tensor(rng.uniform(-1, 1, size=(3, 3, 8, 8)))
        x0 = rng.uniform(-1, 1, size=(3, 8, 8)) * 2
        self._check(lambda x: local_reconstruction_loss(x, images, plan_out), x0)

    def test_hinge_gradients(self, rng):
        # scores away from the kink at |1|
        real0 = rng.uniform(-0.8, 0.8, size=6)
        fake = torch.tensor(rng.uniform(1.2, 2.0, size=6))
        self._check(lambda x: hinge_d_loss(x, fake), real0)
        self._check(lambda x: hinge_g_loss(x), rng.normal(size=6))

    def test_classification_gradient(self, rng):
        x0 = rng.normal(size=(4, 5))
        labels = torch.tensor([0, 2, 4, 1])
        self._check(lambda x: classification_loss(x, labels), x0)

    def test_total_gradients(self, rng):
        weights = LossWeights()
        x0 = rng.normal(size=4)
        self._check(lambda x: total_g_loss((x[0], x[1], x[2], x[3]), weights), x0)
        y0 = rng.normal(size=2)
        self._check(lambda x: total_d_loss((x[0], x[1]), weights), y0)
