import numpy as np
import pytest
import torch

from eqfusion import (
    FusionGenerator,
    GeneratorConfig,
    GeneratorOutput,
    ImageBatch,
    decoder_intermediate,
    sample_plan,
)
from eqfusion.errors import ConfigError, PlanError
from eqfusion.fusion import FusionPlan

TINY = (4, 8, 8, 8, 8)


def make_generator(image_size=32, plan=TINY, **flags):
    torch.manual_seed(0)
    return FusionGenerator(GeneratorConfig(channel_plan=plan, image_size=image_size, **flags))


def make_batch(k=3, size=32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return ImageBatch(images=torch.rand(k, 3, size, size, generator=gen) * 2 - 1, label=0)


class TestEncode:
    def test_level_shapes_follow_channel_plan(self):
        g = make_generator(image_size=128, plan=(32, 64, 128, 256, 512))
        g.eval()
        batch = make_batch(k=3, size=128)
        pyramid = g.encode(batch)
        expected = [
            (3, 32, 64, 64),
            (3, 64, 32, 32),
            (3, 128, 16, 16),
            (3, 256, 8, 8),
            (3, 512, 4, 4),
        ]
        assert [tuple(lvl.shape) for lvl in pyramid.levels] == expected

    def test_indivisible_image_size_rejected(self):
        with pytest.raises(ConfigError, match="multiple"):
            GeneratorConfig(image_size=127).validate()

    def test_mismatched_input_size_rejected(self):
        g = make_generator(image_size=32)
        with pytest.raises(ConfigError, match="configured"):
            g.encode(make_batch(size=64))

    def test_deterministic_under_fixed_weights(self):
        g = make_generator()
        g.eval()
        batch = make_batch()
        a = g.encode(batch)
        b = g.encode(batch)
        assert all(torch.equal(x, y) for x, y in zip(a.levels, b.levels))


class TestGenerate:
    def test_output_contract(self, rng):
        g = make_generator()
        g.eval()
        batch = make_batch(k=3)
        with torch.no_grad():
            out = g.generate(batch, sample_plan(3, rng))
        assert isinstance(out, GeneratorOutput)
        assert out.image.shape == (3, 32, 32)
        assert float(out.image.min()) >= -1.0 and float(out.image.max()) <= 1.0
        assert out.fusion_plan.match_indices is not None

    def test_repeat_is_bit_identical(self, rng):
        g = make_generator()
        g.eval()
        batch = make_batch(k=3)
        plan = sample_plan(3, rng)
        with torch.no_grad():
            a = g.generate(batch, plan)
            b = g.generate(batch, plan)
        assert torch.equal(a.image, b.image)

    def test_invalid_plan_rejected(self):
        g = make_generator()
        batch = make_batch(k=3)
        with pytest.raises(PlanError):
            g.generate(batch, FusionPlan(alpha=np.array([0.7, 0.7, 0.1]), base_index=0))

    def test_disabled_skips_zero_equalized_features(self, rng):
        g = make_generator(texture_skips=False, structure_skips=False)
        g.eval()
        out = g.generate(make_batch(k=3), sample_plan(3, rng))
        assert torch.all(out.equalized.f_eq == 0)
        assert all(torch.all(lvl == 0) for lvl in out.equalized.per_level)
        assert torch.isfinite(out.image).all()

    def test_equalized_features_change_the_output(self, rng):
        plan = sample_plan(3, rng)
        batch = make_batch(k=3)
        full = make_generator()
        ablated = make_generator(texture_skips=False, structure_skips=False)
        ablated.load_state_dict(full.state_dict())
        full.eval(), ablated.eval()
        with torch.no_grad():
            a = full.generate(batch, plan)
            b = ablated.generate(batch, plan)
        assert not torch.equal(a.image, b.image)

    def test_base_encoding_skip_is_live(self, rng):
        # zeroing the base image's encodings at the skip inputs must change
        # the decoded image
        g = make_generator()
        g.eval()
        batch = make_batch(k=3)
        plan = sample_plan(3, rng)
        with torch.no_grad():
            out = g.forward_tasks(batch.images.unsqueeze(0), [plan])
            levels = g.encoder(batch.images)
            eq = out.equalized
            base = plan.base_index
            bottleneck_plan = out.plans[0]
            from eqfusion.fusion import local_fuse

            bottom, _ = local_fuse(levels[4], bottleneck_plan)
            skips = [levels[i][base].unsqueeze(0) + eq.per_level[i] for i in (3, 2, 1, 0)]
            image, _ = g.decoder(bottom.unsqueeze(0), skips)
            assert torch.allclose(image[0], out.images[0], atol=1e-6)

            zeroed = [torch.zeros_like(levels[i][base]).unsqueeze(0) + eq.per_level[i]
                      for i in (3, 2, 1, 0)]
            image_zeroed, _ = g.decoder(bottom.unsqueeze(0), zeroed)
        assert not torch.equal(image, image_zeroed)

    def test_every_parameter_gets_gradient(self, rng):
        from eqfusion.discriminator import Discriminator
        from eqfusion.losses import (
            LossWeights,
            classification_loss,
            consistent_equalization_loss,
            hinge_g_loss,
            local_reconstruction_loss_batch,
            total_g_loss,
        )

        g = make_generator()
        d = Discriminator(num_classes=4, image_size=32, channel_plan=TINY)
        images = torch.stack([make_batch(k=3, seed=s).images for s in (1, 2)])
        plans = [sample_plan(3, rng) for _ in range(2)]
        out = g.forward_tasks(images, plans)
        scores, logits = d(out.images)
        loss = total_g_loss(
            (
                hinge_g_loss(scores),
                classification_loss(logits, torch.tensor([0, 1])),
                local_reconstruction_loss_batch(out.images, images, out.plans),
                consistent_equalization_loss(out.f_eq, out.f_h3),
            ),
            LossWeights(),
        )
        loss.backward()
        missing = [
            name
            for name, p in g.named_parameters()
            if p.grad is None or not bool((p.grad != 0).any())
        ]
        assert not missing, f"parameters without gradient: {missing}"


class TestDecoderIntermediate:
    def test_matches_equalized_feature_dims(self, rng):
        g = make_generator()
        g.eval()
        out = g.generate(make_batch(k=3), sample_plan(3, rng))
        f_h3 = decoder_intermediate(out)
        assert f_h3.shape == out.equalized.f_eq.shape[1:]

    def test_usage_error_before_forward(self, rng):
        out = GeneratorOutput(
            image=torch.zeros(3, 32, 32),
            decoder_intermediate=None,
            fusion_plan=sample_plan(3, rng),
            equalized=None,
        )
        with pytest.raises(RuntimeError, match="forward"):
            decoder_intermediate(out)

    @pytest.mark.parametrize("k", [2, 3, 5, 7, 9])
    def test_shape_stable_across_shot_counts(self, k, rng):
        g = make_generator()
        g.eval()
        out = g.generate(make_batch(k=k), sample_plan(k, rng))
        assert decoder_intermediate(out).shape == (8, 8, 8)
        assert out.image.shape == (3, 32, 32)
