"""Mutual encoder-decoder generator.

Five stride-2 encoder blocks and a mirrored nearest-upsample decoder. The
deepest encoder features of the K inputs are locally fused into the decoder
bottleneck; each subsequent decoder stage concatenates its input with the
base image's encoding at the matching resolution, element-wise augmented by
the equalized features resampled to that level.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .data import ImageBatch
from .errors import ConfigError, PlanError
from .fusion import (
    EqualizedFeatures,
    FeatureFusion,
    FeaturePyramid,
    FusionPlan,
    BranchFeatures,
    local_fuse,
)

DOWNSAMPLE_FACTOR = 32  # five stride-2 blocks


@dataclass(frozen=True)
class GeneratorConfig:
    channel_plan: tuple = (32, 64, 128, 256, 512)
    image_size: int = 128
    texture_skips: bool = True
    structure_skips: bool = True
    negative_slope: float = 0.2

    def validate(self):
        if len(self.channel_plan) != 5:
            raise ConfigError(f"channel_plan must have 5 entries, got {len(self.channel_plan)}")
        if any(c <= 0 for c in self.channel_plan):
            raise ConfigError("channel_plan entries must be positive")
        if self.image_size <= 0 or self.image_size % DOWNSAMPLE_FACTOR != 0:
            raise ConfigError(
                f"image_size must be a positive multiple of {DOWNSAMPLE_FACTOR}, got {self.image_size}"
            )


class Encoder(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        plan = [3, *config.channel_plan]
        blocks = []
        for i in range(5):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(plan[i], plan[i + 1], 4, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(plan[i + 1]),
                    nn.LeakyReLU(config.negative_slope, inplace=True),
                )
            )
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        levels = []
        h = x
        for block in self.blocks:
            h = block(h)
            levels.append(h)
        return levels


class Decoder(nn.Module):
    """Mirrored decoder taking explicit skip tensors for stages 2-5.

    ``skips`` is ordered deep to shallow (levels 4, 3, 2, 1 of the encoder);
    the third stage's activation is returned alongside the image.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        plan = list(config.channel_plan)
        act = nn.LeakyReLU(config.negative_slope, inplace=True)

        def up_block(in_ch, out_ch):
            return nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                act,
            )

        self.stage1 = up_block(plan[4], plan[3])
        self.stage2 = up_block(plan[3] + plan[3], plan[2])
        self.stage3 = up_block(plan[2] + plan[2], plan[1])
        self.stage4 = up_block(plan[1] + plan[1], plan[0])
        self.stage5 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(plan[0] + plan[0], 3, 3, padding=1),
            nn.Tanh(),
        )

    def forward(self, bottleneck, skips):
        if len(skips) != 4:
            raise ValueError(f"expected 4 skip tensors, got {len(skips)}")
        h = self.stage1(bottleneck)
        h = self.stage2(torch.cat([h, skips[0]], dim=1))
        f_h3 = self.stage3(torch.cat([h, skips[1]], dim=1))
        h = self.stage4(torch.cat([f_h3, skips[2]], dim=1))
        image = self.stage5(torch.cat([h, skips[3]], dim=1))
        return image, f_h3


@dataclass
class GeneratorOutput:
    """Result of one K-shot generation."""

    image: torch.Tensor  # (3, H, W) in [-1, 1]
    decoder_intermediate: torch.Tensor | None  # third decoder stage activation
    fusion_plan: FusionPlan  # bottleneck fusion, match indices filled
    equalized: EqualizedFeatures


@dataclass
class BatchGeneratorOutput:
    """Batched training forward over B independent tasks."""

    images: torch.Tensor  # (B, 3, H, W)
    f_h3: torch.Tensor  # (B, c, H/4, W/4)
    f_eq: torch.Tensor  # (B, c, H/4, W/4)
    plans: list  # B bottleneck plans with match indices
    equalized: EqualizedFeatures


def decoder_intermediate(output: GeneratorOutput) -> torch.Tensor:
    """Third decoder stage activation of a completed forward pass."""
    if output.decoder_intermediate is None:
        raise RuntimeError("no decoder intermediate available; run a forward pass first")
    return output.decoder_intermediate


class FusionGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = Encoder(config)
        self.fusion = FeatureFusion(
            config.channel_plan,
            config.image_size,
            texture_skips=config.texture_skips,
            structure_skips=config.structure_skips,
        )
        self.decoder = Decoder(config)

    def encode(self, batch) -> FeaturePyramid:
        """Encode a task's images into the five-level pyramid."""
        images = batch.images if isinstance(batch, ImageBatch) else batch
        self._check_images(images)
        return FeaturePyramid(levels=self.encoder(images))

    def _check_images(self, images):
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != size or images.shape[3] != size:
            raise ConfigError(
                f"input is {images.shape[2]}x{images.shape[3]} but the generator "
                f"is configured for {size}x{size}"
            )

    def forward_tasks(self, images: torch.Tensor, plans) -> BatchGeneratorOutput:
        """Run B independent K-shot tasks in one batched pass.

        images: (B, K, 3, H, W); plans: one FusionPlan per task. Convolutional
        stages are batched over B*K; the per-task fusion loops over B.
        """
        if images.ndim != 5:
            raise ValueError(f"expected (B, K, 3, H, W), got {tuple(images.shape)}")
        b, k = images.shape[:2]
        if len(plans) != b:
            raise PlanError(f"{b} tasks but {len(plans)} plans")
        if k < 2:
            raise ValueError("tasks need K >= 2 images")
        flat = images.reshape(b * k, *images.shape[2:])
        self._check_images(flat)

        levels = self.encoder(flat)  # each (B*K, c_i, h_i, w_i)
        texture, structure = self.fusion.reorganizer(levels)
        texture = self.fusion.texture_scales(texture)
        structure = self.fusion.structure_scales(structure)

        fused_te, fused_st, bottlenecks, plans_out = [], [], [], []
        deep = levels[4]
        for t, plan in enumerate(plans):
            if plan.k != k:
                raise PlanError(f"plan {t} is for K={plan.k}, task has K={k}")
            sl = slice(t * k, (t + 1) * k)
            te, _ = local_fuse(texture[sl], FusionPlan(plan.alpha, plan.base_index))
            st, _ = local_fuse(structure[sl], FusionPlan(plan.alpha, plan.base_index))
            bottom, plan_out = local_fuse(deep[sl], FusionPlan(plan.alpha, plan.base_index))
            fused_te.append(te)
            fused_st.append(st)
            bottlenecks.append(bottom)
            plans_out.append(plan_out)

        eq = self.fusion.equalizer(torch.stack(fused_te), torch.stack(fused_st))
        bottleneck = torch.stack(bottlenecks)

        base_rows = torch.tensor(
            [t * k + plan.base_index for t, plan in enumerate(plans)],
            device=images.device,
        )
        # Skips deep to shallow: encoder levels 4, 3, 2, 1 of the base image,
        # element-wise augmented by the matching equalized level.
        skips = [levels[i][base_rows] + eq.per_level[i] for i in (3, 2, 1, 0)]
        image, f_h3 = self.decoder(bottleneck, skips)
        return BatchGeneratorOutput(
            images=image, f_h3=f_h3, f_eq=eq.f_eq, plans=plans_out, equalized=eq
        )

    def generate(self, batch: ImageBatch, plan: FusionPlan) -> GeneratorOutput:
        """Generate one image for a K-shot task."""
        plan.validate()
        out = self.forward_tasks(batch.images.unsqueeze(0), [plan])
        equalized = EqualizedFeatures(
            f_eq=out.f_eq, per_level=[lvl for lvl in out.equalized.per_level]
        )
        return GeneratorOutput(
            image=out.images[0],
            decoder_intermediate=out.f_h3[0],
            fusion_plan=out.plans[0],
            equalized=equalized,
        )
