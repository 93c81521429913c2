"""Training objectives.

All L1-style losses reduce by the mean over elements so the trade-off weights
stay resolution-independent. The adversarial pair is the hinge formulation;
the auxiliary classifier uses plain softmax cross-entropy.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import PlanError


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights for the combined objectives."""

    lambda_cls_g: float = 1.0
    lambda_rec_g: float = 0.5
    lambda_con_g: float = 1.0
    lambda_cls_d: float = 1.0

    def validate(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def consistent_equalization_loss(f_eq, f_h3):
    """Mean absolute difference between equalized features and the decoder's
    third-stage activation."""
    if f_eq.shape != f_h3.shape:
        raise ValueError(f"shape mismatch: {tuple(f_eq.shape)} vs {tuple(f_h3.shape)}")
    return (f_eq - f_h3).abs().mean()


def fusion_replay_target(images: torch.Tensor, plan) -> torch.Tensor:
    """Replay a recorded feature-level fusion at image resolution.

    Each feature-grid cell maps to a pixel block; the target blends the base
    image's block with every reference's best-matching block under the plan's
    weights. images is (K, 3, H, W); the result is (3, H, W).
    """
    if plan.match_indices is None:
        raise PlanError("plan has no match indices; run the feature-level fusion first")
    k, c, height, width = images.shape
    if height != width:
        raise ValueError("replay expects square images")
    n = plan.match_indices.shape[1]
    grid = math.isqrt(n)
    if grid * grid != n:
        raise PlanError(f"match indices cover {n} positions, which is not a square grid")
    if height % grid != 0:
        raise ValueError(f"image size {height} is not divisible by the {grid}x{grid} feature grid")
    plan.validate(n_positions=n)
    block = height // grid

    def to_blocks(img):
        # (3, H, W) -> (n, 3, block, block) in row-major cell order
        return (
            img.reshape(c, grid, block, grid, block)
            .permute(1, 3, 0, 2, 4)
            .reshape(n, c, block, block)
        )

    alpha = torch.as_tensor(plan.alpha, dtype=images.dtype, device=images.device)
    ref_order = [i for i in range(k) if i != plan.base_index]
    match = torch.as_tensor(plan.match_indices, dtype=torch.int64, device=images.device)

    target = alpha[plan.base_index] * to_blocks(images[plan.base_index])
    for row, r in enumerate(ref_order):
        target = target + alpha[r] * to_blocks(images[r])[match[row]]
    return (
        target.reshape(grid, grid, c, block, block)
        .permute(2, 0, 3, 1, 4)
        .reshape(c, height, width)
    )


def local_reconstruction_loss(generated: torch.Tensor, images: torch.Tensor, plan):
    """Mean absolute difference between the generated image and the replayed
    image-level fusion target."""
    target = fusion_replay_target(images, plan)
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


def local_reconstruction_loss_batch(generated, images, plans):
    """Average the reconstruction loss over B tasks."""
    losses = [
        local_reconstruction_loss(generated[t], images[t], plan)
        for t, plan in enumerate(plans)
    ]
    return torch.stack(losses).mean()


def _as_scores(scores):
    if torch.is_tensor(scores):
        return scores
    return torch.as_tensor(scores, dtype=torch.get_default_dtype())


def hinge_d_loss(real_scores, fake_scores):
    """max(0, 1 - D(real)) + max(0, 1 + D(fake)), each averaged."""
    real = _as_scores(real_scores)
    fake = _as_scores(fake_scores)
    return F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()


def hinge_g_loss(fake_scores):
    """-mean D(fake)."""
    return -_as_scores(fake_scores).mean()


def classification_loss(logits, labels):
    """Negative log-probability of the true label under a softmax."""
    logits = _as_scores(logits)
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.int64, device=logits.device).reshape(-1)
    num_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    return F.cross_entropy(logits, labels)


def total_g_loss(parts, weights: LossWeights):
    """adv + cls*w + rec*w + con*w with the configured trade-off weights."""
    weights.validate()
    adv, cls, rec, con = parts
    return (
        adv
        + weights.lambda_cls_g * cls
        + weights.lambda_rec_g * rec
        + weights.lambda_con_g * con
    )


def total_d_loss(parts, weights: LossWeights):
    """adv + cls*w for the critic."""
    weights.validate()
    adv, cls = parts
    return adv + weights.lambda_cls_d * cls
