"""Hinge-loss critic with an auxiliary classification head over seen categories."""

import torch
from torch import nn
from torch.nn.utils import spectral_norm


class Discriminator(nn.Module):
    def __init__(self, num_classes, image_size=128, channel_plan=(32, 64, 128, 256, 512),
                 negative_slope=0.2):
        super().__init__()
        if num_classes <= 0:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.image_size = image_size
        plan = [3, *channel_plan]
        blocks = []
        for i in range(5):
            blocks.append(spectral_norm(nn.Conv2d(plan[i], plan[i + 1], 4, stride=2, padding=1)))
            blocks.append(nn.LeakyReLU(negative_slope, inplace=True))
        self.features = nn.Sequential(*blocks)
        self.realness = spectral_norm(nn.Linear(plan[-1], 1))
        self.classifier = spectral_norm(nn.Linear(plan[-1], num_classes))

    def forward(self, images):
        """images (N, 3, H, W) in [-1, 1] -> (scores (N,), class logits (N, C))."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if images.shape[2] != self.image_size or images.shape[3] != self.image_size:
            raise ValueError(
                f"input is {images.shape[2]}x{images.shape[3]} but the critic "
                f"is configured for {self.image_size}x{self.image_size}"
            )
        h = self.features(images)
        pooled = h.sum(dim=(2, 3))  # global sum pooling
        return self.realness(pooled).squeeze(1), self.classifier(pooled)
