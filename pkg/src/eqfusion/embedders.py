"""Feature extractors backing the FID and perceptual-diversity metrics.

Two interchangeable options:

* :class:`SeededConvEmbedder` is a frozen, randomly initialized convolutional
  stack. It needs no downloaded weights and is fully deterministic given its
  seed, so offline tests and desk-scale experiments use it.
* :class:`InceptionEmbedder` wraps the standard ImageNet-pretrained network
  (via the optional torchvision dependency) for numbers comparable with the
  wider literature; it requires downloadable weights.

Both expose ``embed`` (images -> vectors) for FID and a layered, channel-
normalized ``distance`` for perceptual diversity.
"""

import numpy as np
import torch
from torch import nn


def _to_tensor(images):
    if torch.is_tensor(images):
        return images.float()
    return torch.from_numpy(np.ascontiguousarray(images)).float()


class SeededConvEmbedder:
    """Frozen random-weight convolutional embedder.

    Images are expected as (N, 3, H, W) float arrays in [-1, 1]. ``embed``
    global-average-pools the deepest activation; ``distance`` is the sum over
    layers of the mean squared difference between channel-normalized
    activations, which is zero exactly for identical inputs.
    """

    name = "seeded-conv"

    def __init__(self, dim=64, seed=0, batch_size=64):
        self.dim = dim
        self.batch_size = batch_size
        generator = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, dim]
        convs = []
        for i in range(3):
            conv = nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            fan_in = widths[i] * 9
            conv.weight.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
            conv.bias.data.zero_()
            convs.append(conv)
        self.convs = convs
        self.act = nn.LeakyReLU(0.2)
        for conv in self.convs:
            conv.requires_grad_(False)
            conv.eval()

    def _layers(self, x):
        acts = []
        h = x
        for conv in self.convs:
            h = self.act(conv(h))
            acts.append(h)
        return acts

    def embed(self, images) -> np.ndarray:
        x = _to_tensor(images)
        outs = []
        with torch.no_grad():
            for start in range(0, x.shape[0], self.batch_size):
                h = self._layers(x[start : start + self.batch_size])[-1]
                outs.append(h.mean(dim=(2, 3)))
        return torch.cat(outs).double().numpy()

    def distance(self, image_a, image_b) -> float:
        return float(self.pairwise_distances(np.stack([image_a, image_b]), [(0, 1)])[0])

    def pairwise_distances(self, images, pairs) -> np.ndarray:
        """Perceptual distance for each (i, j) index pair."""
        x = _to_tensor(images)
        with torch.no_grad():
            layers = self._layers(x)
            normed = [a / a.norm(dim=1, keepdim=True).clamp_min(1e-10) for a in layers]
            out = np.zeros(len(pairs))
            for idx, (i, j) in enumerate(pairs):
                total = 0.0
                for a in normed:
                    total += float(((a[i] - a[j]) ** 2).mean())
                out[idx] = total
        return out


class InceptionEmbedder:
    """ImageNet-pretrained embedder; needs torchvision and downloaded weights."""

    name = "inception-v3"

    def __init__(self, batch_size=32):
        self.batch_size = batch_size
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3
        except ImportError as exc:
            raise RuntimeError(
                "torchvision is required for the pretrained embedder; "
                "install the 'inception' extra"
            ) from exc
        try:
            self.model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise RuntimeError(
                "could not load pretrained weights (download required); "
                "use the seeded embedder for offline runs"
            ) from exc
        self.model.fc = nn.Identity()
        self.model.eval()
        self.model.requires_grad_(False)

    def embed(self, images) -> np.ndarray:
        x = _to_tensor(images)
        x = (x + 1.0) / 2.0  # [-1, 1] -> [0, 1]
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        x = (x - mean) / std
        outs = []
        with torch.no_grad():
            for start in range(0, x.shape[0], self.batch_size):
                outs.append(self.model(x[start : start + self.batch_size]))
        return torch.cat(outs).double().numpy()
