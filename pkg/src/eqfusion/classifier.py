"""Small residual classifier for the augmentation experiments."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class SmallResNet(nn.Module):
    """Residual network with configurable width and depth."""

    def __init__(self, num_classes, width=16, blocks_per_stage=(1, 1, 1)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = width
        for stage_idx, blocks in enumerate(blocks_per_stage):
            out_ch = width * (2**stage_idx)
            for block_idx in range(blocks):
                stride = 2 if (stage_idx > 0 and block_idx == 0) else 1
                stages.append(ResidualBlock(in_ch, out_ch, stride))
                in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.head(h.mean(dim=(2, 3)))


@dataclass
class ClassifierResult:
    val_accuracy: float
    test_accuracy: float


def _accuracy(model, images, labels, batch_size=64):
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = model(images[start : start + batch_size])
            correct += int((logits.argmax(dim=1) == labels[start : start + batch_size]).sum())
    return 100.0 * correct / max(1, images.shape[0])


def train_classifier(
    train_images,
    train_labels,
    val_images,
    val_labels,
    test_images,
    test_labels,
    num_classes,
    seed=0,
    epochs=20,
    lr=1e-3,
    batch_size=32,
    width=16,
    blocks_per_stage=(1, 1, 1),
) -> ClassifierResult:
    """Train on the train split, select the best epoch on val, report test top-1.

    Images are float tensors in [-1, 1]; labels are int64 class indices.
    """
    torch.manual_seed(seed)
    model = SmallResNet(num_classes, width=width, blocks_per_stage=blocks_per_stage)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order_gen = torch.Generator().manual_seed(seed)

    best_val = -1.0
    best_test = 0.0
    n = train_images.shape[0]
    for _ in range(epochs):
        model.train()
        perm = torch.randperm(n, generator=order_gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(train_images[idx]), train_labels[idx])
            loss.backward()
            opt.step()
        val_acc = _accuracy(model, val_images, val_labels)
        if val_acc > best_val:
            best_val = val_acc
            best_test = _accuracy(model, test_images, test_labels)
    return ClassifierResult(val_accuracy=best_val, test_accuracy=best_test)
