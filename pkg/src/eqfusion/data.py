"""Dataset ingestion, category splitting, and episodic task sampling.

Datasets are directories with one subdirectory per category. Category ids are
the rank of the sorted directory name, so splits are reproducible across runs.
A seeded shuffle assigns categories to the seen (training) and unseen
(evaluation) partitions; the two label sets never intersect.

Sampling draws K-shot tasks: one category uniformly, then K distinct images
from it. All pixel data is handed out as float32 arrays in [-1, 1].
"""

import colorsys
import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError, SamplingError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


def normalize_images(images):
    """uint8 (..., 3, H, W) -> float32 in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    return arr / 127.5 - 1.0


def denormalize_images(images):
    """float (..., 3, H, W) in [-1, 1] -> uint8, exact inverse of normalize."""
    arr = np.asarray(images, dtype=np.float32)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class DatasetSpec:
    """Shape of a dataset on disk: category counts and preprocessing size."""

    root_path: str
    total_categories: int
    seen_count: int
    unseen_count: int
    images_per_category: int
    image_size: int = 128

    def validate(self):
        if self.total_categories <= 0:
            raise DatasetError("total_categories must be positive")
        if self.seen_count <= 0 or self.unseen_count <= 0:
            raise DatasetError("seen_count and unseen_count must be positive")
        if self.seen_count + self.unseen_count != self.total_categories:
            raise DatasetError(
                "seen_count + unseen_count must equal total_categories "
                f"({self.seen_count} + {self.unseen_count} != {self.total_categories})"
            )
        if self.images_per_category <= 0:
            raise DatasetError("images_per_category must be positive")
        if self.image_size <= 0:
            raise DatasetError("image_size must be positive")


@dataclass
class CategoryData:
    """One category: its name, global label, partition, and pixel data."""

    name: str
    label: int
    partition: str  # "seen" or "unseen"
    images: np.ndarray  # uint8 (N, 3, H, W)
    files: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    spec: DatasetSpec
    categories: list[CategoryData]
    seen_labels: list[int]
    unseen_labels: list[int]

    def __post_init__(self):
        self._by_label = {c.label: c for c in self.categories}
        self._seen_index = {label: i for i, label in enumerate(self.seen_labels)}

    def category(self, label) -> CategoryData:
        return self._by_label[label]

    def seen_index(self, label) -> int:
        """Contiguous classifier index (0..seen_count-1) for a seen label."""
        return self._seen_index[label]

    def labels(self, partition) -> list[int]:
        if partition == "seen":
            return self.seen_labels
        if partition == "unseen":
            return self.unseen_labels
        raise SamplingError(f"unknown partition {partition!r} (use 'seen' or 'unseen')")


@dataclass
class ImageBatch:
    """K same-category images conditioning one generation task."""

    images: torch.Tensor  # (K, 3, H, W) float32 in [-1, 1]
    label: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (K, 3, H, W), got {tuple(self.images.shape)}")
        if self.images.shape[0] < 2:
            raise ValueError("a task needs K >= 2 images (fusion requires a reference)")

    @property
    def k(self) -> int:
        return int(self.images.shape[0])


def _decode_image(path, image_size):
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.uint8)
    return arr.transpose(2, 0, 1)  # (3, H, W)


def _list_category_images(cat_dir):
    names = [n for n in os.listdir(cat_dir) if Path(n).suffix.lower() in IMAGE_EXTENSIONS]
    return sorted(names)


def load_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Load a directory-per-category dataset with a seeded seen/unseen split.

    The first ``images_per_category`` images (sorted by filename) are taken
    from each category; a category with fewer usable images fails loading.
    """
    spec.validate()
    root = Path(spec.root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")

    names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if len(names) != spec.total_categories:
        raise DatasetError(
            f"expected {spec.total_categories} category directories under {root}, found {len(names)}"
        )

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(names)))
    seen_set = {names[i] for i in order[: spec.seen_count]}

    categories = []
    for label, name in enumerate(names):
        cat_dir = root / name
        files = _list_category_images(cat_dir)
        if len(files) < spec.images_per_category:
            raise DatasetError(
                f"category {name!r} has {len(files)} usable images, "
                f"needs {spec.images_per_category}"
            )
        files = files[: spec.images_per_category]
        images = np.stack([_decode_image(cat_dir / f, spec.image_size) for f in files])
        partition = "seen" if name in seen_set else "unseen"
        categories.append(CategoryData(name, label, partition, images, files))

    seen_labels = [c.label for c in categories if c.partition == "seen"]
    unseen_labels = [c.label for c in categories if c.partition == "unseen"]
    return Dataset(spec, categories, seen_labels, unseen_labels)


def sample_task(dataset: Dataset, partition: str, k: int, rng) -> ImageBatch:
    """Draw one K-shot task: a uniform category, then K distinct images."""
    if k < 2:
        raise SamplingError(f"K must be >= 2, got {k}")
    labels = dataset.labels(partition)
    if not labels:
        raise SamplingError(f"partition {partition!r} is empty")
    label = labels[int(rng.integers(len(labels)))]
    cat = dataset.category(label)
    n = cat.images.shape[0]
    if k > n:
        raise SamplingError(f"K={k} exceeds the {n} images in category {cat.name!r}")
    idx = rng.choice(n, size=k, replace=False)
    images = torch.from_numpy(normalize_images(cat.images[idx]))
    return ImageBatch(images=images, label=label)


@dataclass
class UnseenSplit:
    """Per-category disjoint image split of the unseen partition.

    ``conditioning`` holds the indices fed to the generator at evaluation
    time, ``reference`` the held-out indices metrics are computed against.
    """

    fraction: float
    conditioning: dict[int, np.ndarray]
    reference: dict[int, np.ndarray]


def split_unseen(dataset: Dataset, ratio: float, seed: int) -> UnseenSplit:
    """Split every unseen category's images into conditioning/reference parts.

    ``ratio`` is the conditioning fraction; both parts must be non-empty.
    """
    n = dataset.spec.images_per_category
    n_cond = int(round(ratio * n))
    if n_cond < 1 or n_cond >= n:
        raise DatasetError(
            f"ratio {ratio} gives a {n_cond}:{n - n_cond} split of {n} images; "
            "both parts must be non-empty"
        )
    rng = np.random.default_rng(seed)
    conditioning, reference = {}, {}
    for label in dataset.unseen_labels:
        perm = rng.permutation(n)
        conditioning[label] = np.sort(perm[:n_cond])
        reference[label] = np.sort(perm[n_cond:])
    return UnseenSplit(ratio, conditioning, reference)


@dataclass
class ClassificationSplits:
    """Disjoint train/val/test image indices per unseen category."""

    counts: tuple[int, int, int]
    train: dict[int, np.ndarray]
    val: dict[int, np.ndarray]
    test: dict[int, np.ndarray]


def classification_splits(dataset: Dataset, counts, seed: int = 0) -> ClassificationSplits:
    """Carve train/val/test sets out of each unseen category.

    ``counts`` gives exact per-category sizes, e.g. (10, 15, 15); their sum
    must not exceed images_per_category.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c <= 0 for c in counts):
        raise DatasetError(f"counts must be three positive integers, got {counts}")
    n = dataset.spec.images_per_category
    if sum(counts) > n:
        raise DatasetError(
            f"split counts {counts} sum to {sum(counts)}, exceeding the {n} images per category"
        )
    rng = np.random.default_rng(seed)
    train, val, test = {}, {}, {}
    for label in dataset.unseen_labels:
        perm = rng.permutation(n)
        a, b, c = counts
        train[label] = np.sort(perm[:a])
        val[label] = np.sort(perm[a : a + b])
        test[label] = np.sort(perm[a + b : a + b + c])
    return ClassificationSplits(counts, train, val, test)


def write_split_manifest(path, dataset: Dataset, parts: dict[str, dict[int, np.ndarray]]):
    """Emit a CSV manifest with one (category, image, partition) row per image."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "image", "partition"])
        for part_name, per_category in parts.items():
            for label in sorted(per_category):
                cat = dataset.category(label)
                for idx in per_category[label]:
                    writer.writerow([cat.name, cat.files[int(idx)], part_name])


# ---------------------------------------------------------------------------
# Synthetic dataset of colored geometric shapes, used by desk-scale tests and
# the `make-synthetic` command. Categories differ by hue (and shape), which
# makes them linearly separable by color.
# ---------------------------------------------------------------------------

_SHAPES = ("disk", "square", "triangle", "ring", "diamond", "cross")


def _shape_mask(shape, size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.1 * r
    if shape == "triangle":
        return (dy >= -0.8 * r) & (np.abs(dx) <= 0.6 * (0.8 * r - 0.5 * dy))
    if shape == "cross":
        bound = np.maximum(np.abs(dx), np.abs(dy)) <= r
        arms = (np.abs(dx) <= 0.35 * r) | (np.abs(dy) <= 0.35 * r)
        return bound & arms
    raise ValueError(f"unknown shape {shape!r}")


def synthetic_image(category, image_size, rng):
    """Render one (3, H, W) uint8 image for the given category index."""
    hue = (category * 0.61803398875) % 1.0 if category >= 12 else category / 12.0
    color = np.array(colorsys.hsv_to_rgb(hue, 1.0, 1.0)) * 255.0
    shape = _SHAPES[category % len(_SHAPES)]

    img = np.full((image_size, image_size, 3), 18.0, dtype=np.float32)
    img += rng.normal(0.0, 2.0, size=img.shape).astype(np.float32)

    r = image_size * rng.uniform(0.22, 0.34)
    cx = image_size / 2 + rng.uniform(-0.15, 0.15) * image_size
    cy = image_size / 2 + rng.uniform(-0.15, 0.15) * image_size
    brightness = rng.uniform(0.8, 1.0)
    mask = _shape_mask(shape, image_size, cx, cy, r)
    img[mask] = color * brightness
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def make_synthetic_dataset(root, categories=10, images_per_category=20, image_size=32, seed=0):
    """Write a synthetic shape dataset to ``root`` and return the category names."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for c in range(categories):
        name = f"shape_{c:03d}"
        names.append(name)
        cat_dir = root / name
        cat_dir.mkdir(exist_ok=True)
        for i in range(images_per_category):
            arr = synthetic_image(c, image_size, rng)
            Image.fromarray(arr.transpose(1, 2, 0)).save(cat_dir / f"img_{i:04d}.png")
    return names


def synthetic_spec(root, categories=10, images_per_category=20, image_size=32, seen_count=None):
    """DatasetSpec for a synthetic dataset, defaulting to an 80/20 split."""
    if seen_count is None:
        seen_count = max(1, int(round(categories * 0.8)))
        if seen_count >= categories:
            seen_count = categories - 1
    return DatasetSpec(
        root_path=str(root),
        total_categories=categories,
        seen_count=seen_count,
        unseen_count=categories - seen_count,
        images_per_category=images_per_category,
        image_size=image_size,
    )
