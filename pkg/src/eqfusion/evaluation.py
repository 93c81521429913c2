"""Generation-quality evaluation and downstream experiments.

Covers the Frechet distance between embedded image sets, perceptual pairwise
diversity, the per-category generation protocol against a held-out reference
split, the shot sweep, classifier augmentation, and encoder feature dumps.
"""

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
from PIL import Image

from .classifier import train_classifier
from .data import Dataset, UnseenSplit, classification_splits, denormalize_images, normalize_images
from .embedders import SeededConvEmbedder
from .fusion import sample_plan
from .trainer import Checkpoint, generator_from_checkpoint, load_checkpoint

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _as_embeddings(data, embedder):
    arr = np.asarray(data, dtype=np.float64) if not torch.is_tensor(data) else data.numpy()
    if arr.ndim == 2:
        return np.asarray(arr, dtype=np.float64)
    if arr.ndim == 4:
        if embedder is None:
            raise ValueError("raw images need an embedder to compute FID")
        return np.asarray(embedder.embed(arr), dtype=np.float64)
    raise ValueError(f"expected embeddings (N, D) or images (N, 3, H, W), got shape {arr.shape}")


def _sqrtm_product(sigma_a, sigma_b, jitter=1e-6, max_attempts=3):
    eps = jitter
    for attempt in range(max_attempts):
        covmean, _ = scipy.linalg.sqrtm(sigma_a @ sigma_b, disp=False)
        if np.isfinite(covmean).all():
            imag_max = float(np.abs(covmean.imag).max()) if np.iscomplexobj(covmean) else 0.0
            if imag_max < 1e-3:
                return covmean.real if np.iscomplexobj(covmean) else covmean
        logger.warning(
            "matrix square root unstable; retrying with %.1e diagonal jitter", eps
        )
        offset = eps * np.eye(sigma_a.shape[0])
        sigma_a = sigma_a + offset
        sigma_b = sigma_b + offset
        eps *= 100.0
    covmean, _ = scipy.linalg.sqrtm(sigma_a @ sigma_b, disp=False)
    return covmean.real if np.iscomplexobj(covmean) else covmean


def fid(set_a, set_b, embedder=None, jitter=1e-6) -> float:
    """Frechet distance between Gaussian fits of two embedded sets.

    Accepts raw images (embedded via ``embedder``) or precomputed embedding
    matrices. Each set needs at least two samples so covariances are
    estimable. Unstable matrix square roots are retried with diagonal jitter.
    """
    a = _as_embeddings(set_a, embedder)
    b = _as_embeddings(set_b, embedder)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each set needs >= 2 samples to estimate a covariance")
    if a.shape[1] != b.shape[1]:
        raise ValueError("embedding dimensions disagree")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False)
    sigma_b = np.cov(b, rowvar=False)
    covmean = _sqrtm_product(sigma_a, sigma_b, jitter=jitter)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a + sigma_b - 2.0 * covmean))
    return value


def lpips_diversity(images, metric=None, max_pairs=None, seed=0) -> float:
    """Mean pairwise perceptual distance over a generated set.

    Pairs are exhaustive unless ``max_pairs`` caps them, in which case a
    seeded subsample is used. Higher means more diverse.
    """
    images = np.asarray(images)
    n = images.shape[0]
    if n < 2:
        raise ValueError("diversity needs at least two images")
    if metric is None:
        metric = SeededConvEmbedder()
    pairs = list(itertools.combinations(range(n), 2))
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]
    distances = metric.pairwise_distances(images, pairs)
    return float(np.mean(distances))


# ---------------------------------------------------------------------------
# Generation protocol
# ---------------------------------------------------------------------------

def generate_from_pool(generator, pool_uint8, count, k, rng, batch_tasks=8):
    """Generate ``count`` images conditioned on K-subsets of an image pool.

    Every generated image draws a fresh K-subset and fusion plan. Returns a
    float32 array (count, 3, H, W) in [-1, 1].
    """
    n = pool_uint8.shape[0]
    if k > n:
        raise ValueError(f"conditioning pool has {n} images but K={k}")
    generator.eval()
    outputs = []
    with torch.no_grad():
        remaining = count
        while remaining > 0:
            b = min(batch_tasks, remaining)
            tasks, plans = [], []
            for _ in range(b):
                idx = rng.choice(n, size=k, replace=False)
                tasks.append(torch.from_numpy(normalize_images(pool_uint8[idx])))
                plans.append(sample_plan(k, rng))
            out = generator.forward_tasks(torch.stack(tasks), plans)
            outputs.append(out.images.cpu().numpy())
            remaining -= b
    return np.concatenate(outputs)[:count].astype(np.float32)


def save_image_grid(images, path, cols=8):
    """Tile [-1, 1] images into one PNG."""
    arr = denormalize_images(images)
    n, _, h, w = arr.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = arr[i].transpose(1, 2, 0)
    Image.fromarray(canvas).save(path)
    return path


@dataclass
class CategoryMetrics:
    category: str
    fid: float
    lpips: float


@dataclass
class MetricReport:
    per_category: list
    fid_mean: float
    lpips_mean: float
    metadata: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category", "fid", "lpips"])
            for row in self.per_category:
                writer.writerow([row.category, row.fid, row.lpips])
        return path


def eval_generation(
    checkpoint,
    dataset: Dataset,
    unseen_split: UnseenSplit,
    per_category=128,
    k=3,
    embedder=None,
    seed=0,
    out_dir=None,
    max_pairs=256,
) -> MetricReport:
    """Per-category generation quality against held-out reference images.

    For every unseen category, K-image conditions are drawn from the
    conditioning part of the split, ``per_category`` images are generated,
    and FID is computed between the generated set and the reference part;
    diversity is measured over the generated set. The aggregate is the
    unweighted mean over categories.
    """
    if per_category < 2:
        raise ValueError("per_category must be >= 2")
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    generator = (
        generator_from_checkpoint(checkpoint) if isinstance(checkpoint, Checkpoint) else checkpoint
    )
    if embedder is None:
        embedder = SeededConvEmbedder()
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for label in dataset.unseen_labels:
        cond_idx = unseen_split.conditioning[label]
        ref_idx = unseen_split.reference[label]
        overlap = set(cond_idx.tolist()) & set(ref_idx.tolist())
        assert not overlap, f"conditioning and reference sets overlap: {sorted(overlap)}"
        cat = dataset.category(label)
        generated = generate_from_pool(generator, cat.images[cond_idx], per_category, k, rng)
        reference = normalize_images(cat.images[ref_idx])
        cat_fid = fid(generated, reference, embedder=embedder)
        cat_lpips = lpips_diversity(generated, metric=embedder, max_pairs=max_pairs, seed=seed)
        rows.append(CategoryMetrics(cat.name, cat_fid, cat_lpips))
        if out_dir is not None:
            save_image_grid(generated[: min(32, per_category)], out_dir / f"{cat.name}_grid.png")

    report = MetricReport(
        per_category=rows,
        fid_mean=float(np.mean([r.fid for r in rows])),
        lpips_mean=float(np.mean([r.lpips for r in rows])),
        metadata={
            "checkpoint_hash": checkpoint.parameter_hash if isinstance(checkpoint, Checkpoint) else "",
            "k": k,
            "per_category": per_category,
            "seed": seed,
            "embedder": getattr(embedder, "name", type(embedder).__name__),
        },
    )
    if out_dir is not None:
        report.write_csv(out_dir / "generation_metrics.csv")
    return report


def shot_sweep(
    checkpoints: dict,
    dataset: Dataset,
    unseen_split: UnseenSplit,
    k_values=(2, 3, 5, 7, 9),
    per_category=128,
    embedder=None,
    seed=0,
    out_dir=None,
):
    """FID per shot count, one trained checkpoint per K.

    Missing checkpoints are reported as gaps rather than failures. Writes a
    CSV and a line plot when an output directory is given.
    """
    rows = []
    for k in k_values:
        path = checkpoints.get(k)
        if path is None:
            logger.warning("no checkpoint for K=%d; reporting a gap", k)
            rows.append((k, None))
            continue
        report = eval_generation(
            path,
            dataset,
            unseen_split,
            per_category=per_category,
            k=k,
            embedder=embedder,
            seed=seed,
        )
        rows.append((k, report.fid_mean))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "shot_sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "fid"])
            for k, value in rows:
                writer.writerow([k, "" if value is None else value])
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        xs = [k for k, v in rows if v is not None]
        ys = [v for _, v in rows if v is not None]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("shots K")
        ax.set_ylabel("FID")
        ax.set_title("FID vs number of shots")
        fig.tight_layout()
        fig.savefig(out_dir / "shot_sweep.png", dpi=120)
        plt.close(fig)
    return rows


# ---------------------------------------------------------------------------
# Classifier augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentationReport:
    base_accuracy: list
    augmented_accuracy: list
    base_mean: float
    augmented_mean: float
    seeds: tuple


def augment_classification(
    checkpoint,
    dataset: Dataset,
    split_counts=(10, 15, 15),
    augment_per_category=50,
    seeds=(0, 1, 2),
    epochs=20,
    k=None,
    classifier_width=16,
    split_seed=0,
) -> AugmentationReport:
    """Top-1 accuracy of a small residual classifier, with and without
    generated augmentation images.

    The unseen categories are carved into disjoint train/val/test sets. The
    baseline trains on the train split alone; the augmented run adds
    ``augment_per_category`` generated images per category, conditioned on
    that category's train images. Accuracy is reported per seed.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    generator = generator_from_checkpoint(checkpoint)
    if k is None:
        k = checkpoint.config.k

    splits = classification_splits(dataset, split_counts, seed=split_seed)
    class_labels = sorted(dataset.unseen_labels)
    class_index = {label: i for i, label in enumerate(class_labels)}

    def gather(part):
        images, labels = [], []
        for label in class_labels:
            cat = dataset.category(label)
            idx = part[label]
            images.append(normalize_images(cat.images[idx]))
            labels.extend([class_index[label]] * len(idx))
        return (
            torch.from_numpy(np.concatenate(images)),
            torch.tensor(labels, dtype=torch.int64),
        )

    train_x, train_y = gather(splits.train)
    val_x, val_y = gather(splits.val)
    test_x, test_y = gather(splits.test)

    rng = np.random.default_rng(split_seed)
    aug_images, aug_labels = [], []
    for label in class_labels:
        cat = dataset.category(label)
        pool = cat.images[splits.train[label]]
        generated = generate_from_pool(generator, pool, augment_per_category, k, rng)
        aug_images.append(generated)
        aug_labels.extend([class_index[label]] * augment_per_category)
    aug_x = torch.cat([train_x, torch.from_numpy(np.concatenate(aug_images))])
    aug_y = torch.cat([train_y, torch.tensor(aug_labels, dtype=torch.int64)])

    base_acc, aug_acc = [], []
    for seed in seeds:
        base = train_classifier(
            train_x, train_y, val_x, val_y, test_x, test_y,
            num_classes=len(class_labels), seed=seed, epochs=epochs, width=classifier_width,
        )
        augmented = train_classifier(
            aug_x, aug_y, val_x, val_y, test_x, test_y,
            num_classes=len(class_labels), seed=seed, epochs=epochs, width=classifier_width,
        )
        base_acc.append(base.test_accuracy)
        aug_acc.append(augmented.test_accuracy)

    return AugmentationReport(
        base_accuracy=base_acc,
        augmented_accuracy=aug_acc,
        base_mean=float(np.mean(base_acc)),
        augmented_mean=float(np.mean(aug_acc)),
        seeds=tuple(seeds),
    )


# ---------------------------------------------------------------------------
# Encoder feature dumps
# ---------------------------------------------------------------------------

def dump_feature_maps(generator_or_checkpoint, images, out_dir):
    """Save per-block channel-mean heatmaps of the encoder as PNG files.

    One grayscale image per encoder block per input, at the block's native
    resolution. Returns the written paths.
    """
    if isinstance(generator_or_checkpoint, (str, Path)):
        generator = generator_from_checkpoint(load_checkpoint(generator_or_checkpoint))
    elif isinstance(generator_or_checkpoint, Checkpoint):
        generator = generator_from_checkpoint(generator_or_checkpoint)
    else:
        generator = generator_or_checkpoint

    x = images if torch.is_tensor(images) else torch.from_numpy(np.asarray(images, dtype=np.float32))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator.eval()
    with torch.no_grad():
        levels = generator.encoder(x.float())
    paths = []
    for block_idx, level in enumerate(levels):
        heat = level.mean(dim=1).cpu().numpy()  # (N, h, w)
        for img_idx in range(heat.shape[0]):
            h = heat[img_idx]
            span = h.max() - h.min()
            norm = (h - h.min()) / span if span > 0 else np.zeros_like(h)
            path = out_dir / f"input{img_idx:02d}_block{block_idx}.png"
            Image.fromarray((norm * 255).astype(np.uint8), mode="L").save(path)
            paths.append(path)
    return paths
