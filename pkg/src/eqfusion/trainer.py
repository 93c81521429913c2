"""Alternating adversarial training with checkpointing and loss logging.

Each iteration samples a batch of independent K-shot tasks from the seen
categories, performs one critic update on real images plus detached fakes,
then one generator update with the critic frozen. The learning rate holds at
its base value for the first half of the run and decays linearly to zero over
the second half. Checkpoints carry model, optimizer, and RNG state, so a
resumed run continues bit-compatibly.
"""

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_from_dict, config_to_dict
from .data import Dataset, load_dataset, sample_task
from .discriminator import Discriminator
from .errors import TrainingDiverged
from .fusion import sample_plan
from .generator import FusionGenerator, GeneratorConfig
from .losses import (
    classification_loss,
    consistent_equalization_loss,
    hinge_d_loss,
    hinge_g_loss,
    local_reconstruction_loss_batch,
    total_d_loss,
    total_g_loss,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    "iteration",
    "lr",
    "loss_d",
    "loss_d_adv",
    "loss_d_cls",
    "loss_g",
    "loss_g_adv",
    "loss_g_cls",
    "loss_g_rec",
    "loss_g_con",
)


def lr_at(iteration, total_iterations=100_000, base_lr=1e-4):
    """Constant for the first half of training, then linear decay to zero."""
    if iteration < 0 or iteration > total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    half = total_iterations // 2
    if iteration <= half:
        return base_lr
    return base_lr * (total_iterations - iteration) / (total_iterations - half)


def generator_config(config: RunConfig) -> GeneratorConfig:
    return GeneratorConfig(
        channel_plan=tuple(config.channel_plan),
        image_size=config.image_size,
        texture_skips=config.texture_skips,
        structure_skips=config.structure_skips,
    )


def build_models(config: RunConfig):
    generator = FusionGenerator(generator_config(config))
    discriminator = Discriminator(
        num_classes=config.seen_count,
        image_size=config.image_size,
        channel_plan=tuple(config.channel_plan),
    )
    return generator, discriminator


def state_dict_hash(state_dict) -> str:
    """sha256 over all tensors (parameters and buffers) in key order."""
    digest = hashlib.sha256()
    for key in sorted(state_dict):
        value = state_dict[key]
        digest.update(key.encode())
        if torch.is_tensor(value):
            digest.update(value.detach().cpu().contiguous().numpy().tobytes())
        else:
            digest.update(repr(value).encode())
    return digest.hexdigest()


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    def __init__(self, config: RunConfig, dataset: Dataset, out_dir=None):
        config.validate()
        if dataset.spec.image_size != config.image_size:
            raise ValueError("dataset image_size disagrees with the run config")
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.weights = config.loss_weights()
        self.iteration = 0

        torch.manual_seed(config.seed)
        self.generator, self.discriminator = build_models(config)
        self.g_opt = torch.optim.Adam(
            self.generator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2)
        )
        self.d_opt = torch.optim.Adam(
            self.discriminator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2)
        )
        self.rng = np.random.default_rng(config.seed)

        if not config.texture_skips and not config.structure_skips and config.consistent_eq:
            logger.warning(
                "both skip branches are disabled while the consistency loss is on; "
                "it will compare the decoder against a projection of zeros"
            )

    # -- sampling -----------------------------------------------------------

    def sample_batch(self):
        """Draw batch_size independent tasks, each with its own fusion plan."""
        images, plans, class_idx = [], [], []
        for _ in range(self.config.batch_size):
            task = sample_task(self.dataset, "seen", self.config.k, self.rng)
            images.append(task.images)
            plans.append(sample_plan(self.config.k, self.rng))
            class_idx.append(self.dataset.seen_index(task.label))
        return torch.stack(images), torch.tensor(class_idx, dtype=torch.int64), plans

    # -- one update each for D and G ----------------------------------------

    def discriminator_phase(self, real_images, real_labels, fake_images):
        self.d_opt.zero_grad(set_to_none=True)
        real_scores, real_logits = self.discriminator(real_images)
        fake_scores, _ = self.discriminator(fake_images)
        adv = hinge_d_loss(real_scores, fake_scores)
        cls = classification_loss(real_logits, real_labels)
        total = total_d_loss((adv, cls), self.weights)
        total.backward()
        self.d_opt.step()
        return {
            "loss_d": float(total.detach()),
            "loss_d_adv": float(adv.detach()),
            "loss_d_cls": float(cls.detach()),
        }

    def generator_phase(self, out, images, labels):
        _set_requires_grad(self.discriminator, False)
        try:
            self.g_opt.zero_grad(set_to_none=True)
            fake_scores, fake_logits = self.discriminator(out.images)
            adv = hinge_g_loss(fake_scores)
            cls = classification_loss(fake_logits, labels)
            rec = local_reconstruction_loss_batch(out.images, images, out.plans)
            if self.config.consistent_eq:
                con = consistent_equalization_loss(out.f_eq, out.f_h3)
            else:
                con = torch.zeros((), dtype=out.images.dtype)
            total = total_g_loss((adv, cls, rec, con), self.weights)
            total.backward()
            self.g_opt.step()
        finally:
            _set_requires_grad(self.discriminator, True)
        return {
            "loss_g": float(total.detach()),
            "loss_g_adv": float(adv.detach()),
            "loss_g_cls": float(cls.detach()),
            "loss_g_rec": float(rec.detach()),
            "loss_g_con": float(con.detach()),
        }

    def step(self):
        """One critic update followed by one generator update."""
        lr = lr_at(self.iteration, self.config.iterations, self.config.lr)
        for opt in (self.d_opt, self.g_opt):
            for group in opt.param_groups:
                group["lr"] = lr

        images, labels, plans = self.sample_batch()
        out = self.generator.forward_tasks(images, plans)

        size = self.config.image_size
        real_flat = images.reshape(-1, 3, size, size)
        real_labels = labels.repeat_interleave(self.config.k)

        metrics = {"iteration": self.iteration, "lr": lr}
        metrics.update(self.discriminator_phase(real_flat, real_labels, out.images.detach()))
        metrics.update(self.generator_phase(out, images, labels))

        if not all(np.isfinite(v) for k, v in metrics.items() if k != "iteration"):
            dump = self._diagnostic_dump(metrics)
            raise TrainingDiverged(
                f"non-finite loss at iteration {self.iteration}: {metrics}", dump
            )
        self.iteration += 1
        return metrics

    def _diagnostic_dump(self, metrics):
        def grad_norm(module):
            total = 0.0
            for p in module.parameters():
                if p.grad is not None:
                    total += float(p.grad.detach().norm()) ** 2
            return total**0.5

        dump = {
            "iteration": self.iteration,
            "metrics": metrics,
            "generator_grad_norm": grad_norm(self.generator),
            "discriminator_grad_norm": grad_norm(self.discriminator),
        }
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / f"divergence_{self.iteration:07d}.json"
            path.write_text(json.dumps(dump, indent=2, default=float))
            logger.error("training diverged; diagnostics written to %s", path)
        return dump

    # -- persistence ---------------------------------------------------------

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(state_dict_hash(self.generator.state_dict()).encode())
        digest.update(state_dict_hash(self.discriminator.state_dict()).encode())
        return digest.hexdigest()

    def save_checkpoint(self, path):
        """Atomic checkpoint write (temp file then rename)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": __version__,
            "iteration": self.iteration,
            "config": config_to_dict(self.config),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict(),
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "parameter_hash": self.parameter_hash(),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)
        return path

    def restore(self, path):
        payload = torch.load(path, map_location="cpu", weights_only=False)
        restored = config_from_dict(payload["config"])
        if config_to_dict(restored) != config_to_dict(self.config):
            raise ValueError("checkpoint config does not match the run config")
        self.generator.load_state_dict(payload["generator"])
        self.discriminator.load_state_dict(payload["discriminator"])
        self.g_opt.load_state_dict(payload["g_opt"])
        self.d_opt.load_state_dict(payload["d_opt"])
        self.rng.bit_generator.state = payload["numpy_rng"]
        torch.set_rng_state(payload["torch_rng"])
        self.iteration = payload["iteration"]


@dataclass
class Checkpoint:
    config: RunConfig
    iteration: int
    generator_state: dict
    discriminator_state: dict
    parameter_hash: str
    path: str


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(
        config=config_from_dict(payload["config"]),
        iteration=payload["iteration"],
        generator_state=payload["generator"],
        discriminator_state=payload["discriminator"],
        parameter_hash=payload["parameter_hash"],
        path=str(path),
    )


def generator_from_checkpoint(checkpoint: Checkpoint) -> FusionGenerator:
    generator = FusionGenerator(generator_config(checkpoint.config))
    generator.load_state_dict(checkpoint.generator_state)
    generator.eval()
    return generator


@dataclass
class TrainResult:
    checkpoint_path: str
    losses_csv: str
    iterations: int
    parameter_hash: str


def write_manifest(out_dir, config: RunConfig, command: str, extra=None):
    """Resolved config, seed, and code version, next to the run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": config_to_dict(config),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def train(config: RunConfig, out_dir, dataset=None, resume=None) -> TrainResult:
    """Run the full training loop, logging losses and writing checkpoints."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    if dataset is None:
        dataset = load_dataset(config.dataset_spec(), config.seed)
    trainer = Trainer(config, dataset, out_dir=out_dir)
    if resume is not None:
        trainer.restore(resume)
        logger.info("resumed from %s at iteration %d", resume, trainer.iteration)

    write_manifest(out_dir, config, "train")
    csv_path = out_dir / "losses.csv"
    mode = "a" if (resume is not None and csv_path.exists()) else "w"
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        while trainer.iteration < config.iterations:
            metrics = trainer.step()
            done = trainer.iteration  # step() already advanced the counter
            if done % config.log_interval == 0 or done == config.iterations:
                row = dict(metrics, iteration=done)
                writer.writerow([row[c] for c in LOG_COLUMNS])
                fh.flush()
            if done % config.checkpoint_interval == 0 or done == config.iterations:
                trainer.save_checkpoint(ckpt_dir / f"step_{done:07d}.pt")

    final = trainer.save_checkpoint(ckpt_dir / "last.pt")
    return TrainResult(
        checkpoint_path=str(final),
        losses_csv=str(csv_path),
        iterations=trainer.iteration,
        parameter_hash=trainer.parameter_hash(),
    )
