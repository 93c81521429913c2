import csv
import logging

import numpy as np
import pytest
import torch

from eqfusion import lr_at, train
from eqfusion.errors import TrainingDiverged
from eqfusion.trainer import Trainer, load_checkpoint, state_dict_hash, write_manifest

from conftest import tiny_run_config


class TestSchedule:
    def test_documented_values(self):
        assert lr_at(0) == pytest.approx(1e-4)
        assert lr_at(50_000) == pytest.approx(1e-4)
        assert lr_at(75_000) == pytest.approx(5e-5)
        assert lr_at(100_000) == 0.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            lr_at(-1)
        with pytest.raises(ValueError, match="outside"):
            lr_at(100_001)

    def test_piecewise_linear_continuous_and_monotone(self):
        total = 1000
        values = [lr_at(i, total, 1e-4) for i in range(total + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        half = total // 2
        assert values[half] == pytest.approx(1e-4)
        assert values[half + 1] < 1e-4
        # linear over the decay segment
        for i in range(half, total + 1):
            expected = 1e-4 * (total - i) / (total - half)
            assert values[i] == pytest.approx(expected)


class TestStep:
    def test_two_steps_deterministic(self, synthetic_root, synthetic_dataset):
        hashes = []
        for _ in range(2):
            trainer = Trainer(tiny_run_config(synthetic_root), synthetic_dataset)
            trainer.step()
            trainer.step()
            hashes.append(trainer.parameter_hash())
        assert hashes[0] == hashes[1]

    def test_metrics_finite_and_complete(self, synthetic_root, synthetic_dataset):
        trainer = Trainer(tiny_run_config(synthetic_root), synthetic_dataset)
        metrics = trainer.step()
        for key in ("loss_d", "loss_d_adv", "loss_d_cls", "loss_g", "loss_g_adv",
                    "loss_g_cls", "loss_g_rec", "loss_g_con"):
            assert np.isfinite(metrics[key])

    def test_consistency_flag_off_drops_term_exactly(self, synthetic_root, synthetic_dataset):
        config = tiny_run_config(synthetic_root, consistent_eq=False)
        trainer = Trainer(config, synthetic_dataset)
        metrics = trainer.step()
        assert metrics["loss_g_con"] == 0.0
        expected = (
            metrics["loss_g_adv"]
            + config.lambda_cls_g * metrics["loss_g_cls"]
            + config.lambda_rec_g * metrics["loss_g_rec"]
        )
        assert metrics["loss_g"] == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("flag", ["texture_skips", "structure_skips", "consistent_eq"])
    def test_each_ablation_trains(self, synthetic_root, synthetic_dataset, flag):
        config = tiny_run_config(synthetic_root, **{flag: False})
        trainer = Trainer(config, synthetic_dataset)
        for _ in range(2):
            metrics = trainer.step()
            assert all(np.isfinite(v) for k, v in metrics.items())

    def test_all_skips_off_with_consistency_flagged(self, synthetic_root, synthetic_dataset, caplog):
        config = tiny_run_config(
            synthetic_root, texture_skips=False, structure_skips=False, consistent_eq=True
        )
        with caplog.at_level(logging.WARNING, logger="eqfusion.trainer"):
            trainer = Trainer(config, synthetic_dataset)
        assert any("projection of zeros" in rec.message for rec in caplog.records)
        metrics = trainer.step()
        assert np.isfinite(metrics["loss_g_con"])

    def test_phases_do_not_cross_contaminate(self, synthetic_root, synthetic_dataset):
        trainer = Trainer(tiny_run_config(synthetic_root), synthetic_dataset)
        images, labels, plans = trainer.sample_batch()
        out = trainer.generator.forward_tasks(images, plans)
        size = trainer.config.image_size
        real_flat = images.reshape(-1, 3, size, size)
        real_labels = labels.repeat_interleave(trainer.config.k)

        trainer.discriminator_phase(real_flat, real_labels, out.images.detach())
        assert all(p.grad is None for p in trainer.generator.parameters())

        d_grads = [None if p.grad is None else p.grad.clone()
                   for p in trainer.discriminator.parameters()]
        trainer.generator_phase(out, images, labels)
        for before, p in zip(d_grads, trainer.discriminator.parameters()):
            if before is None:
                assert p.grad is None
            else:
                assert torch.equal(before, p.grad)
        assert all(p.requires_grad for p in trainer.discriminator.parameters())

    def test_divergence_aborts_with_dump(self, synthetic_root, synthetic_dataset, tmp_path):
        trainer = Trainer(tiny_run_config(synthetic_root), synthetic_dataset, out_dir=tmp_path)
        with torch.no_grad():
            next(trainer.generator.parameters()).fill_(float("nan"))
        with pytest.raises(TrainingDiverged) as err:
            trainer.step()
        assert "iteration" in err.value.dump
        dumps = list(tmp_path.glob("divergence_*.json"))
        assert len(dumps) == 1


class TestTrainLoop:
    def test_run_writes_log_checkpoints_manifest(self, synthetic_root, synthetic_dataset, tmp_path):
        config = tiny_run_config(synthetic_root, iterations=4)
        result = train(config, tmp_path, dataset=synthetic_dataset)
        assert result.iterations == 4
        with open(result.losses_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5  # header + one row per logged iteration
        assert rows[0][0] == "iteration"
        assert (tmp_path / "manifest.json").exists()
        ckpts = sorted((tmp_path / "checkpoints").glob("step_*.pt"))
        assert [p.name for p in ckpts] == ["step_0000002.pt", "step_0000004.pt"]
        assert (tmp_path / "checkpoints" / "last.pt").exists()

    def test_identical_configs_identical_logs(self, synthetic_root, synthetic_dataset, tmp_path):
        config = tiny_run_config(synthetic_root, iterations=3)
        a = train(config, tmp_path / "a", dataset=synthetic_dataset)
        b = train(config, tmp_path / "b", dataset=synthetic_dataset)
        assert open(a.losses_csv).read() == open(b.losses_csv).read()
        assert a.parameter_hash == b.parameter_hash

    def test_resume_matches_uninterrupted(self, synthetic_root, synthetic_dataset, tmp_path):
        full_cfg = tiny_run_config(synthetic_root, iterations=8, checkpoint_interval=4)
        full = train(full_cfg, tmp_path / "full", dataset=synthetic_dataset)

        # restart from the run's own mid-point checkpoint in a fresh directory
        resumed = train(
            full_cfg,
            tmp_path / "resumed",
            dataset=synthetic_dataset,
            resume=tmp_path / "full" / "checkpoints" / "step_0000004.pt",
        )
        assert resumed.parameter_hash == full.parameter_hash

    def test_resume_requires_matching_config(self, synthetic_root, synthetic_dataset, tmp_path):
        config = tiny_run_config(synthetic_root, iterations=2)
        result = train(config, tmp_path / "run", dataset=synthetic_dataset)
        other = tiny_run_config(synthetic_root, iterations=2, lr=5e-4)
        trainer = Trainer(other, synthetic_dataset)
        with pytest.raises(ValueError, match="config"):
            trainer.restore(result.checkpoint_path)


class TestCheckpointing:
    def test_checkpoint_round_trip(self, synthetic_root, synthetic_dataset, tmp_path):
        trainer = Trainer(tiny_run_config(synthetic_root), synthetic_dataset)
        trainer.step()
        path = trainer.save_checkpoint(tmp_path / "ckpt.pt")
        loaded = load_checkpoint(path)
        assert loaded.iteration == 1
        assert loaded.parameter_hash == trainer.parameter_hash()
        assert state_dict_hash(loaded.generator_state) == state_dict_hash(
            trainer.generator.state_dict()
        )

    def test_no_temp_files_left(self, synthetic_root, synthetic_dataset, tmp_path):
        trainer = Trainer(tiny_run_config(synthetic_root), synthetic_dataset)
        trainer.save_checkpoint(tmp_path / "ckpt.pt")
        assert not list(tmp_path.glob("*.tmp"))

    def test_resume_is_bit_compatible_mid_run(self, synthetic_root, synthetic_dataset, tmp_path):
        config = tiny_run_config(synthetic_root)
        a = Trainer(config, synthetic_dataset)
        a.step()
        path = a.save_checkpoint(tmp_path / "mid.pt")
        a.step()

        b = Trainer(config, synthetic_dataset)
        b.restore(path)
        b.step()
        assert a.parameter_hash() == b.parameter_hash()


def test_manifest_is_deterministic(tmp_path, synthetic_root):
    config = tiny_run_config(synthetic_root)
    p1 = write_manifest(tmp_path / "a", config, "train")
    p2 = write_manifest(tmp_path / "b", config, "train")
    assert p1.read_text() == p2.read_text()
