import math

import numpy as np
import pytest
import torch

from busvid import objectives, synthgen, trainer
from busvid.errors import (CheckpointError, ConfigError, DivergenceError,
                           ParameterError)


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = trainer.TrainConfig(epochs=7, lr=1e-3, micro=True, seed=12,
                                  focal_gamma=3.0)
        trainer.write_config_file(tmp_path / "run.cfg", cfg)
        back = trainer.read_config_file(tmp_path / "run.cfg")
        assert back == cfg

    def test_comments_and_blanks(self):
        cfg = trainer.parse_config_text(
            "# comment line\n\nepochs = 4  # trailing comment\nmicro = true\n")
        assert cfg.epochs == 4 and cfg.micro

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            trainer.parse_config_text("learning = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            trainer.parse_config_text("epochs = many\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            trainer.parse_config_text("epochs 4\n")

    def test_validation(self):
        with pytest.raises(ParameterError):
            trainer.TrainConfig(epochs=0)
        with pytest.raises(ParameterError):
            trainer.TrainConfig(lr=-1.0)
        with pytest.raises(ParameterError):
            trainer.TrainConfig(epochs=2, warmup_epochs=3.0)


class TestSchedule:
    def test_contract_points(self):
        cfg = trainer.TrainConfig(epochs=10, warmup_epochs=2.5, lr=2e-3)
        spe = 8
        assert trainer.lr_at(0, cfg, spe) == 0.0
        assert trainer.lr_at(int(2.5 * spe), cfg, spe) == pytest.approx(2e-3)
        assert trainer.lr_at(10 * spe, cfg, spe) == pytest.approx(0.0, abs=1e-12)

    def test_linear_ramp(self):
        cfg = trainer.TrainConfig(epochs=10, warmup_epochs=2.5, lr=2e-3)
        spe = 8
        warm = int(2.5 * spe)
        for step in range(warm):
            assert trainer.lr_at(step, cfg, spe) == pytest.approx(
                2e-3 * step / warm)

    def test_monotone_decay_after_warmup(self):
        cfg = trainer.TrainConfig(epochs=5, warmup_epochs=1.0, lr=1e-2)
        spe = 4
        values = [trainer.lr_at(s, cfg, spe) for s in range(4, 20)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestPreprocess:
    def test_shapes(self, prepared_cases, micro_config):
        case = prepared_cases[0]
        assert case.tics.shape == (6, 32)
        assert case.video.shape == (3, 4, 32, 64)
        assert case.video.min() >= 0.0 and case.video.max() <= 1.0

    def test_cache_round_trip(self, tmp_path, micro_config):
        spec, video, truth, clinical = synthgen.make_case(0, 1, seed=99)
        case_dir = synthgen.write_case(tmp_path / "c", video, truth, spec=spec,
                                       clinical=clinical)
        first = trainer.prepare_cases([case_dir], micro_config,
                                      cache_dir=tmp_path / "cache")
        second = trainer.prepare_cases([case_dir], micro_config,
                                       cache_dir=tmp_path / "cache")
        assert np.array_equal(first[0].tics, second[0].tics)
        assert np.array_equal(first[0].video, second[0].video)
        assert first[0].label == second[0].label

    def test_clinical_respected_when_enabled(self, tmp_path):
        cfg = trainer.TrainConfig(epochs=1, warmup_epochs=0.25, micro=True, clinical_dim=4)
        spec, video, truth, clinical = synthgen.make_case(1, 0, seed=98)
        case = synthgen.Case(video=video, truth=truth,
                             manifest={"class_label": 0, "clinical": clinical})
        prep = trainer.prepare_case(case, cfg)
        assert prep.clinical.shape == (4,)


class TestTraining:
    def test_zero_lr_freezes_parameters(self, prepared_cases):
        cfg = trainer.TrainConfig(epochs=2, warmup_epochs=0.5, micro=True, seed=1, lr=1e-30)
        before = trainer.DualBranchModel(cfg)
        torch.manual_seed(cfg.seed)
        result = trainer.train(cfg, prepared_cases[:4], prepared_cases[4:])
        torch.manual_seed(cfg.seed)
        fresh = trainer.DualBranchModel(cfg)
        for (n1, p1), (n2, p2) in zip(result.model.named_parameters(),
                                      fresh.named_parameters()):
            assert n1 == n2
            assert torch.allclose(p1, p2, atol=1e-20), n1

    def test_identical_seeds_identical_losses(self, prepared_cases, micro_config):
        a = trainer.train(micro_config, prepared_cases[:6], prepared_cases[6:])
        b = trainer.train(micro_config, prepared_cases[:6], prepared_cases[6:])
        assert [h["train_loss"] for h in a.history] \
            == [h["train_loss"] for h in b.history]
        assert [h["val_loss"] for h in a.history] \
            == [h["val_loss"] for h in b.history]

    def test_joint_gradients_in_both_branches(self, prepared_cases):
        cfg = trainer.TrainConfig(epochs=1, warmup_epochs=0.25, micro=True, seed=2)
        result = trainer.train(cfg, prepared_cases[:4], prepared_cases[4:])
        h = result.history[0]
        assert h["grad_norm_etic"] > 0.0
        assert h["grad_norm_cmt"] > 0.0

    def test_divergence_guard(self, prepared_cases):
        cfg = trainer.TrainConfig(epochs=1, warmup_epochs=0.25, micro=True, seed=3)
        poisoned = [trainer.PreprocessedCase(
            case_id="bad", tics=np.full((6, 32), np.nan, dtype=np.float32),
            video=prepared_cases[0].video, label=1)] + prepared_cases[:3]
        with pytest.raises(DivergenceError):
            trainer.train(cfg, poisoned, [])

    def test_empty_training_set(self):
        cfg = trainer.TrainConfig(epochs=1, warmup_epochs=0.25, micro=True)
        with pytest.raises(ParameterError):
            trainer.train(cfg, [], [])

    def test_memorization_smoke(self, prepared_cases):
        # four-case memorization: loss after 200 steps under 10% of initial
        cfg = trainer.TrainConfig(epochs=100, micro=True, seed=4, lr=2e-3)
        result = trainer.train(cfg, prepared_cases[:4], [])
        first = result.history[0]["train_loss"]
        last = result.history[-1]["train_loss"]
        assert last < 0.1 * first, (first, last)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, prepared_cases, micro_config):
        result = trainer.train(micro_config, prepared_cases[:4],
                               prepared_cases[4:], out_dir=tmp_path)
        model2, cfg2, meta = trainer.model_from_checkpoint(result.checkpoint_path)
        assert cfg2 == micro_config
        tics, video, y, clinical = trainer._batch_tensors(prepared_cases[:2],
                                                          micro_config)
        result.model.eval()
        model2.eval()
        with torch.no_grad():
            a = result.model(tics, video, clinical)[0]
            b = model2(tics, video, clinical)[0]
        assert torch.equal(a, b)

    def test_history_and_epoch_stored(self, tmp_path, prepared_cases, micro_config):
        result = trainer.train(micro_config, prepared_cases[:4],
                               prepared_cases[4:], out_dir=tmp_path)
        meta, arrays = trainer.load_checkpoint(result.checkpoint_path)
        assert meta["epoch"] == result.best_epoch
        assert len(meta["history"]) == micro_config.epochs
        assert any(name.startswith("momentum/") for name in arrays)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bvck"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            trainer.load_checkpoint(path)

    def test_truncated_file(self, tmp_path, prepared_cases, micro_config):
        result = trainer.train(micro_config, prepared_cases[:4], [],
                               out_dir=tmp_path)
        data = result.checkpoint_path.read_bytes()
        result.checkpoint_path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError):
            trainer.load_checkpoint(result.checkpoint_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            trainer.load_checkpoint(tmp_path / "nope.bvck")


class TestCrossValidation:
    def test_fold_count_and_mean(self, prepared_cases):
        cfg = trainer.TrainConfig(epochs=1, warmup_epochs=0.25, micro=True, seed=5)
        report, results = trainer.run_cv(cfg, prepared_cases, k=2)
        assert len(report.folds) == 2
        assert len(results) == 2
        accs = [f.acc for f in report.folds]
        assert report.mean_acc == pytest.approx(float(np.mean(accs)), abs=1e-12)

    def test_too_few_cases_per_class(self, prepared_cases):
        cfg = trainer.TrainConfig(epochs=1, warmup_epochs=0.25, micro=True)
        with pytest.raises(ParameterError):
            trainer.run_cv(cfg, prepared_cases[:3], k=5)
