"""Two-stage training: schedule, determinism, checkpoints, toggles."""

import json

import numpy as np
import pytest

from vlalign.corpus import generate_corpus
from vlalign.encoders import MultiLevelAligner
from vlalign.trainer import (
    AblationToggles,
    RunConfig,
    StageConfig,
    Trainer,
    _batches,
    load_checkpoint,
    lr_at,
    run_config_from_dict,
    run_config_to_dict,
    save_checkpoint,
)

from conftest import tiny_corpus_config, tiny_run_config


class TestSchedule:
    CFG = StageConfig(stage=1, epochs=1, peak_lr=4e-3, warmup_fraction=0.2)

    def test_starts_at_zero(self):
        assert lr_at(0, 100, self.CFG) == 0.0

    def test_peak_at_warmup_breakpoint(self):
        assert lr_at(20, 100, self.CFG) == pytest.approx(4e-3)

    def test_ends_at_zero(self):
        assert lr_at(100, 100, self.CFG) == 0.0

    def test_monotone_up_then_down(self):
        values = [lr_at(s, 50, self.CFG) for s in range(51)]
        b = max(1, int(50 * 0.2))
        assert all(x <= y + 1e-15 for x, y in zip(values[: b + 1], values[1 : b + 1]))
        assert all(x >= y - 1e-15 for x, y in zip(values[b:], values[b + 1 :]))

    def test_out_of_range_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at(101, 100, self.CFG)

    def test_tiny_run_still_warms_from_zero(self):
        assert lr_at(0, 3, self.CFG) == 0.0
        assert lr_at(3, 3, self.CFG) == 0.0


class TestStageConfigValidation:
    def test_batch_size_floor(self):
        with pytest.raises(ValueError, match="batch_size"):
            StageConfig(stage=1, epochs=1, batch_size=1)

    def test_warmup_fraction_range(self):
        with pytest.raises(ValueError, match="warmup"):
            StageConfig(stage=1, epochs=1, warmup_fraction=1.0)

    def test_batches_drop_singleton_tail(self):
        assert _batches(10, 4) == 3  # 4 + 4 + 2
        assert _batches(9, 4) == 2  # 4 + 4, trailing 1 dropped
        assert _batches(2, 8) == 1


class TestToggles:
    def test_dependency_rules(self):
        t = AblationToggles(use_tags=False)
        assert "masked_tag" not in t.active_losses()
        t = AblationToggles(use_phrases=False)
        active = t.active_losses()
        assert "masked_phrase" not in active and "grounding" not in active

    def test_empty_toggle_set_rejected(self):
        with pytest.raises(ValueError, match="every loss"):
            AblationToggles(use_tags=False, losses=("masked_tag",)).active_losses()

    def test_unknown_loss_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            AblationToggles(losses=("masked_tag", "bogus")).active_losses()


class TestStage1:
    def test_crossmodal_gradients_identically_zero(self, tiny_corpus):
        trainer = Trainer(tiny_corpus, tiny_run_config())
        trainer.run_stage1(max_steps=2)
        for name, t in trainer.model.params.items():
            if MultiLevelAligner.is_crossmodal_param(name):
                assert t.grad is None or not t.grad.any(), name

    def test_initial_loss_matches_uniform_prediction_baseline(self, tiny_corpus):
        trainer = Trainer(tiny_corpus, tiny_run_config())
        trainer.run_stage1(max_steps=1)
        rec = trainer.metrics[0]["losses"]
        actual = rec["contrastive"] + rec["masked_tag"] + rec["masked_phrase"]
        baseline = (
            np.log(trainer.cfg.stage1.batch_size)
            + np.log(trainer.token_vocab.n_tag_classes)
            + np.log(len(trainer.phrase_vocab))
        )
        assert abs(actual - baseline) / baseline < 0.2

    def test_identical_seeds_reproduce_metrics_exactly(self, tiny_corpus):
        logs = []
        for _ in range(2):
            trainer = Trainer(tiny_corpus, tiny_run_config())
            trainer.run_stage1()
            logs.append(json.dumps(trainer.metrics))
        assert logs[0] == logs[1]

    def test_single_pair_corpus_rejected(self):
        corpus = generate_corpus(tiny_corpus_config(n_pairs=1))
        trainer = Trainer(corpus, tiny_run_config())
        with pytest.raises(ValueError, match="smaller than 2"):
            trainer.run_stage1()


class TestStage2:
    def test_total_is_exact_sum_of_active_losses(self, tiny_corpus):
        cfg = tiny_run_config(
            toggles=AblationToggles(losses=("contrastive", "match", "masked_token"))
        )
        trainer = Trainer(tiny_corpus, cfg)
        s1 = trainer.run_stage1(max_steps=1)
        trainer.run_stage2(s1, max_steps=2)
        for rec in trainer.metrics:
            active = [v for v in rec["losses"].values() if v is not None]
            assert rec["total"] == sum(active)
        last = trainer.metrics[-1]["losses"]
        assert last["grounding"] is None and last["masked_tag"] is None
        assert last["match"] is not None and last["masked_token"] is not None

    def test_retrieval_finetune_uses_contrastive_and_match_only(self, tiny_corpus):
        trainer = Trainer(tiny_corpus, tiny_run_config())
        s1 = trainer.run_stage1(max_steps=1)
        trainer.run_retrieval_finetune(s1, max_steps=2)
        rec = trainer.metrics[-1]["losses"]
        assert rec["contrastive"] is not None and rec["match"] is not None
        for name in ("masked_tag", "masked_phrase", "grounding", "masked_token"):
            assert rec[name] is None

    def test_all_losses_active_and_finite(self, tiny_corpus):
        trainer = Trainer(tiny_corpus, tiny_run_config())
        state = trainer.run_stage2(trainer.run_stage1(max_steps=2), max_steps=6)
        rec = trainer.metrics[-1]
        for name, value in rec["losses"].items():
            assert value is not None and np.isfinite(value), name
        assert state.stage == 2
        for name, t in trainer.model.params.items():
            assert np.isfinite(t.data).all(), name

    def test_temperature_stays_above_floor(self, tiny_corpus):
        cfg = tiny_run_config()
        trainer = Trainer(tiny_corpus, cfg)
        trainer.run_stage2(trainer.run_stage1(max_steps=3), max_steps=5)
        for rec in trainer.metrics:
            assert rec["temperature"] >= cfg.temperature_floor


class TestCheckpointing:
    def test_mid_training_resume_matches_uninterrupted(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config(
            stage1=StageConfig(stage=1, epochs=4, batch_size=4, peak_lr=1e-3, seed=1)
        )
        straight = Trainer(tiny_corpus, cfg)
        straight.run_stage1()

        interrupted = Trainer(tiny_corpus, cfg)
        mid = interrupted.run_stage1(max_steps=7)
        save_checkpoint(tmp_path / "mid.ckpt", interrupted, mid)
        resumed_trainer, resumed_state = load_checkpoint(tmp_path / "mid.ckpt", tiny_corpus)
        resumed_trainer.resume_stage(resumed_state)
        tail_resumed = resumed_trainer.metrics
        tail_straight = straight.metrics[7:]
        assert len(tail_resumed) == len(tail_straight)
        assert json.dumps(tail_resumed) == json.dumps(tail_straight)

    def test_stage2_from_checkpoint_matches_straight_run(self, tiny_corpus, tmp_path):
        cfg = tiny_run_config()
        straight = Trainer(tiny_corpus, cfg)
        s1 = straight.run_stage1()
        straight.run_stage2(s1)
        stage2_straight = [r for r in straight.metrics if r["stage"] == 2]

        first = Trainer(tiny_corpus, cfg)
        state1 = first.run_stage1()
        save_checkpoint(tmp_path / "s1.ckpt", first, state1)
        second, loaded = load_checkpoint(tmp_path / "s1.ckpt", tiny_corpus)
        second.run_stage2(loaded)
        assert json.dumps(second.metrics) == json.dumps(stage2_straight)

    def test_checkpoint_round_trip_preserves_everything(self, tiny_corpus, tmp_path):
        trainer = Trainer(tiny_corpus, tiny_run_config())
        state = trainer.run_stage1(max_steps=3)
        save_checkpoint(tmp_path / "a.ckpt", trainer, state)
        loaded_trainer, loaded_state = load_checkpoint(tmp_path / "a.ckpt", tiny_corpus)
        for name, t in trainer.model.params.items():
            assert np.array_equal(loaded_trainer.model.params[name].data, t.data)
        for name, m in state.optim.m.items():
            assert np.array_equal(loaded_state.optim.m[name], m)
        assert loaded_state.rng.bit_generator.state == state.rng.bit_generator.state
        assert loaded_state.step_in_stage == state.step_in_stage
        assert loaded_state.running == state.running
        assert loaded_trainer.token_vocab.token_to_id == trainer.token_vocab.token_to_id
        assert loaded_trainer.phrase_vocab.surfaces == trainer.phrase_vocab.surfaces

    def test_corrupted_checkpoint_rejected(self, tiny_corpus, tmp_path):
        from vlalign.nn import CheckpointError

        trainer = Trainer(tiny_corpus, tiny_run_config())
        state = trainer.run_stage1(max_steps=1)
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, trainer, state)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path, tiny_corpus)


class TestRunConfigSerialization:
    def test_round_trip(self):
        cfg = tiny_run_config(min_phrase_freq=3)
        d = json.loads(json.dumps(run_config_to_dict(cfg)))
        assert run_config_from_dict(d) == cfg

    def test_partial_dict_uses_defaults(self):
        cfg = run_config_from_dict({"stage1": {"epochs": 2, "seed": 9}})
        assert cfg.stage1.epochs == 2 and cfg.stage1.seed == 9
        assert cfg.stage2 == RunConfig().stage2
        assert cfg.model == RunConfig().model
