"""Optimizer, schedule, switch state machine and the training loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lssd.autodiff import Tensor
from lssd.data import LanguageSpec, generate_corpus, make_batch
from lssd.model import ModelConfig, Seq2SeqModel, init_model, snapshot
from lssd.training import (
    LanguageState,
    OptimizerState,
    RunLog,
    EpochRecord,
    Trainer,
    TrainConfig,
    adam_step,
    dev_loss,
    lr_at,
    run_training,
    update_state,
    validate_and_update,
    write_run_dir,
)

SPECS = [
    LanguageSpec("lo", 12, 6, 6, "permutation", 1, (2, 4)),
    LanguageSpec("hi", 40, 6, 6, "shift", 2, (2, 4)),
]
TINY = dict(embed_dim=8, hidden_dim=16, num_layers=1, num_heads=2, max_seq_len=6)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SPECS, 10, seed=2)


@pytest.fixture(scope="module")
def model_config(corpus):
    return ModelConfig(vocab_size=len(corpus.vocab), **TINY)


def _scalar_model(value=0.5):
    cfg = ModelConfig(vocab_size=4, embed_dim=2, hidden_dim=2, num_layers=1, num_heads=1)
    return Seq2SeqModel(cfg, {"w": Tensor([value], requires_grad=True)})


def _config(**kw):
    base = dict(epochs=2, steps_per_epoch=3, batch_size=4, warmup_steps=4, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        m = _scalar_model()
        m.params["w"].grad = np.zeros(1)
        adam_step(m, OptimizerState(eps=1e-8), lr=0.1)
        assert m.params["w"].data.tolist() == [0.5]

    def test_first_step_moves_by_lr(self):
        m = _scalar_model()
        m.params["w"].grad = np.ones(1)
        state = OptimizerState(beta1=0.9, beta2=0.999, eps=1e-8)
        adam_step(m, state, lr=0.001)
        assert m.params["w"].data[0] - np.float32(0.5) == pytest.approx(-0.001, rel=1e-4)
        assert state.step == 1
        assert m.params["w"].grad is None

    def test_identical_models_stay_identical(self):
        a, b = _scalar_model(), _scalar_model()
        sa, sb = OptimizerState(), OptimizerState()
        for g in (0.3, -1.2, 2.0):
            a.params["w"].grad = np.array([g])
            b.params["w"].grad = np.array([g])
            adam_step(a, sa, 0.01)
            adam_step(b, sb, 0.01)
        assert a.params["w"].data.tobytes() == b.params["w"].data.tobytes()
        assert sa.step == sb.step == 3

    def test_missing_gradient_is_an_error(self):
        with pytest.raises(ValueError):
            adam_step(_scalar_model(), OptimizerState(), 0.1)

    def test_non_finite_gradient_is_an_error(self):
        m = _scalar_model()
        m.params["w"].grad = np.array([np.nan])
        with pytest.raises(FloatingPointError):
            adam_step(m, OptimizerState(), 0.1)


class TestSchedule:
    def test_crossover_at_warmup(self):
        cfg = TrainConfig(warmup_steps=100)
        w = cfg.warmup_steps
        assert w ** -0.5 == pytest.approx(w * w ** -1.5)
        peak = lr_at(w, cfg, 64)
        assert peak == pytest.approx(64 ** -0.5 * w ** -0.5)

    def test_four_times_warmup_halves(self):
        cfg = TrainConfig(warmup_steps=50)
        assert lr_at(200, cfg, 16) == pytest.approx(lr_at(50, cfg, 16) / 2)

    def test_linear_warmup(self):
        cfg = TrainConfig(warmup_steps=10)
        assert lr_at(5, cfg, 16) == pytest.approx(lr_at(10, cfg, 16) / 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 1000), st.integers(0, 5000))
    def test_nonincreasing_after_warmup(self, warmup, extra):
        cfg = TrainConfig(warmup_steps=warmup)
        s = warmup + extra
        assert lr_at(s + 1, cfg, 64) <= lr_at(s, cfg, 64)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_at(0, TrainConfig(), 64)


class TestSwitchStateMachine:
    def _replay(self, losses, corpus, model):
        states = [LanguageState()]
        switches, replaced = [], []
        for epoch, value in enumerate(losses, start=1):
            _, rep = validate_and_update(model, states, corpus, epoch, loss_fn=lambda m, lang: value)
            switches.append(states[0].switch)
            replaced.append(rep[0])
        return states[0], switches, replaced

    def test_first_epoch_always_improves(self, corpus, model_config):
        model = init_model(model_config, 0)
        states = [LanguageState(), LanguageState()]
        validate_and_update(model, states, corpus, 1, loss_fn=lambda m, lang: 5.0 + lang)
        for s in states:
            assert not s.switch and s.teacher is not None and s.teacher.epoch == 1

    def test_improvement_replaces_teacher(self):
        state = LanguageState(switch=True, best_dev_loss=1.2, teacher=object())
        assert update_state(state, 1.0, lambda: "new")
        assert (state.switch, state.teacher, state.best_dev_loss) == (False, "new", 1.0)

    def test_tie_is_not_an_improvement(self):
        state = LanguageState(best_dev_loss=1.2, teacher="old")
        assert not update_state(state, 1.2, lambda: "new")
        assert (state.switch, state.teacher, state.best_dev_loss) == (True, "old", 1.2)

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_scripted_trajectory(self, corpus, model_config, k):
        losses = [3.0 - 0.1 * i for i in range(k)]
        low = losses[-1]
        losses += [low + 0.2, low + 0.3, low - 0.05]
        state, switches, replaced = self._replay(losses, corpus, init_model(model_config, 0))
        assert switches == [False] * k + [True, True, False]
        assert sum(replaced) == k + 1
        assert state.teacher.epoch == k + 3

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.1, 10.0), min_size=1, max_size=15))
    def test_best_tracks_running_minimum(self, losses):
        state = LanguageState()
        for i, value in enumerate(losses):
            update_state(state, value, lambda: i)
            assert state.best_dev_loss == min(losses[: i + 1])
            state.check()

    def test_teacher_is_detached_from_live_model(self, corpus, model_config):
        model = init_model(model_config, 1)
        states = [LanguageState(), LanguageState()]
        validate_and_update(model, states, corpus, 1)
        before = states[0].teacher.params["out.bias"].copy()
        model.params["out.bias"].data += 1.0
        np.testing.assert_array_equal(states[0].teacher.params["out.bias"], before)

    def test_real_dev_loss_is_finite_and_positive(self, corpus, model_config):
        value = dev_loss(init_model(model_config, 2), corpus, 0, 0.1)
        assert math.isfinite(value) and value > 0


class TestTrainStep:
    def test_switch_off_skips_teacher(self, corpus, model_config):
        trainer = Trainer(corpus, model_config, _config(mode="lssd_adaptive"))
        br = trainer.train_step(0, make_batch(corpus, 0, "train", [0, 1, 2]))
        assert not br.switch_on
        assert trainer.teachers.forward_calls == 0

    def test_whole_mode_weights_are_one(self, corpus, model_config):
        trainer = Trainer(corpus, model_config, _config(mode="lssd_whole"))
        trainer.validate(1)
        trainer.states[0].switch = True
        br = trainer.train_step(0, make_batch(corpus, 0, "train", [0, 1, 2]))
        assert br.switch_on and br.g_values.tolist() == [1.0, 1.0, 1.0]
        assert trainer.teachers.forward_calls == 1

    def test_baseline_never_distills(self, corpus, model_config):
        trainer = Trainer(corpus, model_config, _config(mode="baseline"))
        trainer.validate(1)
        trainer.states[0].switch = True
        br = trainer.train_step(0, make_batch(corpus, 0, "train", [0, 1]))
        assert not br.switch_on and trainer.teachers.forward_calls == 0

    def test_stsd_uses_the_overall_best(self, corpus, model_config):
        trainer = Trainer(corpus, model_config, _config(mode="stsd"))
        trainer.validate(1)
        key, state = trainer.teacher_for(1)
        assert key == "overall" and state.teacher is trainer.overall_best

    def test_switch_without_teacher_is_an_error(self, corpus, model_config):
        trainer = Trainer(corpus, model_config, _config(mode="lssd_whole"))
        trainer.states[0].switch = True
        with pytest.raises(RuntimeError):
            trainer.train_step(0, make_batch(corpus, 0, "train", [0]))


class TestRunTraining:
    def test_single_epoch_single_step(self, corpus, model_config):
        result = run_training(corpus, model_config, _config(epochs=1, steps_per_epoch=1))
        log = result.run_log
        assert len(log.epochs) == 1 and len(log.epochs[0].dev_losses) == 2
        assert result.overall_best.epoch == 1
        assert log.overall_best_epoch() == 1

    def test_deterministic(self, corpus, model_config):
        a = run_training(corpus, model_config, _config(mode="lssd_adaptive", epochs=3))
        b = run_training(corpus, model_config, _config(mode="lssd_adaptive", epochs=3))
        assert a.run_log.loss_curves_csv() == b.run_log.loss_curves_csv()
        assert a.run_log.avg_dev_loss_csv() == b.run_log.avg_dev_loss_csv()

    def test_first_epoch_matches_baseline(self, corpus, model_config):
        base = run_training(corpus, model_config, _config(epochs=1))
        lssd = run_training(corpus, model_config, _config(mode="lssd_whole", epochs=1))
        assert base.run_log.epochs[0].dev_losses == lssd.run_log.epochs[0].dev_losses

    def test_checkpoint_invariants(self, corpus, model_config):
        result = run_training(corpus, model_config, _config(mode="lssd_whole", epochs=5, steps_per_epoch=4))
        log = result.run_log
        avgs = [r.avg_dev_loss for r in log.epochs]
        assert result.overall_best.dev_loss == min(avgs)
        at_best = log.dev_matrix()[log.overall_best_epoch() - 1]
        for lang, snap in enumerate(result.language_bests):
            assert snap.dev_loss <= at_best[lang]
            assert snap.epoch == log.best_epoch(lang)

    def test_verbose_steps_record_every_step(self, corpus, model_config):
        trainer = Trainer(corpus, model_config, _config(), verbose_steps=True)
        result = trainer.run()
        assert len(result.run_log.steps) == 2 * 3

    def test_rejects_mismatched_vocab(self, corpus):
        with pytest.raises(ValueError):
            Trainer(corpus, ModelConfig(vocab_size=5, **TINY), _config())

    def test_write_run_dir(self, corpus, model_config, tmp_path):
        result = run_training(corpus, model_config, _config())
        out = write_run_dir(result, tmp_path / "run", "[train]\n")
        names = sorted(p.name for p in (out / "checkpoints").iterdir())
        assert names == ["best_hi.lssd", "best_lo.lssd", "overall_best.lssd"]
        assert (out / "final.lssd").exists()
        back = RunLog.from_run_dir(out)
        assert back.loss_curves_csv() == result.run_log.loss_curves_csv()
        assert back.avg_dev_loss_csv() == result.run_log.avg_dev_loss_csv()


class TestRunLog:
    def _log(self, rows, switches=None):
        log = RunLog(["a", "b"])
        for i, row in enumerate(rows, start=1):
            sw = switches[i - 1] if switches else [False, False]
            log.epochs.append(EpochRecord(i, list(row), sum(row) / 2, sw, [not s for s in sw]))
        return log

    def test_earliest_tie_wins(self):
        log = self._log([[2.0, 2.0], [1.0, 2.0], [2.0, 1.0]])
        assert log.overall_best_epoch() == 2

    def test_k_prime(self):
        log = self._log([[3, 3], [2, 2], [2.5, 1]], switches=[[False, False], [False, False], [True, False]])
        assert log.k_prime(0) == 2
        assert log.k_prime(1) is None

    def test_csv_header(self):
        text = self._log([[1.5, 2.5]]).loss_curves_csv()
        assert text.splitlines()[0] == "epoch,language,dev_loss,switch_after,teacher_replaced"
        assert text.splitlines()[1] == "1,a,1.5,off,1"


class TestConfigValidation:
    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(warmup_steps=0), dict(tau=0.0),
                                     dict(mode="other"), dict(batch_size=0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()

    def test_snapshot_dev_loss_is_recorded(self, model_config):
        assert snapshot(init_model(model_config, 0), 3, 1.25).dev_loss == 1.25
