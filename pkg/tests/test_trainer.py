import dataclasses
import io
import math
import os
import time

import numpy as np
import pytest

from actbench import tensor
from actbench import trainer
from actbench.trainer import AdamWHyper, AdamWState, ConfigError, LrSchedule, RunLog, RunRow, ScheduleVariant
from tests.utils import get_input, get_output, read_csv


SCHEDULE = LrSchedule(max_lr=1.0, min_lr=0.0, warmup_steps=10, constant_steps=10, cooldown_steps=20)


def test_lr_schedule_values():
    assert [trainer.lr_at(SCHEDULE, step) for step in (0, 5, 10, 19, 20, 25, 40, 1000)] == \
        [0.0, 0.5, 1.0, 1.0, 1.0, 0.5, 0.0, 0.0]
    floor = LrSchedule(max_lr=1.0, min_lr=0.1, warmup_steps=0, constant_steps=0, cooldown_steps=4)
    assert trainer.lr_at(floor, 0) == 1.0
    assert trainer.lr_at(floor, 4) == pytest.approx(0.1)
    cosine = LrSchedule(ScheduleVariant.Cosine, max_lr=1.0, min_lr=0.0, warmup_steps=0, constant_steps=0,
                        cooldown_steps=10)
    assert trainer.lr_at(cosine, 5) == pytest.approx(0.5)
    assert trainer.lr_at(cosine, 10) == pytest.approx(0.0, abs=1e-15)
    no_cooldown = LrSchedule(warmup_steps=2, constant_steps=2, cooldown_steps=0)
    assert trainer.lr_at(no_cooldown, 100) == no_cooldown.max_lr


def test_lr_schedule_shape():
    for variant in ScheduleVariant:
        schedule = LrSchedule(variant, max_lr=2e-3, min_lr=2e-4, warmup_steps=100, constant_steps=1500,
                              cooldown_steps=400)
        lrs = np.array([trainer.lr_at(schedule, step) for step in range(schedule.total_steps + 10)])
        assert np.all(np.diff(lrs[:100]) > 0)
        assert np.all(np.diff(lrs[100:]) <= 0)
        if variant is ScheduleVariant.Cosine:
            assert np.max(np.abs(np.diff(lrs))) <= 2e-3 / 100 + 1e-12
        assert lrs[-1] == pytest.approx(2e-4)


def test_lr_schedule_errors():
    with pytest.raises(ValueError):
        trainer.lr_at(SCHEDULE, -1)
    with pytest.raises(ValueError):
        LrSchedule(warmup_steps=-1)
    with pytest.raises(ValueError):
        LrSchedule(max_lr=1e-4, min_lr=1e-3)
    with pytest.raises(ValueError):
        ScheduleVariant.from_name("linear")


def _params():
    return {"w": np.ones((2, 2)), "act_raw": np.ones(2)}


def test_adamw_first_step():
    params = _params()
    grads = {"w": np.full((2, 2), 0.1), "act_raw": np.full(2, -0.1)}
    trainer.adamw_step(params, grads, AdamWState.zeros(params), 1e-3, AdamWHyper())
    # Bias-corrected first step moves by lr in the direction of -sign(g), plus decay on matrices only
    assert np.allclose(params["w"], 1.0 - 1e-3 * (1.0 + 0.1), rtol=0, atol=1e-9)
    assert np.allclose(params["act_raw"], 1.0 + 1e-3, rtol=0, atol=1e-9)


def test_adamw_zero_gradient():
    params = _params()
    zeros = {name: np.zeros_like(value) for name, value in params.items()}
    state = AdamWState.zeros(params)
    trainer.adamw_step(params, zeros, state, 1e-2, AdamWHyper(weight_decay=0.0))
    assert np.all(params["w"] == 1.0) and np.all(params["act_raw"] == 1.0)
    assert state.step == 1
    trainer.adamw_step(params, zeros, state, 1e-2, AdamWHyper())
    assert np.allclose(params["w"], 1.0 - 1e-2 * 0.1)
    assert np.all(params["act_raw"] == 1.0)


def test_gradient_clipping():
    clipped, norm = trainer.clip_gradients({"w": np.array([2.0, 0.0])}, 1.0)
    assert clipped["w"].tolist() == [1.0, 0.0]
    assert norm == 2.0
    same, norm = trainer.clip_gradients({"w": np.array([0.3, 0.4])}, 1.0)
    assert same["w"].tolist() == [0.3, 0.4] and norm == pytest.approx(0.5)
    assert trainer.global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0
    assert not trainer.decays(np.zeros(4)) and trainer.decays(np.zeros((2, 2)))


def test_adamw_refuses_non_finite_gradients():
    params = _params()
    state = AdamWState.zeros(params)
    grads = {"w": np.full((2, 2), np.nan), "act_raw": np.zeros(2)}
    with pytest.raises(trainer.NonFiniteGradientError, match="w"):
        trainer.adamw_step(params, grads, state, 1e-3, AdamWHyper())
    assert state.step == 0
    assert np.all(params["w"] == 1.0)
    with pytest.raises(ValueError):
        trainer.adamw_step(params, {"w": np.zeros((2, 2))}, state, 1e-3, AdamWHyper())


def test_load_config():
    config = trainer.load_config(get_input("tiny.cfg")[0])
    assert (config.seed, config.steps, config.d_model, config.activation) == (3, 20, 8, "xielu")
    assert config.max_lr == 2e-3
    assert trainer.load_config(get_input("tiny.yaml")[0]) == config
    assert trainer.parse_config(trainer.dump_config(config)) == config


def test_config_errors():
    with pytest.raises(ConfigError, match="Missing keys: seed, activation; unknown keys: colour"):
        trainer.load_config(get_input("missing.cfg")[0])
    with pytest.raises(ConfigError, match="Line 2"):
        trainer.parse_config("seed=1\nsteps\n")
    with pytest.raises(ConfigError, match="Invalid value for `seed`"):
        trainer.parse_config("seed=x\nsteps=1\nactivation=xielu")
    with pytest.raises(ConfigError):
        trainer.parse_config("seed=1\nsteps=1\nactivation=tanh")
    with pytest.raises(ConfigError):
        trainer.parse_config("seed=1\nsteps=1\nactivation=xielu\nalpha_n_init=0.4")
    with pytest.raises(ConfigError):
        trainer.parse_config("seed=1\nsteps=1\nactivation=xielu\nvocab=word")
    with pytest.raises(ConfigError, match="beta can only be trained"):
        trainer.parse_config("seed=1\nsteps=1\nactivation=relu2\ntrainable_beta=true")
    with pytest.raises(ConfigError, match="beta_n cannot be set"):
        trainer.parse_config("seed=1\nsteps=1\nactivation=xielu\ntrainable_beta=true\nbeta_n=0.2")
    os.makedirs(get_output(""), exist_ok=True)
    with open(get_output("list.yaml"), "w") as f:
        f.write("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        trainer.load_config(get_output("list.yaml"))


def test_corpus():
    corpus = trainer.Corpus.from_text("abba")
    assert corpus.tokens.tolist() == [0, 1, 1, 0]
    assert corpus.decode(corpus.tokens) == "abba"
    raw = trainer.Corpus.from_text("é", vocab="byte")
    assert raw.tokens.tolist() == [195, 169]
    assert raw.vocab_size == 256
    assert raw.decode(raw.tokens) == "é"
    bundled = trainer.load_corpus()
    assert bundled.vocab_size == 62
    assert len(bundled.tokens) == 36184


def test_sample_batch():
    tokens = np.arange(20)
    windows, targets = trainer.sample_batch(tokens, np.random.default_rng(0), 4, 3)
    assert windows.shape == (4, 3)
    assert np.all(np.diff(windows, axis=1) == 1)
    assert targets.tolist() == (windows[:, -1] + 1).tolist()
    with pytest.raises(ValueError, match="smaller than one batch"):
        trainer.sample_batch(np.arange(5), np.random.default_rng(0), 4, 3)


def test_prefetch_keeps_the_order():
    tokens = np.arange(100)
    ahead = list(trainer.batches(tokens, np.random.default_rng(5), 4, 3, 10, prefetch=True))
    inline = list(trainer.batches(tokens, np.random.default_rng(5), 4, 3, 10, prefetch=False))
    assert len(ahead) == 10
    for (w1, t1), (w2, t2) in zip(ahead, inline):
        assert np.array_equal(w1, w2) and np.array_equal(t1, t2)


def test_run_log():
    log = RunLog(n_layers=2)
    log.record(RunRow(0, 0.0, 4.1, (0.8, 0.8), (0.8, 0.8)))
    log.record(RunRow(5, 1e-3, 3.9, (0.81, 0.79), (0.8, 0.82)))
    with pytest.raises(ValueError):
        log.record(RunRow(5, 1e-3, 3.8, (0.8, 0.8), (0.8, 0.8)))
    with pytest.raises(ValueError):
        log.record(RunRow(6, 1e-3, 3.8, (0.8,), (0.8,)))
    handle = io.StringIO()
    log.write_csv(handle)
    assert handle.getvalue().splitlines()[0] == "step,lr,loss,alpha_p_0,alpha_p_1,alpha_n_0,alpha_n_1"
    again = RunLog.read_csv(io.StringIO(handle.getvalue()))
    assert again.rows == log.rows
    with pytest.raises(ValueError):
        RunLog.read_csv(io.StringIO("x,f,dfdx\n"))


def test_run_log_with_trained_beta():
    log = RunLog(n_layers=1, trainable_beta=True)
    log.record(RunRow(0, 0.0, 4.1, (0.8,), (0.8,), (0.5,)))
    with pytest.raises(ValueError):
        log.record(RunRow(1, 0.0, 4.0, (0.8,), (0.8,)))
    handle = io.StringIO()
    log.write_csv(handle)
    assert handle.getvalue().splitlines()[0] == "step,lr,loss,alpha_p_0,alpha_n_0,beta_0"
    again = RunLog.read_csv(io.StringIO(handle.getvalue()))
    assert again.trainable_beta
    assert again.rows == log.rows


def test_train_tiny():
    config = trainer.load_config(get_input("tiny.cfg")[0])
    log = trainer.train(config, out_dir=get_output("run"), progress=False)
    assert [row.step for row in log.rows] == [0, 5, 10, 15, 19]
    assert len(log.losses) == 20 and all(math.isfinite(loss) for loss in log.losses)
    assert log.rows[0].lr == 0.0
    assert log.rows[0].loss == pytest.approx(math.log(62), abs=0.2)
    assert log.rows[0].alpha_p == pytest.approx((0.8, 0.8), abs=1e-12)

    rows = read_csv(get_output("run/runlog.csv"))
    assert rows[0] == ["step", "lr", "loss", "alpha_p_0", "alpha_p_1", "alpha_n_0", "alpha_n_1"]
    assert len(rows) == 6
    assert trainer.load_config(get_output("run/config.cfg")) == config
    model = tensor.load_checkpoint(get_output("run/checkpoint.txt"))
    assert model.config.vocab_size == 62
    assert model.alphas()[0].alpha_p != pytest.approx(0.8, abs=1e-9)


def test_train_with_trained_beta():
    config = dataclasses.replace(trainer.load_config(get_input("tiny.cfg")[0]), trainable_beta=True)
    log = trainer.train(config, out_dir=get_output("beta-run"), progress=False)
    assert log.trainable_beta
    assert log.rows[0].beta == (0.5, 0.5)
    assert log.rows[-1].beta != pytest.approx((0.5, 0.5), abs=1e-9)
    assert read_csv(get_output("beta-run/runlog.csv"))[0][-2:] == ["beta_0", "beta_1"]
    assert trainer.load_config(get_output("beta-run/config.cfg")).trainable_beta


def test_train_is_deterministic():
    config = trainer.load_config(get_input("tiny.cfg")[0])
    first = trainer.train(config, progress=False)
    second = trainer.train(config, progress=False)
    assert first.rows == second.rows
    assert first.losses == second.losses


@pytest.mark.parametrize("activation", ["xiprelu", "relu2", "swiglu", "silu", "xsilu", "gelu_tanh"])
def test_train_other_kinds(activation):
    config = trainer.config_from_mapping({
        "seed": 1, "steps": 10, "activation": activation, "batch_size": 8, "context_length": 4, "d_model": 8,
        "n_layers": 1, "warmup_steps": 2, "constant_steps": 6, "cooldown_steps": 2, "prefetch": False
    })
    log = trainer.train(config, progress=False)
    assert all(math.isfinite(loss) for loss in log.losses)
    expected = 1 if activation in ("xiprelu", "xsilu") else 0
    assert log.n_layers == expected


def test_train_rejects_small_corpus():
    config = trainer.config_from_mapping({"seed": 0, "steps": 2, "activation": "xielu", "batch_size": 64,
                                          "context_length": 8, "d_model": 4, "n_layers": 1})
    with pytest.raises(ValueError, match="smaller than one batch"):
        trainer.train(config, corpus=trainer.Corpus.from_text("a short text"), progress=False)


DESK_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "desk.cfg")
# Final smoothed loss over ln(62) of a pilot run of configs/desk.cfg, plus 0.03 of slack
DESK_LOSS_RATIO = {"xielu": 0.46, "xiprelu": 0.45, "relu2": 0.41, "swiglu": 0.39, "silu": 0.49}


@pytest.mark.slow
@pytest.mark.parametrize("activation", sorted(DESK_LOSS_RATIO))
def test_desk_run(activation):
    """ The desk configuration learns in under a minute and moves the activation parameters """
    config = dataclasses.replace(trainer.load_config(DESK_CONFIG), activation=activation)
    start = time.perf_counter()
    log = trainer.train(config, progress=False)
    assert time.perf_counter() - start < 60
    assert len(log.losses) == 2000 and all(math.isfinite(loss) for loss in log.losses)
    assert log.smoothed_loss()[-1] < DESK_LOSS_RATIO[activation] * math.log(62)
    if log.n_layers:
        final = log.rows[-1]
        assert max(abs(a - 0.8) for a in final.alpha_p + final.alpha_n) > 0.1
