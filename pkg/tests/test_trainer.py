import math
import re
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapnet.episodes import SynthSpec, synth_generate
from mapnet.errors import ConfigError, TrainingDivergedError
from mapnet.model import COMPONENT_MODES, ForwardOutput
from mapnet.trainer import (
    AdamState,
    EpochLog,
    TrainConfig,
    ablation_run,
    ci95,
    evaluate,
    init_params,
    lambda_sweep,
    optimizer_step,
    train,
)

SMALL = SynthSpec(n_train=8, n_val=5, n_test=5, samples_per_class=12, d_v=6, d_a=5)
TINY = TrainConfig(epochs=2, episodes_per_epoch=3, val_episodes=4, eval_episodes=6,
                   n_way=3, k_shot=1, n_query=6, embed_dim=4, hidden=5, w_hidden=4)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(SMALL, 0)


# optimizer -------------------------------------------------------------------

def test_zero_gradient_is_noop():
    p = {"a": np.array([[1.0, -2.0]])}
    new, state = optimizer_step(p, {"a": np.zeros((1, 2))}, AdamState(), 1e-3)
    assert np.array_equal(new["a"], p["a"]) and state.step == 1


def test_constant_gradient_step_approaches_lr():
    p, state = {"a": np.array([[0.0]])}, AdamState()
    for _ in range(2000):
        prev = p["a"].copy()
        p, state = optimizer_step(p, {"a": np.array([[0.7]])}, state, 1e-3)
    assert abs(prev[0, 0] - p["a"][0, 0]) == pytest.approx(1e-3, rel=1e-6)


def test_adam_scalar_oracle_two_steps():
    lr, x = 0.01, 0.5
    g1, g2 = 0.3, -0.2
    m = v = 0.0
    for t, g in enumerate((g1, g2), start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    p, state = {"x": np.array([[0.5]])}, AdamState()
    for g in (g1, g2):
        p, state = optimizer_step(p, {"x": np.array([[g]])}, state, lr)
    assert abs(p["x"][0, 0] - x) <= 1e-12


def test_nonfinite_gradient_names_param():
    with pytest.raises(TrainingDivergedError) as err:
        optimizer_step({"w.W1": np.ones(2)}, {"w.W1": np.array([1.0, np.nan])}, AdamState(), 1e-3)
    assert "w.W1" in str(err.value)


# config --------------------------------------------------------------------

@pytest.mark.parametrize("field,value", [("alpha", 0.0), ("alpha", 1.0), ("lr", 0.0),
                                         ("lr_decay", 1.5), ("n_query", 7)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError) as err:
        replace(TrainConfig(), **{field: value}).validate()
    assert err.value.key == field


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, lr_decay=0.1, decay_every=8)
    assert [cfg.lr_at(e) for e in (1, 8, 9, 17)] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-5])


def test_log_line_format():
    line = EpochLog(3, 1.23456789, 45.678912, 1e-4).line()
    assert line == "epoch 3 train_loss 1.23457 val_acc 45.6789 lr 0.0001"
    assert re.fullmatch(r"epoch \d+ train_loss \S+ val_acc \S+ lr \S+", line)


# evaluation ------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_ci95_formula(acc):
    n = len(acc)
    mu = sum(acc) / n
    sd = math.sqrt(sum((a - mu) ** 2 for a in acc) / n)
    assert ci95(acc) == pytest.approx(1.96 * sd / math.sqrt(n), abs=1e-12)


def test_oracle_model_scores_100(ds):
    def oracle(ep, params, mode, alpha, mu, with_loss=False):
        probs = np.eye(ep.n_way)[ep.reveal_query_labels()]
        return ForwardOutput(probs, np.full((ep.query_count, 3), 0.5), None)

    rep = evaluate(None, ds, "test", TINY, 20, forward=oracle)
    assert rep.accuracy == 100.0 and rep.ci95 == 0.0


def test_evaluate_deterministic_and_threaded(ds):
    p = init_params(ds, TINY)
    a = evaluate(p, ds, "test", TINY, 12)
    b = evaluate(p, ds, "test", TINY, 12)
    c = evaluate(p, ds, "test", TINY, 12, threads=4)
    assert a.to_dict() == b.to_dict() == c.to_dict()
    assert 0 <= a.accuracy <= 100
    assert 0 < a.lambda_min <= a.lambda_max < 1


def test_evaluate_empty_split():
    ds = synth_generate(replace(SMALL, n_test=0), 0)
    with pytest.raises(ConfigError):
        evaluate(init_params(ds, TINY), ds, "test", TINY, 5)


def test_random_guess_near_chance():
    # features independent of class: any parameters are a random guess
    ds = synth_generate(replace(SMALL, coupling=0.0, perturbation=0.0, n_test=6), 0)
    cfg = replace(TINY, n_way=5, n_query=5)
    rep = evaluate(init_params(ds, cfg), ds, "test", cfg, 400)
    assert abs(rep.accuracy - 20.0) <= 3 * rep.ci95


# training --------------------------------------------------------------------

def test_zero_epochs_returns_init(ds):
    params, log = train(ds, replace(TINY, epochs=0))
    assert log == []
    init = init_params(ds, TINY)
    assert all(np.array_equal(init.named()[k], v) for k, v in params.named().items())


def test_train_is_deterministic(ds):
    p1, l1 = train(ds, TINY)
    p2, l2 = train(ds, TINY)
    assert [e.line() for e in l1] == [e.line() for e in l2]
    assert all(np.array_equal(p1.named()[k], v) for k, v in p2.named().items())


def test_validation_best_selection(ds):
    cfg = replace(TINY, epochs=4)
    params, log = train(ds, cfg)
    best = max(e.val_acc for e in log)
    rep = evaluate(params, ds, "val", cfg, cfg.val_episodes, salt=2)
    assert rep.accuracy == best


def test_ablation_rows_and_lambda_sweep(ds):
    cfg = replace(TINY, epochs=1)
    rows = ablation_run(ds, cfg)
    assert [r.mode for r in rows] == list(COMPONENT_MODES)
    base = rows[0].mode
    assert not (base.vp or base.sp or base.rg)
    assert rows[0].report.lambda_mean_query is None
    sweep = lambda_sweep(ds, cfg, [1])
    assert len(sweep) == 1 and 0 < sweep[0]["lambda_support"] < 1
    with pytest.raises(ConfigError):
        lambda_sweep(ds, cfg, [])
