import math

import numpy as np
import pytest

from multipath.hparams import Hyperparams
from multipath.multipath import new_model
from multipath.store import FrozenModuleError
from multipath.trainer import (accuracy, eval_points, evaluate, evaluate_path, lr_schedule, sgd_apply,
                               train_and_score)


def test_lr_schedule_warmup_and_cosine():
    total, peak = 100, 0.1
    assert lr_schedule(0, total, peak, 0.1) == 0.0
    assert lr_schedule(5, total, peak, 0.1) == pytest.approx(0.05)
    assert lr_schedule(10, total, peak, 0.1) == pytest.approx(peak)
    assert lr_schedule(55, total, peak, 0.1) == pytest.approx(peak * 0.5 * (1 + math.cos(math.pi * 0.5)))
    assert lr_schedule(0, total, peak, 0.0) == peak
    lrs = [lr_schedule(s, total, peak, 0.1) for s in range(10, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(0, total, peak, 0.15)
    with pytest.raises(ValueError):
        lr_schedule(total, total, peak, 0.1)


def test_sgd_nesterov_hand_computed():
    p, g = {"a": np.array([1.0])}, {"a": np.array([0.5])}
    vel = {}
    p1 = sgd_apply(p, g, vel, 0.1, 0.9, True)
    # v = 0.5; step = 0.9 * 0.5 + 0.5
    assert p1["a"][0] == pytest.approx(1.0 - 0.1 * 0.95)
    p2 = sgd_apply(p1, g, vel, 0.1, 0.9, True)
    v2 = 0.9 * 0.5 + 0.5
    assert p2["a"][0] == pytest.approx(p1["a"][0] - 0.1 * (0.9 * v2 + 0.5))
    q = sgd_apply(p, g, {}, 0.1, 0.9, False)
    assert q["a"][0] == pytest.approx(1.0 - 0.05)
    assert p["a"][0] == 1.0


def test_sgd_refuses_frozen_parameters():
    with pytest.raises(FrozenModuleError):
        sgd_apply({"a": np.zeros(1)}, {"a": np.zeros(1)}, {}, 0.1, 0.9, True, frozen={"a"})


def test_accuracy_tie_break_lowest_index():
    logits = np.zeros((6, 3))
    assert accuracy(logits, np.array([0, 0, 0, 1, 2, 2])) == pytest.approx(0.5)
    assert accuracy(np.eye(3) * 5, np.arange(3)) == 1.0


def test_eval_points():
    assert eval_points(2000) == [500, 1000, 1500, 2000]
    assert eval_points(0) == [0, 0, 0, 0]


def _model(store, **hp):
    return new_model(store, "m", "tgt", "tgt.path", ["aux.path"], Hyperparams(**hp))


def test_zero_budget_scores_main_path(tiny_store, tiny_cache):
    m = _model(tiny_store)
    rec = train_and_score(m, tiny_cache, seed=0, steps=0)
    assert rec.val_accuracies == [evaluate_path(tiny_cache, "tgt.path", "validation")] * 4
    assert m.score == rec.score


def test_evaluate_rejects_train_split(tiny_store, tiny_cache):
    with pytest.raises(ValueError):
        evaluate(_model(tiny_store), tiny_cache, "train")


def test_nothing_trains_when_rates_are_zero(tiny_store, tiny_cache):
    m = _model(tiny_store)
    before = {k: v.copy() for k, v in m.params().items()}
    rec = train_and_score(m, tiny_cache, seed=0, steps=40, connector_lr_scale=0.0, lr_multiplier=0.0)
    for k, v in before.items():
        assert np.array_equal(m.params()[k], v)
    assert rec.val_accuracies == [evaluate_path(tiny_cache, "tgt.path", "validation")] * 4


def test_training_is_reproducible_and_leaves_paths_alone(tiny_store, tiny_cache):
    frozen = {mid: {k: v.copy() for k, v in m.params.items()} for mid, m in tiny_store.modules.items()}
    a, b = _model(tiny_store), _model(tiny_store)
    ra = train_and_score(a, tiny_cache, seed=3, steps=120)
    rb = train_and_score(b, tiny_cache, seed=3, steps=120)
    assert ra.val_accuracies == rb.val_accuracies and ra.log == rb.log
    for k, v in a.params().items():
        assert np.array_equal(v, b.params()[k])
    assert ra.score == max(ra.val_accuracies) and len(ra.val_accuracies) == 4
    for mid, params in frozen.items():
        for k, v in params.items():
            assert np.array_equal(tiny_store.modules[mid].params[k], v)
    assert not np.array_equal(a.connectors[0]["w"], 0)


def test_best_checkpoint_is_restored(tiny_store, tiny_cache):
    m = _model(tiny_store)
    rec = train_and_score(m, tiny_cache, seed=1, steps=80)
    assert evaluate(m, tiny_cache, "validation") == rec.val_accuracies[rec.best_index]


def test_divergence_scores_zero(tiny_store, tiny_cache, caplog):
    m = _model(tiny_store)
    m.connectors[0]["w"][:] = 1e308
    rec = train_and_score(m, tiny_cache, seed=0, steps=20)
    assert rec.diverged and rec.score == 0.0 and m.score == 0.0
    assert "diverged" in caplog.text


def test_sum_mode_trains_no_router(tiny_store, tiny_cache):
    m = new_model(tiny_store, "m", "tgt", "tgt.path", ["aux.path"], Hyperparams(), mode="sum")
    train_and_score(m, tiny_cache, seed=0, steps=30)
    assert not any(k.startswith("router") for k in m.params())


def test_optimizer_state_holds_only_model_parameters(tiny_store, tiny_cache):
    m = _model(tiny_store)
    rec = train_and_score(m, tiny_cache, seed=0, steps=5)
    assert rec.optimizer_state_keys == sorted(m.params())
    assert all(k.startswith(("connector", "router")) for k in rec.optimizer_state_keys)
