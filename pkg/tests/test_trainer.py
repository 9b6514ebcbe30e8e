import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FIG2_FACTS, central_difference, graph_from_names
from ssrl.env import BatchWalk
from ssrl.errors import ConfigError
from ssrl.kg import Query
from ssrl.labels import generate_label_cache
from ssrl.policy import Dims, forward_step, init_params, load_checkpoint
from ssrl.trainer import (HEATMAP_COLUMNS, LOG_COLUMNS, SGD, Adam, Baseline, Hyperparams, TrainLog,
                          Trainer, compute_returns, entropy, labelled_items, reinforce_grads,
                          rl_stage, sl_loss, sweep, train, write_heatmap)

TINY = Dims(8, 8, 16)


def test_sl_loss_examples():
    loss, _ = sl_loss(np.array([[0.5, 0.5]]), np.array([[0, 1]]), np.ones((1, 2), bool))
    assert loss[0] == pytest.approx(-math.log(0.5), abs=1e-12)
    loss, _ = sl_loss(np.array([[0.0, 1.0]]), np.array([[0, 1]]), np.ones((1, 2), bool))
    assert 0 <= loss[0] <= 2e-8


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=1, max_size=6), st.integers(0, 2**16))
def test_sl_loss_nonnegative(logits, seed):
    from ssrl.policy import masked_log_softmax
    x = np.array([logits])
    valid = np.ones_like(x, bool)
    _, p = masked_log_softmax(x, valid)
    y = np.random.default_rng(seed).integers(0, 2, size=x.shape)
    loss, _ = sl_loss(p, y, valid)
    assert loss[0] >= 0


def _fd_logits(f, x):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        g[idx] = central_difference(f, x, idx, 1e-6)
    return g


def test_sl_loss_and_entropy_logit_gradients():
    from ssrl.policy import masked_log_softmax
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    valid = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 1, 1, 0]], bool)
    y = rng.integers(0, 2, size=(3, 5)) * valid

    def sl():
        return float(sl_loss(masked_log_softmax(x, valid)[1], y, valid)[0].sum())

    def ent():
        lp, p = masked_log_softmax(x, valid)
        return float(entropy(lp, p, valid)[0].sum())

    lp, p = masked_log_softmax(x, valid)
    np.testing.assert_allclose(sl_loss(p, y, valid)[1], np.where(valid, _fd_logits(sl, x), 0), atol=1e-7)
    np.testing.assert_allclose(entropy(lp, p, valid)[1], np.where(valid, _fd_logits(ent, x), 0), atol=1e-7)


def test_reinforce_logit_gradient():
    from ssrl.policy import masked_log_softmax
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    valid = np.ones_like(x, bool)
    choices = np.array([0, 2, 1, 2])
    adv = rng.normal(size=4)

    def obj():
        lp, p = masked_log_softmax(x, valid)
        return float(reinforce_grads(p, lp, valid, choices, adv, 0.3)[0].sum())

    lp, p = masked_log_softmax(x, valid)
    np.testing.assert_allclose(reinforce_grads(p, lp, valid, choices, adv, 0.3)[1], _fd_logits(obj, x),
                               atol=1e-7)
    # zero advantage leaves only the entropy gradient
    np.testing.assert_array_equal(reinforce_grads(p, lp, valid, choices, np.zeros(4), 0.3)[1],
                                  0.3 * entropy(lp, p, valid)[1])


def test_compute_returns_examples():
    assert compute_returns([0, 0, 1], 0.9).tolist() == [0.81, 0.9, 1.0]
    assert compute_returns([0.5, 0, 2], 0.0).tolist() == [0.5, 0, 2]
    assert compute_returns([0, 0, 1], 1.0).tolist() == [1, 1, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=10), st.floats(0, 1))
def test_returns_telescoping(rewards, gamma):
    g = compute_returns(rewards, gamma)
    for t in range(len(rewards) - 1):
        assert g[t] == pytest.approx(rewards[t] + gamma * g[t + 1], abs=1e-9)
    assert g[-1] == rewards[-1]


def test_baseline():
    b = Baseline(1.0, 0.3)
    b.update(5.0)
    assert b.value == 0.3
    b = Baseline(0.5)
    b.update(1.0)
    assert b.value == 0.5


def test_hyperparam_validation():
    for bad in ({"gamma": 1.5}, {"rl_lambda": -0.1}, {"rl_beta": -1}, {"optimizer": "rmsprop"},
                {"batch_size": 0}, {"sl_epochs": -1}):
        with pytest.raises(ConfigError):
            Hyperparams(**bad).validate()


def bandit():
    g = graph_from_names([("s", "r", "t"), ("s", "rq", "t"), ("u", "r", "v")])
    q = Query(g.vocab.entity_id("s"), g.vocab.relation_id("rq"), g.vocab.entity_id("t"))
    return g, q


def test_bandit_converges():
    g, q = bandit()
    assert len(g.query_view(q).action_space(q.source)) == 2
    hp = Hyperparams(horizon=1, rl_batches=500, batch_size=1, rollouts=20, dims=TINY, rl_beta=0.0,
                     seed=3)
    trainer = Trainer(g, hp)
    params = init_params(TINY, g.n_entities, g.n_relations, hp.seed)
    log = TrainLog()
    rl_stage(trainer, params, np.array([q]), log)
    walk = BatchWalk(g, np.array([q]), [g.query_view(q)], 1)
    act_rel, act_ent, valid = walk.action_arrays()
    h = np.zeros((1, 8), np.float32)
    st_ = forward_step(params, h, h, walk.prev_rel, walk.current, walk.queries[:, 1], act_rel, act_ent, valid)
    slot = int(np.flatnonzero(act_ent[0] == q.target)[0])
    assert st_.probs[0, slot] > 0.99


def test_sgd_step_decreases_sl_loss():
    g, q = bandit()
    cache, _ = generate_label_cache(g, np.array([q]), 1)
    hp = Hyperparams(horizon=1, batch_size=1, rollouts=4, dims=TINY, sl_beta=0.0, optimizer="sgd",
                     learning_rate=1e-3)
    trainer = Trainer(g, hp)
    params = init_params(TINY, g.n_entities, g.n_relations, 0, np.float64)
    prepared = trainer.prepare([(0, q)], cache)
    before = trainer.sl_chunk(params, prepared, 0, 4).sl_loss_sum
    stats = trainer.sl_batch(params, prepared, 0, SGD(1e-3))
    after = trainer.sl_chunk(params, prepared, 0, 4).sl_loss_sum
    assert stats["sl_loss"] == pytest.approx(before / 4)
    assert after < before


def _frozen_objective(trainer, params, chunk, choices, adv, beta):
    walk = trainer._rows(chunk)
    h = np.zeros((len(walk), params.dims.hidden_dim))
    c = np.zeros_like(h)
    total = 0.0
    for t in range(trainer.hyper.horizon):
        act_rel, act_ent, valid = walk.action_arrays()
        s = forward_step(params, h, c, walk.prev_rel, walk.current, walk.queries[:, 1], act_rel, act_ent, valid)
        total += float(reinforce_grads(s.probs, s.log_probs, valid, choices[:, t], adv[:, t], beta)[0].sum())
        walk.advance(act_rel, act_ent, choices[:, t])
        h, c = s.h, s.c
    return total


def test_rl_gradient_is_an_ascent_direction():
    g = graph_from_names(FIG2_FACTS)
    v = g.vocab
    queries = [Query(v.entity_id("e2"), v.relation_id("r1"), v.entity_id("e5")),
               Query(v.entity_id("e1"), v.relation_id("r4"), v.entity_id("e5"))]
    hp = Hyperparams(rollouts=5, dims=TINY, rl_beta=0.1, seed=2)
    trainer = Trainer(g, hp)
    params = init_params(TINY, g.n_entities, g.n_relations, 0, np.float64)
    trainer.trace = []
    chunk = trainer.prepare(list(enumerate(queries)))
    res = trainer.rl_chunk(params, chunk, 0, 10, baseline=0.2)
    rec = trainer.trace[0]
    adv = compute_returns(rec["rewards"], hp.gamma) - 0.2
    grads = res.grads          # gradient of -objective / 10

    def shifted(eps):
        p = params.copy()
        for name, t in p.tensors().items():
            t -= eps * grads[name]
        return _frozen_objective(trainer, p, chunk, rec["choices"], adv, hp.rl_beta)

    eps = 1e-5
    directional = (shifted(eps) - shifted(-eps)) / (2 * eps)
    sq = sum(float((x ** 2).sum()) for x in grads.values())
    assert directional > 0
    assert directional == pytest.approx(10 * sq, rel=1e-4)


def test_zero_reward_zero_baseline_only_entropy():
    g = graph_from_names([("s", "r", "t"), ("s", "rq", "t"), ("x", "p", "y")])
    q = Query(g.vocab.entity_id("s"), g.vocab.relation_id("rq"), g.vocab.entity_id("x"))
    params = init_params(TINY, g.n_entities, g.n_relations, 0, np.float64)
    for beta, expect_zero in ((0.0, True), (0.1, False)):
        trainer = Trainer(g, Hyperparams(rollouts=3, dims=TINY, rl_beta=beta))
        res = trainer.rl_chunk(params, trainer.prepare([(0, q)]), 0, 3, baseline=0.0)
        assert res.reward_sum == 0
        assert all(not x.any() for x in res.grads.values()) == expect_zero


def test_sl_rollouts_only_traverse_labelled_edges():
    g = graph_from_names(FIG2_FACTS)
    v = g.vocab
    q = Query(v.entity_id("e2"), v.relation_id("r1"), v.entity_id("e5"))
    cache, _ = generate_label_cache(g, np.array([q]), 3)
    hp = Hyperparams(rollouts=50, dims=TINY, sl_max_resamples=2)
    trainer = Trainer(g, hp)
    trainer.trace = []
    params = init_params(TINY, g.n_entities, g.n_relations, 0)
    trainer.sl_chunk(params, trainer.prepare([(0, q)], cache), 0, 50)
    for rec in trainer.trace:
        rows = np.arange(len(rec["choice"]))
        assert np.all(rec["labels"][rows, rec["choice"]][rec["move"]])
        assert np.all(rec["move"] == rec["active"])


def test_adam_matches_reference_formula():
    params = init_params(TINY, 3, 3, 0, np.float64)
    ref = params.copy()
    opt = Adam(0.01)
    g = {n: np.full_like(t, 0.5) for n, t in params.tensors().items()}
    opt.step(params, g)
    # first Adam step moves each weight by lr * sign(g) (up to eps)
    for n, t in params.tensors().items():
        np.testing.assert_allclose(getattr(ref, n) - t, 0.01, rtol=1e-6)


def synthetic_setup():
    from ssrl.synthetic import make_synthetic
    kg = make_synthetic("composition", 40, 1)
    g = graph_from_names(kg.graph_facts)
    tr = np.array([[g.vocab.entity_id(h), g.vocab.relation_id(r), g.vocab.entity_id(t)]
                   for h, r, t in kg.train_queries])
    te = np.array([[g.vocab.entity_id(h), g.vocab.relation_id(r), g.vocab.entity_id(t)]
                   for h, r, t in kg.test_queries])
    cache, _ = generate_label_cache(g, tr, 3)
    return g, tr, te, cache


def test_train_determinism_threads_and_schedule(tmp_path):
    g, tr, te, cache = synthetic_setup()
    base = dict(sl_epochs=2, rl_batches=3, batch_size=8, rollouts=4, dims=TINY, chunk_queries=2,
                eval_interval=2, beam=5)
    a = train(g, tr, Hyperparams(**base, threads=1), cache, te, checkpoint_dir=tmp_path)
    b = train(g, tr, Hyperparams(**base, threads=1), cache, te)
    c = train(g, tr, Hyperparams(**base, threads=4), cache, te)
    assert a.log.rows == b.log.rows == c.log.rows
    for n, t in a.params.tensors().items():
        assert t.tobytes() == getattr(c.params, n).tobytes()
    stages = [r["stage"] for r in a.log.rows]
    assert stages == sorted(stages, key=lambda s: s != "sl")
    assert [r["batch"] for r in a.log.rows] == list(range(len(a.log.rows)))
    rl = [r for r in a.log.rows if r["stage"] == "rl"]
    assert rl[1]["hits1"] is not None and rl[0]["hits1"] is None
    assert (tmp_path / "sl.ckpt").exists() and (tmp_path / "final.ckpt").exists()


def test_sl_checkpoint_resumes_identically(tmp_path):
    g, tr, te, cache = synthetic_setup()
    hp = Hyperparams(sl_epochs=1, rl_batches=2, batch_size=8, rollouts=4, dims=TINY)
    full = train(g, tr, hp, cache, checkpoint_dir=tmp_path)
    params, meta = load_checkpoint(tmp_path / "sl.ckpt")
    assert meta["stage"] == "sl"
    log = TrainLog()
    rl_stage(Trainer(g, hp), params, tr, log, batch_offset=len(full.log) - 2)
    for n, t in full.params.tensors().items():
        assert t.tobytes() == getattr(params, n).tobytes()


def test_pure_rl_writes_boundary_checkpoint(tmp_path):
    g, tr, te, cache = synthetic_setup()
    res = train(g, tr, Hyperparams(rl_batches=1, batch_size=4, rollouts=2, dims=TINY),
                checkpoint_dir=tmp_path)
    assert (tmp_path / "sl.ckpt").exists()
    assert [r["stage"] for r in res.log.rows] == ["rl"]
    with pytest.raises(ConfigError):
        train(g, tr, Hyperparams(sl_epochs=1, dims=TINY), {})


def test_sl_max_steps_caps_updates():
    g, tr, te, cache = synthetic_setup()
    res = train(g, tr, Hyperparams(sl_epochs=5, sl_max_steps=3, rl_batches=1, batch_size=4,
                                   rollouts=2, dims=TINY), cache)
    assert sum(r["stage"] == "sl" for r in res.log.rows) == 3


def test_consume_step_mode_runs():
    g, tr, te, cache = synthetic_setup()
    res = train(g, tr, Hyperparams(sl_epochs=1, sl_consume_step=True, rl_batches=1, batch_size=8,
                                   rollouts=2, dims=TINY), cache)
    assert res.params.is_finite()


def test_trainlog(tmp_path):
    log = TrainLog()
    log.append({"stage": "sl", "batch": 0, "mean_reward": 0.5, "sl_loss": 1.0})
    with pytest.raises(ValueError):
        log.append({"stage": "rl", "batch": 0})
    log.append({"stage": "rl", "batch": 1, "mean_reward": 0.25})
    p = tmp_path / "log.csv"
    log.write_csv(p)
    rows = list(csv.reader(p.open()))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert all(len(r) == len(LOG_COLUMNS) for r in rows)
    assert len(rows) == 3


def test_sweep_zero_row_and_schema(tmp_path):
    g, tr, te, cache = synthetic_setup()
    hp = Hyperparams(rl_batches=2, batch_size=8, rollouts=2, dims=TINY, beam=5)
    rows = sweep(g, tr, te, hp, [0, 1], cache)
    assert all(r["delta_vs_epoch0"] == 0 for r in rows if r["sl_epochs"] == 0)
    p = tmp_path / "heat.csv"
    write_heatmap(rows, p)
    data = list(csv.reader(p.open()))
    assert tuple(data[0]) == HEATMAP_COLUMNS
    assert len(data) == 1 + 2 * 6
    with pytest.raises(ConfigError):
        sweep(g, tr, te, hp, [1, 2], cache)


def test_labelled_items_keeps_query_indices():
    g, tr, te, cache = synthetic_setup()
    items = labelled_items(tr, cache)
    assert [i for i, _ in items] == list(range(len(tr)))
