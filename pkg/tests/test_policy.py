import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, random_graph
from ssrl.env import BatchWalk
from ssrl.errors import (CheckpointMagicError, CheckpointShapeError, CheckpointVersionError,
                         ConfigError, ContractViolation)
from ssrl.kg import NO_OP, Query
from ssrl.policy import (Dims, backward, expected_shapes, forward_step, init_params, load_checkpoint,
                         lstm_step, masked_log_softmax, save_checkpoint, score_actions, xavier_bound,
                         zero_state)


def small(seed=0, dtype=np.float64, n_ent=10, n_rel=7, dims=Dims(8, 8, 16)):
    return init_params(dims, n_ent, n_rel, seed, dtype)


def test_init_is_deterministic_and_bounded():
    a, b = small(3, np.float32), small(3, np.float32)
    for name, t in a.tensors().items():
        assert t.tobytes() == getattr(b, name).tobytes()
        assert t.dtype == np.float32
        if t.ndim == 2:
            assert np.abs(t).max() <= xavier_bound(*t.shape)
    H = a.dims.hidden_dim
    assert np.all(a.lstm_bias[H:2 * H] == 1.0)
    assert np.all(a.lstm_bias[:H] == 0) and np.all(a.lstm_bias[2 * H:] == 0)
    assert np.all(a.b1 == 0) and np.all(a.b2 == 0)


def test_parameter_count_closed_form():
    d, H, F, n_e, n_r = 8, 8, 16, 10, 7
    p = small(dims=Dims(d, H, F), n_ent=n_e, n_rel=n_r)
    expected = n_e * d + n_r * d + 2 * d * 4 * H + H * 4 * H + 4 * H + (H + d) * F + F + F * 2 * d + 2 * d
    assert p.count() == expected == 80 + 56 + 512 + 256 + 32 + 256 + 16 + 256 + 16


def test_zero_dimension_rejected():
    with pytest.raises(ConfigError):
        init_params(Dims(0, 8, 8), 3, 3, 0)


def test_zero_weights_give_zero_hidden():
    p = small()
    for t in p.tensors().values():
        t[...] = 0
    h = lstm_step(p, zero_state(p), NO_OP, 1)
    assert np.all(h.hidden == 0)


def test_identical_embeddings_identical_outputs():
    p = small()
    p.entity_embeddings[2] = p.entity_embeddings[3]
    a = lstm_step(p, zero_state(p), 1, 2)
    b = lstm_step(p, zero_state(p), 1, 3)
    assert np.array_equal(a.hidden, b.hidden) and np.array_equal(a.cell, b.cell)


def test_softmax_closed_forms():
    _, p = masked_log_softmax(np.array([[0.0, math.log(3)]]), np.ones((1, 2), bool))
    assert p[0].tolist() == pytest.approx([0.25, 0.75], abs=1e-12)
    _, p = masked_log_softmax(np.full((1, 4), 2.5), np.ones((1, 4), bool))
    assert p[0].tolist() == pytest.approx([0.25] * 4, abs=1e-12)
    lp, p = masked_log_softmax(np.array([[1e4, -1e4, 0.0]]), np.array([[True, True, False]]))
    assert np.all(np.isfinite(lp[0, :2])) and p[0, 2] == 0 and p[0].sum() == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_property(logits):
    x = np.array([logits])
    _, p = masked_log_softmax(x, np.ones_like(x, bool))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-6


def test_score_actions_empty_and_permutation():
    p = small()
    h = lstm_step(p, zero_state(p), NO_OP, 0)
    with pytest.raises(ContractViolation):
        score_actions(p, h, 1, [])
    acts = [(0, 0), (1, 2), (2, 5), (3, 1)]
    base = score_actions(p, h, 1, acts).probabilities
    perm = [2, 0, 3, 1]
    got = score_actions(p, h, 1, [acts[i] for i in perm]).probabilities
    np.testing.assert_allclose(got, base[perm], rtol=0, atol=1e-15)


def test_batched_step_matches_single_row_api():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 12, 4, 3)
    p = init_params(Dims(8, 8, 16), g.n_entities, g.n_relations, 0, np.float64)
    queries = g.triples[:5]
    walk = BatchWalk(g, queries, [g.query_view(Query(*q)) for q in queries.tolist()], 3)
    h = np.zeros((5, 8))
    c = np.zeros((5, 8))
    hists = [zero_state(p) for _ in range(5)]
    for _ in range(3):
        act_rel, act_ent, valid = walk.action_arrays()
        st_ = forward_step(p, h, c, walk.prev_rel, walk.current, walk.queries[:, 1],
                           act_rel, act_ent, valid)
        for i in range(5):
            hists[i] = lstm_step(p, hists[i], int(walk.prev_rel[i]), int(walk.current[i]))
            acts = list(zip(act_rel[i][valid[i]].tolist(), act_ent[i][valid[i]].tolist()))
            ref = score_actions(p, hists[i], int(walk.queries[i, 1]), acts).probabilities
            np.testing.assert_allclose(st_.probs[i][valid[i]], ref, atol=1e-12)
        choice = np.array([int(rng.integers(valid[i].sum())) for i in range(5)])
        choice = np.array([np.flatnonzero(valid[i])[k] for i, k in enumerate(choice)])
        walk.advance(act_rel, act_ent, choice)
        h, c = st_.h, st_.c


def _rollout(p, g, queries, weights, choices):
    """Forward T steps; loss = sum_t sum_n w[t][b, n] * log pi_t[b, n]."""
    walk = BatchWalk(g, queries, [g.query_view(Query(*q)) for q in queries.tolist()], len(choices))
    h = np.zeros((len(queries), p.dims.hidden_dim))
    c = np.zeros_like(h)
    tape, loss = [], 0.0
    for t, ch in enumerate(choices):
        act_rel, act_ent, valid = walk.action_arrays()
        st_ = forward_step(p, h, c, walk.prev_rel, walk.current, walk.queries[:, 1],
                           act_rel, act_ent, valid)
        w = np.where(valid, weights[t][:, :valid.shape[1]], 0.0)
        loss += float((w * np.where(valid, st_.log_probs, 0.0)).sum())
        tape.append((st_, w))
        walk.advance(act_rel, act_ent, np.minimum(ch, valid.sum(1) - 1))
        h, c = st_.h, st_.c
    return loss, tape


def fd_check(seed, dims=Dims(8, 8, 8), T=3, max_actions=5, n_checks=None):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 8, 4, 3, max_actions=max_actions)
    while not len(g.triples):
        g = random_graph(rng, 8, 4, 3, max_actions=max_actions)
    p = init_params(dims, g.n_entities, g.n_relations, seed, np.float64)
    for t in p.tensors().values():
        t += rng.normal(0, 0.3, t.shape)
    queries = g.triples[rng.integers(len(g.triples), size=3)]
    weights = [rng.normal(size=(3, max_actions)) for _ in range(T)]
    choices = [rng.integers(0, max_actions, size=3) for _ in range(T)]
    _, tape = _rollout(p, g, queries, weights, choices)
    dl = [w - st_.probs * w.sum(1, keepdims=True) for st_, w in tape]
    grads = backward(p, [st_ for st_, _ in tape], dl)
    worst = 0.0
    for name, tensor in p.tensors().items():
        idxs = list(np.ndindex(tensor.shape))
        if n_checks is not None and len(idxs) > n_checks:
            idxs = [idxs[i] for i in rng.choice(len(idxs), n_checks, replace=False)]
        for idx in idxs:
            num = central_difference(lambda: _rollout(p, g, queries, weights, choices)[0], tensor, idx, 1e-5)
            ana = grads[name][idx]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-7)
            worst = max(worst, err)
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    assert fd_check(seed, n_checks=40) <= 1e-4


def test_zero_upstream_gives_zero_gradient_and_sparse_rows():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 10, 3, 3)
    p = init_params(Dims(8, 8, 8), g.n_entities, g.n_relations, 0, np.float64)
    q = g.triples[:2]
    _, tape = _rollout(p, g, q, [np.ones((2, 256))] * 2, [np.zeros(2, int)] * 2)
    sts = [s for s, _ in tape]
    zero = backward(p, sts, [np.zeros_like(s.probs) for s in sts])
    assert all(not v.any() for v in zero.values())
    grads = backward(p, sts, [s.probs - 0.5 for s in sts])
    touched = set()
    for s in sts:
        touched |= set(s.cur_ent.tolist()) | set(s.act_ent[s.valid].tolist())
    for e in range(g.n_entities):
        if e not in touched:
            assert not grads["entity_embeddings"][e].any()


def test_backward_shape_mismatch_is_internal_error():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 10, 3, 3)
    p = init_params(Dims(8, 8, 8), g.n_entities, g.n_relations, 0, np.float64)
    _, tape = _rollout(p, g, g.triples[:2], [np.ones((2, 256))], [np.zeros(2, int)])
    with pytest.raises(ContractViolation):
        backward(p, [tape[0][0]], [])


def test_checkpoint_roundtrip_and_errors(tmp_path):
    p = small(dtype=np.float32)
    path = tmp_path / "c.ckpt"
    save_checkpoint(p, path, {"seed": 1, "stage": "sl", "epoch": 2, "config_hash": "x"})
    back, meta = load_checkpoint(path)
    for name, t in p.tensors().items():
        assert t.tobytes() == getattr(back, name).tobytes()
    assert meta["stage"] == "sl" and meta["n_entities"] == 10
    assert back.dims == p.dims
    with pytest.raises(CheckpointShapeError) as info:
        load_checkpoint(path, n_entities=11)
    assert info.value.tensor == "entity_embeddings"
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(bad)
    bad.write_bytes(data[:8] + (9).to_bytes(4, "little") + data[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)


def test_expected_shapes_consistent():
    shapes = expected_shapes(Dims(4, 5, 6), 3, 7)
    assert shapes["w2"][1] == 2 * 4
    assert shapes["w1"][0] == 5 + 4
