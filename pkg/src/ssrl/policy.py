"""Recurrent policy network with hand-written reverse mode.

Per step the network computes::

    h_t   = LSTM([rel_emb(prev_relation); ent_emb(current_entity)], h_{t-1})
    z_t   = W2 @ relu(W1 @ [h_t; rel_emb(query_relation)] + b1) + b2
    logit = [rel_emb(r_i); ent_emb(e_i)] . z_t      for each action (r_i, e_i)
    pi_t  = softmax(logits)

Everything is batched over rows; action lists are padded to a common
width with a validity mask. Parameters default to float32; pass
``dtype=np.float64`` for gradient checking.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (CheckpointError, CheckpointMagicError, CheckpointShapeError,
                     CheckpointVersionError, ConfigError, ContractViolation, DomainError)

CKPT_MAGIC = b"SSRLCKPT"
CKPT_VERSION = 1
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class Dims:
    entity_dim: int = 64
    hidden_dim: int = 64
    mlp_dim: int = 128

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")


@dataclass
class PolicyParams:
    entity_embeddings: np.ndarray   # (n_entities, d)
    relation_embeddings: np.ndarray  # (n_relations, d), augmented vocabulary
    lstm_input: np.ndarray          # (2d, 4H), gate order i, f, o, g
    lstm_recurrent: np.ndarray      # (H, 4H)
    lstm_bias: np.ndarray           # (4H,)
    w1: np.ndarray                  # (H + d, F)
    b1: np.ndarray                  # (F,)
    w2: np.ndarray                  # (F, 2d)
    b2: np.ndarray                  # (2d,)
    dims: Dims = field(default_factory=Dims)

    @classmethod
    def tensor_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls) if f.name != "dims")

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.tensor_names()}

    @property
    def dtype(self):
        return self.w1.dtype

    @property
    def n_entities(self) -> int:
        return self.entity_embeddings.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_embeddings.shape[0]

    def copy(self) -> PolicyParams:
        return PolicyParams(**{n: t.copy() for n, t in self.tensors().items()}, dims=self.dims)

    def astype(self, dtype) -> PolicyParams:
        return PolicyParams(**{n: t.astype(dtype) for n, t in self.tensors().items()}, dims=self.dims)

    def count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors().values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(t) for n, t in self.tensors().items()}


def expected_shapes(dims: Dims, n_entities: int, n_relations: int) -> dict[str, tuple[int, ...]]:
    d, h, f = dims.entity_dim, dims.hidden_dim, dims.mlp_dim
    return {
        "entity_embeddings": (n_entities, d),
        "relation_embeddings": (n_relations, d),
        "lstm_input": (2 * d, 4 * h),
        "lstm_recurrent": (h, 4 * h),
        "lstm_bias": (4 * h,),
        "w1": (h + d, f),
        "b1": (f,),
        "w2": (f, 2 * d),
        "b2": (2 * d,),
    }


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(dims: Dims, n_entities: int, n_relations: int, seed: int,
                dtype=np.float32) -> PolicyParams:
    """Xavier-uniform weights and embeddings, zero biases, forget-gate bias +1."""
    dims.validate()
    if n_entities <= 0 or n_relations <= 0:
        raise ConfigError("vocabulary sizes must be positive")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(dims, n_entities, n_relations).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            b = xavier_bound(*shape)
            tensors[name] = rng.uniform(-b, b, size=shape).astype(dtype)
    h = dims.hidden_dim
    tensors["lstm_bias"][h:2 * h] = FORGET_BIAS
    return PolicyParams(**tensors, dims=dims)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class HistoryState:
    hidden: np.ndarray
    cell: np.ndarray
    step: int = 0


@dataclass
class ActionDistribution:
    probabilities: np.ndarray
    logits: np.ndarray
    actions: list[tuple[int, int]]

    @property
    def log_probabilities(self) -> np.ndarray:
        m = self.logits.max()
        return self.logits - m - np.log(np.exp(self.logits - m).sum())


@dataclass
class StepCache:
    """Activations of one batched step, kept for the backward pass."""
    prev_rel: np.ndarray
    cur_ent: np.ndarray
    query_rel: np.ndarray
    act_rel: np.ndarray
    act_ent: np.ndarray
    valid: np.ndarray
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray   # post-nonlinearity i, f, o, g
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray
    q: np.ndarray
    a1: np.ndarray
    r1: np.ndarray
    z: np.ndarray
    actions: np.ndarray  # (B, N, 2d)
    logits: np.ndarray   # -inf at padded slots
    log_probs: np.ndarray
    probs: np.ndarray


def masked_log_softmax(logits: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-softmax over valid slots; returns (log_probs, probs)."""
    masked = np.where(valid, logits, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    shifted = masked - m
    e = np.where(valid, np.exp(np.where(valid, shifted, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return shifted - np.log(s), e / s


def lstm_cell(params: PolicyParams, x, h_prev, c_prev):
    H = params.dims.hidden_dim
    pre = x @ params.lstm_input + h_prev @ params.lstm_recurrent + params.lstm_bias
    gates = np.empty_like(pre)
    gates[:, :3 * H] = _sigmoid(pre[:, :3 * H])
    gates[:, 3 * H:] = np.tanh(pre[:, 3 * H:])
    i, f, o, g = (gates[:, k * H:(k + 1) * H] for k in range(4))
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return gates, c, tanh_c, o * tanh_c


def forward_step(params: PolicyParams, h_prev: np.ndarray, c_prev: np.ndarray,
                 prev_rel: np.ndarray, cur_ent: np.ndarray, query_rel: np.ndarray,
                 act_rel: np.ndarray, act_ent: np.ndarray, valid: np.ndarray) -> StepCache:
    """One batched policy step over padded action lists of shape (B, N)."""
    if not valid[:, 0].all():
        raise ContractViolation("every row needs at least one action")
    E, R = params.entity_embeddings, params.relation_embeddings
    x = np.concatenate([R[prev_rel], E[cur_ent]], axis=1)
    gates, c, tanh_c, h = lstm_cell(params, x, h_prev, c_prev)
    q = np.concatenate([h, R[query_rel]], axis=1)
    a1 = q @ params.w1 + params.b1
    r1 = np.maximum(a1, 0)
    z = r1 @ params.w2 + params.b2
    actions = np.concatenate([R[act_rel], E[act_ent]], axis=2)
    raw = np.einsum("bnk,bk->bn", actions, z)
    log_probs, probs = masked_log_softmax(raw, valid)
    return StepCache(prev_rel, cur_ent, query_rel, act_rel, act_ent, valid, x, h_prev, c_prev,
                     gates, c, tanh_c, h, q, a1, r1, z, actions,
                     np.where(valid, raw, -np.inf), log_probs, probs)


def backward(params: PolicyParams, tape: Sequence[StepCache],
             dlogits: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. each step's logits.

    Backpropagates through the scorer, the feedforward layers, the LSTM
    across all steps, and scatters into the embedding rows that were read.
    """
    if len(tape) != len(dlogits):
        raise ContractViolation("one logit gradient per recorded step is required")
    d, H = params.dims.entity_dim, params.dims.hidden_dim
    g = params.zeros_like()
    dE, dR = g["entity_embeddings"], g["relation_embeddings"]
    dh_next = dc_next = None
    for st, dl in zip(reversed(tape), reversed(dlogits)):
        dl = np.where(st.valid, dl, 0.0).astype(params.dtype)
        if dl.shape != st.valid.shape:
            raise ContractViolation(f"logit gradient shape {dl.shape} != {st.valid.shape}")
        dz = np.einsum("bn,bnk->bk", dl, st.actions)
        dA = dl[:, :, None] * st.z[:, None, :]
        np.add.at(dR, st.act_rel, dA[:, :, :d])
        np.add.at(dE, st.act_ent, dA[:, :, d:])

        g["w2"] += st.r1.T @ dz
        g["b2"] += dz.sum(0)
        da1 = (dz @ params.w2.T) * (st.a1 > 0)
        g["w1"] += st.q.T @ da1
        g["b1"] += da1.sum(0)
        dq = da1 @ params.w1.T
        np.add.at(dR, st.query_rel, dq[:, H:])

        dh = dq[:, :H] if dh_next is None else dq[:, :H] + dh_next
        i, f, o, gg = (st.gates[:, k * H:(k + 1) * H] for k in range(4))
        dc = dh * o * (1 - st.tanh_c ** 2)
        if dc_next is not None:
            dc = dc + dc_next
        dpre = np.concatenate([
            dc * gg * i * (1 - i),
            dc * st.c_prev * f * (1 - f),
            dh * st.tanh_c * o * (1 - o),
            dc * i * (1 - gg ** 2),
        ], axis=1)
        g["lstm_input"] += st.x.T @ dpre
        g["lstm_recurrent"] += st.h_prev.T @ dpre
        g["lstm_bias"] += dpre.sum(0)
        dx = dpre @ params.lstm_input.T
        np.add.at(dR, st.prev_rel, dx[:, :d])
        np.add.at(dE, st.cur_ent, dx[:, d:])
        dh_next = dpre @ params.lstm_recurrent.T
        dc_next = dc * f
    return g


# -- single-row conveniences ----------------------------------------------

def zero_state(params: PolicyParams, batch: int | None = None) -> HistoryState:
    shape = (params.dims.hidden_dim,) if batch is None else (batch, params.dims.hidden_dim)
    return HistoryState(np.zeros(shape, params.dtype), np.zeros(shape, params.dtype), 0)


def lstm_step(params: PolicyParams, history: HistoryState, prev_relation: int,
              current_entity: int) -> HistoryState:
    if not 0 <= prev_relation < params.n_relations:
        raise DomainError(f"relation id {prev_relation} out of range")
    if not 0 <= current_entity < params.n_entities:
        raise DomainError(f"entity id {current_entity} out of range")
    x = np.concatenate([params.relation_embeddings[prev_relation],
                        params.entity_embeddings[current_entity]])[None]
    _, c, _, h = lstm_cell(params, x, history.hidden[None], history.cell[None])
    return HistoryState(h[0], c[0], history.step + 1)


def score_actions(params: PolicyParams, history: HistoryState, query_relation: int,
                  actions: Sequence[tuple[int, int]]) -> ActionDistribution:
    if not actions:
        raise ContractViolation("empty action list")
    acts = np.asarray(actions, dtype=np.int64).reshape(-1, 2)
    R, E = params.relation_embeddings, params.entity_embeddings
    q = np.concatenate([history.hidden, R[query_relation]])
    z = np.maximum(q @ params.w1 + params.b1, 0) @ params.w2 + params.b2
    # row-wise product keeps each logit independent of where its action sits in the list
    logits = (np.concatenate([R[acts[:, 0]], E[acts[:, 1]]], axis=1) * z).sum(axis=1)
    _, probs = masked_log_softmax(logits[None], np.ones((1, len(acts)), bool))
    return ActionDistribution(probs[0], logits, [tuple(a) for a in acts.tolist()])


# -- checkpoints ----------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(params: PolicyParams, path: str | Path, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta.update(
        dims={"entity_dim": params.dims.entity_dim, "hidden_dim": params.dims.hidden_dim,
              "mlp_dim": params.dims.mlp_dim},
        n_entities=params.n_entities,
        n_relations=params.n_relations,
    )
    tensors = params.tensors()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape)
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path, n_entities: int | None = None,
                    n_relations: int | None = None) -> tuple[PolicyParams, dict]:
    """Read a checkpoint; returns float32 params and the metadata block."""
    data = Path(path).read_bytes()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def u32s(k):
        return struct.unpack(f"<{k}I", take(4 * k))

    version, count = u32s(2)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    tensors = {}
    for _ in range(count):
        (n,) = u32s(1)
        name = take(n).decode("utf-8")
        (rank,) = u32s(1)
        shape = u32s(rank)
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    (n,) = u32s(1)
    meta = json.loads(take(n).decode("utf-8"))
    dims = Dims(**meta["dims"])
    want = expected_shapes(dims, n_entities if n_entities is not None else meta["n_entities"],
                           n_relations if n_relations is not None else meta["n_relations"])
    for name, shape in want.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointShapeError(name, shape, tensors[name].shape)
    return PolicyParams(**{k: tensors[k] for k in want}, dims=dims), meta

