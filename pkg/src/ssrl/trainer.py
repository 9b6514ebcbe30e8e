"""Two-stage training: supervised pretraining on path labels, then REINFORCE.

Both stages roll the policy out on batches of training queries. The SL
stage walks only along label-1 edges and minimises the per-step binary
cross-entropy between the policy and the label vector; the RL stage
samples freely and ascends ``log pi(a_t) * (G_t - b) + beta * H(pi_t)``.

Rollouts are split into fixed chunks of queries and gradients are reduced
in chunk order, so results do not depend on the worker-thread count.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .env import BatchWalk
from .errors import ConfigError
from .evaluate import DEFAULT_KS, evaluate, metrics
from .kg import KnowledgeGraph, MaskedView, Query
from .labels import LabelSet, label_view, slot_labels
from .policy import Dims, PolicyParams, backward, forward_step, init_params, save_checkpoint

log = logging.getLogger(__name__)

PROB_EPS = 1e-8
_SL_ORDER, _SL_DRAW, _RL_ORDER, _RL_DRAW = 1, 2, 3, 4

LOG_COLUMNS = ("stage", "batch", "mean_reward", "sl_loss", "entropy", "baseline",
               "hits1", "hits3", "hits10", "hits20", "mrr")
HEATMAP_COLUMNS = ("sl_epochs", "metric", "value", "delta_vs_epoch0")
HEATMAP_METRICS = tuple(f"hits{k}" for k in DEFAULT_KS) + ("mrr",)


@dataclass
class Hyperparams:
    learning_rate: float = 1e-3
    gamma: float = 1.0
    sl_beta: float = 0.02
    rl_beta: float = 0.02
    sl_lambda: float = 0.02
    rl_lambda: float = 0.02
    sl_epochs: int = 0
    sl_max_steps: int = 0
    rl_batches: int = 100
    batch_size: int = 128
    rollouts: int = 20
    horizon: int = 3
    beam: int = 100
    seed: int = 42
    optimizer: str = "adam"
    grad_clip: float = 0.0
    label_depth: int = 0
    mask_answers: bool = False
    sl_consume_step: bool = False
    sl_max_resamples: int = 32
    sl_step_reduction: str = "sum"
    eval_interval: int = 0
    eval_beam: int = 0
    filtered: bool = True
    threads: int = 1
    chunk_queries: int = 8
    dims: Dims = field(default_factory=Dims)

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        for name in ("sl_lambda", "rl_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        for name in ("sl_beta", "rl_beta", "learning_rate", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("sl_epochs", "sl_max_steps", "rl_batches", "label_depth", "eval_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "rollouts", "horizon", "beam", "threads", "chunk_queries",
                     "sl_max_resamples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.sl_step_reduction not in ("sum", "mean"):
            raise ConfigError("sl_step_reduction must be 'sum' or 'mean'")
        self.dims.validate()

    @property
    def depth(self) -> int:
        return self.label_depth or self.horizon


# -- losses and returns ----------------------------------------------------

def sl_loss(probs: np.ndarray, labels: np.ndarray, valid: np.ndarray,
            eps: float = PROB_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-row label cross-entropy averaged over each row's actions.

    ``-(1/n) * sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`` with p clipped
    to ``[eps, 1 - eps]``. Returns ``(loss, d loss / d logits)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = valid.sum(axis=-1, keepdims=True)
    pc = np.clip(p, eps, 1 - eps)
    terms = np.where(valid, y * np.log(pc) + (1 - y) * np.log(1 - pc), 0.0)
    loss = -terms.sum(axis=-1) / n[..., 0]
    inside = (p > eps) & (p < 1 - eps) & valid
    dp = np.where(inside, -(y / pc - (1 - y) / (1 - pc)) / n, 0.0)
    dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    return loss, np.where(valid, dlogits, 0.0)


def entropy(log_probs: np.ndarray, probs: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row entropies and their gradient w.r.t. the logits."""
    lp = np.where(valid, log_probs, 0.0).astype(np.float64)
    p = np.where(valid, probs, 0.0).astype(np.float64)
    ent = -(p * lp).sum(axis=-1)
    grad = np.where(valid, -p * (lp + ent[:, None]), 0.0)
    return ent, grad


def reinforce_grads(probs: np.ndarray, log_probs: np.ndarray, valid: np.ndarray,
                    choices: np.ndarray, advantages: np.ndarray,
                    beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-row ``log pi(a) * adv + beta * H(pi)`` and its gradient w.r.t. the logits."""
    rows = np.arange(len(choices))
    ent, dent = entropy(log_probs, probs, valid)
    objective = log_probs[rows, choices].astype(np.float64) * advantages + beta * ent
    dlogp = -np.where(valid, probs, 0.0).astype(np.float64)
    dlogp[rows, choices] += 1.0
    return objective, dlogp * advantages[:, None] + beta * dent


def compute_returns(rewards, gamma: float) -> np.ndarray:
    """Discounted returns ``G_t = sum_{k >= t} gamma^(k - t) R_k`` along the last axis."""
    r = np.asarray(rewards, dtype=np.float64)
    g = np.zeros_like(r)
    acc = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        acc = r[..., t] + gamma * acc
        g[..., t] = acc
    return g


@dataclass
class Baseline:
    """Reactive baseline: exponential moving average of batch-mean return."""
    decay: float
    value: float = 0.0

    def update(self, batch_mean: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean
        return self.value


# -- optimisers ------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: PolicyParams, grads: Mapping[str, np.ndarray]) -> None:
        for name, t in params.tensors().items():
            t -= (self.lr * grads[name]).astype(t.dtype)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: PolicyParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, t in params.tensors().items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(t))
            v = self.v.setdefault(name, np.zeros_like(t))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            t -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.dtype)


def make_optimizer(hyper: Hyperparams):
    return Adam(hyper.learning_rate) if hyper.optimizer == "adam" else SGD(hyper.learning_rate)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- rollouts ---------------------------------------------------------------

def _draws(seed: int, tag: int, counter: int, query_index: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, tag, counter, query_index]).random(shape)


def _sample(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling; ``u`` is (rows, k) uniforms, returns (rows, k) slots."""
    cum = np.cumsum(probs.astype(np.float64), axis=1)
    idx = (cum[:, None, :] < u[:, :, None] * cum[:, -1:, None]).sum(axis=2)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class ChunkResult:
    grads: dict[str, np.ndarray]
    rows: int
    reward_sum: float
    sl_loss_sum: float
    entropy_sum: float
    return_sum: float
    return_count: int
    applied_ok: bool = True


@dataclass
class _Prepared:
    query_index: int
    query: Query
    view: MaskedView
    labels: dict[int, np.ndarray] | None = None


class Trainer:
    """Holds the per-run caches (views, slot labels) and the worker pool."""

    def __init__(self, graph: KnowledgeGraph, hyper: Hyperparams):
        hyper.validate()
        self.graph = graph
        self.hyper = hyper
        self._views: dict[Query, MaskedView] = {}
        self._slot_labels: dict[Query, dict[int, np.ndarray]] = {}
        # when a list, rollouts append per-step records (used by tests; single-threaded only)
        self.trace: list | None = None

    def view(self, q: Query) -> MaskedView:
        v = self._views.get(q)
        if v is None:
            v = self._views[q] = label_view(self.graph, q, self.hyper.mask_answers)
        return v

    def prepare(self, items: Sequence[tuple[int, Query]], cache: Mapping[Query, LabelSet] | None = None):
        out = []
        for qi, q in items:
            view = self.view(q)
            labels = None
            if cache is not None:
                labels = self._slot_labels.get(q)
                if labels is None:
                    labels = self._slot_labels[q] = slot_labels(view, cache[q])
            out.append(_Prepared(qi, q, view, labels))
        return out

    def _map(self, fn, chunks):
        if self.hyper.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.hyper.threads) as pool:
                return list(pool.map(fn, chunks))
        return [fn(c) for c in chunks]

    def _chunks(self, prepared: list[_Prepared]) -> list[list[_Prepared]]:
        k = self.hyper.chunk_queries
        return [prepared[i:i + k] for i in range(0, len(prepared), k)]

    @staticmethod
    def _reduce(results: list[ChunkResult]) -> dict[str, np.ndarray]:
        grads = {n: g.copy() for n, g in results[0].grads.items()}
        for r in results[1:]:
            for n, g in r.grads.items():
                grads[n] += g
        return grads

    def _rows(self, chunk: list[_Prepared]):
        R = self.hyper.rollouts
        queries = np.repeat(np.array([p.query for p in chunk], dtype=np.int64), R, axis=0)
        views = [p.view for p in chunk for _ in range(R)]
        return BatchWalk(self.graph, queries, views, self.hyper.horizon)

    # SL --------------------------------------------------------------

    def sl_chunk(self, params: PolicyParams, chunk: list[_Prepared], counter: int,
                 total_rows: int) -> ChunkResult:
        hp = self.hyper
        R, T, K = hp.rollouts, hp.horizon, hp.sl_max_resamples
        walk = self._rows(chunk)
        rows = len(walk)
        owner = np.repeat(np.arange(len(chunk)), R)
        draws = np.concatenate([_draws(hp.seed, _SL_DRAW, counter, p.query_index, (R, T, K))
                                for p in chunk])
        state_h = np.zeros((rows, hp.dims.hidden_dim), params.dtype)
        state_c = np.zeros_like(state_h)
        active = np.ones(rows, dtype=bool)
        tape, dls = [], []
        loss_sum = ent_sum = 0.0
        scale = 1.0 / total_rows
        step_scale = 1.0 / T if hp.sl_step_reduction == "mean" else 1.0
        for t in range(T):
            act_rel, act_ent, valid = walk.action_arrays()
            st = forward_step(params, state_h, state_c, walk.prev_rel, walk.current,
                              walk.queries[:, 1], act_rel, act_ent, valid)
            y = np.zeros_like(valid)
            for i in range(rows):
                lab = chunk[owner[i]].labels.get(int(walk.current[i])) if active[i] else None
                if lab is None:
                    active[i] = False
                else:
                    y[i, :len(lab)] = lab
            loss, dl = sl_loss(st.probs, y, valid)
            ent, dent = entropy(st.log_probs, st.probs, valid)
            loss = np.where(active, loss, 0.0)
            dl = np.where(active[:, None], step_scale * (dl - hp.sl_beta * dent), 0.0) * scale
            loss_sum += float(loss.sum()) * step_scale
            ent_sum += float(ent[active].sum())
            tape.append(st)
            dls.append(dl)

            u = draws[:, t, :]
            if hp.sl_consume_step:
                choice = _sample(st.probs, u[:, :1])[:, 0]
                move = y[np.arange(rows), choice] & active
            else:
                cand = _sample(st.probs, u)
                ok = y[np.arange(rows)[:, None], cand]
                first = ok.argmax(axis=1)
                forced = np.where(y, st.probs, -1.0).argmax(axis=1)
                choice = np.where(ok.any(axis=1), cand[np.arange(rows), first], forced)
                move = active & y[np.arange(rows), choice]
            choice = np.where(active, choice, 0)
            if self.trace is not None:
                self.trace.append({"stage": "sl", "step": t, "entity": walk.current.copy(),
                                   "active": active.copy(), "labels": y.copy(),
                                   "choice": choice.copy(), "move": move.copy()})
            walk.advance(act_rel, act_ent, choice, move)
            state_h, state_c = st.h, st.c
        grads = backward(params, tape, dls)
        rewards = walk.rewards()
        return ChunkResult(grads, rows, float(rewards.sum()), loss_sum, ent_sum,
                           float(rewards.sum()), rows)

    def sl_batch(self, params, prepared, counter, optimizer) -> dict[str, float]:
        total = len(prepared) * self.hyper.rollouts
        results = self._map(lambda c: self.sl_chunk(params, c, counter, total), self._chunks(prepared))
        grads = self._reduce(results)
        clip_gradients(grads, self.hyper.grad_clip)
        optimizer.step(params, grads)
        steps = total * self.hyper.horizon
        return {
            "mean_reward": sum(r.reward_sum for r in results) / total,
            "sl_loss": sum(r.sl_loss_sum for r in results) / total,
            "entropy": sum(r.entropy_sum for r in results) / steps,
            "mean_return": sum(r.return_sum for r in results) / sum(r.return_count for r in results),
        }

    # RL --------------------------------------------------------------

    def rl_chunk(self, params: PolicyParams, chunk: list[_Prepared], counter: int,
                 total_rows: int, baseline: float) -> ChunkResult:
        hp = self.hyper
        R, T = hp.rollouts, hp.horizon
        walk = self._rows(chunk)
        rows = len(walk)
        draws = np.concatenate([_draws(hp.seed, _RL_DRAW, counter, p.query_index, (R, T))
                                for p in chunk])
        state_h = np.zeros((rows, hp.dims.hidden_dim), params.dtype)
        state_c = np.zeros_like(state_h)
        tape, choices = [], []
        for t in range(T):
            act_rel, act_ent, valid = walk.action_arrays()
            st = forward_step(params, state_h, state_c, walk.prev_rel, walk.current,
                              walk.queries[:, 1], act_rel, act_ent, valid)
            choice = _sample(st.probs, draws[:, t:t + 1])[:, 0]
            tape.append(st)
            choices.append(choice)
            walk.advance(act_rel, act_ent, choice)
            state_h, state_c = st.h, st.c
        rewards = np.zeros((rows, T))
        rewards[:, -1] = walk.rewards()
        returns = compute_returns(rewards, hp.gamma)
        adv = returns - baseline
        dls, ent_sum = [], 0.0
        for t, st in enumerate(tape):
            _, dobj = reinforce_grads(st.probs, st.log_probs, st.valid, choices[t], adv[:, t],
                                      hp.rl_beta)
            # minimise the negated objective, averaged over the batch rows
            dls.append(-dobj / total_rows)
            ent_sum += float(entropy(st.log_probs, st.probs, st.valid)[0].sum())
        if self.trace is not None:
            self.trace.append({"stage": "rl", "choices": np.stack(choices, 1), "rewards": rewards})
        grads = backward(params, tape, dls)
        return ChunkResult(grads, rows, float(rewards[:, -1].sum()), 0.0, ent_sum,
                           float(returns.sum()), returns.size)

    def rl_batch(self, params, prepared, counter, optimizer, baseline: Baseline) -> dict[str, float]:
        total = len(prepared) * self.hyper.rollouts
        b = baseline.value
        results = self._map(lambda c: self.rl_chunk(params, c, counter, total, b), self._chunks(prepared))
        grads = self._reduce(results)
        clip_gradients(grads, self.hyper.grad_clip)
        optimizer.step(params, grads)
        mean_return = sum(r.return_sum for r in results) / sum(r.return_count for r in results)
        baseline.update(mean_return)
        return {
            "mean_reward": sum(r.reward_sum for r in results) / total,
            "sl_loss": None,
            "entropy": sum(r.entropy_sum for r in results) / (total * self.hyper.horizon),
            "mean_return": mean_return,
        }


# -- logs ------------------------------------------------------------------

@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["batch"] <= self.rows[-1]["batch"]:
            raise ValueError("batch indices must increase")
        self.rows.append({k: row.get(k) for k in LOG_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.rows:
                w.writerow(["" if row[c] is None else _fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


@dataclass
class TrainResult:
    params: PolicyParams
    log: TrainLog
    checkpoints: dict[str, object]


def _snapshot(graph, params, hyper, dev_queries, known) -> dict[str, float]:
    beam = hyper.eval_beam or hyper.beam
    rep = evaluate(graph, params, dev_queries, hyper.horizon, beam, known, hyper.filtered)
    return {k: rep.aggregates[k] for k in ("hits1", "hits3", "hits10", "hits20", "mrr")}


def labelled_items(queries: np.ndarray, cache: Mapping[Query, LabelSet]) -> list[tuple[int, Query]]:
    return [(i, Query(*q)) for i, q in enumerate(np.asarray(queries).reshape(-1, 3).tolist())
            if Query(*q) in cache]


def sl_epoch(trainer: Trainer, params: PolicyParams, items: list[tuple[int, Query]],
             cache: Mapping[Query, LabelSet], epoch: int, optimizer, log: TrainLog,
             batch_offset: int, baseline: Baseline, max_updates: int | None = None) -> int:
    """One shuffled pass over the labelled queries; returns the number of updates."""
    hp = trainer.hyper
    if not items:
        raise ConfigError("label cache has no entries for the training queries")
    order = np.random.default_rng([hp.seed, _SL_ORDER, epoch]).permutation(len(items))
    updates = 0
    for start in range(0, len(order), hp.batch_size):
        if max_updates is not None and updates >= max_updates:
            break
        batch = [items[i] for i in order[start:start + hp.batch_size]]
        prepared = trainer.prepare(batch, cache)
        counter = batch_offset + updates
        stats = trainer.sl_batch(params, prepared, counter, optimizer)
        baseline.update(stats["mean_return"])
        log.append({"stage": "sl", "batch": counter, "mean_reward": stats["mean_reward"],
                    "sl_loss": stats["sl_loss"], "entropy": stats["entropy"],
                    "baseline": baseline.value})
        updates += 1
    return updates


def rl_query_batches(n_queries: int, batch_size: int, seed: int, n_batches: int):
    """Query indices for each RL batch: consecutive slices of reshuffled passes."""
    perm, pos, epoch = np.empty(0, dtype=np.int64), 0, 0
    for _ in range(n_batches):
        out = []
        while len(out) < min(batch_size, n_queries):
            if pos >= len(perm):
                perm = np.random.default_rng([seed, _RL_ORDER, epoch]).permutation(n_queries)
                pos, epoch = 0, epoch + 1
            take = min(batch_size - len(out), len(perm) - pos)
            out.extend(perm[pos:pos + take].tolist())
            pos += take
        yield out


def rl_stage(trainer: Trainer, params: PolicyParams, queries: np.ndarray, log: TrainLog,
             batch_offset: int = 0, dev_queries: np.ndarray | None = None,
             known=None) -> Baseline:
    """Run all RL batches in place on ``params`` with a fresh optimiser."""
    hp = trainer.hyper
    queries = np.asarray(queries).reshape(-1, 3)
    if len(queries) == 0:
        raise ConfigError("no training queries")
    optimizer = make_optimizer(hp)
    baseline = Baseline(hp.rl_lambda)
    all_items = [(i, Query(*q)) for i, q in enumerate(queries.tolist())]
    for b, idx in enumerate(rl_query_batches(len(queries), hp.batch_size, hp.seed, hp.rl_batches)):
        prepared = trainer.prepare([all_items[i] for i in idx])
        stats = trainer.rl_batch(params, prepared, b, optimizer, baseline)
        row = {"stage": "rl", "batch": batch_offset + b, "mean_reward": stats["mean_reward"],
               "entropy": stats["entropy"], "baseline": baseline.value}
        last = b == hp.rl_batches - 1
        if dev_queries is not None and len(dev_queries) and hp.eval_interval and \
                ((b + 1) % hp.eval_interval == 0 or last):
            row.update(_snapshot(trainer.graph, params, hp, dev_queries, known))
        log.append(row)
    return baseline


def train(graph: KnowledgeGraph, train_queries: np.ndarray, hyper: Hyperparams,
          label_cache: Mapping[Query, LabelSet] | None = None,
          dev_queries: np.ndarray | None = None, known=None,
          checkpoint_dir: str | Path | None = None, metadata: dict | None = None) -> TrainResult:
    """SL epochs, a checkpoint at the stage boundary, then RL batches."""
    hyper.validate()
    trainer = Trainer(graph, hyper)
    params = init_params(hyper.dims, graph.n_entities, graph.n_relations, hyper.seed)
    log_ = TrainLog()
    checkpoints: dict[str, object] = {}
    meta = dict(metadata or {})

    sl_updates = 0
    if hyper.sl_epochs > 0:
        if not label_cache:
            raise ConfigError("SL epochs requested but the label cache is empty")
        items = labelled_items(train_queries, label_cache)
        optimizer = make_optimizer(hyper)
        baseline = Baseline(hyper.sl_lambda)
        for epoch in range(hyper.sl_epochs):
            cap = hyper.sl_max_steps - sl_updates if hyper.sl_max_steps else None
            if cap is not None and cap <= 0:
                break
            sl_updates += sl_epoch(trainer, params, items, label_cache, epoch, optimizer, log_,
                                   sl_updates, baseline, cap)
            log.info("SL epoch %d done (%d updates)", epoch + 1, sl_updates)

    boundary = {**meta, "stage": "sl", "epoch": hyper.sl_epochs, "seed": hyper.seed}
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "sl.ckpt"
        save_checkpoint(params, path, boundary)
        checkpoints["sl"] = path
    else:
        checkpoints["sl"] = params.copy()

    rl_stage(trainer, params, train_queries, log_, sl_updates, dev_queries, known)
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / "final.ckpt"
        save_checkpoint(params, path, {**meta, "stage": "rl", "epoch": hyper.sl_epochs,
                                       "seed": hyper.seed, "rl_batches": hyper.rl_batches})
        checkpoints["final"] = path
    return TrainResult(params, log_, checkpoints)


def sweep(graph: KnowledgeGraph, train_queries: np.ndarray, eval_queries: np.ndarray,
          hyper: Hyperparams, sl_epoch_list: Sequence[int],
          label_cache: Mapping[Query, LabelSet] | None = None, known=None) -> list[dict]:
    """Train once per SL-epoch count and report metrics as deltas against epoch 0."""
    epochs = list(sl_epoch_list)
    if not epochs or 0 not in epochs:
        raise ConfigError("the SL-epoch list must include 0 (pure RL)")
    values = {}
    for e in epochs:
        res = train(graph, train_queries, replace(hyper, sl_epochs=e), label_cache)
        rep = evaluate(graph, res.params, eval_queries, hyper.horizon, hyper.beam, known, hyper.filtered)
        values[e] = metrics(rep.ranks)
    rows = []
    for e in epochs:
        for m in HEATMAP_METRICS:
            rows.append({"sl_epochs": e, "metric": m, "value": values[e][m],
                         "delta_vs_epoch0": values[e][m] - values[0][m]})
    return rows


def write_heatmap(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEATMAP_COLUMNS)
        for r in rows:
            w.writerow([r["sl_epochs"], r["metric"], _fmt(r["value"]), _fmt(r["delta_vs_epoch0"])])
