"""The walk environment: a deterministic, partially observed episode per query.

The agent starts at the query source with the query edge hidden, takes
exactly ``horizon`` steps along outgoing edges (NO_OP included), and is
rewarded 1 at the last step iff it stands on the query target.

``EnvState`` and the module-level functions are the reference semantics.
``BatchWalk`` runs many episodes at once on padded arrays for training and
decoding and is checked against them in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, EpisodeComplete, LabelsExhausted
from .kg import NO_OP, KnowledgeGraph, MaskedView, Query

DEFAULT_HORIZON = 3


@dataclass(frozen=True)
class EnvState:
    query: Query
    current_entity: int
    step: int
    horizon: int
    view: MaskedView
    last_relation: int = NO_OP

    @property
    def observation(self) -> tuple[int, int, int]:
        """What the agent sees: (source, query relation, current entity)."""
        return (self.query.source, self.query.relation, self.current_entity)

    @property
    def done(self) -> bool:
        return self.step >= self.horizon

    def actions(self) -> list[tuple[int, int]]:
        return self.view.action_space(self.current_entity)


def reset(graph: KnowledgeGraph, query: Query, horizon: int = DEFAULT_HORIZON,
          view: MaskedView | None = None) -> EnvState:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    q = Query(*(int(x) for x in query))
    graph.check_entity(q.source)
    graph.check_entity(q.target)
    graph.check_relation(q.relation)
    if view is None:
        view = graph.query_view(q)
    return EnvState(q, q.source, 0, horizon, view)


def _move(state: EnvState, action_index: int) -> EnvState:
    if state.done:
        raise EpisodeComplete(f"episode finished at step {state.step}")
    actions = state.actions()
    if not 0 <= action_index < len(actions):
        raise ContractViolation(f"action {action_index} out of range for {len(actions)} actions")
    rel, ent = actions[action_index]
    return EnvState(state.query, ent, state.step + 1, state.horizon, state.view, rel)


def step(state: EnvState, action_index: int) -> tuple[EnvState, int]:
    nxt = _move(state, action_index)
    reward = int(nxt.done and nxt.current_entity == state.query.target)
    return nxt, reward


def sl_step(state: EnvState, action_index: int, label: np.ndarray | None,
            consume_step: bool = False) -> tuple[EnvState, bool]:
    """Apply the action only if its label is 1.

    A rejected action leaves the state untouched (the agent resamples from
    the same distribution). With ``consume_step`` the rejection instead
    spends the time step in place.
    """
    if state.done:
        raise EpisodeComplete(f"episode finished at step {state.step}")
    if label is None:
        raise LabelsExhausted(f"no label for entity {state.current_entity}")
    if len(label) != len(state.actions()):
        raise ContractViolation("label vector not aligned with the action space")
    if label[action_index]:
        return _move(state, action_index), True
    if consume_step:
        return EnvState(state.query, state.current_entity, state.step + 1, state.horizon,
                        state.view, NO_OP), False
    return state, False


class BatchWalk:
    """Vectorised episodes, one row per (query, rollout).

    Action lists stay in the graph's full slot layout; hidden edges are
    switched off in ``valid`` instead of being removed.
    """

    def __init__(self, graph: KnowledgeGraph, queries: np.ndarray, views: list[MaskedView],
                 horizon: int = DEFAULT_HORIZON):
        self.graph = graph
        self.queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        if len(views) != len(self.queries):
            raise ContractViolation("one view per row is required")
        self.horizon = horizon
        rows = len(self.queries)
        pairs = [v.hidden_pairs() for v in views]
        k = max((len(p) for p in pairs), default=0)
        self.hid_ent = np.full((rows, k), -1, dtype=np.int64)
        self.hid_slot = np.zeros((rows, k), dtype=np.int64)
        for i, p in enumerate(pairs):
            for j, (e, s) in enumerate(p):
                self.hid_ent[i, j], self.hid_slot[i, j] = e, s
        self.current = self.queries[:, 0].copy()
        self.prev_rel = np.full(rows, NO_OP, dtype=np.int64)
        self.step = 0

    def __len__(self):
        return len(self.queries)

    def action_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g = self.graph
        counts = g.action_counts[self.current]
        n = int(counts.max())
        act_rel = g.action_relations[self.current, :n]
        act_ent = g.action_entities[self.current, :n]
        valid = np.arange(n)[None, :] < counts[:, None]
        rows = np.arange(len(self))
        for j in range(self.hid_ent.shape[1]):
            sel = self.hid_ent[:, j] == self.current
            valid[rows[sel], self.hid_slot[sel, j]] = False
        return act_rel, act_ent, valid

    def advance(self, act_rel: np.ndarray, act_ent: np.ndarray, choice: np.ndarray,
                move: np.ndarray | None = None) -> None:
        """Take slot ``choice`` in each row; rows with ``move`` False stay put via NO_OP."""
        if self.step >= self.horizon:
            raise EpisodeComplete("batch episode finished")
        rows = np.arange(len(self))
        rel = act_rel[rows, choice]
        ent = act_ent[rows, choice]
        if move is not None:
            rel = np.where(move, rel, NO_OP)
            ent = np.where(move, ent, self.current)
        self.prev_rel = rel
        self.current = ent
        self.step += 1

    def select(self, rows: np.ndarray) -> None:
        """Keep (and possibly duplicate) the given rows, in order."""
        self.queries = self.queries[rows]
        self.hid_ent = self.hid_ent[rows]
        self.hid_slot = self.hid_slot[rows]
        self.current = self.current[rows]
        self.prev_rel = self.prev_rel[rows]

    def rewards(self) -> np.ndarray:
        """Terminal reward per row (zero before the horizon)."""
        if self.step < self.horizon:
            return np.zeros(len(self))
        return (self.current == self.queries[:, 2]).astype(np.float64)

