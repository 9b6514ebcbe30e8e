"""Beam-search decoding, answer ranking and the evaluation report."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .env import BatchWalk
from .kg import KnowledgeGraph, MaskedView, Query, Vocabulary
from .policy import PolicyParams, forward_step, zero_state

DEFAULT_KS = (1, 3, 5, 10, 20)
ARROW = "—{}→"


@dataclass(frozen=True)
class BeamEntry:
    source: int
    path: tuple[tuple[int, int], ...]
    log_prob: float

    @property
    def entity(self) -> int:
        return self.path[-1][1] if self.path else self.source

    def sort_key(self):
        return (-self.log_prob, self.path)


def beam_search(graph: KnowledgeGraph, params: PolicyParams, query: Query, horizon: int,
                beam_width: int, view: MaskedView | None = None,
                return_explored: bool = False):
    """Width-``beam_width`` beam over action sequences of exactly ``horizon`` steps.

    Candidates are ordered by summed log-probability (descending), ties by
    the path's ``(relation, entity)`` sequence. With ``return_explored``
    also returns how many distinct full-length sequences were scored.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    q = Query(*(int(x) for x in query))
    view = view if view is not None else graph.query_view(q)
    walk = BatchWalk(graph, np.array([q]), [view], horizon)
    state = zero_state(params, 1)
    h, c = state.hidden, state.cell
    scores = np.zeros(1)
    paths: list[tuple] = [()]
    explored = 0
    for _ in range(horizon):
        act_rel, act_ent, valid = walk.action_arrays()
        rows = len(walk)
        st = forward_step(params, h, c, walk.prev_rel, walk.current,
                          np.full(rows, q.relation), act_rel, act_ent, valid)
        cand = np.where(valid, scores[:, None] + st.log_probs.astype(np.float64), -np.inf)
        flat = cand.ravel()
        n_valid = int(valid.sum())
        explored = n_valid
        if n_valid > beam_width:
            cut = np.partition(flat, flat.size - beam_width)[flat.size - beam_width]
            pick = np.flatnonzero(flat >= cut)
        else:
            pick = np.flatnonzero(valid.ravel())
        parent, slot = np.divmod(pick, valid.shape[1])
        keyed = sorted(
            zip(pick.tolist(), parent.tolist(), slot.tolist()),
            key=lambda x: (-flat[x[0]], paths[x[1]] + ((int(act_rel[x[1], x[2]]), int(act_ent[x[1], x[2]])),)),
        )[:beam_width]
        parent = np.array([k[1] for k in keyed])
        slot = np.array([k[2] for k in keyed])
        scores = np.array([flat[k[0]] for k in keyed])
        paths = [paths[p] + ((int(act_rel[p, s]), int(act_ent[p, s])),) for p, s in zip(parent, slot)]
        h, c = st.h[parent], st.c[parent]
        walk.select(parent)
        walk.advance(act_rel[parent], act_ent[parent], slot)
    beams = [BeamEntry(q.source, p, float(s)) for p, s in zip(paths, scores)]
    return (beams, explored) if return_explored else beams


def rank_answers(beams: Sequence[BeamEntry], query: Query, known_answers: Iterable[int] = (),
                 filtered: bool = True) -> float:
    """1-based rank of the query target among beam end points, ``inf`` if absent."""
    best: dict[int, float] = {}
    for b in beams:
        e = b.entity
        if e not in best or b.log_prob > best[e]:
            best[e] = b.log_prob
    target = int(query[2])
    known = set(known_answers)
    rank = 1
    for e, _ in sorted(best.items(), key=lambda kv: (-kv[1], kv[0])):
        if e == target:
            return rank
        if filtered and e in known:
            continue
        rank += 1
    return math.inf


def metrics(ranks: Sequence[float], ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    """Hits@k for each k and MRR (1/inf counts as 0)."""
    if len(ranks) == 0:
        raise ValueError("metrics are undefined for an empty rank list")
    r = np.asarray(ranks, dtype=np.float64)
    out = {f"hits{k}": float(np.mean(r <= k)) for k in ks}
    out["mrr"] = float(np.mean(1.0 / r))
    return out


def known_answer_table(graph: KnowledgeGraph, *query_sets: np.ndarray) -> dict[tuple[int, int], set[int]]:
    table: dict[tuple[int, int], set[int]] = defaultdict(set)
    for arr in (graph.triples, *query_sets):
        for s, r, t in np.asarray(arr).reshape(-1, 3).tolist():
            table[(s, r)].add(t)
    return table


@dataclass
class QueryResult:
    query: Query
    rank: float
    explored: int
    candidates: list[tuple[int, float]] = field(default_factory=list)
    beams: list[BeamEntry] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return any(e == self.query.target for e, _ in self.candidates)


@dataclass
class EvalReport:
    results: list[QueryResult]
    aggregates: dict[str, float]
    splits: dict
    unique_paths: dict[str, float | None]

    @property
    def ranks(self) -> list[float]:
        return [r.rank for r in self.results]

    def to_json(self, vocab: Vocabulary | None = None, per_query: bool = False) -> dict:
        out = {
            "n_queries": len(self.results),
            "aggregates": self.aggregates,
            "splits": self.splits,
            "unique_paths": self.unique_paths,
        }
        if vocab is not None:
            for row in out["splits"]["per_relation"]:
                row["relation_name"] = vocab.relation_name(row["relation"])
        if per_query:
            out["queries"] = [
                {"query": list(r.query), "rank": None if math.isinf(r.rank) else int(r.rank),
                 "explored": r.explored}
                for r in self.results
            ]
        return out


def split_report(queries: np.ndarray, graph: KnowledgeGraph, ranks: Sequence[float]) -> dict:
    """MRR on to-many vs to-one queries plus a per-relation success table.

    A query is to-many when the training facts give its (source, relation)
    more than one answer once the query target itself is counted.
    """
    queries = np.asarray(queries).reshape(-1, 3)
    ranks = np.asarray(ranks, dtype=np.float64)
    many = np.array([len(graph.answers(s, r) | {t}) > 1 for s, r, t in queries.tolist()], dtype=bool)

    def part(mask):
        if not mask.any():
            return None
        return {"count": int(mask.sum()), "mrr": float(np.mean(1.0 / ranks[mask]))}

    per_rel = []
    for r in sorted(set(queries[:, 1].tolist())):
        m = queries[:, 1] == r
        hits = int((ranks[m] <= 1).sum())
        per_rel.append({"relation": int(r), "count": int(m.sum()), "hits": hits,
                        "misses": int(m.sum()) - hits, "success_rate": hits / int(m.sum()),
                        "mrr": float(np.mean(1.0 / ranks[m]))})
    rel_ids, counts = np.unique(graph.triples[:, 1], return_counts=True)
    return {
        "to_many": part(many),
        "to_one": part(~many),
        "per_relation": per_rel,
        "relation_frequency": {int(r): int(c) for r, c in zip(rel_ids, counts)},
    }


def evaluate(graph: KnowledgeGraph, params: PolicyParams, queries: np.ndarray, horizon: int,
             beam_width: int, known: Mapping[tuple[int, int], set[int]] | None = None,
             filtered: bool = True, keep_beams: bool = False) -> EvalReport:
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    if known is None:
        known = known_answer_table(graph, queries)
    results = []
    for row in queries.tolist():
        q = Query(*row)
        beams, explored = beam_search(graph, params, q, horizon, beam_width, return_explored=True)
        rank = rank_answers(beams, q, known.get((q.source, q.relation), ()), filtered)
        best: dict[int, float] = {}
        for b in beams:
            best[b.entity] = max(best.get(b.entity, -math.inf), b.log_prob)
        cands = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
        results.append(QueryResult(q, rank, explored, cands, beams if keep_beams else []))
    ranks = [r.rank for r in results]
    found = [r.explored for r in results if r.found]
    missed = [r.explored for r in results if not r.found]
    return EvalReport(
        results=results,
        aggregates=metrics(ranks) if ranks else {},
        splits=split_report(queries, graph, ranks),
        unique_paths={
            "found_mean": float(np.mean(found)) if found else None,
            "not_found_mean": float(np.mean(missed)) if missed else None,
        },
    )


def decode_paths(beams: Sequence[BeamEntry], vocab: Vocabulary, target: int | None = None,
                 top_n: int = 5) -> list[str]:
    """Render beams as ``a —r→ b —r2→ c [exact]`` lines using original names."""
    lines = []
    for b in list(beams)[:top_n]:
        parts = [vocab.entities[b.source]]
        for rel, ent in b.path:
            parts.append(ARROW.format(vocab.relation_name(rel)))
            parts.append(vocab.entities[ent])
        line = " ".join(parts)
        if target is not None:
            line += " [exact]" if b.entity == target else " [incorrect]"
        lines.append(line)
    return lines
