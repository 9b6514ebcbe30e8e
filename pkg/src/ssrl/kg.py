"""Triple ingestion and the augmented, truncated adjacency the agent walks on.

Relation ids are laid out as::

    0                   NO_OP (self-loop)
    1 .. R              base relations, first-appearance order
    R+1 .. 2R           inverses, inverse(r) = r + R

Every entity's action list starts with ``(NO_OP, self)`` followed by its
outgoing augmented edges in ascending ``(relation_id, entity_id)`` order,
truncated to ``max_actions`` entries in total.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DomainError, ParseError, VocabularyError

log = logging.getLogger(__name__)

NO_OP = 0
NO_OP_NAME = "NO_OP"
INVERSE_SUFFIX = "_inv"
DEFAULT_MAX_ACTIONS = 256


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Query(NamedTuple):
    source: int
    relation: int
    target: int


@dataclass
class Vocabulary:
    """Entity and base-relation name tables.

    Inverse relations and NO_OP are derived, never stored here.
    """

    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        self._ent = {n: i for i, n in enumerate(self.entities)}
        self._rel = {n: i + 1 for i, n in enumerate(self.relations)}

    def copy(self, frozen: bool | None = None) -> Vocabulary:
        return Vocabulary(list(self.entities), list(self.relations),
                          self.frozen if frozen is None else frozen)

    def freeze(self) -> Vocabulary:
        return self.copy(frozen=True)

    @property
    def n_base_relations(self) -> int:
        return len(self.relations)

    def entity_id(self, name: str, add: bool = False) -> int:
        idx = self._ent.get(name)
        if idx is None:
            if not add or self.frozen:
                raise VocabularyError(f"unknown entity {name!r}")
            idx = len(self.entities)
            self.entities.append(name)
            self._ent[name] = idx
        return idx

    def relation_id(self, name: str, add: bool = False) -> int:
        """Base relation id (1-based). Inverse names resolve to their inverse id."""
        idx = self._rel.get(name)
        if idx is not None:
            return idx
        if name == NO_OP_NAME:
            return NO_OP
        if name.endswith(INVERSE_SUFFIX) and name[: -len(INVERSE_SUFFIX)] in self._rel:
            return self._rel[name[: -len(INVERSE_SUFFIX)]] + len(self.relations)
        if not add or self.frozen:
            raise VocabularyError(f"unknown relation {name!r}")
        self.relations.append(name)
        self._rel[name] = idx = len(self.relations)
        return idx

    def relation_name(self, rid: int) -> str:
        r = len(self.relations)
        if rid == NO_OP:
            return NO_OP_NAME
        if 1 <= rid <= r:
            return self.relations[rid - 1]
        if r < rid <= 2 * r:
            return self.relations[rid - r - 1] + INVERSE_SUFFIX
        raise DomainError(f"relation id {rid} out of range")

    def write(self, directory: str | Path) -> None:
        """Write ``entities.tsv`` and ``relations.tsv`` as name<TAB>id lines."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "entities.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{n}\t{i}\n" for i, n in enumerate(self.entities))
        with open(d / "relations.tsv", "w", encoding="utf-8") as fh:
            for rid in range(2 * len(self.relations) + 1):
                fh.write(f"{self.relation_name(rid)}\t{rid}\n")


def read_triple_lines(path: str | Path) -> list[tuple[int, str, str, str]]:
    """Parse a TAB-separated triple file into (line_no, head, relation, tail)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 3 TAB-separated fields, got {len(parts)}")
            if parts[1] == NO_OP_NAME:
                raise ParseError(path, line_no, f"relation name {NO_OP_NAME!r} is reserved")
            rows.append((line_no, parts[0], parts[1], parts[2]))
    return rows


class KnowledgeGraph:
    """Immutable knowledge graph with NO_OP loops and inverse edges.

    ``action_relations`` / ``action_entities`` are ``(n_entities, width)``
    arrays padded past ``action_counts[e]``; rows are read-only.
    """

    def __init__(self, vocab: Vocabulary, triples: np.ndarray,
                 max_actions: int = DEFAULT_MAX_ACTIONS):
        if max_actions < 1:
            raise ValueError("max_actions must be >= 1")
        self.vocab = vocab.freeze()
        self.max_actions = int(max_actions)
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(triples):
            _, first = np.unique(triples, axis=0, return_index=True)
            triples = triples[np.sort(first)]
        self.triples = triples
        self.triples.flags.writeable = False
        self._build_adjacency()
        self._answers: dict[tuple[int, int], frozenset[int]] | None = None

    @property
    def n_entities(self) -> int:
        return len(self.vocab.entities)

    @property
    def n_base_relations(self) -> int:
        return self.vocab.n_base_relations

    @property
    def n_relations(self) -> int:
        """Size of the augmented relation vocabulary (base + inverse + NO_OP)."""
        return 2 * self.n_base_relations + 1

    def inverse(self, rid: int) -> int:
        r = self.n_base_relations
        if rid == NO_OP:
            return NO_OP
        return rid + r if rid <= r else rid - r

    def _build_adjacency(self) -> None:
        n, r = self.n_entities, self.n_base_relations
        h, rel, t = self.triples.T if len(self.triples) else (np.empty(0, np.int64),) * 3
        aug = np.concatenate([np.stack([h, rel, t], 1), np.stack([t, rel + r, h], 1)])
        aug = np.unique(aug, axis=0) if len(aug) else aug.reshape(0, 3)
        self._augmented = aug
        self._aug_indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(aug[:, 0], minlength=n), out=self._aug_indptr[1:])

        keep = self.max_actions - 1
        rank = np.arange(len(aug)) - self._aug_indptr[aug[:, 0]]
        kept = aug[rank < keep]
        counts = 1 + np.bincount(kept[:, 0], minlength=n)
        width = int(counts.max()) if n else 1
        act_rel = np.zeros((n, width), dtype=np.int64)
        act_ent = np.tile(np.arange(n, dtype=np.int64)[:, None], (1, width))
        slot = 1 + rank[rank < keep]
        act_rel[kept[:, 0], slot] = kept[:, 1]
        act_ent[kept[:, 0], slot] = kept[:, 2]
        for arr in (act_rel, act_ent, counts):
            arr.flags.writeable = False
        self.action_relations, self.action_entities, self.action_counts = act_rel, act_ent, counts

    def check_entity(self, entity: int) -> int:
        if not 0 <= entity < self.n_entities:
            raise DomainError(f"entity id {entity} out of range [0, {self.n_entities})")
        return int(entity)

    def check_relation(self, rid: int) -> int:
        if not 0 <= rid < self.n_relations:
            raise DomainError(f"relation id {rid} out of range [0, {self.n_relations})")
        return int(rid)

    def action_space(self, entity: int) -> list[tuple[int, int]]:
        e = self.check_entity(entity)
        n = self.action_counts[e]
        return list(zip(self.action_relations[e, :n].tolist(), self.action_entities[e, :n].tolist()))

    def slot_of(self, head: int, relation: int, tail: int) -> int | None:
        """Index of edge ``(relation, tail)`` in ``head``'s action list, if kept."""
        n = self.action_counts[head]
        rels, ents = self.action_relations[head, :n], self.action_entities[head, :n]
        hit = np.flatnonzero((rels == relation) & (ents == tail))
        hit = hit[hit > 0] if relation == NO_OP else hit
        return int(hit[0]) if len(hit) else None

    def neighbors(self, entity: int) -> np.ndarray:
        """All augmented out-neighbours before truncation (may repeat)."""
        return self._augmented[self._aug_indptr[entity]:self._aug_indptr[entity + 1], 2]

    def answers(self, source: int, relation: int) -> frozenset[int]:
        """Tails of base facts ``(source, relation, *)``."""
        if self._answers is None:
            table: dict[tuple[int, int], set[int]] = defaultdict(set)
            for hh, rr, tt in self.triples.tolist():
                table[(hh, rr)].add(tt)
            self._answers = {k: frozenset(v) for k, v in table.items()}
        return self._answers.get((int(source), int(relation)), frozenset())

    def mask_edge(self, head: int, relation: int, tail: int) -> MaskedView:
        return MaskedView(self).mask_edge(head, relation, tail)

    def query_view(self, query: Query, hide_answers: Iterable[int] = ()) -> MaskedView:
        """View with the query edge (and optionally edges to other answers) hidden."""
        view = MaskedView(self)
        s, r, t = (int(x) for x in query)
        for tail in sorted({t, *hide_answers}):
            if self.slot_of(s, r, tail) is not None or self.slot_of(tail, self.inverse(r), s) is not None:
                view = view.mask_edge(s, r, tail)
        return view

    def describe_relation(self, rid: int) -> str:
        return self.vocab.relation_name(rid)


class MaskedView:
    """Read-only view of a graph with some edges (and their inverses) hidden.

    Views are cheap values; masking returns a new view and never touches
    the underlying graph.
    """

    def __init__(self, graph: KnowledgeGraph, hidden: dict[int, frozenset[int]] | None = None,
                 warnings: tuple[str, ...] = ()):
        self.graph = graph
        self.hidden = hidden or {}
        self.warnings = warnings

    def __eq__(self, other):
        if not isinstance(other, MaskedView):
            return NotImplemented
        return self.graph is other.graph and self.hidden == other.hidden

    def __hash__(self):
        return hash((id(self.graph), frozenset(self.hidden.items())))

    @property
    def missing_edge(self) -> bool:
        return bool(self.warnings)

    def mask_edge(self, head: int, relation: int, tail: int) -> MaskedView:
        g = self.graph
        hidden = dict(self.hidden)
        found = False
        for hh, rr, tt in ((head, relation, tail), (tail, g.inverse(relation), head)):
            slot = g.slot_of(hh, rr, tt)
            if slot is not None and slot > 0:
                hidden[hh] = hidden.get(hh, frozenset()) | {slot}
                found = True
        if not found:
            msg = f"edge ({head}, {relation}, {tail}) not in graph"
            log.warning(msg)
            return MaskedView(g, hidden, self.warnings + (msg,))
        return MaskedView(g, hidden, self.warnings)

    def visible_slots(self, entity: int) -> np.ndarray:
        n = self.graph.action_counts[self.graph.check_entity(entity)]
        slots = np.arange(n)
        hid = self.hidden.get(int(entity))
        if hid:
            slots = slots[~np.isin(slots, list(hid))]
        return slots

    def action_space(self, entity: int) -> list[tuple[int, int]]:
        slots = self.visible_slots(entity)
        g = self.graph
        return list(zip(g.action_relations[entity, slots].tolist(),
                        g.action_entities[entity, slots].tolist()))

    def hidden_pairs(self) -> list[tuple[int, int]]:
        """Flattened ``(entity, slot)`` pairs, sorted."""
        return sorted((e, s) for e, slots in self.hidden.items() for s in slots)


def ingest_triples(path: str | Path, vocab: Vocabulary | None = None,
                   max_actions: int = DEFAULT_MAX_ACTIONS) -> KnowledgeGraph:
    """Load a TAB-separated triple file into a :class:`KnowledgeGraph`.

    With a frozen ``vocab`` unknown names raise :class:`VocabularyError`;
    an unfrozen one is copied and extended in first-appearance order.
    """
    rows = read_triple_lines(path)
    vocab = Vocabulary() if vocab is None else vocab.copy()
    ids = []
    for line_no, h, r, t in rows:
        try:
            ids.append((vocab.entity_id(h, add=True), vocab.relation_id(r, add=True),
                        vocab.entity_id(t, add=True)))
        except VocabularyError as exc:
            raise VocabularyError(f"{path}:{line_no}: {exc}") from None
    bad = [x for x in ids if not 1 <= x[1] <= vocab.n_base_relations]
    if bad:
        raise VocabularyError(f"{path}: inverse or NO_OP relation used as a base fact")
    return KnowledgeGraph(vocab, np.array(ids, dtype=np.int64).reshape(-1, 3), max_actions)


def load_queries(path: str | Path, graph: KnowledgeGraph, skip_unknown: bool = False) -> np.ndarray:
    """Read a triple file as queries against ``graph``'s vocabulary.

    Returns an ``(m, 3)`` int array of ``(source, relation, target)``.
    """
    out = []
    skipped = 0
    for line_no, h, r, t in read_triple_lines(path):
        try:
            q = (graph.vocab.entity_id(h), graph.vocab.relation_id(r), graph.vocab.entity_id(t))
        except VocabularyError as exc:
            if skip_unknown:
                skipped += 1
                continue
            raise VocabularyError(f"{path}:{line_no}: {exc}") from None
        out.append(q)
    if skipped:
        log.warning("%s: skipped %d queries with names unknown to the graph", path, skipped)
    return np.array(out, dtype=np.int64).reshape(-1, 3)


@dataclass
class GraphStats:
    entity_count: int
    relation_count: int
    fact_count: int
    mean_degree: float
    median_degree: float
    relation_frequency: dict[int, int]
    k_hop_target_fraction: float | None = None
    k: int | None = None

    def to_json(self, vocab: Vocabulary | None = None) -> dict:
        freq = {(vocab.relation_name(r) if vocab else str(r)): c
                for r, c in sorted(self.relation_frequency.items())}
        return {
            "entity_count": self.entity_count,
            "relation_count": self.relation_count,
            "fact_count": self.fact_count,
            "mean_degree": self.mean_degree,
            "median_degree": self.median_degree,
            "relation_frequency": freq,
            "k_hop_target_fraction": self.k_hop_target_fraction,
            "k": self.k,
        }


def reachable_within(graph: KnowledgeGraph, source: int, target: int, k: int) -> bool:
    """Whether ``target`` is within ``k`` hops of ``source`` in the untruncated augmented graph."""
    if source == target:
        return True
    seen = {source}
    frontier = [source]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in graph.neighbors(u).tolist():
                if v == target:
                    return True
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
        if not frontier:
            break
    return False


def compute_stats(graph: KnowledgeGraph, queries: np.ndarray | None = None, k: int = 3) -> GraphStats:
    """Table-style statistics; degrees count base outgoing facts per entity."""
    n = graph.n_entities
    degrees = np.bincount(graph.triples[:, 0], minlength=n) if n else np.zeros(0)
    rel_ids, rel_counts = np.unique(graph.triples[:, 1], return_counts=True)
    fraction = None
    if queries is not None and len(queries):
        hits = sum(reachable_within(graph, int(s), int(t), k) for s, _, t in np.asarray(queries))
        fraction = hits / len(queries)
    return GraphStats(
        entity_count=n,
        relation_count=graph.n_base_relations,
        fact_count=len(graph.triples),
        mean_degree=float(len(graph.triples) / n) if n else 0.0,
        median_degree=float(np.median(degrees)) if n else 0.0,
        relation_frequency={int(r): int(c) for r, c in zip(rel_ids, rel_counts)},
        k_hop_target_fraction=fraction,
        k=k if fraction is not None else None,
    )
