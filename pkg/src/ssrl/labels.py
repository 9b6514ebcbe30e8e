"""Supervised action labels for the pretraining stage.

For a query ``(s, r, q)`` the answer set is every ``e`` with ``(s, r, e)``
in the training facts. An edge is labelled correct when it lies on a
simple path of at most ``depth`` hops from ``s`` to an answer, where a path
stops at the first answer it reaches. Answers keep their self-loop label;
every other node's self-loop is zero.

``oracle_correct_edges`` enumerates paths exhaustively and is the reference
semantics. ``generate_labels`` reaches the same edge set with a layered
search: a breadth-first sweep from the source bounded by ``depth``, hop
distances back to the answers computed over that sweep, and a depth-first
pass over simple paths that is cut as soon as the remaining hop budget
cannot reach an answer.
"""

from __future__ import annotations

import struct
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (DomainError, MagicMismatch, TruncatedFile, UnlabelableQuery,
                     VersionMismatch)
from .kg import NO_OP, KnowledgeGraph, MaskedView, Query

LABEL_MAGIC = b"SSRLLBL1"
LABEL_VERSION = 1

Edge = tuple[int, int, int]


@dataclass(eq=False)
class LabelSet:
    query: Query
    e_all: frozenset[int]
    correct_nodes: frozenset[int]
    labels: dict[int, np.ndarray]
    depth: int

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return (tuple(self.query) == tuple(other.query) and self.e_all == other.e_all
                and self.correct_nodes == other.correct_nodes and self.depth == other.depth
                and self.labels.keys() == other.labels.keys()
                and all(np.array_equal(self.labels[k], other.labels[k]) for k in self.labels))

    def label(self, entity: int) -> np.ndarray | None:
        return self.labels.get(int(entity))


def compute_e_all(graph: KnowledgeGraph, source: int, relation: int) -> frozenset[int]:
    graph.check_entity(source)
    graph.check_relation(relation)
    return graph.answers(source, relation)


def label_view(graph: KnowledgeGraph, query: Query, mask_answers: bool = False) -> MaskedView:
    """The masked view label vectors (and SL rollouts) are aligned with."""
    hide = compute_e_all(graph, query[0], query[1]) if mask_answers else ()
    return graph.query_view(Query(*query), hide)


def _moves(view: MaskedView, u: int) -> list[tuple[int, int]]:
    return [(r, v) for r, v in view.action_space(u) if not (r == NO_OP and v == u)]


def oracle_correct_edges(view: MaskedView, source: int, e_all: Iterable[int], depth: int) -> set[Edge]:
    """Every non-self-loop edge on some simple source->answer path of <= depth hops.

    Plain exhaustive enumeration; exponential, meant for checking.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    targets = set(e_all)
    found: set[Edge] = set()

    def walk(u: int, path: list[Edge], on_path: set[int]) -> None:
        if len(path) == depth:
            return
        for r, v in _moves(view, u):
            if v in on_path:
                continue
            edge = (u, r, v)
            if v in targets:
                found.update(path)
                found.add(edge)
                continue
            on_path.add(v)
            path.append(edge)
            walk(v, path, on_path)
            path.pop()
            on_path.remove(v)

    walk(source, [], {source})
    return found


def _search_correct_edges(view: MaskedView, source: int, targets: frozenset[int],
                          depth: int) -> set[Edge]:
    # forward sweep: nodes within depth-1 hops, never expanding past an answer
    level = {source: 0}
    preds: dict[int, list[int]] = defaultdict(list)
    succ: dict[int, list[tuple[int, int]]] = {}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if level[u] >= depth or (u in targets and u != source):
            continue
        succ[u] = _moves(view, u)
        for _, v in succ[u]:
            preds[v].append(u)
            if v not in level:
                level[v] = level[u] + 1
                queue.append(v)

    # hop distance to the nearest answer inside the sweep (a lower bound for simple paths)
    remaining = {t: 0 for t in targets if t in level}
    queue = deque(remaining)
    while queue:
        v = queue.popleft()
        for u in preds.get(v, ()):
            if u not in remaining:
                if u in targets and u != source:
                    continue
                remaining[u] = remaining[v] + 1
                queue.append(u)

    found: set[Edge] = set()
    path: list[Edge] = []
    on_path = {source}

    def walk(u: int) -> None:
        budget = depth - len(path)
        for r, v in succ.get(u, ()):
            if v in on_path:
                continue
            if v in targets:
                found.update(path)
                found.add((u, r, v))
                continue
            if remaining.get(v, depth + 1) >= budget:
                continue
            on_path.add(v)
            path.append((u, r, v))
            walk(v)
            path.pop()
            on_path.remove(v)

    if remaining.get(source, depth + 1) <= depth or source in targets:
        walk(source)
    return found


def labels_from_edges(view: MaskedView, query: Query, e_all: frozenset[int],
                      edges: set[Edge], depth: int) -> LabelSet:
    """Build per-node label vectors from a set of correct edges."""
    source = int(query[0])
    correct_nodes = frozenset({x for u, _, v in edges for x in (u, v)} - e_all - {source})
    by_node: dict[int, set[tuple[int, int]]] = defaultdict(set)
    for u, r, v in edges:
        by_node[u].add((r, v))
    labels = {}
    for node in sorted({source} | correct_nodes | e_all):
        actions = view.action_space(node)
        vec = np.zeros(len(actions), dtype=np.uint8)
        if node in e_all:
            vec[0] = 1
        marked = by_node.get(node, ())
        for i, a in enumerate(actions[1:], 1):
            if a in marked:
                vec[i] = 1
        labels[node] = vec
    return LabelSet(Query(*(int(x) for x in query)), e_all, correct_nodes, labels, depth)


def generate_labels(graph: KnowledgeGraph, query: Query, depth: int,
                    mask_answers: bool = False) -> LabelSet:
    """Label every node on a correct path for ``query``.

    Raises :class:`UnlabelableQuery` when the answer set is empty or no
    correct path of at most ``depth`` hops leaves the source.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    query = Query(*(int(x) for x in query))
    e_all = compute_e_all(graph, query.source, query.relation)
    if not e_all:
        raise UnlabelableQuery(f"no answers for ({query.source}, {query.relation})")
    view = label_view(graph, query, mask_answers)
    edges = _search_correct_edges(view, query.source, e_all, depth)
    if not edges and query.source not in e_all:
        raise UnlabelableQuery(f"no answer within {depth} hops of entity {query.source}")
    return labels_from_edges(view, query, e_all, edges, depth)


def generate_label_cache(graph: KnowledgeGraph, queries: np.ndarray, depth: int,
                         mask_answers: bool = False, limit: int | None = None,
                         relations: Iterable[int] | None = None) -> tuple[dict[Query, LabelSet], int]:
    """Label a list of queries in order; returns the cache and the skip count."""
    wanted = set(relations) if relations is not None else None
    cache: dict[Query, LabelSet] = {}
    skipped = 0
    for q in np.asarray(queries).reshape(-1, 3).tolist():
        if limit is not None and len(cache) >= limit:
            break
        q = Query(*q)
        if wanted is not None and q.relation not in wanted:
            continue
        if q in cache:
            continue
        try:
            cache[q] = generate_labels(graph, q, depth, mask_answers)
        except UnlabelableQuery:
            skipped += 1
    return cache, skipped


@dataclass
class CoverageReport:
    overall: float
    labelled: int
    total: int
    per_relation: dict[int, float]


def label_coverage(cache: Mapping[Query, LabelSet], queries: np.ndarray) -> CoverageReport:
    """Share of training queries that have a label set, overall and per relation."""
    queries = np.asarray(queries).reshape(-1, 3)
    have = defaultdict(int)
    total = defaultdict(int)
    for q in queries.tolist():
        q = Query(*q)
        total[q.relation] += 1
        have[q.relation] += q in cache
    n = len(queries)
    got = sum(have.values())
    return CoverageReport(
        overall=got / n if n else 0.0,
        labelled=got,
        total=n,
        per_relation={r: have[r] / total[r] for r in sorted(total)},
    )


# -- binary cache ---------------------------------------------------------

def save_labels(label_sets: Iterable[LabelSet], path: str | Path) -> None:
    sets = list(label_sets)
    out = bytearray(LABEL_MAGIC)
    out += struct.pack("<II", LABEL_VERSION, len(sets))
    for ls in sets:
        out += struct.pack("<IIII", *ls.query, ls.depth)
        e_all = sorted(ls.e_all)
        out += struct.pack(f"<I{len(e_all)}I", len(e_all), *e_all)
        out += struct.pack("<I", len(ls.labels))
        for node in sorted(ls.labels):
            vec = np.asarray(ls.labels[node], dtype=np.uint8)
            out += struct.pack("<II", node, len(vec))
            out += np.packbits(vec, bitorder="little").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"label cache truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def load_labels(path: str | Path) -> dict[Query, LabelSet]:
    data = Path(path).read_bytes()
    if len(data) < len(LABEL_MAGIC) or data[:len(LABEL_MAGIC)] != LABEL_MAGIC:
        if len(data) < len(LABEL_MAGIC) and LABEL_MAGIC.startswith(data) and data:
            raise TruncatedFile("label cache shorter than its header")
        raise MagicMismatch(f"{path}: not a label cache (bad magic)")
    rd = _Reader(data)
    rd.take(len(LABEL_MAGIC))
    version = rd.u32()
    if version != LABEL_VERSION:
        raise VersionMismatch(f"{path}: label cache version {version}, expected {LABEL_VERSION}")
    cache: dict[Query, LabelSet] = {}
    for _ in range(rd.u32()):
        s, r, t, depth = rd.u32s(4)
        e_all = frozenset(rd.u32s(rd.u32()))
        labels = {}
        for _ in range(rd.u32()):
            node, length = rd.u32s(2)
            packed = np.frombuffer(rd.take((length + 7) // 8), dtype=np.uint8)
            labels[node] = np.unpackbits(packed, count=length, bitorder="little")
        q = Query(s, r, t)
        correct = frozenset(labels) - e_all - {s}
        cache[q] = LabelSet(q, e_all, correct, labels, depth)
    if rd.pos != len(data):
        raise TruncatedFile(f"{path}: {len(data) - rd.pos} trailing bytes")
    return cache


def slot_labels(view: MaskedView, label_set: LabelSet) -> dict[int, np.ndarray]:
    """Label vectors re-expanded to the unmasked slot layout of each node."""
    g = view.graph
    out = {}
    for node, vec in label_set.labels.items():
        slots = view.visible_slots(node)
        if len(slots) != len(vec):
            raise DomainError(f"label for entity {node} has length {len(vec)}, view has {len(slots)} actions")
        full = np.zeros(g.action_counts[node], dtype=bool)
        full[slots] = vec.astype(bool)
        out[node] = full
    return out
