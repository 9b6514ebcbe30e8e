"""Small generated knowledge graphs with a known multi-hop query relation.

Each kind defines some base relations and a query relation that holds
exactly for pairs joined by a short base-relation path. Query facts are
split 80/20; the training share is also added to the graph, the test
share is held out.

* ``chain``: ``next`` links e0 -> e1 -> ...; ``two_next`` holds for (e_i, e_{i+2}).
* ``grid``: ``right``/``down`` on a square grid; ``diag`` holds for
  (i, j) -> (i + 1, j + 1).
* ``composition``: layers A, B, C with ``r1: A -> B`` and ``r2: B -> C``;
  ``rq = r1 . r2``. Distractor relations add random noise edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

KINDS = ("chain", "grid", "composition")
TRAIN_SHARE = 0.8
N_DISTRACTORS = 3

Fact = tuple[str, str, str]


@dataclass
class SyntheticKG:
    kind: str
    base_facts: list[Fact]
    train_queries: list[Fact]
    test_queries: list[Fact]
    query_relation: str

    @property
    def graph_facts(self) -> list[Fact]:
        return self.base_facts + self.train_queries

    def write(self, directory: str | Path) -> dict[str, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, facts in (("graph", self.graph_facts), ("train", self.train_queries),
                            ("test", self.test_queries)):
            p = out / f"{name}.txt"
            p.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in facts), encoding="utf-8")
            paths[name] = p
        return paths


def _split(facts: list[Fact], rng: np.random.Generator) -> tuple[list[Fact], list[Fact]]:
    n_train = int(math.floor(TRAIN_SHARE * len(facts)))
    if n_train < 1 or n_train == len(facts):
        raise ConfigError(f"{len(facts)} query facts cannot be split 80/20; increase size")
    order = rng.permutation(len(facts))
    train = sorted(facts[i] for i in order[:n_train])
    test = sorted(facts[i] for i in order[n_train:])
    return train, test


def _chain(size: int, rng) -> tuple[list[Fact], list[Fact], str]:
    names = [f"e{i}" for i in range(size)]
    base = [(names[i], "next", names[i + 1]) for i in range(size - 1)]
    query = [(names[i], "two_next", names[i + 2]) for i in range(size - 2)]
    return base, query, "two_next"


def _grid(size: int, rng) -> tuple[list[Fact], list[Fact], str]:
    k = int(math.isqrt(size))
    if k < 3:
        raise ConfigError("grid needs size >= 9")
    name = lambda i, j: f"g{i}_{j}"  # noqa: E731
    base, query = [], []
    for i in range(k):
        for j in range(k):
            if j + 1 < k:
                base.append((name(i, j), "right", name(i, j + 1)))
            if i + 1 < k:
                base.append((name(i, j), "down", name(i + 1, j)))
            if i + 1 < k and j + 1 < k:
                query.append((name(i, j), "diag", name(i + 1, j + 1)))
    return base, query, "diag"


def _composition(size: int, rng) -> tuple[list[Fact], list[Fact], str]:
    n_a = size // 2
    n_b = size // 4
    n_c = size - n_a - n_b
    if min(n_a, n_b, n_c) < 2:
        raise ConfigError("composition needs size >= 8")
    A = [f"a{i}" for i in range(n_a)]
    B = [f"b{i}" for i in range(n_b)]
    C = [f"c{i}" for i in range(n_c)]
    r1 = rng.integers(0, n_b, size=n_a)
    r2 = rng.integers(0, n_c, size=n_b)
    base = [(A[i], "r1", B[r1[i]]) for i in range(n_a)]
    base += [(B[j], "r2", C[r2[j]]) for j in range(n_b)]
    everyone = A + B + C
    seen = set(base)
    for d in range(N_DISTRACTORS):
        for _ in range(size // 2):
            h, t = rng.integers(0, size, size=2)
            fact = (everyone[h], f"d{d}", everyone[t])
            if h != t and fact not in seen:
                seen.add(fact)
                base.append(fact)
    query = sorted({(A[i], "rq", C[r2[r1[i]]]) for i in range(n_a)})
    return base, query, "rq"


def make_synthetic(kind: str, size: int, seed: int) -> SyntheticKG:
    """Deterministic dataset for ``(kind, size, seed)``."""
    if kind not in KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if size < 3:
        raise ConfigError("size must be >= 3")
    rng = np.random.default_rng(seed)
    base, query, rq = {"chain": _chain, "grid": _grid, "composition": _composition}[kind](size, rng)
    train, test = _split(query, rng)
    return SyntheticKG(kind, base, train, test, rq)
