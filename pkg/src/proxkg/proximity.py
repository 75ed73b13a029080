"""Shared-query proximity extraction and proximity-graph construction.

Any two entities that answer the same query are considered semantically
close; the closeness of one shared query decays with the size of its
answer set, and closeness accumulates over all queries in the train
split. Pairs whose accumulated value exceeds a threshold become edges of
an undirected weighted proximity graph.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .kgdata import ContractError, KnowledgeGraph

HEAD_QUERY = 0  # (?, r, t): anchor is the tail
TAIL_QUERY = 1  # (h, r, ?): anchor is the head

_MAGIC = b"PXGR"
_VERSION = 1


@dataclass
class QAPair:
    direction: int
    anchor: int
    relation: int
    answers: frozenset[int]


@dataclass
class QAPairIndex:
    pairs: list[QAPair]
    lookup: dict[tuple[int, int, int], int]

    def total_answers(self) -> int:
        return sum(len(p.answers) for p in self.pairs)


@dataclass
class SPMMatrix:
    """Sparse accumulated proximity keyed by unordered entity pair."""

    entries: dict[tuple[int, int], float]
    M: int

    def get(self, i: int, j: int) -> float:
        return self.entries.get((min(i, j), max(i, j)), 0.0)


@dataclass
class ProximityGraph:
    """Symmetric weighted adjacency; neighbor lists sorted by entity id."""

    n_entities: int
    threshold: float
    M: int
    neighbors: list[list[tuple[int, float]]] = field(default_factory=list)

    @property
    def n_edges(self) -> int:
        return sum(len(ns) for ns in self.neighbors) // 2

    def edge_list(self) -> np.ndarray:
        """Unique undirected edges as a structured (i, j, w) float array, i < j."""
        rows = []
        for i, ns in enumerate(self.neighbors):
            for j, w in ns:
                if i < j:
                    rows.append((i, j, w))
        return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def extract_qa_pairs(kg: KnowledgeGraph) -> QAPairIndex:
    """One QA pair per distinct (direction, anchor, relation) over raw train triples.

    Each train triple lands in exactly two pairs, one per query direction,
    so the answer multiset (before set dedup) totals 2x the train count.
    """
    if len(kg.raw_train()) == 0:
        raise ContractError("QA-pair extraction requires a non-empty train split")
    tail_answers: dict[tuple[int, int], set[int]] = {}
    head_answers: dict[tuple[int, int], set[int]] = {}
    for h, r, t in kg.raw_train():
        tail_answers.setdefault((int(h), int(r)), set()).add(int(t))
        head_answers.setdefault((int(t), int(r)), set()).add(int(h))

    pairs: list[QAPair] = []
    lookup: dict[tuple[int, int, int], int] = {}
    for (anchor, rel), answers in tail_answers.items():
        lookup[(TAIL_QUERY, anchor, rel)] = len(pairs)
        pairs.append(QAPair(TAIL_QUERY, anchor, rel, frozenset(answers)))
    for (anchor, rel), answers in head_answers.items():
        lookup[(HEAD_QUERY, anchor, rel)] = len(pairs)
        pairs.append(QAPair(HEAD_QUERY, anchor, rel, frozenset(answers)))
    return QAPairIndex(pairs, lookup)


def pm(M: int, answer_set_size: int) -> float:
    """Pairwise proximity contributed by one query with the given answer-set size.

    Equals 1 for two answers, decays linearly, and is 0 once the set
    reaches the cutoff size M.
    """
    if M <= 2:
        raise ContractError(f"answer-set cutoff M must exceed 2, got {M}")
    if answer_set_size < 2:
        raise ContractError("pairwise proximity needs at least two answers")
    return max(M - answer_set_size, 0) / (M - 2)


def accumulate_spm(index: QAPairIndex, M: int) -> SPMMatrix:
    """Sum per-query proximity over all QA pairs into a sparse symmetric map.

    Queries with answer sets of size >= M contribute exactly zero and are
    skipped before enumerating their quadratic pair set.
    """
    if M <= 2:
        raise ContractError(f"answer-set cutoff M must exceed 2, got {M}")
    entries: dict[tuple[int, int], float] = {}
    for pair in index.pairs:
        size = len(pair.answers)
        if size < 2 or size >= M:
            continue
        value = pm(M, size)
        for a, b in combinations(sorted(pair.answers), 2):
            key = (a, b)
            entries[key] = entries.get(key, 0.0) + value
    return SPMMatrix(entries, M)


def build_proximity_graph(spm: SPMMatrix, threshold: float, n_entities: int) -> ProximityGraph:
    """Connect an undirected edge wherever the accumulated value strictly exceeds the threshold."""
    if threshold < 0:
        raise ContractError(f"threshold must be non-negative, got {threshold}")
    neighbors: list[list[tuple[int, float]]] = [[] for _ in range(n_entities)]
    for (i, j), w in spm.entries.items():
        if w > threshold:
            neighbors[i].append((j, w))
            neighbors[j].append((i, w))
    for ns in neighbors:
        ns.sort()
    return ProximityGraph(n_entities, threshold, spm.M, neighbors)


def proximity_stats(graph: ProximityGraph) -> dict:
    degrees = np.asarray([len(ns) for ns in graph.neighbors], dtype=np.int64)
    weights = np.asarray([w for ns in graph.neighbors for _, w in ns], dtype=np.float64)
    hist: dict[int, int] = {}
    for d in degrees:
        hist[int(d)] = hist.get(int(d), 0) + 1
    stats = {
        "n_entities": graph.n_entities,
        "n_edges": graph.n_edges,
        "threshold": graph.threshold,
        "M": graph.M,
        "isolated_entities": int((degrees == 0).sum()),
        "degree_histogram": {str(k): v for k, v in sorted(hist.items())},
    }
    if weights.size:
        qs = np.quantile(weights, [0.0, 0.25, 0.5, 0.75, 1.0])
        stats["weight_quantiles"] = {"min": qs[0], "q25": qs[1], "median": qs[2], "q75": qs[3], "max": qs[4]}
    else:
        stats["weight_quantiles"] = None
    return stats


def save_proximity_graph(graph: ProximityGraph, path) -> None:
    """Versioned binary: header then (i, j, weight) records sorted by (i, j)."""
    edges = graph.edge_list()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQdIQ", _VERSION, graph.n_entities, graph.threshold, graph.M, len(edges)))
        for i, j, w in edges[np.lexsort((edges[:, 1], edges[:, 0]))] if len(edges) else []:
            fh.write(struct.pack("<QQd", int(i), int(j), float(w)))


def load_proximity_graph(path) -> ProximityGraph:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ContractError(f"not a proximity-graph file: bad magic {magic!r}")
        version, n_entities, threshold, M, n_edges = struct.unpack("<IQdIQ", fh.read(32))
        if version != _VERSION:
            raise ContractError(f"unsupported proximity-graph version {version}")
        neighbors: list[list[tuple[int, float]]] = [[] for _ in range(n_entities)]
        for _ in range(n_edges):
            i, j, w = struct.unpack("<QQd", fh.read(24))
            neighbors[i].append((j, w))
            neighbors[j].append((i, w))
    for ns in neighbors:
        ns.sort()
    return ProximityGraph(n_entities, threshold, M, neighbors)


def export_proximity_tsv(graph: ProximityGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, w in graph.edge_list():
            fh.write(f"{int(i)}\t{int(j)}\t{float(w)!r}\n")
