"""Triple-store ingestion, vocabulary interning, and graph transforms.

Datasets arrive as tab-separated ``head<TAB>relation<TAB>tail`` files, one
triple per line, the de-facto distribution format of the standard link
prediction benchmarks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

INVERSE_SUFFIX = "_reverse"


class DataError(Exception):
    """Malformed or inconsistent input data."""


class ContractError(Exception):
    """An operation was called outside its contract."""


class Vocabulary:
    """Dense interning of surface strings; first-seen order is preserved."""

    def __init__(self):
        self._to_id: dict[str, int] = {}
        self._to_surface: list[str] = []

    def intern(self, surface: str) -> int:
        idx = self._to_id.get(surface)
        if idx is None:
            idx = len(self._to_surface)
            self._to_id[surface] = idx
            self._to_surface.append(surface)
        return idx

    def lookup(self, surface: str) -> int:
        return self._to_id[surface]

    def surface(self, idx: int) -> str:
        return self._to_surface[idx]

    def __contains__(self, surface: str) -> bool:
        return surface in self._to_id

    def __len__(self) -> int:
        return len(self._to_surface)

    def surfaces(self) -> list[str]:
        return list(self._to_surface)


@dataclass
class KnowledgeGraph:
    """Immutable triple store with split tags and interned vocabularies.

    Triples are int64 arrays of shape [n, 3] (head, relation, tail).
    """

    entities: Vocabulary
    relations: Vocabulary
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    augmented: bool = False
    num_raw_relations: int | None = None
    report: dict = field(default_factory=dict)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def raw_train(self) -> np.ndarray:
        """Train triples before inverse augmentation."""
        if not self.augmented:
            return self.train
        return self.train[: len(self.train) // 2]

    def inverse_of(self, rel: int) -> int:
        if not self.augmented:
            raise ContractError("inverse relations exist only after augmentation")
        n = self.num_raw_relations
        return rel + n if rel < n else rel - n


def _parse_split(path, entities: Vocabulary, relations: Vocabulary) -> np.ndarray:
    triples = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            if line in seen:
                raise DataError(f"{path}:{lineno}: duplicate triple {line!r} within split")
            seen.add(line)
            h, r, t = fields
            triples.append((entities.intern(h), relations.intern(r), entities.intern(t)))
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def ingest_dataset(train_path, valid_path, test_path) -> KnowledgeGraph:
    """Read the three split files and intern all vocabularies.

    Interning order is deterministic: first occurrence in train, then
    valid, then test. Entities or relations appearing only outside the
    train split are accepted and flagged in the ingestion report.
    """
    entities = Vocabulary()
    relations = Vocabulary()
    train = _parse_split(train_path, entities, relations)
    n_e_train, n_r_train = len(entities), len(relations)
    valid = _parse_split(valid_path, entities, relations)
    test = _parse_split(test_path, entities, relations)

    unseen_entities = [entities.surface(i) for i in range(n_e_train, len(entities))]
    unseen_relations = [relations.surface(i) for i in range(n_r_train, len(relations))]
    report = {
        "n_entities": len(entities),
        "n_relations": len(relations),
        "counts": {"train": len(train), "valid": len(valid), "test": len(test)},
        "unseen_entities": unseen_entities,
        "unseen_relations": unseen_relations,
    }
    return KnowledgeGraph(entities, relations, train, valid, test, report=report)


def augment_inverse(kg: KnowledgeGraph) -> KnowledgeGraph:
    """Add one inverse train triple (t, r_inv, h) per original (h, r, t).

    Inverse relation ids occupy [n_r, 2*n_r); valid/test splits are left
    untouched (inverse evaluation queries are generated at ranking time).
    """
    if kg.augmented:
        raise ContractError("knowledge graph is already augmented")
    n_r = kg.n_relations
    relations = Vocabulary()
    for surface in kg.relations.surfaces():
        relations.intern(surface)
    for surface in kg.relations.surfaces():
        inv = surface + INVERSE_SUFFIX
        if inv in relations:
            raise DataError(f"inverse name collision: {inv!r} already exists")
        relations.intern(inv)

    if len(kg.train):
        inverse = kg.train[:, [2, 1, 0]].copy()
        inverse[:, 1] += n_r
        train = np.concatenate([kg.train, inverse], axis=0)
    else:
        train = kg.train
    return KnowledgeGraph(
        kg.entities,
        relations,
        train,
        kg.valid,
        kg.test,
        augmented=True,
        num_raw_relations=n_r,
        report=dict(kg.report),
    )


def sample_edge_dropout(kg: KnowledgeGraph, seed: int, drop_rate: float) -> np.ndarray:
    """Indices of train triples kept for one batch's message-passing view.

    Each triple is kept independently with probability 1 - drop_rate;
    deterministic for a fixed seed.
    """
    if not 0.0 <= drop_rate <= 1.0:
        raise ContractError(f"drop_rate must be in [0,1], got {drop_rate}")
    if not kg.augmented:
        raise ContractError("edge dropout operates on the augmented train split")
    n = len(kg.train)
    if drop_rate == 0.0:
        return np.arange(n, dtype=np.int64)
    if drop_rate == 1.0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.random(n) >= drop_rate
    return np.flatnonzero(keep).astype(np.int64)


def save_kg(kg: KnowledgeGraph, path) -> None:
    np.savez_compressed(
        path,
        entities=np.asarray(kg.entities.surfaces(), dtype=object),
        relations=np.asarray(kg.relations.surfaces(), dtype=object),
        train=kg.train,
        valid=kg.valid,
        test=kg.test,
        augmented=np.asarray([kg.augmented]),
        num_raw_relations=np.asarray([kg.num_raw_relations or -1]),
        report=np.asarray([json.dumps(kg.report)], dtype=object),
    )


def load_kg(path) -> KnowledgeGraph:
    with np.load(path, allow_pickle=True) as z:
        entities = Vocabulary()
        for s in z["entities"]:
            entities.intern(str(s))
        relations = Vocabulary()
        for s in z["relations"]:
            relations.intern(str(s))
        num_raw = int(z["num_raw_relations"][0])
        return KnowledgeGraph(
            entities,
            relations,
            z["train"].astype(np.int64).reshape(-1, 3),
            z["valid"].astype(np.int64).reshape(-1, 3),
            z["test"].astype(np.int64).reshape(-1, 3),
            augmented=bool(z["augmented"][0]),
            num_raw_relations=None if num_raw < 0 else num_raw,
            report=json.loads(str(z["report"][0])),
        )
