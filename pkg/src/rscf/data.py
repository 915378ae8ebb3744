"""Triple files, vocabularies, filtered-evaluation indices, and relation groupings."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DuplicateRelation, MalformedLine, TooFewRelations


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def load_triples(path, fmt: str = "tsv") -> list[tuple[str, str, str]]:
    """Read raw (head, relation, tail) string triples, one per line, in file order.

    fmt="tsv" splits on single tabs; fmt="whitespace" splits on any whitespace run
    (hand-written fixtures). Empty lines are skipped. No deduplication.
    """
    if fmt not in ("tsv", "whitespace"):
        raise ValueError(f"unknown triple format: {fmt!r}")
    triples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t") if fmt == "tsv" else line.split()
            if len(fields) != 3:
                raise MalformedLine(path, lineno, f"expected 3 fields, got {len(fields)}")
            triples.append((fields[0], fields[1], fields[2]))
    return triples


@dataclass
class Vocabulary:
    """Dense, deterministic name<->id maps for entities and relations."""

    entity_names: list[str]
    relation_names: list[str]
    entity_ids: dict[str, int] = field(init=False, repr=False)
    relation_ids: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_ids = {name: i for i, name in enumerate(self.relation_names)}
        if len(self.entity_ids) != len(self.entity_names):
            raise ValueError("duplicate entity names")
        if len(self.relation_ids) != len(self.relation_names):
            raise ValueError("duplicate relation names")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def encode(self, raw: Iterable[tuple[str, str, str]]) -> list[Triple]:
        ent, rel = self.entity_ids, self.relation_ids
        return [Triple(ent[h], rel[r], ent[t]) for h, r, t in raw]

    def to_dict(self) -> dict:
        return {"entities": self.entity_names, "relations": self.relation_names}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["entities"]), list(d["relations"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, s: str) -> "Vocabulary":
        return cls.from_dict(json.loads(s))


def build_vocabulary(*splits: list[tuple[str, str, str]]) -> Vocabulary:
    """Assign ids by first appearance across the splits in the order given."""
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    for split in splits:
        for h, r, t in split:
            if h not in entities:
                entities[h] = len(entities)
            if t not in entities:
                entities[t] = len(entities)
            if r not in relations:
                relations[r] = len(relations)
    return Vocabulary(list(entities), list(relations))


@dataclass
class Dataset:
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    vocabulary: Vocabulary

    def split(self, name: str) -> list[Triple]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def split_array(self, name: str) -> np.ndarray:
        return np.asarray(self.split(name), dtype=np.int64).reshape(-1, 3)

    def all_triples(self) -> list[Triple]:
        return self.train + self.valid + self.test

    @classmethod
    def from_raw(cls, train_raw, valid_raw, test_raw) -> "Dataset":
        vocab = build_vocabulary(train_raw, valid_raw, test_raw)
        return cls(
            train=vocab.encode(train_raw),
            valid=vocab.encode(valid_raw),
            test=vocab.encode(test_raw),
            vocabulary=vocab,
        )

    @classmethod
    def load(cls, train_path, valid_path=None, test_path=None, fmt: str = "tsv") -> "Dataset":
        train_raw = load_triples(train_path, fmt)
        valid_raw = load_triples(valid_path, fmt) if valid_path else []
        test_raw = load_triples(test_path, fmt) if test_path else []
        return cls.from_raw(train_raw, valid_raw, test_raw)

    @classmethod
    def load_dir(cls, directory, fmt: str = "tsv") -> "Dataset":
        """Load train.txt / valid.txt / test.txt from a directory (valid/test optional)."""
        d = Path(directory)
        valid = d / "valid.txt"
        test = d / "test.txt"
        return cls.load(
            d / "train.txt",
            valid if valid.exists() else None,
            test if test.exists() else None,
            fmt,
        )


@dataclass
class FilterIndex:
    """True-triple lookup over train+valid+test for filtered ranking."""

    tail_index: dict[tuple[int, int], set[int]]
    head_index: dict[tuple[int, int], set[int]]

    def true_tails(self, head: int, relation: int) -> set[int]:
        return self.tail_index.get((head, relation), set())

    def true_heads(self, relation: int, tail: int) -> set[int]:
        return self.head_index.get((relation, tail), set())


def build_filter_index(dataset: Dataset) -> FilterIndex:
    tails: dict[tuple[int, int], set[int]] = {}
    heads: dict[tuple[int, int], set[int]] = {}
    for h, r, t in dataset.all_triples():
        tails.setdefault((h, r), set()).add(t)
        heads.setdefault((r, t), set()).add(h)
    return FilterIndex(tails, heads)


@dataclass
class RelationFrequencyBuckets:
    bucket_of: dict[int, int]
    bucket_members: list[list[int]]


def relation_frequency_buckets(
    train: list[Triple], num_relations: int, k: int = 10
) -> RelationFrequencyBuckets:
    """Partition all relations into k buckets by descending train frequency.

    Ties break by relation id ascending. When the count is not divisible by k,
    the earlier (higher-frequency) buckets take the extra relation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if num_relations < k:
        raise TooFewRelations(num_relations, k)
    freq = Counter(t.relation for t in train)
    order = sorted(range(num_relations), key=lambda r: (-freq.get(r, 0), r))
    base, extra = divmod(num_relations, k)
    members: list[list[int]] = []
    start = 0
    for b in range(k):
        size = base + (1 if b < extra else 0)
        members.append(order[start : start + size])
        start += size
    bucket_of = {r: b for b, rel_ids in enumerate(members) for r in rel_ids}
    return RelationFrequencyBuckets(bucket_of, members)


@dataclass
class RelationGroups:
    """Partial map relation-name -> group-name, loaded from a 2-column TSV."""

    group_of: dict[str, str]

    def group_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for g in self.group_of.values():
            seen.setdefault(g)
        return list(seen)

    def resolve(self, vocabulary: Vocabulary) -> tuple[dict[int, str], int]:
        """Map relation ids to group names; returns (map, count of unknown names)."""
        resolved: dict[int, str] = {}
        unknown = 0
        for name, group in self.group_of.items():
            rel_id = vocabulary.relation_ids.get(name)
            if rel_id is None:
                unknown += 1
            else:
                resolved[rel_id] = group
        return resolved, unknown


def load_relation_groups(path) -> RelationGroups:
    group_of: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise MalformedLine(path, lineno, f"expected 2 fields, got {len(fields)}")
            group, relation = fields
            if relation in group_of:
                raise DuplicateRelation(relation)
            group_of[relation] = group
    return RelationGroups(group_of)
