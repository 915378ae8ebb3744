"""Filtered-ranking evaluation: MRR and Hits@N, overall and per grouping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import transforms as T
from .data import (
    Dataset,
    RelationFrequencyBuckets,
    RelationGroups,
    build_filter_index,
    relation_frequency_buckets,
)
from .errors import EmptySplit, GoldOutOfRange

DEFAULT_HITS = (1, 3, 10)


def filtered_rank(gold: int, scores: np.ndarray, known_true) -> float:
    """Mid-rank of the gold candidate after removing other known-true ids.

    rank = 1 + #{better survivors} + #{tied survivors != gold} / 2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= gold < n:
        raise GoldOutOfRange(f"gold {gold} outside [0, {n})")
    keep = np.ones(n, dtype=bool)
    for e in known_true:
        if e != gold and 0 <= e < n:
            keep[e] = False
    s_gold = scores[gold]
    kept = scores[keep]
    better = int(np.sum(kept > s_gold))
    tied = int(np.sum(kept == s_gold)) - 1  # gold survives by construction
    return 1.0 + better + 0.5 * tied


class CandidateScorer:
    """Scores every candidate entity for (lhs, relation) queries, applying the
    run's filter exactly as in training.

    Tensor models answer head queries through the reciprocal relation row and
    never transform candidates; distance models scan candidates directly with
    the candidate-side filter active.
    """

    def __init__(self, store, model: M.ModelSpec, filt: T.FilterSpec):
        self.store = store
        self.model = model
        self.filt = filt

    def _tdm_query_scores(self, lhs_id: int, rel_row: int) -> np.ndarray:
        store, model, filt = self.store, self.model, self.filt
        ent = store["entity"]
        rel = store["relation"][np.asarray([rel_row])]
        lhs = ent[np.asarray([lhs_id])]
        op = T.et_build(filt, store, rel, np.asarray([rel_row]), model.dim)
        lhs_f = T.et_apply(op, lhs)
        if filt.rt_enabled:
            rel_t = T.rt_factor(store, "a2", lhs, filt.p, filt.zero_change_epsilon).factor * rel
        else:
            rel_t = rel
        q, _ = M.tdm_query(model.kind, lhs_f, rel_t)
        return ent @ q[0]

    def _dbm_scores(self, fixed_id: int, rel_id: int, fixed_is_head: bool) -> np.ndarray:
        store, model, filt = self.store, self.model, self.filt
        ent = store["entity"]
        rel = store["relation"][np.asarray([rel_id])]
        op = T.et_build(filt, store, rel, np.asarray([rel_id]), model.dim)
        head_on = op is not None
        tail_on = op is not None and filt.apply_to == "head_and_tail"
        fixed = ent[np.asarray([fixed_id])]
        cand = ent[None, :, :]
        fixed_side_on = head_on if fixed_is_head else tail_on
        cand_side_on = tail_on if fixed_is_head else head_on
        fixed_f = T.et_apply(op, fixed) if fixed_side_on else fixed
        cand_f = T.et_apply(op, cand) if cand_side_on else cand
        if filt.rt_enabled:
            eps = filt.zero_change_epsilon
            f_fix = T.rt_factor(store, "a2" if fixed_is_head else "a3", fixed, filt.p, eps)
            f_cand = T.rt_factor(store, "a3" if fixed_is_head else "a2", cand, filt.p, eps)
            rel_t = f_fix.factor[:, None, :] * f_cand.factor * rel[:, None, :]
        else:
            rel_t = np.broadcast_to(rel[:, None, :], (1, ent.shape[0], rel.shape[1]))
        if fixed_is_head:
            sc, _ = M.dbm_scores(model.kind, fixed_f[:, None, :], rel_t, cand_f,
                                 model.distance_p)
        else:
            sc, _ = M.dbm_scores(model.kind, cand_f, rel_t, fixed_f[:, None, :],
                                 model.distance_p)
        return sc[0]

    def tail_scores(self, head_id: int, rel_id: int) -> np.ndarray:
        if self.model.is_tdm:
            return self._tdm_query_scores(head_id, rel_id)
        return self._dbm_scores(head_id, rel_id, fixed_is_head=True)

    def head_scores(self, tail_id: int, rel_id: int) -> np.ndarray:
        if self.model.is_tdm:
            num_rel = self.store.meta["num_relations"]
            return self._tdm_query_scores(tail_id, rel_id + num_rel)
        return self._dbm_scores(tail_id, rel_id, fixed_is_head=False)


@dataclass
class RankResult:
    head: int
    relation: int
    tail: int
    direction: str  # "tail" or "head"
    rank: float


@dataclass
class EvalReport:
    mrr: float
    hits: dict[int, float]
    query_count: int
    per_relation: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "query_count": self.query_count,
            "per_relation": self.per_relation,
        }


def _metrics(ranks: np.ndarray, hits_at) -> tuple[float, dict[int, float]]:
    mrr = float(np.mean(1.0 / ranks))
    hits = {int(n): float(np.mean(ranks <= n)) for n in hits_at}
    return mrr, hits


def _aggregate(results: list[RankResult], vocabulary, hits_at) -> EvalReport:
    if not results:
        return EvalReport(0.0, {int(n): 0.0 for n in hits_at}, 0, [])
    ranks = np.asarray([r.rank for r in results], dtype=np.float64)
    mrr, hits = _metrics(ranks, hits_at)
    by_rel: dict[int, list[float]] = {}
    for r in results:
        by_rel.setdefault(r.relation, []).append(r.rank)
    per_relation = []
    for rel_id in sorted(by_rel):
        rel_ranks = np.asarray(by_rel[rel_id])
        rel_mrr, rel_hits = _metrics(rel_ranks, hits_at)
        row = {
            "relation": vocabulary.relation_names[rel_id] if vocabulary else str(rel_id),
            "relation_id": rel_id,
            "queries": int(rel_ranks.size),
            "mrr": rel_mrr,
        }
        row.update({f"hits{n}": v for n, v in sorted(rel_hits.items())})
        per_relation.append(row)
    return EvalReport(mrr, hits, len(results), per_relation)


def collect_ranks(checkpoint, dataset: Dataset, split: str,
                  directions: str = "both") -> list[RankResult]:
    """Filtered rank of every query in the split, in deterministic order."""
    if directions not in ("tail", "head", "both"):
        raise ValueError(f"unknown directions {directions!r}")
    triples = dataset.split(split)
    if not triples:
        raise EmptySplit(split)
    index = build_filter_index(dataset)
    scorer = CandidateScorer(checkpoint.store, checkpoint.model, checkpoint.filter)
    results = []
    for h, r, t in triples:
        if directions in ("tail", "both"):
            scores = scorer.tail_scores(h, r)
            rank = filtered_rank(t, scores, index.true_tails(h, r))
            results.append(RankResult(h, r, t, "tail", rank))
        if directions in ("head", "both"):
            scores = scorer.head_scores(t, r)
            rank = filtered_rank(h, scores, index.true_heads(r, t))
            results.append(RankResult(h, r, t, "head", rank))
    return results


def evaluate_split(checkpoint, dataset: Dataset, split: str,
                   directions: str = "both", hits_at=DEFAULT_HITS) -> EvalReport:
    results = collect_ranks(checkpoint, dataset, split, directions)
    return _aggregate(results, dataset.vocabulary, hits_at)


def evaluate_grouped(checkpoint, dataset: Dataset, grouping, split: str = "test",
                     directions: str = "both", hits_at=DEFAULT_HITS,
                     num_buckets: int = 10) -> dict[str, EvalReport]:
    """Per-group metrics. grouping is one of:

    - "frequency" or a RelationFrequencyBuckets: train-frequency buckets,
      reported as "bucket_0" (most frequent) .. "bucket_k-1";
    - a RelationGroups: named groups, ungrouped relations under "_other";
    - an int relation id: that relation only, under its name.
    """
    results = collect_ranks(checkpoint, dataset, split, directions)
    vocab = dataset.vocabulary
    seed_names: list[str] = []

    if grouping == "frequency" or isinstance(grouping, RelationFrequencyBuckets):
        buckets = (
            grouping
            if isinstance(grouping, RelationFrequencyBuckets)
            else relation_frequency_buckets(dataset.train, vocab.num_relations, num_buckets)
        )
        width = len(str(len(buckets.bucket_members) - 1))
        seed_names = [f"bucket_{b:0{width}d}"
                      for b in range(len(buckets.bucket_members))]

        def group_name_of(rel_id):
            return f"bucket_{buckets.bucket_of[rel_id]:0{width}d}"

    elif isinstance(grouping, RelationGroups):
        resolved, _unknown = grouping.resolve(vocab)
        seed_names = grouping.group_names()

        def group_name_of(rel_id):
            return resolved.get(rel_id, "_other")

    elif isinstance(grouping, int):
        target = grouping
        seed_names = [vocab.relation_names[target]]

        def group_name_of(rel_id):
            return vocab.relation_names[rel_id] if rel_id == target else None

    else:
        raise ValueError(f"unsupported grouping {grouping!r}")

    # groups with no queries still report (zero counts), so bucket layouts
    # stay fixed across runs
    partition: dict[str, list[RankResult]] = {name: [] for name in seed_names}
    for res in results:
        name = group_name_of(res.relation)
        if name is not None:
            partition.setdefault(name, []).append(res)
    return {
        name: _aggregate(members, vocab, hits_at)
        for name, members in sorted(partition.items())
    }
