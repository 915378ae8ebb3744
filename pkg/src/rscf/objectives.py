"""Training losses and optimizer steps.

The full objective sums a tail-prediction term, a head-prediction term
(reciprocal relations for tensor models, head-candidate scoring for distance
models), an optional relation-prediction term weighted by rp_weight, and an
optional duality regularizer weighted by dura_weight (tensor models only).
All gradients are exact hand-derived VJPs, checked against central
differences by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as M
from . import transforms as T
from .errors import (
    NonFiniteGradient,
    ShapeMismatch,
    TargetOutOfRange,
    UnsupportedModel,
)
from .tensor import ParameterStore, Rng, init_embeddings

# default search grid for the relation-prediction weight
RP_WEIGHT_GRID = (1.0, 0.5, 0.1, 0.05, 0.01, 0.0)


@dataclass
class LossConfig:
    task: str = "cross_entropy"  # or "self_adversarial"
    rp_weight: float = 0.0
    dura_weight: float = 0.0
    negatives: int = 256
    adv_temperature: float = 1.0
    margin: float | None = None  # None: use the model gamma

    def __post_init__(self):
        if self.task not in ("cross_entropy", "self_adversarial"):
            raise ValueError(f"unknown task loss {self.task!r}")
        if self.rp_weight < 0 or self.dura_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.negatives < 1:
            raise ValueError("need at least one negative sample")


class GradientBuffer:
    """Per-table gradient accumulators with touched-row tracking."""

    def __init__(self, store: ParameterStore):
        self.store = store
        self._dense: dict[str, np.ndarray] = {}
        self._touched: dict[str, np.ndarray] = {}

    def _ensure(self, name: str):
        if name not in self._dense:
            table = self.store.tables[name]
            self._dense[name] = np.zeros_like(table)
            self._touched[name] = np.zeros(table.shape[0], dtype=bool)
        return self._dense[name]

    def add_rows(self, name: str, rows, grads) -> None:
        buf = self._ensure(name)
        rows = np.asarray(rows).reshape(-1)
        grads = np.asarray(grads).reshape(rows.shape[0], buf.shape[1])
        np.add.at(buf, rows, grads)
        self._touched[name][rows] = True

    def add_full(self, name: str, arr) -> None:
        buf = self._ensure(name)
        if arr.shape != buf.shape:
            raise ShapeMismatch(f"gradient shape {arr.shape} != table {buf.shape}")
        buf += arr
        self._touched[name][:] = True

    def grad(self, name: str) -> np.ndarray:
        return self._ensure(name)

    def touched(self, name: str) -> np.ndarray:
        self._ensure(name)
        return self._touched[name]

    def items(self):
        return self._dense.items()

    def dense_grads(self, all_tables: bool = False) -> dict[str, np.ndarray]:
        """Dense gradient per table; optionally include untouched tables as zeros."""
        if all_tables:
            for name in self.store.tables:
                self._ensure(name)
        return dict(self._dense)


# ---------------------------------------------------------------------------
# elementary losses


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(scores: np.ndarray, targets: np.ndarray):
    """Sum of -log softmax(scores)[target] over rows. Returns (value, d_scores)."""
    scores = np.atleast_2d(scores)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    q, c = scores.shape
    if targets.shape != (q,):
        raise ShapeMismatch(f"targets shape {targets.shape} != ({q},)")
    if targets.min() < 0 or targets.max() >= c:
        raise TargetOutOfRange(f"target outside [0, {c})")
    m = np.max(scores, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(scores - m), axis=1))
    picked = scores[np.arange(q), targets]
    value = float(np.sum(lse - picked))
    d = softmax(scores, axis=1)
    d[np.arange(q), targets] -= 1.0
    return value, d


def self_adversarial(scores: np.ndarray, margin: float, temperature: float):
    """RotatE-style negative-weighted loss over rows [positive, negatives...].

    L = -log sig(margin + s+) - sum_i p_i log sig(-margin - s_i),
    p = softmax(temperature * negatives). The softmax weights are part of the
    loss, so the returned gradient is the exact total derivative.
    """
    scores = np.atleast_2d(scores)
    if scores.shape[1] < 2:
        raise ShapeMismatch("need one positive and at least one negative score")
    s_pos = scores[:, 0]
    s_neg = scores[:, 1:]
    p = softmax(temperature * s_neg, axis=1)
    log_pos = _log_sigmoid(margin + s_pos)
    log_neg = _log_sigmoid(-margin - s_neg)
    value = float(np.sum(-log_pos) + np.sum(-(p * log_neg).sum(axis=1)))
    d = np.empty_like(scores)
    d[:, 0] = _sigmoid(margin + s_pos) - 1.0
    weighted_mean = (p * log_neg).sum(axis=1, keepdims=True)
    d[:, 1:] = -temperature * p * (log_neg - weighted_mean) - p * (
        _sigmoid(-margin - s_neg) - 1.0
    )
    return value, d


def task_loss(scores: np.ndarray, target: int, kind: str,
              margin: float = 9.0, adv_temperature: float = 1.0):
    """Single-query task loss over a score batch. For self_adversarial the
    target indexes the positive score; the rest are negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= target < scores.shape[-1]:
        raise TargetOutOfRange(f"target {target} outside [0, {scores.shape[-1]})")
    if kind == "cross_entropy":
        value, d = cross_entropy(scores[None, :], [target])
        return value, d[0]
    if kind == "self_adversarial":
        order = np.concatenate([[target], np.delete(np.arange(scores.shape[-1]), target)])
        value, d_ord = self_adversarial(scores[order][None, :], margin, adv_temperature)
        d = np.empty_like(scores)
        d[order] = d_ord[0]
        return value, d
    raise ValueError(f"unknown task loss {kind!r}")


# ---------------------------------------------------------------------------
# duality regularizer and relation prediction


def dura_penalty(h_hat, rel, t, kind: str):
    """Per-triple penalty  ||h R||^2 + ||h||^2 + ||t||^2 + ||t R^T||^2  with h
    the (possibly filtered) head. Accepts single vectors or batches; returns
    (value, (d_h_hat, d_rel, d_t))."""
    if kind not in M.TDM_KINDS:
        raise UnsupportedModel(f"duality regularizer needs a tensor model, got {kind!r}")
    h_hat = np.atleast_2d(np.asarray(h_hat, dtype=np.float64))
    rel = np.atleast_2d(np.asarray(rel, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    q, qc = M.tdm_query(kind, h_hat, rel)
    qt, qtc = M.tdm_query_t(kind, t, rel)
    value = float(np.sum(q * q) + np.sum(h_hat * h_hat) + np.sum(t * t) + np.sum(qt * qt))
    d_h1, d_r1 = M.tdm_query_vjp(kind, h_hat, rel, qc, 2.0 * q)
    d_t2, d_r2 = M.tdm_query_t_vjp(kind, t, rel, qtc, 2.0 * qt)
    return value, (d_h1 + 2.0 * h_hat, d_r1 + d_r2, d_t2 + 2.0 * t)


def rp_term(model: M.ModelSpec, h_vec, t_vec, relation_table, true_relation: int):
    """Cross-entropy of the true relation under softmax over candidate
    relations, on base embeddings. Returns (value, (d_h, d_t, d_table))."""
    h = np.atleast_2d(np.asarray(h_vec, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t_vec, dtype=np.float64))
    table = np.asarray(relation_table, dtype=np.float64)
    scores, cache = M.relation_scores(model, h, t, table)
    value, d_scores = cross_entropy(scores, [true_relation])
    d_h, d_t, d_table = M.relation_scores_vjp(model, h, t, table, cache, d_scores)
    return value, (d_h[0], d_t[0], d_table)


# ---------------------------------------------------------------------------
# parameter-store construction


def build_store(model: M.ModelSpec, filt: T.FilterSpec, num_entities: int,
                num_relations: int, rng: Rng, init_scheme: str = "gaussian",
                init_scale: float = 1e-3, dtype=np.float64) -> ParameterStore:
    """Allocate and initialize every table a run needs. Tensor models get
    reciprocal relation rows (row j+R answers head queries for relation j)."""
    reciprocal = model.is_tdm
    rel_rows = num_relations * (2 if reciprocal else 1)
    de, dr = model.dim, model.relation_dim
    store = ParameterStore(dtype)
    store.meta = {
        "num_entities": num_entities,
        "num_relations": num_relations,
        "reciprocal": reciprocal,
    }
    store.create("entity", init_embeddings(
        num_entities, de, init_scheme, rng.derive("init:entity"), init_scale, dtype).data)
    store.create("relation", init_embeddings(
        rel_rows, dr, init_scheme, rng.derive("init:relation"), init_scale, dtype).data)

    def _affine(label: str, rows: int, cols: int) -> np.ndarray:
        gen = rng.derive(label).generator()
        return gen.normal(0.0, 1.0, size=(rows, cols)) / np.sqrt(rows)

    if filt.kind in ("rscf", "rscf_linear2"):
        cols = 2 * de if filt.kind == "rscf_linear2" else de
        store.create("a1", _affine("init:a1", dr, cols))
    elif filt.kind == "sfbr_diag":
        store.create("sfbr_w", np.ones((rel_rows, de)))
        store.create("sfbr_b", np.zeros((rel_rows, de)))
    elif filt.kind == "sfbr_n":
        store.create("sfbr_w", _affine("init:sfbr_w", rel_rows, de) * np.sqrt(rel_rows / de))
    elif filt.kind == "sfbr_linear2":
        half = de // 2
        if de % 2 != 0:
            raise ShapeMismatch("linear2 filters need an even entity dimension")
        row = np.concatenate([np.ones(half), np.zeros(de), np.ones(half)])
        store.create("sfbr_w", np.tile(row, (rel_rows, 1)))
    if filt.rt_enabled:
        store.create("a2", _affine("init:a2", de, dr))
        store.create("a3", _affine("init:a3", de, dr))
    return store


# ---------------------------------------------------------------------------
# the full objective


def sample_negatives(batch: np.ndarray, num_entities: int, k: int, rng: Rng):
    """Uniform corruption candidates: (tail_negatives, head_negatives), (B, k) each."""
    gen = rng.generator()
    b = batch.shape[0]
    return (gen.integers(0, num_entities, size=(b, k)),
            gen.integers(0, num_entities, size=(b, k)))


def total_objective(batch, store: ParameterStore, model: M.ModelSpec,
                    filt: T.FilterSpec, loss: LossConfig, negatives=None,
                    filter_active: bool = True):
    """Objective value and gradients for a batch of (head, relation, tail) rows.

    negatives: (tail_negs, head_negs) index arrays, required for distance
    models (sampled by the caller so the objective itself is deterministic).
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    buf = GradientBuffer(store)
    if batch.shape[0] == 0:
        return 0.0, buf
    eff = filt if filter_active else T.INERT_FILTER
    if model.is_tdm:
        if loss.task != "cross_entropy":
            raise ValueError("tensor models train with cross_entropy")
        if loss.dura_weight > 0 and model.kind not in M.TDM_KINDS:
            raise UnsupportedModel(model.kind)
        value = _tdm_objective(batch, store, model, eff, loss, buf)
    else:
        if loss.task != "self_adversarial":
            raise ValueError("distance models train with self_adversarial")
        if loss.dura_weight > 0:
            raise UnsupportedModel("duality regularizer is tensor-model only")
        if negatives is None:
            raise ValueError("distance models need pre-sampled negatives")
        value = _dbm_objective(batch, store, model, eff, loss, negatives, buf)
    if loss.rp_weight > 0:
        value += _rp_objective(batch, store, model, loss, buf)
    return value, buf


def _margin(model: M.ModelSpec, loss: LossConfig) -> float:
    return model.gamma if loss.margin is None else loss.margin


def _tdm_objective(batch, store, model, eff, loss, buf) -> float:
    kind = model.kind
    ent = store["entity"]
    rel_table = store["relation"]
    num_rel = store.meta["num_relations"]

    lhs_ids = np.concatenate([batch[:, 0], batch[:, 2]])
    rel_rows = np.concatenate([batch[:, 1], batch[:, 1] + num_rel])
    tgt_ids = np.concatenate([batch[:, 2], batch[:, 0]])

    lhs = ent[lhs_ids]
    rel = rel_table[rel_rows]
    op = T.et_build(eff, store, rel, rel_rows, model.dim)
    lhs_f = T.et_apply(op, lhs)

    if eff.rt_enabled:
        head_factor = T.rt_factor(store, "a2", lhs, eff.p, eff.zero_change_epsilon)
        rel_t = head_factor.factor * rel
    else:
        head_factor = None
        rel_t = rel

    q, q_cache = M.tdm_query(kind, lhs_f, rel_t)
    scores = q @ ent.T
    value, d_scores = cross_entropy(scores, tgt_ids)

    d_q = d_scores @ ent
    buf.add_full("entity", d_scores.T @ q)
    d_lhs_f, d_rel_t = M.tdm_query_vjp(kind, lhs_f, rel_t, q_cache, d_q)
    d_rel = np.zeros_like(rel)

    if loss.dura_weight > 0:
        w = loss.dura_weight
        tgt = ent[tgt_ids]
        qd, qd_cache = M.tdm_query(kind, lhs_f, rel)
        qt, qt_cache = M.tdm_query_t(kind, tgt, rel)
        value += w * float(np.sum(qd * qd) + np.sum(lhs_f * lhs_f)
                           + np.sum(tgt * tgt) + np.sum(qt * qt))
        d_h1, d_r1 = M.tdm_query_vjp(kind, lhs_f, rel, qd_cache, 2.0 * w * qd)
        d_t2, d_r2 = M.tdm_query_t_vjp(kind, tgt, rel, qt_cache, 2.0 * w * qt)
        d_lhs_f += d_h1 + 2.0 * w * lhs_f
        d_rel += d_r1 + d_r2
        buf.add_rows("entity", tgt_ids, d_t2 + 2.0 * w * tgt)

    if head_factor is not None:
        d_rel += d_rel_t * head_factor.factor
        d_factor = d_rel_t * rel
        d_lhs_rt = T.rt_factor_vjp(head_factor, d_factor, buf, eff.p)
    else:
        d_rel += d_rel_t
        d_lhs_rt = 0.0

    d_lhs, d_mult, d_bias = T.et_apply_vjp(op, lhs, d_lhs_f)
    if op is not None:
        d_rel_et = T.et_param_vjp(eff, op, d_mult, d_bias, buf)
        if d_rel_et is not None:
            d_rel += d_rel_et

    buf.add_rows("entity", lhs_ids, d_lhs + d_lhs_rt)
    buf.add_rows("relation", rel_rows, d_rel)
    return value


def _dbm_objective(batch, store, model, eff, loss, negatives, buf) -> float:
    kind = model.kind
    p = model.distance_p
    ent = store["entity"]
    rel_table = store["relation"]
    margin = _margin(model, loss)
    neg_tails, neg_heads = negatives
    b = batch.shape[0]
    neg_tails = np.asarray(neg_tails, dtype=np.int64).reshape(b, -1)
    neg_heads = np.asarray(neg_heads, dtype=np.int64).reshape(b, -1)

    r_ids = batch[:, 1]
    rel = rel_table[r_ids]
    op = T.et_build(eff, store, rel, r_ids, model.dim)
    apply_head = op is not None
    apply_tail = op is not None and eff.apply_to == "head_and_tail"

    value = 0.0
    d_rel = np.zeros_like(rel)
    d_mult_total = None
    d_bias_total = None

    def _accumulate_factor(d_mult, d_bias):
        nonlocal d_mult_total, d_bias_total
        if d_mult is None:
            return
        d_mult_total = d_mult if d_mult_total is None else d_mult_total + d_mult
        if d_bias is not None:
            d_bias_total = d_bias if d_bias_total is None else d_bias_total + d_bias

    for direction in ("tail", "head"):
        if direction == "tail":
            fixed_ids = batch[:, 0]
            cand_ids = np.concatenate([batch[:, 2][:, None], neg_tails], axis=1)
            fixed_is_head = True
            fixed_side_on = apply_head
            cand_side_on = apply_tail
        else:
            fixed_ids = batch[:, 2]
            cand_ids = np.concatenate([batch[:, 0][:, None], neg_heads], axis=1)
            fixed_is_head = False
            fixed_side_on = apply_tail
            cand_side_on = apply_head

        fixed = ent[fixed_ids]
        cand = ent[cand_ids]
        fixed_f = T.et_apply(op, fixed) if fixed_side_on else fixed
        cand_f = T.et_apply(op, cand) if cand_side_on else cand

        if eff.rt_enabled:
            fixed_rt = T.rt_factor(store, "a2" if fixed_is_head else "a3",
                                   fixed, eff.p, eff.zero_change_epsilon)
            cand_rt = T.rt_factor(store, "a3" if fixed_is_head else "a2",
                                  cand, eff.p, eff.zero_change_epsilon)
            rel_t = fixed_rt.factor[:, None, :] * cand_rt.factor * rel[:, None, :]
        else:
            fixed_rt = cand_rt = None
            rel_t = np.broadcast_to(rel[:, None, :], cand.shape[:2] + (rel.shape[1],))

        if fixed_is_head:
            sc, sc_cache = M.dbm_scores(kind, fixed_f[:, None, :], rel_t, cand_f, p)
        else:
            sc, sc_cache = M.dbm_scores(kind, cand_f, rel_t, fixed_f[:, None, :], p)
        part, d_sc = self_adversarial(sc, margin, loss.adv_temperature)
        value += part

        d_a, d_r3, d_b = M.dbm_scores_vjp(kind, sc_cache, d_sc, p)
        if fixed_is_head:
            d_fixed_f, d_cand_f = d_a.sum(axis=1), d_b
        else:
            d_fixed_f, d_cand_f = d_b.sum(axis=1), d_a

        if fixed_rt is not None:
            d_rel += (d_r3 * fixed_rt.factor[:, None, :] * cand_rt.factor).sum(axis=1)
            d_fixed_factor = (d_r3 * cand_rt.factor * rel[:, None, :]).sum(axis=1)
            d_cand_factor = d_r3 * fixed_rt.factor[:, None, :] * rel[:, None, :]
            d_fixed_rt = T.rt_factor_vjp(fixed_rt, d_fixed_factor, buf, eff.p)
            d_cand_rt = T.rt_factor_vjp(cand_rt, d_cand_factor, buf, eff.p)
        else:
            d_rel += d_r3.sum(axis=1)
            d_fixed_rt = 0.0
            d_cand_rt = 0.0

        if fixed_side_on:
            d_fixed, d_mult, d_bias = T.et_apply_vjp(op, fixed, d_fixed_f)
            _accumulate_factor(d_mult, d_bias)
        else:
            d_fixed = d_fixed_f
        if cand_side_on:
            d_cand, d_mult, d_bias = T.et_apply_vjp(op, cand, d_cand_f)
            _accumulate_factor(d_mult, d_bias)
        else:
            d_cand = d_cand_f

        buf.add_rows("entity", fixed_ids, d_fixed + d_fixed_rt)
        buf.add_rows("entity", cand_ids, (d_cand + d_cand_rt).reshape(-1, model.dim))

    if op is not None and d_mult_total is not None:
        d_rel_et = T.et_param_vjp(eff, op, d_mult_total, d_bias_total, buf)
        if d_rel_et is not None:
            d_rel += d_rel_et
    buf.add_rows("relation", r_ids, d_rel)
    return value


def _rp_objective(batch, store, model, loss, buf) -> float:
    """Relation prediction, once per triple, on base embeddings over the base
    relation rows."""
    lam = loss.rp_weight
    ent = store["entity"]
    num_rel = store.meta["num_relations"]
    base_rows = store["relation"][:num_rel]
    h = ent[batch[:, 0]]
    t = ent[batch[:, 2]]
    scores, cache = M.relation_scores(model, h, t, base_rows)
    value, d_scores = cross_entropy(scores, batch[:, 1])
    d_scores *= lam
    d_h, d_t, d_table = M.relation_scores_vjp(model, h, t, base_rows, cache, d_scores)
    buf.add_rows("entity", batch[:, 0], d_h)
    buf.add_rows("entity", batch[:, 2], d_t)
    buf.add_rows("relation", np.arange(num_rel), d_table)
    return lam * value


# ---------------------------------------------------------------------------
# optimizer


def optimizer_step(store: ParameterStore, buf: GradientBuffer,
                   optimizer: str = "adagrad", lr: float = 0.1,
                   adagrad_eps: float = 1e-10) -> None:
    """Apply one update to every touched, trainable row. Adagrad keeps
    per-element squared-gradient accumulators in the store."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if optimizer not in ("adagrad", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    for name, grad in buf.items():
        if not store.trainable.get(name, False):
            continue
        mask = buf.touched(name)
        if not mask.any():
            continue
        table = store.tables[name]
        acc = store.acc[name]
        if mask.all():
            g = grad
            if not np.isfinite(g).all():
                raise NonFiniteGradient(name)
            if optimizer == "adagrad":
                acc += g * g
                table -= lr * g / (np.sqrt(acc) + adagrad_eps)
            else:
                table -= lr * g
        else:
            rows = np.nonzero(mask)[0]
            g = grad[rows]
            if not np.isfinite(g).all():
                raise NonFiniteGradient(name)
            if optimizer == "adagrad":
                acc[rows] += g * g
                table[rows] -= lr * g / (np.sqrt(acc[rows]) + adagrad_eps)
            else:
                table[rows] -= lr * g
