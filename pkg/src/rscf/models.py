"""Score functions for distance-based and tensor-decomposition models.

Every kind exposes "higher is better" scores; distance models return negated
p-norm distances. Batched kernels (prefix tdm_/dbm_/relation_) carry explicit
VJPs so the training objective can assemble exact analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

DBM_KINDS = ("transe", "rotate")
TDM_KINDS = ("cp", "complex", "rescal")
MODEL_KINDS = DBM_KINDS + TDM_KINDS


@dataclass
class ModelSpec:
    kind: str
    dim: int
    distance_p: int = 2
    gamma: float = 9.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind in ("rotate", "complex") and self.dim % 2 != 0:
            raise ValueError(f"{self.kind} requires an even dimension")
        if self.distance_p not in (1, 2):
            raise ValueError("distance_p must be 1 or 2")

    @property
    def is_tdm(self) -> bool:
        return self.kind in TDM_KINDS

    @property
    def is_dbm(self) -> bool:
        return self.kind in DBM_KINDS

    @property
    def relation_dim(self) -> int:
        if self.kind == "rotate":
            return self.dim // 2
        if self.kind == "rescal":
            return self.dim * self.dim
        return self.dim


def _halves(v: np.ndarray):
    half = v.shape[-1] // 2
    return v[..., :half], v[..., half:]


def _vec_pnorm(v: np.ndarray, p: int) -> np.ndarray:
    if p == 2:
        return np.sqrt(np.sum(v * v, axis=-1))
    return np.sum(np.abs(v), axis=-1)


def score(model: ModelSpec, h_vec, r_vec, t_vec) -> float:
    """Single-triple score; inputs are whatever embeddings the caller scores
    (post-transformation when filters are active)."""
    h = np.asarray(h_vec, dtype=np.float64)
    r = np.asarray(r_vec, dtype=np.float64)
    t = np.asarray(t_vec, dtype=np.float64)
    if h.shape[-1] != model.dim or t.shape[-1] != model.dim:
        raise ShapeMismatch(f"entity dim {h.shape[-1]}/{t.shape[-1]} != {model.dim}")
    if r.shape[-1] != model.relation_dim:
        raise ShapeMismatch(f"relation dim {r.shape[-1]} != {model.relation_dim}")
    kind = model.kind
    if kind == "transe":
        return -float(_vec_pnorm(h + r - t, model.distance_p))
    if kind == "rotate":
        hr = _complex_rotate(h, r)
        return -float(_vec_pnorm(hr - t, model.distance_p))
    if kind == "cp":
        return float(np.sum(h * r * t))
    if kind == "complex":
        h1, h2 = _halves(h)
        r1, r2 = _halves(r)
        t1, t2 = _halves(t)
        return float(np.sum((h1 * r1 - h2 * r2) * t1 + (h1 * r2 + h2 * r1) * t2))
    if kind == "rescal":
        m = r.reshape(model.dim, model.dim)
        return float(h @ m @ t)
    raise ValueError(kind)


def score_all_tails(model: ModelSpec, h_vec, r_vec, entity_table,
                    tails=None, relations=None) -> np.ndarray:
    """Scores of (h, r, e) for every candidate row e.

    tails: optional pre-transformed candidate matrix (defaults to the raw
    entity table — the identity transformation). relations: optional
    per-candidate relation matrix for entity-conditioned relation transforms.
    """
    h = np.asarray(h_vec, dtype=np.float64)
    cand = np.asarray(entity_table if tails is None else tails, dtype=np.float64)
    if cand.ndim != 2 or cand.shape[1] != model.dim:
        raise ShapeMismatch(f"candidate table shape {cand.shape} != (*, {model.dim})")
    if h.shape != (model.dim,):
        raise ShapeMismatch(f"head shape {h.shape} != ({model.dim},)")
    if relations is None:
        rel = np.asarray(r_vec, dtype=np.float64)
        if rel.shape != (model.relation_dim,):
            raise ShapeMismatch(f"relation shape {rel.shape} != ({model.relation_dim},)")
        rel = np.broadcast_to(rel, (cand.shape[0], model.relation_dim))
    else:
        rel = np.asarray(relations, dtype=np.float64)
        if rel.shape != (cand.shape[0], model.relation_dim):
            raise ShapeMismatch(f"relation matrix shape {rel.shape}")
    kind = model.kind
    if kind in DBM_KINDS:
        pred = _dbm_predict(kind, np.broadcast_to(h, cand.shape), rel)
        return -_vec_pnorm(pred - cand, model.distance_p)
    if relations is None:
        q, _ = tdm_query(kind, h[None, :], np.ascontiguousarray(rel[:1]))
        return cand @ q[0]
    qs, _ = tdm_query(kind, np.broadcast_to(h, cand.shape), rel)
    return np.sum(qs * cand, axis=-1)


def score_all_relations(model: ModelSpec, h_vec, t_vec, relation_table) -> np.ndarray:
    """Scores of (h, r_j, t) over every relation row, on base embeddings."""
    h = np.asarray(h_vec, dtype=np.float64)
    t = np.asarray(t_vec, dtype=np.float64)
    rel = np.asarray(relation_table, dtype=np.float64)
    if rel.ndim != 2 or rel.shape[1] != model.relation_dim:
        raise ShapeMismatch(f"relation table shape {rel.shape} != (*, {model.relation_dim})")
    scores, _ = relation_scores(model, h[None, :], t[None, :], rel)
    return scores[0]


# ---------------------------------------------------------------------------
# tensor-decomposition kernels: score(h, r, t) = <query(h, r), t>


def tdm_query(kind: str, lhs: np.ndarray, rel: np.ndarray):
    """Query vector q with score = q . t. Returns (q, cache)."""
    if kind == "cp":
        return lhs * rel, None
    if kind == "complex":
        l1, l2 = _halves(lhs)
        r1, r2 = _halves(rel)
        return np.concatenate([l1 * r1 - l2 * r2, l1 * r2 + l2 * r1], axis=-1), None
    if kind == "rescal":
        n = lhs.shape[-1]
        m = rel.reshape(rel.shape[:-1] + (n, n))
        return np.einsum("...i,...ij->...j", lhs, m), m
    raise ValueError(f"not a tensor-decomposition kind: {kind}")


def tdm_query_vjp(kind: str, lhs, rel, cache, dq):
    if kind == "cp":
        return dq * rel, dq * lhs
    if kind == "complex":
        l1, l2 = _halves(lhs)
        r1, r2 = _halves(rel)
        d1, d2 = _halves(dq)
        d_lhs = np.concatenate([d1 * r1 + d2 * r2, -d1 * r2 + d2 * r1], axis=-1)
        d_rel = np.concatenate([d1 * l1 + d2 * l2, -d1 * l2 + d2 * l1], axis=-1)
        return d_lhs, d_rel
    if kind == "rescal":
        m = cache
        d_lhs = np.einsum("...j,...ij->...i", dq, m)
        d_m = np.einsum("...i,...j->...ij", lhs, dq)
        return d_lhs, d_m.reshape(rel.shape)
    raise ValueError(kind)


def tdm_query_t(kind: str, rhs: np.ndarray, rel: np.ndarray):
    """Transposed query q' = rhs R^T (head-prediction dual used by the
    duality regularizer)."""
    if kind == "cp":
        return rhs * rel, None
    if kind == "complex":
        t1, t2 = _halves(rhs)
        r1, r2 = _halves(rel)
        return np.concatenate([t1 * r1 + t2 * r2, t2 * r1 - t1 * r2], axis=-1), None
    if kind == "rescal":
        n = rhs.shape[-1]
        m = rel.reshape(rel.shape[:-1] + (n, n))
        return np.einsum("...j,...ij->...i", rhs, m), m
    raise ValueError(f"not a tensor-decomposition kind: {kind}")


def tdm_query_t_vjp(kind: str, rhs, rel, cache, dq):
    if kind == "cp":
        return dq * rel, dq * rhs
    if kind == "complex":
        t1, t2 = _halves(rhs)
        r1, r2 = _halves(rel)
        d1, d2 = _halves(dq)
        d_rhs = np.concatenate([d1 * r1 - d2 * r2, d1 * r2 + d2 * r1], axis=-1)
        d_rel = np.concatenate([d1 * t1 + d2 * t2, d1 * t2 - d2 * t1], axis=-1)
        return d_rhs, d_rel
    if kind == "rescal":
        m = cache
        d_rhs = np.einsum("...i,...ij->...j", dq, m)
        d_m = np.einsum("...i,...j->...ij", dq, rhs)
        return d_rhs, d_m.reshape(rel.shape)
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# distance-model kernels


def _complex_rotate(h: np.ndarray, phases: np.ndarray) -> np.ndarray:
    a, b = _halves(h)
    c, s = np.cos(phases), np.sin(phases)
    return np.concatenate([a * c - b * s, a * s + b * c], axis=-1)


def _dbm_predict(kind: str, h: np.ndarray, rel: np.ndarray) -> np.ndarray:
    if kind == "transe":
        return h + rel
    if kind == "rotate":
        return _complex_rotate(h, rel)
    raise ValueError(f"not a distance kind: {kind}")


def dbm_scores(kind: str, h, rel, t, p: int):
    """score = -||predict(h, rel) - t||_p along the last axis. Returns
    (scores, cache)."""
    pred = _dbm_predict(kind, h, rel)
    diff = pred - t
    if p == 2:
        norms = np.sqrt(np.sum(diff * diff, axis=-1))
    else:
        norms = np.sum(np.abs(diff), axis=-1)
    return -norms, {"pred": pred, "diff": diff, "norms": norms, "h": h, "rel": rel}


def dbm_scores_vjp(kind: str, cache, d_scores, p: int):
    """Returns (d_h, d_rel, d_t)."""
    diff = cache["diff"]
    if p == 2:
        safe = np.where(cache["norms"] > 0, cache["norms"], 1.0)
        d_diff = (-d_scores / safe)[..., None] * diff
    else:
        d_diff = -d_scores[..., None] * np.sign(diff)
    d_t = -d_diff
    if kind == "transe":
        return d_diff, d_diff, d_t
    if kind == "rotate":
        a, b = _halves(cache["h"])
        c, s = np.cos(cache["rel"]), np.sin(cache["rel"])
        d_re, d_im = _halves(d_diff)
        d_a = d_re * c + d_im * s
        d_b = -d_re * s + d_im * c
        pre_re, pre_im = _halves(cache["pred"])
        d_phase = -pre_im * d_re + pre_re * d_im
        return np.concatenate([d_a, d_b], axis=-1), d_phase, d_t
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# relation-candidate scores (relation prediction), on base embeddings


def relation_scores(model: ModelSpec, h: np.ndarray, t: np.ndarray,
                    relation_table: np.ndarray):
    """Scores (Q, R) of every candidate relation for fixed (h, t) pairs."""
    kind = model.kind
    if kind in TDM_KINDS:
        m = _rp_mix(kind, h, t)
        return m @ relation_table.T, {"m": m}
    if kind in DBM_KINDS:
        return dbm_scores(kind, h[:, None, :], relation_table[None, :, :],
                          t[:, None, :], model.distance_p)
    raise ValueError(kind)


def relation_scores_vjp(model: ModelSpec, h, t, relation_table, cache, d_scores):
    """Returns (d_h, d_t, d_relation_table)."""
    kind = model.kind
    if kind in TDM_KINDS:
        m = cache["m"]
        dm = d_scores @ relation_table
        d_table = d_scores.T @ m
        d_h, d_t = _rp_mix_vjp(kind, h, t, dm)
        return d_h, d_t, d_table
    d_h3, d_rel3, d_t3 = dbm_scores_vjp(kind, cache, d_scores, model.distance_p)
    return d_h3.sum(axis=1), d_t3.sum(axis=1), d_rel3.sum(axis=0)


def _rp_mix(kind: str, h: np.ndarray, t: np.ndarray) -> np.ndarray:
    """m(h, t) with score(r) = m . r for tensor kinds."""
    if kind == "cp":
        return h * t
    if kind == "complex":
        h1, h2 = _halves(h)
        t1, t2 = _halves(t)
        return np.concatenate([h1 * t1 + h2 * t2, h1 * t2 - h2 * t1], axis=-1)
    if kind == "rescal":
        return np.einsum("...i,...j->...ij", h, t).reshape(h.shape[0], -1)
    raise ValueError(kind)


def _rp_mix_vjp(kind: str, h, t, dm):
    if kind == "cp":
        return dm * t, dm * h
    if kind == "complex":
        h1, h2 = _halves(h)
        t1, t2 = _halves(t)
        d1, d2 = _halves(dm)
        d_h = np.concatenate([d1 * t1 + d2 * t2, d1 * t2 - d2 * t1], axis=-1)
        d_t = np.concatenate([d1 * h1 - d2 * h2, d1 * h2 + d2 * h1], axis=-1)
        return d_h, d_t
    if kind == "rescal":
        n = h.shape[-1]
        dmat = dm.reshape(h.shape[0], n, n)
        return np.einsum("bij,bj->bi", dmat, t), np.einsum("bij,bi->bj", dmat, h)
    raise ValueError(kind)
