"""Diagnostics: cluster concentration scores, transformation/embedding scale
traces, score-distribution export, the Monte Carlo consistency simulation, and
the shrinking-gradient sign check for the duality regularizer."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import transforms as T
from .errors import DegenerateCentroid, NoFilter, SingleCluster
from .evaluation import CandidateScorer
from .tensor import Rng

# ---------------------------------------------------------------------------
# cluster concentration


@dataclass
class ClusterReport:
    intra_per_cluster: list[float]
    intra_mean: float
    inter_per_cluster: list[float | None]
    inter_mean: float
    sizes: list[int]

    def to_dict(self) -> dict:
        return {
            "intra_per_cluster": self.intra_per_cluster,
            "intra_mean": self.intra_mean,
            "inter_per_cluster": self.inter_per_cluster,
            "inter_mean": self.inter_mean,
            "sizes": self.sizes,
        }


def _as_clusters(clusters) -> list[np.ndarray]:
    out = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in clusters]
    if any(c.size == 0 for c in out):
        raise ValueError("clusters must be non-empty")
    return out


def intra_cluster_distance(clusters, literal_n: bool = False):
    """Relative spread of each cluster around its centroid.

    Default: per cluster, mean over elements of ||x - C|| / ||C||, then the
    arithmetic mean across clusters. literal_n=True instead divides each
    cluster's summed distances by the number of clusters (no per-element mean)
    and reports the total, for comparison with the undivided reading.
    Returns (per_cluster, aggregate).
    """
    cs = _as_clusters(clusters)
    n = len(cs)
    per = []
    for c in cs:
        centroid = c.mean(axis=0)
        cnorm = float(np.linalg.norm(centroid))
        if cnorm < 1e-12:
            raise DegenerateCentroid("cluster centroid too close to the origin")
        dists = np.linalg.norm(c - centroid, axis=1) / cnorm
        per.append(float(dists.sum() / n) if literal_n else float(dists.mean()))
    aggregate = float(np.sum(per)) if literal_n else float(np.mean(per))
    return per, aggregate


def inter_cluster_distance(clusters):
    """Distance of each centroid to its nearest other centroid, relative to
    the cluster's summed element norms. Clusters whose element norms sum to
    ~zero get None and are excluded from the mean. Returns (per_cluster, mean).
    """
    cs = _as_clusters(clusters)
    if len(cs) < 2:
        raise SingleCluster("need at least two clusters")
    centroids = np.stack([c.mean(axis=0) for c in cs])
    per: list[float | None] = []
    for k, c in enumerate(cs):
        gaps = np.linalg.norm(centroids - centroids[k], axis=1)
        gaps[k] = np.inf
        nearest = float(gaps.min())
        denom = float(np.linalg.norm(c, axis=1).sum())
        per.append(None if denom < 1e-12 else nearest / denom)
    defined = [v for v in per if v is not None]
    mean = float(np.mean(defined)) if defined else float("nan")
    return per, mean


def cluster_report(clusters, literal_n: bool = False) -> ClusterReport:
    cs = _as_clusters(clusters)
    intra_per, intra_mean = intra_cluster_distance(cs, literal_n)
    inter_per, inter_mean = inter_cluster_distance(cs)
    return ClusterReport(intra_per, intra_mean, inter_per, inter_mean,
                         [c.shape[0] for c in cs])


# ---------------------------------------------------------------------------
# scale traces


@dataclass
class ScaleRecord:
    transformation_scale: float | None
    rt_scale: float | None
    embedding_scale: float


def _ones_norm(length: int, p: int) -> float:
    return float(np.sqrt(length)) if p == 2 else float(length)


def _reference_norm(filt: T.FilterSpec, dim: int) -> float:
    """Norm of the zero-change factor vector, so the inert filter reads 1.0."""
    if filt.kind in T.LINEAR2_KINDS:
        if filt.kind == "rscf_linear2" and filt.linear2_add_one == "full":
            return _ones_norm(2 * dim, filt.p)
        # identity blocks: ones on w1/w4, zeros on w2/w3
        return _ones_norm(dim, filt.p)
    return _ones_norm(dim, filt.p)


def embedding_scale(store, model: M.ModelSpec, p: int, head_ids) -> float:
    heads = store["entity"][np.asarray(head_ids, dtype=np.int64)]
    return float(np.mean(T.p_norm(heads, p)))


def scale_trace(store, model: M.ModelSpec, filt: T.FilterSpec,
                triples) -> ScaleRecord:
    """Mean normalized factor norms and transformed-head norms over a triple
    sample (Fig-style concentration diagnostics)."""
    if filt.kind == "none" and not filt.rt_enabled:
        raise NoFilter("no transformation is active")
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    heads = store["entity"][triples[:, 0]]
    rel_rows = triples[:, 1]
    rel = store["relation"][rel_rows]
    transformation = None
    emb_vectors = heads
    if filt.kind != "none":
        op = T.et_build(filt, store, rel, rel_rows, model.dim)
        factors = op.factor_vectors()
        transformation = float(
            np.mean(T.p_norm(factors, filt.p)) / _reference_norm(filt, model.dim))
        emb_vectors = T.et_apply(op, heads)
    rt = None
    if filt.rt_enabled:
        eps = filt.zero_change_epsilon
        combined = T.rt_factor(store, "a2", heads, filt.p, eps).factor
        if model.is_dbm:
            tails = store["entity"][triples[:, 2]]
            combined = combined * T.rt_factor(store, "a3", tails, filt.p, eps).factor
        rt = float(np.mean(T.p_norm(combined, filt.p))
                   / _ones_norm(model.relation_dim, filt.p))
    return ScaleRecord(transformation, rt,
                       float(np.mean(T.p_norm(emb_vectors, filt.p))))


# ---------------------------------------------------------------------------
# score-distribution export


def score_distribution(checkpoint, queries) -> np.ndarray:
    """One row of candidate scores per (head, relation) query."""
    scorer = CandidateScorer(checkpoint.store, checkpoint.model, checkpoint.filter)
    rows = [scorer.tail_scores(int(h), int(r)) for h, r in queries]
    return np.stack(rows) if rows else np.zeros((0, checkpoint.store["entity"].shape[0]))


def export_score_distribution(checkpoint, queries, path) -> np.ndarray:
    matrix = score_distribution(checkpoint, queries)
    num_entities = checkpoint.store["entity"].shape[0]
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow([str(e) for e in range(num_entities)])
    for row in matrix:
        writer.writerow([repr(float(v)) for v in row])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(out.getvalue())
    return matrix


# ---------------------------------------------------------------------------
# Monte Carlo consistency simulation


@dataclass
class ConsistencySimConfig:
    dim: int = 32
    samples: int = 10_000
    thresholds: tuple = (1.0, 1.01, 1.02)
    p: int = 2
    seed: int = 0
    matrix_sigma: float | None = None  # default 1/sqrt(dim)
    line_scale_max: float = 3.0
    workers: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if any(t < 1.0 for t in self.thresholds):
            raise ValueError("ratio thresholds must be >= 1")


ROW_NAMES = ("transformation", "normalization", "add_one")


@dataclass
class ConsistencyReport:
    columns: list[str]
    rates: dict[str, dict[str, float]]
    config: ConsistencySimConfig

    def table(self) -> list[list[float]]:
        return [[self.rates[row][col] for col in self.columns] for row in ROW_NAMES]

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "rows": list(ROW_NAMES),
            "rates": self.rates,
            "samples": self.config.samples,
            "dim": self.config.dim,
            "p": self.config.p,
            "seed": self.config.seed,
        }


def _sample_condition(gen, cfg: ConsistencySimConfig, column):
    """Point triples (A, B, C) with ||AC|| > ||AB|| guaranteed per condition."""
    n, s = cfg.dim, cfg.samples
    if column == "on_a_line":
        a = gen.normal(size=(s, n))
        b = gen.normal(size=(s, n))
        scale = gen.uniform(1.0 + 1e-9, cfg.line_scale_max, size=(s, 1))
        sign = np.where(gen.random(size=(s, 1)) < 0.5, -1.0, 1.0)
        c = a + sign * scale * (b - a)
        return a, b, c
    threshold = float(column)
    parts_a, parts_b, parts_c = [], [], []
    have = 0
    while have < s:
        m = max(1024, 2 * (s - have))
        a = gen.normal(size=(m, n))
        b = gen.normal(size=(m, n))
        c = gen.normal(size=(m, n))
        ratio = np.linalg.norm(c - a, axis=1) / np.linalg.norm(b - a, axis=1)
        ok = ratio > threshold
        parts_a.append(a[ok])
        parts_b.append(b[ok])
        parts_c.append(c[ok])
        have += int(ok.sum())
    a = np.concatenate(parts_a)[:s]
    b = np.concatenate(parts_b)[:s]
    c = np.concatenate(parts_c)[:s]
    return a, b, c


def _sample_matrices(gen, cfg: ConsistencySimConfig) -> np.ndarray:
    n, s = cfg.dim, cfg.samples
    sigma = cfg.matrix_sigma if cfg.matrix_sigma is not None else 1.0 / np.sqrt(n)
    mats = gen.normal(scale=sigma, size=(s, n, n))
    # full rank is almost sure; resample the measure-zero exceptions anyway
    for _ in range(8):
        ranks = np.linalg.matrix_rank(mats)
        bad = ranks < n
        if not bad.any():
            break
        mats[bad] = gen.normal(scale=sigma, size=(int(bad.sum()), n, n))
    return mats


def _column_rates(gen, cfg: ConsistencySimConfig, column) -> dict[str, float]:
    a, b, c = _sample_condition(gen, cfg, column)
    mats = _sample_matrices(gen, cfg)
    am = np.einsum("si,sij->sj", a, mats)
    bm = np.einsum("si,sij->sj", b, mats)
    cm = np.einsum("si,sij->sj", c, mats)
    trans_keep = np.linalg.norm(cm - am, axis=1) > np.linalg.norm(bm - am, axis=1)

    eps = T.DEFAULT_ZERO_EPS
    an, _, _ = T.normalize_rows(am, cfg.p, eps)
    bn, _, _ = T.normalize_rows(bm, cfg.p, eps)
    cn, _, _ = T.normalize_rows(cm, cfg.p, eps)
    norm_gap = np.linalg.norm(cn - an, axis=1) - np.linalg.norm(bn - an, axis=1)
    norm_keep = norm_gap > 0

    # the add-one step compares orderings before and after the ones shift
    ao, bo, co = an + 1.0, bn + 1.0, cn + 1.0
    addone_gap = np.linalg.norm(co - ao, axis=1) - np.linalg.norm(bo - ao, axis=1)
    addone_keep = np.sign(addone_gap) == np.sign(norm_gap)

    return {
        "transformation": float(trans_keep.mean()),
        "normalization": float(norm_keep.mean()),
        "add_one": float(addone_keep.mean()),
    }


def monte_carlo_consistency(cfg: ConsistencySimConfig) -> ConsistencyReport:
    """Success rates of preserving ||AC|| > ||AB|| through a shared linear map,
    its normalization, and the ones shift, per sampling condition.

    Columns: collinear triples, and ratio conditions ||AC||/||AB|| > t. The
    add-one row is measured against the post-normalization ordering, which it
    preserves exactly (equal difference vectors), so it reads 1.0. Columns use
    independent derived rng streams, so results do not depend on worker count.
    """
    columns = ["on_a_line"] + [f"ratio_gt_{t:g}" for t in cfg.thresholds]
    specs = ["on_a_line"] + [float(t) for t in cfg.thresholds]

    def _run(col_name, spec):
        gen = Rng(cfg.seed).derive(f"mc:{col_name}").generator()
        return _column_rates(gen, cfg, spec)

    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            cols = list(pool.map(_run, columns, specs))
    else:
        cols = [_run(name, spec) for name, spec in zip(columns, specs)]
    rates: dict[str, dict[str, float]] = {row: {} for row in ROW_NAMES}
    for col_name, col in zip(columns, cols):
        for row in ROW_NAMES:
            rates[row][col_name] = col[row]
    return ConsistencyReport(columns, rates, cfg)


# ---------------------------------------------------------------------------
# sign check for the shrinking gradient of the duality regularizer


@dataclass
class SignCheckReport:
    trials: int
    failures: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"trials": self.trials, "failures": self.failures,
                "passed": self.passed}


def dura_sign_gradient(w, h, r):
    """d/dw of w^2 (h r)^2 + w^2 h^2 = 2 w (h r)^2 + 2 w h^2."""
    return 2.0 * w * (h * r) ** 2 + 2.0 * w * h**2


def dura_sign_check(trials: int, rng: Rng) -> SignCheckReport:
    """The penalty gradient wrt a diagonal filter weight always carries the
    weight's own sign, so descent shrinks the filter regardless of sign."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    gen = rng.generator()
    report = SignCheckReport(trials)
    for _ in range(trials):
        w, h, r = gen.normal(size=3)
        while abs(w) < 1e-9 or abs(h) < 1e-9 or abs(r) < 1e-9:
            w, h, r = gen.normal(size=3)
        g = dura_sign_gradient(w, h, r)
        if np.sign(g) != np.sign(w):
            report.failures.append({"w": float(w), "h": float(h), "r": float(r),
                                    "gradient": float(g)})
    return report
