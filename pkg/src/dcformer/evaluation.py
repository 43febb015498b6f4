"""Retrieval metrics and embedding-space diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, DegenerateProjectionError, DimensionError


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def euclidean_distances(a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
    # direct differences (row-chunked): the dot-product expansion loses ~1e-8 near zero
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        d = a[lo:lo + chunk, None, :] - b[None, :, :]
        out[lo:lo + chunk] = np.sqrt((d * d).sum(-1))
    return out


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray
    num_valid: int
    excluded: list[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def map_cmc(query_emb, query_ids, query_cams, gallery_emb, gallery_ids, gallery_cams,
            normalize: bool = True, max_rank: Optional[int] = None) -> RetrievalResult:
    """Market-style single-query evaluation.

    Gallery entries sharing both identity and camera with the query are
    dropped from its ranking. Queries left without any true match are listed
    in ``excluded`` and do not count toward mAP or CMC. The ranking is stable:
    equal distances keep gallery order.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"embedding shapes {q.shape} and {g.shape} are incompatible")
    if normalize:
        q, g = l2_normalize(q), l2_normalize(g)
    qids, qcams = np.asarray(query_ids), np.asarray(query_cams)
    gids, gcams = np.asarray(gallery_ids), np.asarray(gallery_cams)
    dist = euclidean_distances(q, g)
    max_rank = max_rank or g.shape[0]
    cmc = np.zeros(max_rank)
    aps, excluded = [], []
    for i in range(q.shape[0]):
        order = np.argsort(dist[i], kind="stable")
        keep = ~((gids[order] == qids[i]) & (gcams[order] == qcams[i]))
        hits = (gids[order][keep] == qids[i])
        if not hits.any():
            excluded.append(i)
            continue
        first = int(np.argmax(hits))
        if first < max_rank:
            cmc[first:] += 1
        positions = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(positions) + 1) / positions)))
    n = len(aps)
    if n == 0:
        return RetrievalResult(0.0, cmc, 0, excluded)
    return RetrievalResult(float(np.mean(aps)), cmc / n, n, excluded)


def token_cosine_matrix(tokens) -> np.ndarray:
    """Mean over images of |cos(f_i, f_j)| for an [M x N x D] token array."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 1:
        raise DimensionError(f"expected [M x N x D] with M >= 1, got {x.shape}")
    unit = x / np.maximum(np.linalg.norm(x, axis=2, keepdims=True), 1e-12)
    mat = np.abs(np.einsum("mid,mjd->mij", unit, unit)).mean(0)
    mat = 0.5 * (mat + mat.T)
    np.fill_diagonal(mat, 1.0)
    return mat


def mean_off_diagonal(mat: np.ndarray) -> float:
    n = mat.shape[0]
    if n < 2:
        return 0.0
    return float(mat[~np.eye(n, dtype=bool)].mean())


@dataclass
class DistanceSummary:
    positive: np.ndarray
    negative: np.ndarray
    edges: np.ndarray
    positive_hist: np.ndarray
    negative_hist: np.ndarray
    total_negatives: int


def distance_distributions(query_emb, query_ids, gallery_emb, gallery_ids,
                           normalize: bool = True, max_negatives: Optional[int] = None,
                           seed: int = 0, bins: int = 30) -> DistanceSummary:
    """Euclidean distances of all same-identity and different-identity query-gallery pairs.

    When ``max_negatives`` is set, negatives are a seeded random subset kept in
    enumeration order.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if normalize:
        q, g = l2_normalize(q), l2_normalize(g)
    dist = euclidean_distances(q, g)
    same = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    pos = dist[same]
    neg = dist[~same]
    total_neg = neg.size
    if max_negatives is not None and neg.size > max_negatives:
        pick = np.sort(np.random.default_rng(seed).choice(neg.size, max_negatives, replace=False))
        neg = neg[pick]
    both = np.concatenate([pos, neg])
    lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return DistanceSummary(pos, neg, edges, np.histogram(pos, edges)[0],
                           np.histogram(neg, edges)[0], total_neg)


def confusion_count(summary: DistanceSummary) -> int:
    """Pairs inside the overlap of the positive and negative distance ranges.

    The overlap interval is [min negative, max positive]; the count is the
    positives at or above its lower end plus the negatives at or below its
    upper end, or 0 when the interval is empty.
    """
    pos, neg = np.asarray(summary.positive), np.asarray(summary.negative)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("confusion_count needs both positive and negative distances")
    lo, hi = neg.min(), pos.max()
    if lo > hi:
        return 0
    return int((pos >= lo).sum() + (neg <= hi).sum())


@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray


def pca_project(x, dims: int = 2) -> Projection:
    """Project centred rows onto the top principal axes.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DimensionError("pca_project needs an [M x D] array with M >= 3")
    xc = x - x.mean(0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 1e-15:
        raise DegenerateProjectionError("data has zero variance")
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dims]
    vals, vecs = np.maximum(vals[order], 0.0), vecs[:, order]
    for k in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, k])), k] < 0:
            vecs[:, k] = -vecs[:, k]
    return Projection(xc @ vecs, vecs.T, vals, vals / total)


@dataclass
class EvalReport:
    """Retrieval rows (one per token plus ``cat``) and embedding diagnostics."""

    rows: dict[str, RetrievalResult]
    token_cosine: np.ndarray
    distances: DistanceSummary
    confusion: int
    num_queries: int
    projection: Optional[Projection] = None
    projection_tokens: Optional[np.ndarray] = None

    @property
    def mAP(self) -> float:
        return self.rows["cat"].mAP

    @property
    def cmc(self) -> np.ndarray:
        return self.rows["cat"].cmc

    @property
    def excluded_queries(self) -> int:
        return len(self.rows["cat"].excluded)

    def best_single_token_map(self) -> float:
        vals = [r.mAP for k, r in self.rows.items() if k != "cat"]
        return max(vals)


def evaluate_embeddings(query_tokens: np.ndarray, qids, qcams, gallery_tokens: np.ndarray, gids,
                        gcams, raw_query_tokens: Optional[np.ndarray] = None,
                        normalize: bool = True, max_negatives: Optional[int] = 5000,
                        seed: int = 0) -> EvalReport:
    """Build an :class:`EvalReport` from per-token features [M x N x D].

    ``raw_query_tokens`` (pre-BNNeck outputs) feed the token-cosine matrix;
    retrieval uses the given (post-BNNeck) features.
    """
    n = query_tokens.shape[1]
    rows = {}
    for i in range(n):
        rows[f"token{i + 1}"] = map_cmc(query_tokens[:, i], qids, qcams,
                                        gallery_tokens[:, i], gids, gcams, normalize)
    q_cat = query_tokens.reshape(len(query_tokens), -1)
    g_cat = gallery_tokens.reshape(len(gallery_tokens), -1)
    rows["cat"] = map_cmc(q_cat, qids, qcams, g_cat, gids, gcams, normalize)
    cos_src = query_tokens if raw_query_tokens is None else raw_query_tokens
    summary = distance_distributions(q_cat, qids, g_cat, gids, normalize,
                                     max_negatives=max_negatives, seed=seed)
    proj_src = cos_src.reshape(-1, cos_src.shape[-1])
    try:
        proj = pca_project(proj_src)
    except (DegenerateProjectionError, DimensionError):
        proj = None
    token_of_row = np.tile(np.arange(n), len(cos_src))
    return EvalReport(rows, token_cosine_matrix(cos_src), summary, confusion_count(summary),
                      len(qids), proj, token_of_row)

