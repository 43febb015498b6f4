"""Training objectives: token diversity constraint, triplet and ID losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import SamplerContractError
from .tensor import Tensor


@dataclass
class PairSimilarity:
    """Batch-mean |cos| for every token pair (i < j) and the matching weights."""

    num_tokens: int
    pairs: list[tuple[int, int]]
    nu: np.ndarray
    omega: Optional[np.ndarray] = None

    def matrix(self, which: str = "nu") -> np.ndarray:
        vals = self.nu if which == "nu" else self.omega
        out = np.zeros((self.num_tokens, self.num_tokens))
        for (i, j), v in zip(self.pairs, vals):
            out[i, j] = out[j, i] = v
        return out


def token_pairs(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def pair_abs_cosines(tokens: Tensor) -> Tensor:
    """nu for every pair: |cos(f_i, f_j)| per image, then averaged over the batch."""
    n = tokens.shape[1]
    pairs = token_pairs(n)
    unit = T.normalize(tokens, axis=-1)
    gram = T.matmul(unit, T.swap_last(unit))
    iu = np.array([p[0] for p in pairs])
    ju = np.array([p[1] for p in pairs])
    cos = gram[:, iu, ju]
    return T.mean(T.tabs(cos), axis=0)


def sdc_loss(tokens: Tensor) -> tuple[Tensor, PairSimilarity]:
    """Uniform mean of pairwise |cos| between class tokens ([B x N x D])."""
    n = tokens.shape[1]
    if n < 2:
        return Tensor(0.0), PairSimilarity(n, [], np.zeros(0))
    nu = pair_abs_cosines(tokens)
    return T.mean(nu), PairSimilarity(n, token_pairs(n), nu.data.copy())


def dwc_weights(sim: PairSimilarity) -> PairSimilarity:
    """Softmax of the pair similarities; larger nu gets larger weight."""
    if len(sim.pairs) == 0:
        raise ValueError("dwc_weights needs at least one token pair")
    z = sim.nu - sim.nu.max()
    w = np.exp(z)
    return PairSimilarity(sim.num_tokens, sim.pairs, sim.nu, w / w.sum())


def balanced_sdc_loss(tokens: Tensor, dwc_enabled: bool = True,
                      detach_weights: bool = True) -> tuple[Tensor, PairSimilarity]:
    """Sum of omega_ij * nu_ij; uniform weights when ``dwc_enabled`` is off.

    With ``detach_weights`` the softmax weights are constants for backprop and
    gradient reaches the tokens only through nu.
    """
    n = tokens.shape[1]
    if n < 2:
        return sdc_loss(tokens)
    if not dwc_enabled:
        loss, sim = sdc_loss(tokens)
        sim.omega = np.full(len(sim.pairs), 1.0 / len(sim.pairs))
        return loss, sim
    nu = pair_abs_cosines(tokens)
    sim = dwc_weights(PairSimilarity(n, token_pairs(n), nu.data.copy()))
    omega = Tensor(sim.omega) if detach_weights else T.softmax(nu, axis=0)
    return T.tsum(omega * nu), sim


@dataclass
class TripletBatch:
    """Hard triplets as row indices into the feature matrix, plus the gathered rows."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    f_a: Tensor
    f_p: Tensor
    f_n: Tensor


def _check_pk(labels: np.ndarray) -> None:
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise SamplerContractError("batch needs at least two identities for triplet mining")
    if counts.min() < 2:
        raise SamplerContractError("every identity in the batch needs at least two samples")


def batch_hard_triplets(features, labels) -> TripletBatch:
    """Hardest positive (farthest) and hardest negative (closest) per anchor.

    Ties go to the lowest index.
    """
    features = T.as_tensor(features)
    labels = np.asarray(labels)
    _check_pk(labels)
    x = features.data
    # direct differences, not the |a|^2 + |b|^2 - 2ab expansion: exact on ties
    diff_ = x[:, None, :] - x[None, :, :]
    dist = (diff_ * diff_).sum(-1)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    # self excluded from positives; -inf / +inf masks keep argmax/argmin in-class
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    diff = labels[:, None] != labels[None, :]
    neg = np.argmin(np.where(diff, dist, np.inf), axis=1)
    T.note_branch(np.concatenate([pos, neg]))
    anchors = np.arange(len(labels))
    return TripletBatch(anchors, pos, neg, features[anchors], features[pos], features[neg])


def soft_margin_triplet_loss(t: TripletBatch, squared: bool = True) -> Tensor:
    """Mean of log(1 + exp(d_ap - d_an)) over anchors.

    ``squared`` selects squared Euclidean distances; otherwise plain
    Euclidean distances (sqrt with a 1e-12 floor inside) are compared.
    """
    d_ap = T.tsum((t.f_a - t.f_p) * (t.f_a - t.f_p), axis=1)
    d_an = T.tsum((t.f_a - t.f_n) * (t.f_a - t.f_n), axis=1)
    if not squared:
        d_ap = T.sqrt(d_ap + 1e-12)
        d_an = T.sqrt(d_an + 1e-12)
    return T.mean(T.softplus(d_ap - d_an))


def triplet_loss(features, labels, squared: bool = True) -> Tensor:
    return soft_margin_triplet_loss(batch_hard_triplets(features, labels), squared)


def id_loss(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    return T.cross_entropy(logits, np.asarray(labels), label_smoothing)


@dataclass
class LossReport:
    total: Tensor
    id_losses: list[float]
    triplet_losses: list[float]
    sdc: float
    sdc_lambda: float
    similarity: PairSimilarity
    extra: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.data)

    def recomposed(self) -> float:
        n = len(self.id_losses)
        heads = sum(a + b for a, b in zip(self.id_losses, self.triplet_losses)) / n
        return heads + self.sdc_lambda * self.sdc

    def fields(self) -> dict[str, float]:
        """Flat name -> value view; key order is stable for a given N."""
        out = {"loss_total": self.value, "loss_sdc": self.sdc}
        for i, v in enumerate(self.id_losses):
            out[f"id_{i}"] = v
        for i, v in enumerate(self.triplet_losses):
            out[f"triplet_{i}"] = v
        omega = self.similarity.omega
        for k, (i, j) in enumerate(self.similarity.pairs):
            out[f"nu_{i}_{j}"] = float(self.similarity.nu[k])
        for k, (i, j) in enumerate(self.similarity.pairs):
            out[f"omega_{i}_{j}"] = float(omega[k]) if omega is not None else float("nan")
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.fields().values())


def total_loss(tokens: Tensor, logits: Tensor, labels, cfg,
               use_id: bool = True, use_triplet: bool = True) -> LossReport:
    """Head losses averaged over tokens plus lambda times the balanced SDC term.

    ``tokens`` are the pre-BNNeck features [B x N x D]; ``logits`` come from
    the post-BNNeck classifiers [B x N x K].
    """
    labels = np.asarray(labels)
    n = tokens.shape[1]
    head_terms = []
    ids, trips = [], []
    for i in range(n):
        term = Tensor(0.0)
        if use_id:
            li = id_loss(logits[:, i, :], labels, cfg.label_smoothing)
            ids.append(float(li.data))
            term = term + li
        else:
            ids.append(0.0)
        if use_triplet:
            lt = triplet_loss(tokens[:, i, :], labels,
                              squared=getattr(cfg, "triplet_distance", "squared") == "squared")
            trips.append(float(lt.data))
            term = term + lt
        else:
            trips.append(0.0)
        head_terms.append(term)
    heads = head_terms[0]
    for t in head_terms[1:]:
        heads = heads + t
    heads = T.scale(heads, 1.0 / n)
    sdc, sim = balanced_sdc_loss(tokens, cfg.dwc_enabled, cfg.dwc_detach)
    total = heads + T.scale(sdc, cfg.sdc_lambda) if n > 1 else heads
    return LossReport(total, ids, trips, float(sdc.data), cfg.sdc_lambda, sim)
