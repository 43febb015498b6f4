"""Finite-difference checks for every op, every loss, and a micro end-to-end model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool
    worst: tuple | None
    kinks: int
    coords: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.passed or self.worst is None else f" at {self.worst}"
        return (f"{status} {self.name:<28} max_rel_err={self.max_error:.3e} "
                f"coords={self.coords} kinks={self.kinks}{where}")


def _micro_config(**kw) -> M.ModelConfig:
    base = dict(num_tokens=2, embed_dim=8, depth=1, num_heads=2, image_height=8, image_width=8,
                patch_size=4, patch_stride=4, num_channels=1, num_classes=3)
    base.update(kw)
    return M.ModelConfig(**base)


def op_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, np.ndarray]]:
    """(name, scalar function of one tensor, evaluation point)."""
    a = rng.normal(size=(3, 4))
    w34 = Tensor(rng.normal(size=(3, 4)))
    w45 = Tensor(rng.normal(size=(4, 5)))
    w35 = Tensor(rng.normal(size=(3, 5)))
    w38 = Tensor(rng.normal(size=(3, 8)))
    w32 = Tensor(rng.normal(size=(3, 2)))
    b24 = Tensor(rng.normal(size=(2, 4)))
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4))
    beta = Tensor(rng.normal(size=4))
    labels = np.array([0, 2, 1])

    def weighted(t):
        return T.tsum(t * w34)

    yield "add", lambda x: weighted(x + T.exp(x)), a
    yield "sub", lambda x: weighted(T.sub(x, x * x)), a
    yield "scalar_mul", lambda x: weighted(T.scale(x, -2.5)), a
    yield "mul", lambda x: weighted(x * x), a
    yield "div", lambda x: weighted(T.div(x, T.exp(x) + 1.0)), a
    yield "exp", lambda x: weighted(T.exp(x)), a
    yield "log", lambda x: weighted(T.log(x * x + 0.5)), a
    yield "sqrt", lambda x: weighted(T.sqrt(x * x + 0.5)), a
    yield "abs", lambda x: weighted(T.tabs(x)), a
    yield "gelu", lambda x: weighted(T.gelu(x)), a
    yield "softplus", lambda x: weighted(T.softplus(T.scale(x, 3.0))), a
    yield "sum", lambda x: T.tsum(T.tsum(x * x, axis=1) * Tensor([1.0, -2.0, 0.5])), a
    yield "mean", lambda x: T.tsum(T.mean(x * w34, axis=0) * Tensor([1.0, 2.0, 3.0, 4.0])), a
    yield "matmul", lambda x: T.tsum(T.matmul(x, w45) * w35), a
    yield "transpose", lambda x: T.tsum(T.transpose(x * x, (1, 0)) * Tensor(w34.data.T)), a
    yield "reshape", lambda x: T.tsum(T.reshape(x * x, (2, 6)) * Tensor(w34.data.reshape(2, 6))), a
    yield "slice", lambda x: T.tsum(x[1:, ::2] * x[1:, ::2]), a
    yield "concat", lambda x: T.tsum(T.concat([x, T.exp(x)], axis=1) * w38), a
    yield "broadcast", lambda x: T.tsum(T.broadcast_to(x[:1], (3, 4)) * w34 * x), a
    yield "stack", lambda x: T.tsum(T.stack([x, x * x], axis=0) * Tensor(np.stack([w34.data, -w34.data]))), a
    yield "swap_last", lambda x: T.tsum(T.swap_last(x * x) * Tensor(w34.data.T)), a
    yield "clamp_min", lambda x: weighted(T.clamp_min(x, 0.1)), a
    yield "linear", lambda x: T.tsum(T.linear(x, w45, Tensor(np.arange(5.0))) * w35), a
    yield "normalize", lambda x: weighted(T.normalize(x, axis=1)), a
    yield "dropout", lambda x: weighted(T.dropout(x * x, 0.3, np.random.default_rng(7), True)), a
    yield "softmax", lambda x: weighted(T.softmax(x, axis=-1)), a
    yield "log_softmax", lambda x: weighted(T.log_softmax(x, axis=0)), a
    yield "layer_norm", lambda x: weighted(T.layer_norm(x, gamma, beta)), a
    yield "batch_norm_1d", lambda x: weighted(
        T.batch_norm_1d(x, gamma, np.zeros(4), np.ones(4), training=True)), a
    yield "l2_norm", lambda x: T.tsum(T.l2_norm(x, axis=1) * Tensor([1.0, -1.0, 2.0])), a
    yield "cosine_similarity", lambda x: T.tsum(
        T.cosine_similarity(x, b24.data[[0, 1, 0]], axis=1) * Tensor([1.0, 2.0, -1.0])), a
    yield "sq_distance_matrix", lambda x: T.tsum(
        T.squared_euclidean_distance_matrix(x, b24) * w32), a
    yield "cross_entropy", lambda x: T.cross_entropy(x, labels), a


def loss_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, np.ndarray]]:
    tokens = rng.normal(size=(4, 3, 5))
    feats = rng.normal(size=(8, 4))
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    logits = rng.normal(size=(6, 5))
    cfg = _micro_config(num_tokens=3, embed_dim=5, num_heads=1, num_classes=4, dwc_detach=False)
    tok_labels = np.array([0, 0, 1, 1])

    # Detached weights act as constants: the tape pass runs the real loss, the
    # finite-difference passes (inputs without grad) hold omega at the base point.
    frozen = L.balanced_sdc_loss(Tensor(tokens), True, True)[1].omega

    def detached(x):
        if x.requires_grad:
            return L.balanced_sdc_loss(x, True, True)[0]
        return T.tsum(Tensor(frozen) * L.pair_abs_cosines(x))

    yield "sdc_loss", lambda x: L.sdc_loss(x)[0], tokens
    yield "balanced_sdc_loss", lambda x: L.balanced_sdc_loss(x, True, False)[0], tokens
    yield "balanced_sdc_loss_detached", detached, tokens
    yield "triplet_soft_margin", lambda x: L.triplet_loss(x, labels), feats
    yield "triplet_euclidean", lambda x: L.triplet_loss(x, labels, squared=False), feats
    yield "id_loss", lambda x: L.id_loss(x, np.array([0, 4, 2, 1, 3, 0])), logits
    yield "id_loss_smoothed", lambda x: L.id_loss(x, np.array([0, 4, 2, 1, 3, 0]), 0.1), logits
    logit_w = Tensor(rng.normal(size=(5, 4)))

    def composite(x):
        return L.total_loss(x, T.matmul(x, logit_w), tok_labels, cfg).total

    yield "total_loss", composite, tokens


def micro_model_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, np.ndarray]]:
    cfg = _micro_config()
    state = M.init_state(cfg, 0)
    images = rng.normal(size=(4, 1, 8, 8))
    labels = np.array([0, 0, 1, 1])
    for name in state.params:
        def f(x, name=name):
            params = dict(state.params)
            params[name] = x
            st = M.EncoderState(params, {k: v.copy() for k, v in state.buffers.items()})
            tokens, _ = M.forward(images, cfg, st, training=True)
            logits, pre, _ = M.heads_forward(tokens, cfg, st, training=True)
            return L.total_loss(pre, logits, labels, cfg).total

        yield f"model:{name}", f, state.params[name].data.copy()


def run_suite(tol: float = 1e-4, step: float = 1e-5, seed: int = 0,
              include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    groups = [op_cases(rng), loss_cases(rng)]
    if include_model:
        groups.append(micro_model_cases(rng))
    results = []
    for group in groups:
        for name, f, x in group:
            rep = T.gradcheck(f, x, step=step, tol=tol)
            worst = None if rep.worst_index is None else tuple(int(i) for i in rep.worst_index)
            results.append(CheckResult(name, rep.max_error, rep.passed, worst,
                                       rep.num_kinks, int(np.size(x))))
    return results
