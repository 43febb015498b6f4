"""SGD training loop over PK batches, with checkpointing and metric logging."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import model as M
from .config import RunConfig, apply_overrides, dump_config, parse_config_text
from .data import GALLERY, QUERY, TRAIN, PKSampler, SyntheticReidDataset, generate, identity_subset
from .errors import NumericError
from .evaluation import EvalReport, evaluate_embeddings
from .losses import LossReport, total_loss
from .tensor import backward

log = logging.getLogger(__name__)


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine decay from ``base`` at step 0 toward 0 at ``total``."""
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def metrics_header(num_tokens: int) -> list[str]:
    pairs = [(i, j) for i in range(num_tokens) for j in range(i + 1, num_tokens)]
    return (["epoch", "step", "lr", "loss_total", "loss_sdc"]
            + [f"id_{i}" for i in range(num_tokens)]
            + [f"triplet_{i}" for i in range(num_tokens)]
            + [f"nu_{i}_{j}" for i, j in pairs]
            + [f"omega_{i}_{j}" for i, j in pairs])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class TrainResult:
    config: RunConfig
    state: M.EncoderState
    dataset: SyntheticReidDataset
    report: Optional[EvalReport]
    history: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def final_nu(self) -> np.ndarray:
        return np.array([v for k, v in self.history[-1].items() if k.startswith("nu_")])


def quantize_state(state: M.EncoderState, opt: Optional[SGD]) -> None:
    """Round everything a checkpoint stores to float32 precision, in place."""
    for p in state.params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    for k in state.buffers:
        state.buffers[k] = state.buffers[k].astype(np.float32).astype(np.float64)
    if opt is not None:
        for k in opt.buffers:
            opt.buffers[k] = opt.buffers[k].astype(np.float32).astype(np.float64)


def make_checkpoint(cfg: RunConfig, state: M.EncoderState, opt: SGD, epoch: int,
                    step: int) -> ckpt_io.Checkpoint:
    rng_state = json.dumps({"seed": cfg.seed, "epoch": epoch, "step": step}, sort_keys=True)
    return ckpt_io.Checkpoint(
        dump_config(cfg),
        {k: p.data for k, p in state.params.items()},
        dict(state.buffers),
        dict(opt.buffers),
        epoch,
        step,
        rng_state,
    )


def restore(ck: ckpt_io.Checkpoint, cfg: RunConfig) -> tuple[M.EncoderState, dict]:
    ckpt_io.check_manifest(ck, M.parameter_shapes(cfg.model), M.buffer_shapes(cfg.model))
    state = M.EncoderState(
        {k: M.Tensor(v.copy(), requires_grad=True) for k, v in ck.params.items()},
        {k: v.copy() for k, v in ck.buffers.items()},
    )
    return state, {k: v.copy() for k, v in ck.momentum.items()}


def config_from_checkpoint(ck: ckpt_io.Checkpoint) -> RunConfig:
    return apply_overrides(RunConfig(), parse_config_text(ck.config_text))


def train_labels(dataset: SyntheticReidDataset, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """(train indices, dense 0..K-1 label per dataset row; -1 outside the subset)."""
    idx = identity_subset(dataset, cfg.identity_fraction, cfg.data_seed) \
        if cfg.identity_fraction < 1.0 else dataset.indices(TRAIN)
    dense = np.full(len(dataset.ids), -1)
    uniq = np.unique(dataset.ids[idx])
    dense[idx] = np.searchsorted(uniq, dataset.ids[idx])
    return idx, dense


def flip_batch(images: np.ndarray, rng: np.random.Generator, prob: float) -> np.ndarray:
    if prob <= 0:
        return images
    flip = rng.random(len(images)) < prob
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def evaluate_state(cfg: RunConfig, state: M.EncoderState,
                   dataset: SyntheticReidDataset) -> EvalReport:
    q_img, qids, qcams = dataset.subset(QUERY)
    g_img, gids, gcams = dataset.subset(GALLERY)
    q_pre, q_post = M.encode(q_img, cfg.model, state)
    g_pre, g_post = M.encode(g_img, cfg.model, state)
    return evaluate_embeddings(
        q_post, qids, qcams, g_post, gids, gcams,
        raw_query_tokens=np.concatenate([q_pre, g_pre]),
        normalize=cfg.eval.normalize, max_negatives=cfg.eval.max_negatives, seed=cfg.seed,
    )


def train(
    cfg: RunConfig,
    out_dir=None,
    resume: Optional[ckpt_io.Checkpoint] = None,
    stop_after_epoch: Optional[int] = None,
    evaluate: bool = True,
    on_step: Optional[Callable[[int, LossReport], None]] = None,
    dataset: Optional[SyntheticReidDataset] = None,
) -> TrainResult:
    """Run one training job; a pure function of ``cfg`` on a single thread.

    Writes ``metrics.csv`` and per-epoch ``checkpoint_eNNN.dcfw`` under
    ``out_dir`` when given. After each epoch the live state is rounded to the
    stored float32 precision, so resuming from any checkpoint replays the
    uninterrupted run exactly.
    """
    if dataset is None:
        dataset = generate(cfg.data, cfg.data_seed)
    idx, dense = train_labels(dataset, cfg)
    sampler = PKSampler(dense, cfg.sampler.p, cfg.sampler.k, cfg.seed, indices=idx)
    epochs = [sampler.epoch(e) for e in range(cfg.optim.epochs)]
    total_steps = sum(len(b) for b in epochs)

    if resume is None:
        state = M.init_state(cfg.model, cfg.seed)
        opt = SGD(state.params, cfg.optim.momentum, cfg.optim.weight_decay)
        start_epoch, step = 0, 0
    else:
        state, mom = restore(resume, cfg)
        opt = SGD(state.params, cfg.optim.momentum, cfg.optim.weight_decay)
        opt.buffers = mom
        start_epoch, step = resume.epoch, resume.step

    out = Path(out_dir) if out_dir is not None else None
    header = metrics_header(cfg.model.num_tokens)
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        fresh = resume is None or not (out / "metrics.csv").exists()
        fh = open(out / "metrics.csv", "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(header)

    history: list[dict] = []
    last: Optional[LossReport] = None
    done_epoch = start_epoch
    try:
        for epoch in range(start_epoch, cfg.optim.epochs):
            for batch in epochs[epoch]:
                lr = cosine_lr(step, total_steps, cfg.optim.lr)
                rng = np.random.default_rng([cfg.seed, 1, step])
                images = flip_batch(dataset.images[batch.indices], rng, cfg.flip_prob)
                try:
                    tokens, _ = M.forward(images, cfg.model, state, training=True, rng=rng)
                    logits, pre_bn, _ = M.heads_forward(tokens, cfg.model, state, training=True)
                    report = total_loss(pre_bn, logits, batch.labels, cfg.model,
                                        use_id=cfg.use_id_loss, use_triplet=cfg.use_triplet_loss)
                except NumericError as exc:
                    _dump_nan(out, last, step, str(exc))
                    raise
                if not report.is_finite():
                    _dump_nan(out, report, step, "non-finite loss")
                    raise NumericError(f"non-finite loss at step {step}")
                opt.zero_grad()
                backward(report.total)
                opt.step(lr)
                row = {"epoch": epoch, "step": step, "lr": lr, **report.fields()}
                history.append(row)
                if writer is not None:
                    writer.writerow([_fmt(row[h]) for h in header])
                if on_step is not None:
                    on_step(step, report)
                last = report
                step += 1
            quantize_state(state, opt)
            done_epoch = epoch + 1
            if out is not None:
                fh.flush()
                ckpt_io.save(out / f"checkpoint_e{epoch + 1:03d}.dcfw",
                             make_checkpoint(cfg, state, opt, epoch + 1, step))
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                break
    finally:
        if fh is not None:
            fh.close()

    if out is not None:
        ckpt_io.save(out / "final.dcfw", make_checkpoint(cfg, state, opt, done_epoch, step))
    report = evaluate_state(cfg, state, dataset) if evaluate else None
    if report is not None and out is not None:
        from .reports import write_eval_artifacts

        write_eval_artifacts(report, out)
    return TrainResult(cfg, state, dataset, report, history, step)


def _dump_nan(out: Optional[Path], report: Optional[LossReport], step: int, why: str) -> None:
    buf = io.StringIO()
    buf.write(f"step = {step}\nreason = {why}\n")
    if report is not None:
        for k, v in report.fields().items():
            buf.write(f"{k} = {v!r}\n")
    log.error("numeric failure at step %d: %s", step, why)
    if out is not None:
        (out / "nan_dump.txt").write_text(buf.getvalue(), encoding="utf-8")


def load_for_eval(path) -> tuple[RunConfig, M.EncoderState]:
    ck = ckpt_io.load(path)
    cfg = config_from_checkpoint(ck)
    state, _ = restore(ck, cfg)
    return cfg, state
