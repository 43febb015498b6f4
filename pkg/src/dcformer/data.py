"""Synthetic re-ID data, PK batch sampling, and on-disk dataset formats.

Each identity is a random low-dimensional signature decoded into a smooth
image by a fixed random decoder. Instances of an identity differ by a
per-camera colour transform, an integer pixel shift, and additive noise.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, ManifestError, SamplerContractError

TRAIN, QUERY, GALLERY = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", QUERY: "query", GALLERY: "gallery"}

# Upper bounds that keep instances of one identity closer to each other than
# to other identities: decoded pixels have unit-order variance, so noise std
# and colour shift must stay below it, and a shift may not move content by
# more than a quarter of the image.
MAX_NOISE = 1.0
MAX_COLOR_SHIFT = 0.5


@dataclass
class GeneratorConfig:
    num_identities: int = 32
    num_test_identities: int = 16
    instances_per_identity: int = 8
    num_cameras: int = 2
    image_height: int = 32
    image_width: int = 16
    num_channels: int = 3
    signature_dim: int = 8
    decoder_cell: int = 4
    pose_scale: float = 0.3
    color_shift: float = 0.3
    jitter: int = 1
    noise: float = 0.3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_identities", "num_test_identities", "instances_per_identity",
                     "num_cameras", "image_height", "image_width", "num_channels",
                     "signature_dim", "decoder_cell"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"data.{name} must be positive")
        if self.image_height % self.decoder_cell or self.image_width % self.decoder_cell:
            raise ConfigError("image extents must be multiples of data.decoder_cell")
        if not 0.0 <= self.noise <= MAX_NOISE:
            raise ConfigError(f"data.noise must lie in [0, {MAX_NOISE}]")
        if not 0.0 <= self.color_shift <= MAX_COLOR_SHIFT:
            raise ConfigError(f"data.color_shift must lie in [0, {MAX_COLOR_SHIFT}]")
        if not 0 <= self.jitter <= min(self.image_height, self.image_width) // 4:
            raise ConfigError("data.jitter must lie in [0, min(H, W) / 4]")
        if not 0.0 <= self.pose_scale <= 1.0:
            raise ConfigError("data.pose_scale must lie in [0, 1]")


@dataclass
class SyntheticReidDataset:
    images: np.ndarray  # [M x ch x H x W]
    ids: np.ndarray
    cams: np.ndarray
    split: np.ndarray
    seed: int = 0

    def __post_init__(self):
        m = len(self.images)
        if not (len(self.ids) == len(self.cams) == len(self.split) == m):
            raise ManifestError("images, ids, cams and split must be row-aligned")

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.ids[idx], self.cams[idx]

    @property
    def train_ids(self) -> np.ndarray:
        return np.unique(self.ids[self.split == TRAIN])

    @property
    def test_ids(self) -> np.ndarray:
        return np.unique(self.ids[self.split != TRAIN])


def _upsample(x: np.ndarray, cell: int) -> np.ndarray:
    return np.repeat(np.repeat(x, cell, axis=-2), cell, axis=-1)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with edge replication."""
    if dy == 0 and dx == 0:
        return img
    _, h, w = img.shape
    pad = max(abs(dy), abs(dx))
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    y0, x0 = pad - dy, pad - dx
    return padded[:, y0:y0 + h, x0:x0 + w]


def generate(cfg: GeneratorConfig, seed: int) -> SyntheticReidDataset:
    """Render the full dataset; a pure function of ``(cfg, seed)``."""
    if cfg.num_cameras < 2:
        raise ConfigError("cross-camera evaluation needs data.num_cameras >= 2")
    if cfg.instances_per_identity < 2 * cfg.num_cameras:
        raise ConfigError(
            "data.instances_per_identity must be >= 2 * data.num_cameras so every "
            "query keeps a cross-camera gallery match"
        )
    rng = np.random.default_rng(seed)
    n_ids = cfg.num_identities + cfg.num_test_identities
    ch, h, w, cell = cfg.num_channels, cfg.image_height, cfg.image_width, cfg.decoder_cell
    low = (ch, h // cell, w // cell)
    signatures = rng.normal(size=(n_ids, cfg.signature_dim))
    decoder = rng.normal(size=(cfg.signature_dim, int(np.prod(low)))) / math.sqrt(cfg.signature_dim)
    gains = 1.0 + cfg.color_shift * rng.normal(size=(cfg.num_cameras, ch))
    offsets = cfg.color_shift * rng.normal(size=(cfg.num_cameras, ch))

    images, ids, cams, split = [], [], [], []
    for pid in range(n_ids):
        is_train = pid < cfg.num_identities
        seen_cams: set[int] = set()
        for k in range(cfg.instances_per_identity):
            cam = k % cfg.num_cameras
            code = signatures[pid] + cfg.pose_scale * rng.normal(size=cfg.signature_dim)
            base = _upsample(np.tanh(code @ decoder).reshape(low), cell)
            img = base * gains[cam][:, None, None] + offsets[cam][:, None, None]
            if cfg.jitter:
                dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
                img = _shift(img, int(dy), int(dx))
            img = img + cfg.noise * rng.normal(size=img.shape)
            images.append(img)
            ids.append(pid)
            cams.append(cam)
            if is_train:
                split.append(TRAIN)
            elif cam not in seen_cams:
                split.append(QUERY)
                seen_cams.add(cam)
            else:
                split.append(GALLERY)
    return SyntheticReidDataset(
        np.stack(images), np.array(ids), np.array(cams), np.array(split), seed
    )


def identity_subset(dataset: SyntheticReidDataset, fraction: float, seed: int) -> np.ndarray:
    """Train indices restricted to a seeded prefix of the train identities.

    For a fixed seed the subsets are nested: a smaller fraction keeps a
    prefix of the identities a larger one keeps. The test split is untouched.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("data.identity_fraction must lie in (0, 1]")
    ids = dataset.train_ids
    order = np.random.default_rng([seed, 7]).permutation(ids)
    keep = np.sort(order[: max(2, math.ceil(fraction * len(ids)))])
    idx = dataset.indices(TRAIN)
    return idx[np.isin(dataset.ids[idx], keep)]


# ---------------------------------------------------------------------------
# PK sampling


@dataclass
class PKBatch:
    indices: np.ndarray
    labels: np.ndarray
    p: int
    k: int

    def check(self) -> None:
        ids, counts = np.unique(self.labels, return_counts=True)
        if len(ids) != self.p or np.any(counts != self.k) or len(self.labels) != self.p * self.k:
            raise SamplerContractError(f"batch is not {self.p} identities x {self.k} instances")


class PKSampler:
    """Identity-balanced batches: P identities with K instances each.

    Within an epoch each identity's instances are shuffled and cut into
    chunks of K (a short final chunk is topped up from the same identity);
    identities are visited in a seeded order and each batch takes one chunk
    from each of the next P identities that still have chunks.
    """

    def __init__(self, labels, p: int, k: int, seed: int, indices: Optional[np.ndarray] = None):
        labels = np.asarray(labels)
        self.indices = np.arange(len(labels)) if indices is None else np.asarray(indices)
        self.labels = labels
        self.p, self.k, self.seed = p, k, seed
        if p < 2 or k < 2:
            raise SamplerContractError("P and K must both be at least 2 for triplet mining")
        self.by_id: dict[int, np.ndarray] = {}
        for pid in np.unique(labels[self.indices]):
            self.by_id[int(pid)] = self.indices[labels[self.indices] == pid]
        if len(self.by_id) < p:
            raise SamplerContractError(f"need at least P={p} identities, have {len(self.by_id)}")
        short = [pid for pid, idx in self.by_id.items() if len(idx) < k]
        if short:
            raise SamplerContractError(f"identities with fewer than K={k} instances: {short[:5]}")

    def epoch(self, epoch: int) -> list[PKBatch]:
        rng = np.random.default_rng([self.seed, epoch])
        chunks: dict[int, list[np.ndarray]] = {}
        for pid, idx in self.by_id.items():
            perm = rng.permutation(idx)
            parts = [perm[i:i + self.k] for i in range(0, len(perm), self.k)]
            if len(parts[-1]) < self.k:
                rest = np.setdiff1d(idx, parts[-1])
                fill = rng.choice(rest, self.k - len(parts[-1]), replace=False)
                parts[-1] = np.concatenate([parts[-1], fill])
            chunks[pid] = parts
        queue = [int(x) for x in rng.permutation(list(self.by_id))]
        batches = []
        while True:
            ready = [pid for pid in queue if chunks[pid]][: self.p]
            if len(ready) < self.p:
                break
            idx = np.concatenate([chunks[pid].pop() for pid in ready])
            # identities that just contributed move to the back of the queue
            queue = [pid for pid in queue if pid not in ready] + ready
            batches.append(PKBatch(idx, self.labels[idx], self.p, self.k))
        return batches

    def __iter__(self) -> Iterator[PKBatch]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def pk_sampler(dataset: SyntheticReidDataset, p: int, k: int, seed: int) -> Iterator[PKBatch]:
    """Endless stream of PK batches over the train split."""
    return iter(PKSampler(dataset.ids, p, k, seed, dataset.indices(TRAIN)))


# ---------------------------------------------------------------------------
# dump / load


def dump_dataset(dataset: SyntheticReidDataset, root, cfg: Optional[GeneratorConfig] = None) -> Path:
    """Write ``manifest.txt`` plus ``images.f32`` (little-endian float32)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    m, ch, h, w = dataset.images.shape
    lines = [f"count={m}", f"channels={ch}", f"height={h}", f"width={w}", f"seed={dataset.seed}"]
    if cfg is not None:
        lines += [f"generator.{k}={v}" for k, v in asdict(cfg).items()]
    lines += [
        "ids=" + ",".join(map(str, dataset.ids.tolist())),
        "cams=" + ",".join(map(str, dataset.cams.tolist())),
        "split=" + ",".join(map(str, dataset.split.tolist())),
    ]
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    dataset.images.astype("<f4").tofile(root / "images.f32")
    return root


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"manifest line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(root) -> SyntheticReidDataset:
    root = Path(root)
    kv = _parse_kv((root / "manifest.txt").read_text(encoding="utf-8"))
    try:
        shape = tuple(int(kv[k]) for k in ("count", "channels", "height", "width"))
        ids = np.array([int(x) for x in kv["ids"].split(",")])
        cams = np.array([int(x) for x in kv["cams"].split(",")])
        split = np.array([int(x) for x in kv["split"].split(",")])
        seed = int(kv.get("seed", 0))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"bad dataset manifest: {exc}") from exc
    raw = np.fromfile(root / "images.f32", dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ManifestError(f"images.f32 holds {raw.size} floats, manifest says {shape}")
    return SyntheticReidDataset(raw.reshape(shape).astype(np.float64), ids, cams, split, seed)


def generator_config_from_manifest(root) -> Optional[GeneratorConfig]:
    kv = _parse_kv((Path(root) / "manifest.txt").read_text(encoding="utf-8"))
    vals = {}
    for f in fields(GeneratorConfig):
        key = f"generator.{f.name}"
        if key in kv:
            vals[f.name] = type(getattr(GeneratorConfig(), f.name))(kv[key])
    return GeneratorConfig(**vals) if vals else None


# ---------------------------------------------------------------------------
# Market-1501 style image folders

MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_(\d+).*\.(?:jpe?g|png|bmp)$", re.IGNORECASE)
MARKET_SPLITS = {"bounding_box_train": TRAIN, "query": QUERY, "bounding_box_test": GALLERY}


def parse_market_name(name: str) -> Optional[tuple[int, int]]:
    """(identity, camera) from ``<id>_c<cam>_<idx>.<ext>``; None for junk (id -1)."""
    m = MARKET_NAME.match(name)
    if not m:
        return None
    pid, cam = int(m.group(1)), int(m.group(2))
    if pid < 0:
        return None
    return pid, cam


def read_market_folder(root, height: int, width: int) -> SyntheticReidDataset:
    """Load ``bounding_box_train``, ``query`` and ``bounding_box_test`` folders.

    Images are resized to ``height x width`` and scaled to zero-mean per channel.
    """
    from PIL import Image

    root = Path(root)
    images, ids, cams, split = [], [], [], []
    for sub, tag in MARKET_SPLITS.items():
        folder = root / sub
        if not folder.is_dir():
            continue
        for path in sorted(folder.iterdir()):
            parsed = parse_market_name(path.name)
            if parsed is None:
                continue
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB").resize((width, height)), dtype=np.float64)
            images.append(arr.transpose(2, 0, 1) / 255.0)
            ids.append(parsed[0])
            cams.append(parsed[1])
            split.append(tag)
    if not images:
        raise ManifestError(f"no Market-style images under {root}")
    imgs = np.stack(images)
    imgs = (imgs - imgs.mean(axis=(0, 2, 3), keepdims=True)) / (imgs.std(axis=(0, 2, 3), keepdims=True) + 1e-8)
    return SyntheticReidDataset(imgs, np.array(ids), np.array(cams), np.array(split))
