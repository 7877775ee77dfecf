"""Dense training on image segments with cross-entropy and momentum SGD."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .io import BrainMask, LabelMap, Volume
from .network import NetworkSpec, NetworkState, backward, build, forward
from .tensor import log_softmax

__all__ = [
    "TrainingConfig",
    "TrainingSample",
    "TrainingError",
    "sample_segments",
    "cross_entropy_loss",
    "sgd_momentum_step",
    "lr_schedule",
    "train",
    "LOG_FIELDS",
]

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "subepoch", "lr", "mean_loss", "wall_seconds", "val_dsc")


class TrainingError(FloatingPointError):
    """Non-finite loss or gradient; the message names where it happened."""


@dataclass(frozen=True)
class TrainingConfig:
    """Training schedule. Defaults are the published settings."""

    epochs: int = 30
    subepochs_per_epoch: int = 20
    samples_per_subepoch: int = 500
    batch_size: int = 5
    segment_size: int = 27
    initial_lr: float = 0.001
    lr_halving_period: int = 3
    momentum: float = 0.6
    foreground_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for f in ("epochs", "subepochs_per_epoch", "samples_per_subepoch", "batch_size",
                  "segment_size", "lr_halving_period"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.foreground_fraction <= 1:
            raise ValueError("foreground_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def override(self, **kw) -> "TrainingConfig":
        unknown = set(kw) - set(self.keys())
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @classmethod
    def from_file(cls, path) -> "TrainingConfig":
        """Parse ``key = value`` lines (``#`` comments) or a JSON object."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            items = json.loads(text)
        else:
            items = {}
            for lineno, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                k, v = (s.strip() for s in line.split("=", 1))
                items[k] = v
        types = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for k, v in items.items():
            if k not in types:
                raise ValueError(f"{path}: unknown training config key {k!r}")
            parsed[k] = float(v) if types[k] == "float" else int(v)
        return cls(**parsed)


@dataclass
class TrainingSample:
    segment: np.ndarray  # (1, S, S, S)
    labels: np.ndarray  # (s, s, s) with s = S - receptive_field + 1
    center: tuple[int, int, int]


def sample_segments(
    volume: Volume,
    labels: LabelMap,
    n: int,
    rng: np.random.Generator,
    mask: BrainMask | None = None,
    segment_size: int = 27,
    score_size: int = 9,
    foreground_fraction: float = 0.5,
) -> list[TrainingSample]:
    """Draw ``n`` segments and the label block under their score map.

    A fraction ``foreground_fraction`` of segments is centered on a uniformly
    chosen foreground voxel, the rest on a uniform voxel of the brain mask
    (whole volume without a mask). Centers are clamped so the label block
    stays inside the volume; the intensity segment is reflect-padded at the
    borders.
    """
    if volume.dims != labels.dims:
        raise ValueError(f"volume dims {volume.dims} differ from label dims {labels.dims}")
    if (segment_size - score_size) % 2:
        raise ValueError("segment and score sizes must have equal parity")
    if any(d < score_size for d in volume.dims):
        raise ValueError(f"volume {volume.dims} smaller than the {score_size}^3 label block")
    if n <= 0:
        return []
    margin = (segment_size - score_size) // 2
    half = score_size // 2
    padded = np.pad(volume.data, margin, mode="reflect")

    fg = np.flatnonzero(labels.labels > 0)
    region = np.flatnonzero(mask.mask) if mask is not None else None
    if region is not None and region.size == 0:
        raise ValueError("empty brain mask")
    total = int(np.prod(volume.dims))
    lo = np.full(3, half)
    hi = np.asarray(volume.dims) - 1 - (score_size - 1 - half)

    out = []
    for _ in range(n):
        if fg.size and rng.random() < foreground_fraction:
            flat = fg[rng.integers(fg.size)]
        elif region is not None:
            flat = region[rng.integers(region.size)]
        else:
            flat = rng.integers(total)
        c = np.clip(np.unravel_index(flat, volume.dims), lo, hi)
        s = c - half  # label-block origin; equals segment origin in padded coordinates
        seg = padded[s[0]:s[0] + segment_size, s[1]:s[1] + segment_size, s[2]:s[2] + segment_size]
        lab = labels.labels[s[0]:s[0] + score_size, s[1]:s[1] + score_size, s[2]:s[2] + score_size]
        out.append(TrainingSample(seg[None].copy(), lab.copy(), tuple(int(v) for v in c)))
    return out


def cross_entropy_loss(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-probability of the true class, and its score gradient.

    ``scores`` is ``(C, ...)``; ``labels`` has the remaining shape. The
    gradient is ``(softmax - one_hot) / n_voxels``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape[1:] != labels.shape:
        raise ValueError(f"score shape {scores.shape} does not match label shape {labels.shape}")
    C = scores.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    logp = log_softmax(scores)
    onehot = np.arange(C).reshape((C,) + (1,) * labels.ndim) == labels[None]
    nvox = labels.size
    loss = -float(logp[onehot].sum()) / nvox
    grad = np.exp(logp)
    grad -= onehot
    grad /= nvox
    return loss, grad


def sgd_momentum_step(state: NetworkState, grads: dict, lr: float, momentum: float) -> None:
    """Heavy-ball update in place: ``v = momentum * v - lr * g``; ``theta += v``."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {key}")
    for key, g in grads.items():
        v = state.velocity[key]
        if v.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {key} {v.shape}")
        v *= momentum
        v -= lr * g
        state.params[key] += v
    state.version += 1


def lr_schedule(epoch: int, initial_lr: float = 0.001, halving_period: int = 3) -> float:
    """Step decay: halve the rate every ``halving_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * 0.5 ** (epoch // halving_period)


def _draw_subepoch(dataset, cfg: TrainingConfig, spec: NetworkSpec, rng) -> list[TrainingSample]:
    score = cfg.segment_size - spec.receptive_field + 1
    if score < 1:
        raise ValueError(
            f"segment size {cfg.segment_size} below receptive field {spec.receptive_field}"
        )
    which = rng.integers(len(dataset), size=cfg.samples_per_subepoch)
    samples = []
    for i in range(len(dataset)):
        count = int(np.sum(which == i))
        vol, lab, mask = dataset[i]
        samples += sample_segments(
            vol, lab, count, rng, mask, cfg.segment_size, score, cfg.foreground_fraction
        )
    order = rng.permutation(len(samples))
    return [samples[j] for j in order]


def _normalize_dataset(dataset):
    out = []
    for item in dataset:
        if len(item) == 2:
            out.append((item[0], item[1], None))
        else:
            out.append(tuple(item[:3]))
    return out


def train(
    spec: NetworkSpec,
    dataset,
    cfg: TrainingConfig,
    validation=None,
    state: NetworkState | None = None,
    checkpoint_dir=None,
    log_path=None,
) -> tuple[NetworkState, list[dict]]:
    """Run ``cfg.epochs`` x ``cfg.subepochs_per_epoch`` subepochs of minibatch SGD.

    ``dataset`` holds ``(Volume, LabelMap)`` or ``(Volume, LabelMap, BrainMask)``
    items with normalized intensities. Initialization and segment sampling use
    independent streams spawned from ``cfg.seed``. Returns the trained state
    and one log row per subepoch; ``val_dsc`` is filled on the last subepoch of
    each epoch when ``validation`` is given.
    """
    from .checkpoint import save_checkpoint
    from .inference import segment_dense, argmax_labels
    from .metrics import mean_foreground_dsc

    dataset = _normalize_dataset(dataset)
    if not dataset:
        raise ValueError("training dataset is empty")
    init_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if state is None:
        state = build(spec, np.random.default_rng(init_seq))
    sampler = np.random.default_rng(sample_seq)

    rows: list[dict] = []
    log_file = None
    writer = None
    if log_path is not None:
        new = not os.path.exists(log_path)
        log_file = open(log_path, "a", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.initial_lr, cfg.lr_halving_period)
            for sub in range(cfg.subepochs_per_epoch):
                samples = _draw_subepoch(dataset, cfg, spec, sampler)
                losses = []
                for b0 in range(0, len(samples), cfg.batch_size):
                    batch = samples[b0:b0 + cfg.batch_size]
                    x = np.stack([s.segment for s in batch], axis=1)
                    y = np.stack([s.labels for s in batch])
                    scores, cache = forward(state, spec, x)
                    loss, grad = cross_entropy_loss(scores, y)
                    if not np.isfinite(loss):
                        raise TrainingError(f"non-finite loss at epoch {epoch}, subepoch {sub}")
                    grads = backward(state, spec, cache, grad)
                    try:
                        sgd_momentum_step(state, grads, lr, cfg.momentum)
                    except TrainingError as exc:
                        raise TrainingError(f"{exc} at epoch {epoch}, subepoch {sub}") from None
                    losses.append(loss)
                row = {
                    "epoch": epoch,
                    "subepoch": sub,
                    "lr": lr,
                    "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                    "wall_seconds": round(time.perf_counter() - t0, 3),
                    "val_dsc": "",
                }
                if validation and sub == cfg.subepochs_per_epoch - 1:
                    scores = []
                    for item in _normalize_dataset(validation):
                        probs = segment_dense(item[0], state, spec, mask=item[2])
                        scores.append(mean_foreground_dsc(item[1], argmax_labels(probs)))
                    row["val_dsc"] = float(np.mean(scores))
                rows.append(row)
                log.info("epoch %d subepoch %d lr %.3g loss %.5f", epoch, sub, lr, row["mean_loss"])
                if writer is not None:
                    writer.writerow(row)
                    log_file.flush()
            if checkpoint_dir is not None:
                save_checkpoint(
                    Path(checkpoint_dir) / "checkpoint.vxck", state, spec,
                    seed=cfg.seed, epoch=epoch + 1, config=cfg.to_dict(),
                )
    finally:
        if log_file is not None:
            log_file.close()
    return state, rows
