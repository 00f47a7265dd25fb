"""Training loop: temporal pair batches, LARS updates and EMA targets.

Every batch gets a seed derived from the global seed and the batch index.
Each anchor's neighbour draw and both augmentations use a generator seeded
from (batch seed, anchor record), so a batch can be rebuilt from the replay
log alone and does not depend on worker scheduling.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .contrastive import Batch, Encoder, EncoderConfig, EncoderState, LossReport, TrainOptions, train_step
from .geometry import CropSpec
from .optim import Lars, LarsConfig
from .pairs import AugmentPolicy, TemporalWindow, augment, record_view, sample_present
from .shards import FrameRecord

log = logging.getLogger(__name__)


class PairDataset:
    """Gaze crops grouped by video, indexed by global record position."""

    def __init__(self, records: Iterable[FrameRecord], spec: CropSpec):
        recs = sorted(records, key=lambda r: (r.video_id, r.frame_index))
        if not recs:
            raise ValueError("no records to train on")
        self.spec = spec
        self.images = np.stack([record_view(r, spec) for r in recs])
        self.video_ids = np.array([r.video_id for r in recs], dtype=np.int64)
        self.frame_index = np.array([r.frame_index for r in recs], dtype=np.int64)
        self._present: dict[int, np.ndarray] = {}
        self._lookup: dict[int, dict[int, int]] = {}
        for vid in np.unique(self.video_ids):
            pos = np.nonzero(self.video_ids == vid)[0]
            self._present[int(vid)] = self.frame_index[pos]
            self._lookup[int(vid)] = {int(f): int(p) for f, p in zip(self.frame_index[pos], pos)}

    def __len__(self):
        return len(self.images)

    def neighbor(self, i: int, window: TemporalWindow, rng) -> int:
        vid = int(self.video_ids[i])
        f = sample_present(int(self.frame_index[i]), self._present[vid], window, rng)
        return self._lookup[vid][f]


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy.desk)
    delta_t: float = 15.0
    fps: int = 5
    batch_size: int = 64
    epochs: int = 1
    steps: int = 0  # 0: derive from epochs
    tau: float = 0.1
    momentum: float = 0.996
    base_lr: float = 1.6
    weight_decay: float = 1e-6
    warmup_fraction: float = 0.01
    lars_momentum: float = 0.9
    trust_coefficient: float = 1e-3
    include_positive: bool = True
    symmetric: bool = False
    seed: int = 0
    prefetch: int = 0

    @property
    def window(self) -> TemporalWindow:
        return TemporalWindow(self.delta_t, self.fps)

    def total_steps(self, n_records: int) -> int:
        if self.steps:
            return self.steps
        per_epoch = n_records // self.batch_size
        if per_epoch < 1:
            raise ValueError(f"{n_records} records cannot fill a batch of {self.batch_size}")
        return per_epoch * self.epochs


def batch_seed(seed: int, batch_index: int) -> int:
    return int(np.random.SeedSequence([seed, 200, batch_index]).generate_state(1)[0])


def batch_anchors(n: int, batch_size: int, seed: int, batch_index: int) -> np.ndarray:
    per_epoch = n // batch_size
    epoch, j = divmod(batch_index, per_epoch)
    perm = np.random.default_rng([seed, 100, epoch]).permutation(n)
    return perm[j * batch_size:(j + 1) * batch_size]


def assemble_batch(ds: PairDataset, anchors: np.ndarray, seed: int, window: TemporalWindow,
                   policy: AugmentPolicy):
    """Views for one batch plus the neighbour chosen for each anchor."""
    vq, vk, nbrs = [], [], []
    for a in anchors:
        rng = np.random.default_rng([seed, int(a)])
        j = ds.neighbor(int(a), window, rng)
        vq.append(augment(ds.images[a], policy, rng, view_index=0))
        vk.append(augment(ds.images[j], policy, rng, view_index=1))
        nbrs.append(j)
    return Batch(np.stack(vq), np.stack(vk)), np.array(nbrs)


def replay_pairs(ds: PairDataset, config: TrainConfig, batch_index: int, seed: int) -> list[tuple[int, int]]:
    """Rebuild the (anchor, neighbour) record pairs of a logged batch."""
    anchors = batch_anchors(len(ds), config.batch_size, config.seed, batch_index)
    out = []
    for a in anchors:
        rng = np.random.default_rng([seed, int(a)])
        out.append((int(a), ds.neighbor(int(a), config.window, rng)))
    return out


@dataclass
class TrainResult:
    encoder: Encoder
    state: EncoderState
    history: list[LossReport]
    seeds: list[tuple[int, int]]


def _batches(ds: PairDataset, config: TrainConfig, total: int):
    for b in range(total):
        s = batch_seed(config.seed, b)
        anchors = batch_anchors(len(ds), config.batch_size, config.seed, b)
        batch, _ = assemble_batch(ds, anchors, s, config.window, config.policy)
        yield b, s, batch


def _prefetched(gen, depth: int):
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def run():
        try:
            for item in gen:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=run, daemon=True).start()
    while (item := q.get()) is not done:
        yield item


def train(ds: PairDataset, config: TrainConfig, state: EncoderState | None = None,
          progress: bool = False) -> TrainResult:
    if config.policy.out_size != config.encoder.input_size:
        raise ValueError("augmentation output size must match the encoder input size")
    encoder = Encoder(config.encoder)
    if state is None:
        state = EncoderState.create(encoder, np.random.default_rng([config.seed, 300]))
    total = config.total_steps(len(ds))
    optimizer = Lars(LarsConfig(
        base_lr=config.base_lr, batch_size=config.batch_size, weight_decay=config.weight_decay,
        warmup_fraction=config.warmup_fraction, total_steps=total,
        momentum=config.lars_momentum, trust_coefficient=config.trust_coefficient))
    opts = TrainOptions(config.tau, config.momentum, config.include_positive, config.symmetric)
    history, seeds = [], []
    batches = _batches(ds, config, total)
    if config.prefetch > 0:
        batches = _prefetched(batches, config.prefetch)
    for b, s, batch in batches:
        state, report = train_step(encoder, batch, state, optimizer, opts)
        history.append(report)
        seeds.append((b, s))
        if progress and (b % 50 == 0 or b == total - 1):
            log.info("step %d/%d loss %.4f lr %.4g", b, total, report.loss_value, report.lr)
    return TrainResult(encoder, state, history, seeds)


def write_loss_csv(history: list[LossReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "pos_sim", "neg_sim", "lr"])
        for i, r in enumerate(history):
            w.writerow([i, repr(r.loss_value), repr(r.positive_similarity_mean),
                        repr(r.negative_similarity_mean), repr(r.lr)])


def write_replay_log(seeds: list[tuple[int, int]], path) -> None:
    Path(path).write_text("".join(f"{b}\t{s}\n" for b, s in seeds))


def read_replay_log(path) -> list[tuple[int, int]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            b, s = line.split("\t")
            out.append((int(b), int(s)))
    return out
