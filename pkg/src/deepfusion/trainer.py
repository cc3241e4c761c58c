"""End-to-end SGD training of the deep fusion net.

One batch is a target image, its ground-truth label, and a set of candidate
warped atlases; ``k0`` of those are sampled per step. Updates are plain
SGD with no momentum or weight decay.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import atlas_select, nlplf
from . import feature_net as fn
from .feature_net import FeatureNetParams, Image, LabelMap
from .nlplf import Atlas, SearchWindow

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-7
    epochs: int = 30
    k0: int = 5
    t: int = 3
    loss: str = "l2"
    sampler: str = "random_nmi"
    seed: int = 0
    checkpoint_interval: int = 0
    widths: tuple[int, ...] = fn.DEFAULT_WIDTHS
    filter_size: int = fn.DEFAULT_FILTER
    sigmoid: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.k0 < 1:
            raise ValueError("k0 must be >= 1")
        if self.t < 0:
            raise ValueError("t must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in nlplf.LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.sampler not in atlas_select.SAMPLE_STRATEGIES:
            raise ValueError(f"unknown sampler {self.sampler!r}")


@dataclass
class Batch:
    id: str
    target: Image
    label: LabelMap
    candidates: list[Atlas]


@dataclass
class TrainState:
    params: FeatureNetParams
    rng: np.random.Generator
    epoch: int = 0
    losses: list[float] = field(default_factory=list)
    loss_log: list[tuple[int, str, float]] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for epoch, _, value in self.loss_log:
            by_epoch.setdefault(epoch, []).append(value)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def make_batches(pool, seed=0) -> list[Batch]:
    """Leave-one-out batches: each pool entry is the target once, the rest are its atlases."""
    if len(pool) < 2:
        raise ValueError(f"need at least 2 images in the pool, got {len(pool)}")
    entries = [p if isinstance(p, Atlas) else Atlas(p[0], p[1], str(i)) for i, p in enumerate(pool)]
    batches = []
    for i, e in enumerate(entries):
        others = [a for j, a in enumerate(entries) if j != i]
        batches.append(Batch(e.id or str(i), e.image, e.label, others))
    order = np.random.default_rng(seed).permutation(len(batches))
    return [batches[i] for i in order]


def subject_batches(subjects, seed=0) -> list[Batch]:
    """Batches from subjects that carry their own warped atlases, shuffled by ``seed``."""
    batches = [Batch(s.id, s.target, s.label, list(s.atlases)) for s in subjects]
    order = np.random.default_rng(seed).permutation(len(batches))
    return [batches[i] for i in order]


def new_state(config: TrainConfig, params: FeatureNetParams | None = None) -> TrainState:
    if params is None:
        params = fn.init_params(config.widths, config.filter_size, config.seed, config.sigmoid)
    return TrainState(params.copy(), np.random.default_rng([config.seed, 1]))


def sgd_step(state: TrainState, batch: Batch, config: TrainConfig) -> float:
    """Sample atlases, run the fusion net forward and backward, update parameters in place."""
    k0 = min(config.k0, len(batch.candidates))
    idx = atlas_select.sample_training_atlases(batch.target, batch.candidates, k0, state.rng,
                                               config.sampler, state.params)
    atlases = [batch.candidates[i] for i in idx]
    res = nlplf.fuse_forward_backward(state.params, batch.target, batch.label, atlases,
                                      SearchWindow(config.t), config.loss)
    if config.learning_rate:
        for theta, g in zip(state.params.tensors(), res.grad_params.tensors()):
            theta -= (config.learning_rate * g).astype(theta.dtype)
    state.losses.append(res.loss)
    state.loss_log.append((state.epoch, batch.id, res.loss))
    return res.loss


def train(batches_for_epoch, config: TrainConfig, params: FeatureNetParams | None = None,
          checkpoint_dir: str | os.PathLike | None = None) -> TrainState:
    """Run ``config.epochs`` epochs.

    ``batches_for_epoch(epoch)`` returns that epoch's ordered batch list, or
    pass a list of subjects / pool entries to use the default shuffling.
    """
    if not callable(batches_for_epoch):
        source = list(batches_for_epoch)
        if source and hasattr(source[0], "atlases"):
            batches_for_epoch = lambda e: subject_batches(source, [config.seed, e])  # noqa: E731
        else:
            batches_for_epoch = lambda e: make_batches(source, [config.seed, e])  # noqa: E731
    state = new_state(config, params)
    for epoch in range(config.epochs):
        state.epoch = epoch
        for batch in batches_for_epoch(epoch):
            sgd_step(state, batch, config)
        log.info("epoch %d mean loss %.6f", epoch, state.epoch_means()[-1] if state.loss_log else float("nan"))
        if checkpoint_dir and config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0:
            save_checkpoint(state.params, Path(checkpoint_dir) / f"epoch{epoch + 1:04d}", config)
    state.epoch = config.epochs
    return state


def save_checkpoint(params: FeatureNetParams, directory, config: TrainConfig | None = None) -> Path:
    extra = {"train_config": asdict(config)} if config else None
    return fn.save_checkpoint(params, directory, extra)


def load_checkpoint(path) -> FeatureNetParams:
    return fn.load_checkpoint(path)


def write_loss_csv(state: TrainState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "batch", "loss"])
        for epoch, bid, value in state.loss_log:
            w.writerow([epoch, bid, repr(float(value))])
