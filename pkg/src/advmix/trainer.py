"""Alternating min-max training loop and the two baseline modes."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable

import numpy as np

from . import diffmath as dm
from .config import TrainConfig
from .data import Batch, batch_iterator
from .mixblock import generate, linear_mix, mix_labels
from .model import (
    Architecture,
    ModelState,
    XiSchedule,
    copy_buffers,
    ema_update,
    encoder_features,
    forward,
    init_state,
    xi_at,
)
from .objectives import LossReport, classifier_loss, generator_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    l_amce: float
    l_mce: float
    l_ace: float
    l_amce_teacher: float
    l_cosine: float
    classifier_total: float
    generator_total: float
    xi: float
    lr: float
    gen_lr: float
    wall_clock: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def write_log(path, rows: Iterable[TrainLogRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TrainLogRow.header())
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


@dataclass
class MixSets:
    X: np.ndarray  # K x N x C x H x W
    Y: np.ndarray  # K x N x classes
    lam: np.ndarray  # K x N

    @classmethod
    def from_batch(cls, batch: Batch, num_classes: int) -> "MixSets":
        eye = np.eye(num_classes)
        return cls(batch.images[batch.groups], eye[batch.labels[batch.groups]], batch.ratios)


# ------------------------------------------------------------------ updates


def sgd_update(params, grads, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    """Heavy-ball SGD with coupled L2 decay, applied in place."""
    for k, w in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(w)
        if weight_decay:
            g = g + weight_decay * w
        if momentum:
            buf = velocity.get(k)
            if buf is None:
                buf = velocity[k] = g.copy()
            else:
                buf *= momentum
                buf += g
            g = buf
        w -= lr * g


def _check(value: float, grads: dict, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what}: non-finite loss {value}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"{what}: non-finite gradient for {k}")


def _grads_of(tensors: dict) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


def classifier_step(
    state: ModelState,
    sets: MixSets,
    config: TrainConfig,
    velocity: dict | None = None,
    lr: float | None = None,
    x_mix: np.ndarray | None = None,
) -> LossReport:
    """One descent step on the classifier weights; generator output is frozen."""
    lr = config.lr if lr is None else lr
    velocity = {} if velocity is None else velocity
    if x_mix is None:
        x_mix = generate(state.arch, sets.X, sets.lam, state.generator, state.encoder, state.feature_layer)[0].data
    params = {k: dm.Tensor(v, requires_grad=True) for k, v in state.classifier.params.items()}
    with dm.Tape() as tape:
        total, report = classifier_loss(
            state, sets.X, sets.Y, sets.lam, x_mix, config.alpha, params, training=True, update_stats=True
        )
        tape.backward(total)
    grads = _grads_of(params)
    _check(report.classifier_total, grads, "classifier step")
    sgd_update(state.classifier.params, grads, velocity, lr, config.momentum, config.weight_decay)
    return report


def generator_step(
    state: ModelState,
    sets: MixSets,
    config: TrainConfig,
    gen_lr: float | None = None,
    features: np.ndarray | None = None,
) -> LossReport:
    """One ascent step on the generator weights; every other network is frozen."""
    gen_lr = (config.gen_lr if config.gen_lr is not None else config.lr / 10) if gen_lr is None else gen_lr
    theta = {k: dm.Tensor(v, requires_grad=True) for k, v in state.generator.items()}
    with dm.Tape() as tape:
        try:
            total, report, _ = generator_loss(
                state, sets.X, sets.Y, sets.lam, config.beta, theta, features, config.cosine_sign
            )
        except dm.ZeroNormError as exc:
            raise DivergenceError(f"generator step: {exc}") from exc
        tape.backward(total)
    grads = _grads_of(theta)
    _check(report.generator_total, grads, "generator step")
    for k, w in state.generator.items():
        w += gen_lr * grads[k]
    return report


def plain_step(state: ModelState, images, labels, config: TrainConfig, velocity, lr: float) -> LossReport:
    """Ordinary cross-entropy SGD step on unmixed images."""
    targets = np.eye(state.arch.num_classes)[labels]
    params = {k: dm.Tensor(v, requires_grad=True) for k, v in state.classifier.params.items()}
    with dm.Tape() as tape:
        logits, _ = forward(state.arch, params, state.classifier.buffers, images, training=True, update_stats=True)
        loss = dm.cross_entropy_soft(logits, targets)
        tape.backward(loss)
    grads = _grads_of(params)
    _check(float(loss.data), grads, "plain step")
    sgd_update(state.classifier.params, grads, velocity, lr, config.momentum, config.weight_decay)
    value = float(loss.data)
    return LossReport(l_ace=value, classifier_total=value)


def baseline_input_mixup_step(state: ModelState, sets: MixSets, config: TrainConfig, velocity, lr: float) -> LossReport:
    """Classic two-image pixel mixup with a Beta-distributed ratio."""
    if sets.lam.shape[-1] != 2:
        raise ValueError("input mixup mixes exactly two images")
    x = linear_mix(sets.X, sets.lam)
    y = mix_labels(sets.Y, sets.lam)
    params = {k: dm.Tensor(v, requires_grad=True) for k, v in state.classifier.params.items()}
    with dm.Tape() as tape:
        logits, _ = forward(state.arch, params, state.classifier.buffers, x, training=True, update_stats=True)
        loss = dm.cross_entropy_soft(logits, y)
        tape.backward(loss)
    grads = _grads_of(params)
    _check(float(loss.data), grads, "mixup step")
    sgd_update(state.classifier.params, grads, velocity, lr, config.momentum, config.weight_decay)
    value = float(loss.data)
    return LossReport(l_mce=value, classifier_total=value)


def ema_step(state: ModelState, xi: float) -> None:
    """Pull the teacher and encoder toward the classifier; copy BN statistics."""
    ema_update(state.teacher.params, state.classifier.params, xi)
    copy_buffers(state.teacher.buffers, state.classifier.buffers)
    ema_update(state.encoder.params, state.classifier.params, xi)
    copy_buffers(state.encoder.buffers, state.classifier.buffers)


# --------------------------------------------------------------------- loop


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / max(epochs, 1)))


class Trainer:
    """Owns a :class:`ModelState` plus optimizer state and runs epochs."""

    def __init__(self, config: TrainConfig, arch: Architecture, state: ModelState | None = None):
        self.config = config.resolved()
        self.arch = arch
        self.state = state or init_state(arch, self.config.feature_layer, np.random.default_rng(self.config.seed))
        self.velocity: dict = {}
        self.skips = 0
        self.schedule = XiSchedule(self.config.xi_start, 1)

    def batches(self, x, y, epoch: int):
        c = self.config
        return batch_iterator(
            x,
            y,
            c.batch_size,
            c.n_mix,
            c.lam_concentration,
            seed=c.seed,
            epoch=epoch,
            flip=c.augment_flip,
            crop=c.augment_crop,
            padding=c.crop_padding,
            sets_per_batch=c.sets_per_batch,
        )

    def train_batch(self, batch: Batch, lr: float) -> LossReport:
        c, state = self.config, self.state
        if c.mode == "vanilla" or batch.n_sets == 0:
            report = LossReport()
            for _ in range(c.t1):
                report = plain_step(state, batch.images, batch.labels, c, self.velocity, lr)
            return report
        sets = MixSets.from_batch(batch, self.arch.num_classes)
        if c.mode == "input-mixup":
            return baseline_input_mixup_step(state, sets, c, self.velocity, lr)
        K, N = sets.lam.shape
        feats = encoder_features(self.arch, state.encoder, sets.X.reshape((K * N,) + sets.X.shape[2:]), state.feature_layer)
        feats = feats.reshape((K, N) + feats.shape[1:])
        x_mix = generate(self.arch, sets.X, sets.lam, state.generator, state.encoder, state.feature_layer, feats)[0].data
        for _ in range(c.t1):
            report = classifier_step(state, sets, c, self.velocity, lr, x_mix)
        for _ in range(c.t2):
            g = generator_step(state, sets, c, c.gen_lr, feats)
            report.l_amce_teacher = g.l_amce_teacher
            report.l_cosine = g.l_cosine
            report.generator_total = g.generator_total
        return report

    def train_epoch(self, x, y, epoch: int, total_steps: int | None = None) -> list[TrainLogRow]:
        c = self.config
        if total_steps is None:
            total_steps = math.ceil(len(x) / c.batch_size) * c.epochs
        self.schedule = XiSchedule(c.xi_start, total_steps)
        lr = cosine_lr(c.lr, epoch, c.epochs)
        rows = []
        t0 = time.perf_counter()
        for batch in self.batches(x, y, epoch):
            try:
                report = self.train_batch(batch, lr)
            except DivergenceError as exc:
                self.skips += 1
                log.warning("epoch %d step %d skipped: %s", epoch, self.state.step, exc)
                if self.skips > c.max_skips:
                    raise
                continue
            xi = xi_at(self.schedule, self.state.step)
            ema_step(self.state, xi)
            self.state.step += 1
            rows.append(
                TrainLogRow(
                    epoch=epoch,
                    step=self.state.step,
                    **asdict(report),
                    xi=xi,
                    lr=lr,
                    gen_lr=c.gen_lr,
                    wall_clock=time.perf_counter() - t0,
                )
            )
        return rows

    def fit(self, x, y, callback: Callable[[int, list[TrainLogRow]], None] | None = None) -> list[TrainLogRow]:
        c = self.config
        per_epoch = math.ceil(len(x) / c.batch_size)
        total = per_epoch * c.epochs
        history = []
        for epoch in range(c.epochs):
            rows = self.train_epoch(x, y, epoch, total_steps=total)
            history.extend(rows)
            if callback is not None:
                callback(epoch, rows)
        return history


def train_epoch(state: ModelState, x, y, config: TrainConfig, epoch: int, trainer: Trainer | None = None):
    """Functional wrapper: run one epoch on ``state``; returns ``(state, rows)``."""
    trainer = trainer or Trainer(config, state.arch, state)
    rows = trainer.train_epoch(x, y, epoch)
    return trainer.state, rows
