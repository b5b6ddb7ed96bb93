"""Loss terms and the two composite objectives of the min-max game.

A "network" argument here is any callable mapping a ``(B, C, H, W)`` batch
to ``(logits, pooled_features)``; :func:`network_fn` builds one from a
:class:`~advmix.model.Network`. Batched inputs carry a leading set axis:
``X`` is ``(K, N, C, H, W)``, ``Y`` is ``(K, N, classes)`` one-hot and
``lam`` is ``(K, N)``. Every loss averages over the K sets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import diffmath as dm
from .mixblock import generate, linear_mix, mix_labels
from .model import Architecture, ModelState, Network, forward

NetFn = Callable[[object], tuple]


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")


@dataclass
class LossReport:
    l_amce: float = 0.0
    l_mce: float = 0.0
    l_ace: float = 0.0
    l_amce_teacher: float = 0.0
    l_cosine: float = 0.0
    classifier_total: float = 0.0
    generator_total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def full_total(self, weights: LossWeights, cosine_sign: float = 1.0) -> float:
        """Value of the complete min-max objective (reporting only)."""
        return (
            self.classifier_total
            - weights.beta * self.l_amce_teacher
            + cosine_sign * (1.0 - weights.beta) * self.l_cosine
        )


def network_fn(
    arch: Architecture,
    net: Network,
    params=None,
    training: bool = False,
    update_stats: bool = False,
) -> NetFn:
    """Bind a network; ``params`` overrides ``net.params`` (e.g. with Tensors)."""
    p = net.params if params is None else params

    def run(x):
        return forward(arch, p, net.buffers, x, training=training, update_stats=update_stats)

    return run


def _frozen(params) -> dict:
    """Plain-array view of a parameter dict so no gradient can reach it."""
    return {k: (v.data if isinstance(v, dm.Tensor) else v) for k, v in params.items()}


def _check_simplex(lam: np.ndarray) -> None:
    if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("mix ratios must lie on the probability simplex")


def _flat(X):
    return X.reshape((-1,) + X.shape[-3:])


def _batched(X, lam, *rest):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        return (X[None], lam[None]) + tuple(r[None] for r in rest)
    return (X, lam) + rest


# ----------------------------------------------------------------- raw terms


def ace_from_logits(logits, Y, lam):
    """``mean_k sum_n lam_kn * CE(logits_kn, y_kn)``; logits ``(K*N, classes)``."""
    K, N = lam.shape
    per = dm.cross_entropy_soft(logits, Y.reshape(K * N, -1), reduction="none")
    weighted = dm.mul(dm.reshape(per, (K, N)), lam)
    return dm.mean(dm.sum_(weighted, axis=1))


def cosine_from_features(f_mix, f_src, lam):
    """``mean_k sum_n lam_kn * cos(f_mix_k, f_src_kn)``; f_src ``(K*N, F)``."""
    K, N = lam.shape
    src = dm.reshape(f_src, (K, N, -1))
    mix = dm.reshape(f_mix, (K, 1, -1))
    cos = dm.cosine_similarity(mix, src, axis=-1)
    return dm.mean(dm.sum_(dm.mul(cos, lam), axis=1))


# -------------------------------------------------------------- loss terms


def ace_loss(net: NetFn, X, Y, lam):
    """Ratio-weighted cross entropy of the unmixed source images."""
    X, lam, Y = _batched(np.asarray(X), lam, np.asarray(Y, dtype=np.float64))
    _check_simplex(lam)
    logits, _ = net(_flat(X))
    return ace_from_logits(logits, Y, lam)


def amce_loss(net: NetFn, x_mix, y_mix):
    """Cross entropy of the network on generated mixes against mixed labels."""
    y_mix = np.asarray(y_mix, dtype=np.float64)
    x_mix = dm.as_tensor(x_mix)
    if x_mix.ndim == 3:
        x_mix = dm.reshape(x_mix, (1,) + x_mix.shape)
        y_mix = y_mix[None]
    logits, _ = net(x_mix)
    return dm.cross_entropy_soft(logits, y_mix)


def mce_loss(net: NetFn, X, lam, y_mix):
    """Cross entropy on the *linear* pixel mix of the sources."""
    X, lam, y_mix = _batched(np.asarray(X), lam, np.asarray(y_mix, dtype=np.float64))
    _check_simplex(lam)
    logits, _ = net(linear_mix(X, lam))
    return dm.cross_entropy_soft(logits, y_mix)


def cosine_loss(teacher: NetFn, x_mix, X, lam):
    """Ratio-weighted cosine similarity of teacher features, mix vs. sources."""
    x_mix = dm.as_tensor(x_mix)
    X, lam = _batched(np.asarray(X), lam)
    if x_mix.ndim == 3:
        x_mix = dm.reshape(x_mix, (1,) + x_mix.shape)
    _check_simplex(lam)
    _, f_mix = teacher(x_mix)
    _, f_src = teacher(_flat(X))
    return cosine_from_features(f_mix, f_src, lam)


def classifier_objective(l_amce, l_mce, l_ace, alpha: float):
    """``L_amce + alpha * L_mce + (1 - alpha) * L_ace``; floats or Tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return l_amce + alpha * l_mce + (1.0 - alpha) * l_ace


def generator_objective(l_amce, l_amce_teacher, l_cosine, beta: float, cosine_sign: float = 1.0):
    """``L_amce - beta * L_amce(teacher) + sign * (1 - beta) * L_cosine`` (maximized)."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return l_amce - beta * l_amce_teacher + cosine_sign * (1.0 - beta) * l_cosine


# ------------------------------------------------------- composite evaluators


def classifier_loss(
    state: ModelState,
    X: np.ndarray,
    Y: np.ndarray,
    lam: np.ndarray,
    x_mix: np.ndarray,
    alpha: float,
    params=None,
    training: bool = True,
    update_stats: bool = False,
):
    """Classifier objective with one forward pass over mixes and sources.

    ``x_mix`` is treated as a constant (the generator is frozen here).
    Returns ``(total, report)``; ``total`` is differentiable in ``params``.
    """
    X, lam, Y = _batched(np.asarray(X), lam, np.asarray(Y, dtype=np.float64))
    x_mix = np.asarray(x_mix.data if isinstance(x_mix, dm.Tensor) else x_mix)
    if x_mix.ndim == 3:
        x_mix = x_mix[None]
    _check_simplex(lam)
    K, N = lam.shape
    y_mix = mix_labels(Y, lam)
    batch = np.concatenate([x_mix, linear_mix(X, lam), _flat(X)])
    net = network_fn(state.arch, state.classifier, params, training, update_stats)
    logits, _ = net(batch)
    l_amce = dm.cross_entropy_soft(logits[:K], y_mix)
    l_mce = dm.cross_entropy_soft(logits[K : 2 * K], y_mix)
    l_ace = ace_from_logits(logits[2 * K :], Y, lam)
    total = classifier_objective(l_amce, l_mce, l_ace, alpha)
    report = LossReport(
        l_amce=float(l_amce.data),
        l_mce=float(l_mce.data),
        l_ace=float(l_ace.data),
        classifier_total=float(total.data),
    )
    return total, report


def generator_loss(
    state: ModelState,
    X: np.ndarray,
    Y: np.ndarray,
    lam: np.ndarray,
    beta: float,
    theta=None,
    features: np.ndarray | None = None,
    cosine_sign: float = 1.0,
    classifier_training: bool = True,
):
    """Generator objective; classifier, teacher and encoder enter as constants.

    Returns ``(total, report, x_mix)``; ``total`` is differentiable only in
    ``theta`` (defaults to ``state.generator``).
    """
    X, lam, Y = _batched(np.asarray(X), lam, np.asarray(Y, dtype=np.float64))
    _check_simplex(lam)
    K, N = lam.shape
    theta = state.generator if theta is None else theta
    x_mix, _ = generate(state.arch, X, lam, theta, state.encoder, state.feature_layer, features)
    y_mix = mix_labels(Y, lam)
    student = network_fn(state.arch, state.classifier, _frozen(state.classifier.params), training=classifier_training)
    l_amce = amce_loss(student, x_mix, y_mix)
    teacher = network_fn(state.arch, state.teacher, _frozen(state.teacher.params))
    # inference-mode teacher: sources can run untracked in their own pass
    t_logits, t_mix = teacher(x_mix)
    _, t_src = teacher(_flat(X))
    l_amce_t = dm.cross_entropy_soft(t_logits, y_mix)
    l_cos = cosine_from_features(t_mix, t_src, lam)
    total = generator_objective(l_amce, l_amce_t, l_cos, beta, cosine_sign)
    report = LossReport(
        l_amce=float(l_amce.data),
        l_amce_teacher=float(l_amce_t.data),
        l_cosine=float(l_cos.data),
        generator_total=float(total.data),
    )
    return total, report, x_mix
