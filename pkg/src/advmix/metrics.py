"""Accuracy, calibration and robustness metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm

FGSM_EPS = 8 / 255


@dataclass
class PredictionSet:
    probs: np.ndarray  # S x classes
    labels: np.ndarray  # S

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.labels):
            raise ValueError("need one probability row per label")
        if np.any(self.probs < -1e-12) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("probability rows must lie on the simplex")


def top_k_accuracy(preds: PredictionSet, k: int = 1) -> float:
    """Fraction of samples whose label is among the ``k`` most probable classes.

    Ties are resolved in favour of the lower class index.
    """
    n, classes = preds.probs.shape
    if n == 0:
        raise ValueError("empty prediction set")
    if not 1 <= k <= classes:
        raise ValueError(f"k must lie in [1, {classes}]")
    order = np.argsort(-preds.probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == preds.labels[:, None], axis=1)))


def ece(preds: PredictionSet, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width max-probability bins.

    Bin b covers ``(b/n, (b+1)/n]``; a confidence of exactly 0 falls in bin 0.
    """
    conf = preds.probs.max(axis=1)
    correct = preds.probs.argmax(axis=1) == preds.labels
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = len(conf)
    err = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            err += sel.sum() / total * abs(correct[sel].mean() - conf[sel].mean())
    return float(err)


def _logits_of(out):
    return out[0] if isinstance(out, tuple) else out


def input_gradient(model: Callable, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d CE(model(x), y) / dx for integer labels ``y``."""
    with dm.Tape() as tape:
        xt = dm.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
        logits = _logits_of(model(xt))
        num_classes = logits.shape[-1]
        loss = dm.cross_entropy_soft(logits, np.eye(num_classes)[y], reduction="sum")
        tape.backward(loss)
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def fgsm_attack(model: Callable, x: np.ndarray, y: np.ndarray, eps: float = FGSM_EPS) -> np.ndarray:
    """One signed-gradient step of size ``eps``, clamped back into [0, 1]."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    g = input_gradient(model, x, np.asarray(y))
    return np.clip(x + eps * np.sign(g), 0.0, 1.0)


def occlusion_order(n_images: int, grid: tuple[int, int], seed: int) -> np.ndarray:
    """Per-image random ordering of patch cells; masks take prefixes of it."""
    rng = np.random.default_rng(seed)
    cells = grid[0] * grid[1]
    return np.stack([rng.permutation(cells) for _ in range(n_images)]) if n_images else np.zeros((0, cells), int)


def occlude(images: np.ndarray, patch: tuple[int, int], ratio: float, seed: int = 0) -> np.ndarray:
    """Zero ``round(ratio * cells)`` random non-overlapping patches per image.

    Patches tile the image on a fixed grid; edge cells are clipped when the
    image size is not a multiple of the patch size. For a fixed seed the
    masked set grows monotonically with ``ratio``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    H, W = images.shape[-2:]
    ph, pw = patch
    gh, gw = math.ceil(H / ph), math.ceil(W / pw)
    count = int(math.floor(ratio * gh * gw + 0.5))
    order = occlusion_order(len(images), (gh, gw), seed)
    out = np.array(images, dtype=np.float64, copy=True)
    for i in range(len(out)):
        for cell in order[i, :count]:
            r, c = divmod(int(cell), gw)
            out[i, ..., r * ph : (r + 1) * ph, c * pw : (c + 1) * pw] = 0.0
    return out


def occlusion_eval(
    predict_proba: Callable[[np.ndarray], np.ndarray],
    images: np.ndarray,
    labels: np.ndarray,
    patch: tuple[int, int] = (16, 16),
    ratios: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    seed: int = 0,
) -> dict[float, float]:
    """Top-1 accuracy after masking each fraction of patches."""
    result = {}
    for r in ratios:
        masked = occlude(images, patch, r, seed)
        result[r] = top_k_accuracy(PredictionSet(predict_proba(masked), labels), 1)
    return result


def fgsm_accuracy(
    model: Callable,
    predict_proba: Callable[[np.ndarray], np.ndarray],
    images: np.ndarray,
    labels: np.ndarray,
    eps: float = FGSM_EPS,
    batch_size: int = 200,
) -> float:
    adv = [
        fgsm_attack(model, images[s : s + batch_size], labels[s : s + batch_size], eps)
        for s in range(0, len(images), batch_size)
    ]
    return top_k_accuracy(PredictionSet(predict_proba(np.concatenate(adv)), labels), 1)


def format_eps(eps: float) -> str:
    """``8/255`` style label when ``eps`` is a whole number of 8-bit levels."""
    levels = eps * 255
    if abs(levels - round(levels)) < 1e-9:
        return f"{int(round(levels))}/255"
    return repr(eps)


def summary_block(metrics: dict[str, float]) -> str:
    width = max((len(k) for k in metrics), default=0)
    lines = ["metrics"] + [f"  {k.ljust(width)}  {v:.4f}" for k, v in metrics.items()]
    return "\n".join(lines)
