"""Attention-based mixed-sample generator.

Shapes use a leading "set" axis ``K`` and an "image in set" axis ``N``:
images ``(K, N, C, H, W)``, ratios ``(K, N)``. The generator weights are
three 1x1 convolutions stored as ``(out, in)`` matrices with biases.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffmath as dm
from .model import Architecture, Network, encoder_features

Params = dict[str, np.ndarray]


def qk_channels(feature_channels: int) -> int:
    """Query/key width: half of the ratio-embedded channel count, at least 1."""
    return max((feature_channels + 1) // 2, 1)


def init_generator(feature_channels: int, rng: np.random.Generator) -> Params:
    c_in = feature_channels + 1
    d = qk_channels(feature_channels)
    bound = 1.0 / math.sqrt(c_in)
    return {
        "query.weight": rng.uniform(-bound, bound, size=(d, c_in)),
        "query.bias": np.zeros(d),
        "key.weight": rng.uniform(-bound, bound, size=(d, c_in)),
        "key.bias": np.zeros(d),
        "value.weight": rng.uniform(-bound, bound, size=(1, c_in)),
        "value.bias": np.zeros(1),
    }


def embed_ratio(z, lam):
    """Prepend a constant plane holding each image's mix ratio.

    ``z`` is ``(..., C, h, w)`` and ``lam`` broadcasts against ``z.shape[:-3]``.
    """
    z = dm.as_tensor(z)
    lam = np.asarray(lam, dtype=z.dtype)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("mix ratios must lie in [0, 1]")
    lead = z.shape[:-3]
    h, w = z.shape[-2:]
    plane = np.broadcast_to(lam.reshape(lam.shape + (1, 1, 1)), lead + (1, h, w))
    return dm.concat([dm.Tensor(np.array(plane)), z], axis=-3)


def qkv_project(z_lam, theta):
    """1x1 projections of ``(..., C+1, h, w)`` to q, k ``(..., d, hw)`` and v ``(..., hw)``."""
    z_lam = dm.as_tensor(z_lam)
    t = {k: dm.as_tensor(v) for k, v in theta.items()}
    c_in = z_lam.shape[-3]
    if t["query.weight"].shape[1] != c_in:
        raise ValueError(
            f"generator expects {t['query.weight'].shape[1]} input channels, got {c_in}"
        )
    lead = z_lam.shape[:-3]
    hw = z_lam.shape[-2] * z_lam.shape[-1]
    flat = dm.reshape(z_lam, lead + (c_in, hw))

    def proj(name):
        out = dm.matmul(t[f"{name}.weight"], flat)
        return dm.add(out, dm.reshape(t[f"{name}.bias"], (-1, 1)))

    q, k = proj("query"), proj("key")
    v = dm.reshape(proj("value"), lead + (hw,))
    return q, k, v


def cross_attention(q, k, v):
    """Policy logits for every image of every set.

    q, k: ``(..., N, d, hw)``; v: ``(..., N, hw)``. For image n the scores
    are ``q_n^T (sum_{i != n} k_i) / sqrt(d)``, softmax-normalized over the
    key position, then applied to ``v_n``. Returns ``(..., N, hw)``.
    """
    q, k, v = dm.as_tensor(q), dm.as_tensor(k), dm.as_tensor(v)
    n_axis = q.ndim - 3
    if q.shape[n_axis] < 2:
        raise ValueError("cross attention needs at least two images")
    if q.shape != k.shape or v.shape != q.shape[:-2] + q.shape[-1:]:
        raise ValueError("query, key and value shapes disagree")
    d = q.shape[-2]
    others = dm.sub(dm.sum_(k, axis=n_axis, keepdims=True), k)
    scores = dm.scale(dm.matmul(dm.transpose(q, _swap_last(q.ndim)), others), 1.0 / math.sqrt(d))
    attn = dm.softmax(scores, axis=-1)
    out = dm.matmul(attn, dm.reshape(v, v.shape + (1,)))
    return dm.reshape(out, v.shape)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def normalize_and_upsample(P, size: tuple[int, int]):
    """Softmax across images at each location, then bilinear resize.

    ``P`` is ``(..., N, h, w)``; returns masks ``(..., N, H, W)`` that sum to
    one over N at every pixel.
    """
    P = dm.as_tensor(P)
    if P.ndim < 3 or P.shape[-3] < 2:
        raise ValueError("need at least two maps stacked on axis -3")
    return dm.upsample_bilinear(dm.softmax(P, axis=-3), size)


def check_masks(masks: np.ndarray, tol: float = 1e-5) -> None:
    if np.any(masks < -tol) or np.any(masks > 1 + tol):
        raise ValueError("mask entries must lie in [0, 1]")
    if np.any(np.abs(masks.sum(axis=-3) - 1.0) > tol):
        raise ValueError("masks must sum to 1 across images at every pixel")


def mix_images(X, masks):
    """``sum_n x_n * mask_n`` with masks broadcast over channels.

    X: ``(..., N, C, H, W)``; masks: ``(..., N, H, W)``. Returns ``(..., C, H, W)``.
    """
    X, masks = dm.as_tensor(X), dm.as_tensor(masks)
    check_masks(masks.data)
    if X.shape[-2:] != masks.shape[-2:] or X.shape[:-3] != masks.shape[:-2]:
        raise ValueError(f"images {X.shape} and masks {masks.shape} disagree")
    m = dm.reshape(masks, masks.shape[:-2] + (1,) + masks.shape[-2:])
    return dm.sum_(dm.mul(X, m), axis=X.ndim - 4)


def policy_masks(arch: Architecture, X: np.ndarray, lam: np.ndarray, theta, features: np.ndarray):
    """Masks ``(K, N, H, W)`` from precomputed encoder features ``(K, N, C, h, w)``."""
    z_lam = embed_ratio(features, lam)
    q, k, v = qkv_project(z_lam, theta)
    P = cross_attention(q, k, v)
    h, w = features.shape[-2:]
    P = dm.reshape(P, P.shape[:-1] + (h, w))
    return normalize_and_upsample(P, X.shape[-2:])


def generate(
    arch: Architecture,
    X: np.ndarray,
    lam: np.ndarray,
    theta,
    encoder: Network,
    layer: int,
    features: np.ndarray | None = None,
):
    """Mixed images ``(K, C, H, W)`` and their masks ``(K, N, H, W)``.

    ``X`` is ``(K, N, C, H, W)`` (a single set ``(N, C, H, W)`` is accepted
    too) and ``lam`` the matching ratios. Differentiable in ``theta`` only.
    """
    X = np.asarray(X)
    lam = np.asarray(lam, dtype=np.float64)
    single = X.ndim == 4
    if single:
        X, lam = X[None], lam[None]
    if X.shape[:2] != lam.shape:
        raise ValueError(f"{X.shape[1]} images but ratios of shape {lam.shape}")
    if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("ratios must lie on the probability simplex")
    K, N = lam.shape
    if features is None:
        flat = encoder_features(arch, encoder, X.reshape((K * N,) + X.shape[2:]), layer)
        features = flat.reshape((K, N) + flat.shape[1:])
    masks = policy_masks(arch, X, lam, theta, features)
    x_mix = mix_images(X, masks)
    if single:
        return x_mix[0], masks[0]
    return x_mix, masks


def mix_labels(Y, lam) -> np.ndarray:
    """Ratio-weighted sum of one-hot labels. Y ``(..., N, classes)``, lam ``(..., N)``."""
    Y = np.asarray(Y, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if Y.shape[:-1] != lam.shape:
        raise ValueError("one ratio per label is required")
    if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("ratios must lie on the probability simplex")
    if np.any((Y != 0) & (Y != 1)) or np.any(Y.sum(axis=-1) != 1):
        raise ValueError("labels must be one-hot")
    return np.einsum("...nk,...n->...k", Y, lam)


def linear_mix(X: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Plain pixel mixup ``sum_n lam_n x_n`` for ``(..., N, C, H, W)`` images."""
    return np.einsum("...nchw,...n->...chw", X, lam)
