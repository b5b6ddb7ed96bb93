"""Residual CNN classifier, its EMA copies and the checkpoint format.

Networks are functional: parameters live in plain ``dict[str, ndarray]``
and :func:`forward` wraps whichever of them the caller wants
differentiated. Freezing a network is therefore just not wrapping it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmath as dm

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    image_size: int = 16
    num_classes: int = 3
    widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 4:
            raise ValueError("the backbone needs at least 4 stages")

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    def stage_stride(self, stage: int) -> int:
        return 1 if stage == 1 else 2

    def stage_shape(self, stage: int) -> tuple[int, int, int]:
        """(C, H, W) of the stage-``stage`` output; stage 0 is the stem."""
        size = self.image_size
        for s in range(1, stage + 1):
            if self.stage_stride(s) == 2:
                size = (size - 1) // 2 + 1
        width = self.widths[0] if stage == 0 else self.widths[stage - 1]
        return width, size, size


@dataclass
class Network:
    """Trainable parameters plus batch-norm running statistics."""

    params: Params
    buffers: Params

    def copy(self) -> "Network":
        return Network(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def prefix(self, stages: int) -> "Network":
        keep = _prefix_names(stages)
        return Network(
            {k: v.copy() for k, v in self.params.items() if k.split(".")[0] in keep},
            {k: v.copy() for k, v in self.buffers.items() if k.split(".")[0] in keep},
        )


def _prefix_names(stages: int) -> set[str]:
    return {"stem"} | {f"stage{s}" for s in range(1, stages + 1)}


# ---------------------------------------------------------------------- init


def _conv_init(rng, out_c, in_c, k):
    std = math.sqrt(2.0 / (in_c * k * k))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k))


def _add_bn(params, buffers, name, c):
    params[f"{name}.gamma"] = np.ones(c)
    params[f"{name}.beta"] = np.zeros(c)
    buffers[f"{name}.mean"] = np.zeros(c)
    buffers[f"{name}.var"] = np.ones(c)


def init_classifier(arch: Architecture, rng: np.random.Generator) -> Network:
    params: Params = {}
    buffers: Params = {}
    params["stem.conv.weight"] = _conv_init(rng, arch.widths[0], arch.in_channels, 3)
    _add_bn(params, buffers, "stem.bn", arch.widths[0])
    in_c = arch.widths[0]
    for s in range(1, arch.n_stages + 1):
        out_c = arch.widths[s - 1]
        for b in range(arch.blocks_per_stage):
            stride = arch.stage_stride(s) if b == 0 else 1
            name = f"stage{s}.block{b}"
            params[f"{name}.conv1.weight"] = _conv_init(rng, out_c, in_c, 3)
            _add_bn(params, buffers, f"{name}.bn1", out_c)
            params[f"{name}.conv2.weight"] = _conv_init(rng, out_c, out_c, 3)
            _add_bn(params, buffers, f"{name}.bn2", out_c)
            if stride != 1 or in_c != out_c:
                params[f"{name}.short.weight"] = _conv_init(rng, out_c, in_c, 1)
                _add_bn(params, buffers, f"{name}.shortbn", out_c)
            in_c = out_c
    bound = 1.0 / math.sqrt(in_c)
    params["head.weight"] = rng.uniform(-bound, bound, size=(arch.num_classes, in_c))
    params["head.bias"] = np.zeros(arch.num_classes)
    return Network(params, buffers)


# ------------------------------------------------------------------- forward


def _bn(p, buffers, name, x, training, update_stats):
    return dm.batch_norm(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        buffers[f"{name}.mean"],
        buffers[f"{name}.var"],
        training=training,
        update_stats=update_stats,
    )


def _block(p, buffers, name, x, stride, training, update_stats):
    out = dm.conv2d(x, p[f"{name}.conv1.weight"], stride=stride, padding=1)
    out = dm.relu(_bn(p, buffers, f"{name}.bn1", out, training, update_stats))
    out = dm.conv2d(out, p[f"{name}.conv2.weight"], stride=1, padding=1)
    out = _bn(p, buffers, f"{name}.bn2", out, training, update_stats)
    if f"{name}.short.weight" in p:
        short = dm.conv2d(x, p[f"{name}.short.weight"], stride=stride)
        short = _bn(p, buffers, f"{name}.shortbn", short, training, update_stats)
    else:
        short = x
    return dm.relu(dm.add(out, short))


def forward(
    arch: Architecture,
    params,
    buffers: Params,
    x,
    training: bool = False,
    update_stats: bool = False,
    upto: int | None = None,
):
    """Run the network on a (B, C, H, W) batch.

    ``params`` values may be arrays (constants) or :class:`Tensor` objects.
    Returns ``(logits, pooled_features)``, or the stage-``upto`` activation
    map when ``upto`` is given.
    """
    x = dm.as_tensor(x)
    expected = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape[1:]} does not match architecture {expected}")
    p = {k: dm.as_tensor(v) for k, v in params.items()}
    out = dm.conv2d(x, p["stem.conv.weight"], stride=1, padding=1)
    out = dm.relu(_bn(p, buffers, "stem.bn", out, training, update_stats))
    last = arch.n_stages if upto is None else upto
    for s in range(1, last + 1):
        for b in range(arch.blocks_per_stage):
            stride = arch.stage_stride(s) if b == 0 else 1
            out = _block(p, buffers, f"stage{s}.block{b}", out, stride, training, update_stats)
    if upto is not None:
        return out
    feats = dm.global_avg_pool(out)
    logits = dm.linear(feats, p["head.weight"], p["head.bias"])
    return logits, feats


def predict_proba(arch: Architecture, net: Network, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Inference-mode class probabilities as a plain array."""
    out = []
    for start in range(0, len(x), batch_size):
        logits, _ = forward(arch, net.params, net.buffers, x[start : start + batch_size])
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, arch.num_classes))


def encoder_features(arch: Architecture, encoder: Network, x, layer: int) -> np.ndarray:
    """Stage-``layer`` activation map of the EMA encoder (inference mode).

    The result is a plain array: nothing downstream can send gradient into
    the encoder weights.
    """
    if not 1 <= layer <= arch.n_stages:
        raise ValueError(f"feature layer {layer} outside 1..{arch.n_stages}")
    missing = _prefix_names(layer) - {k.split(".")[0] for k in encoder.params}
    if missing:
        raise ValueError(f"encoder has no weights for {sorted(missing)}")
    return forward(arch, encoder.params, encoder.buffers, x, upto=layer).data


# ----------------------------------------------------------------------- EMA


def ema_update(target: Params, source: Params, xi: float) -> None:
    """In place: ``target <- xi * target + (1 - xi) * source`` for shared keys."""
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi}")
    for k, t in target.items():
        s = source[k]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        t *= xi
        t += (1.0 - xi) * s


def copy_buffers(target: Params, source: Params) -> None:
    for k, t in target.items():
        t[...] = source[k]


@dataclass(frozen=True)
class XiSchedule:
    xi_start: float = 0.999
    total_steps: int = 1

    def __call__(self, step: int) -> float:
        return xi_at(self, step)


def xi_at(schedule: XiSchedule, step: int) -> float:
    """Cosine ramp of the EMA momentum from ``xi_start`` up to 1."""
    T = max(schedule.total_steps, 1)
    t = min(max(step, 0), T)
    return 1.0 - (1.0 - schedule.xi_start) * (1.0 + math.cos(math.pi * t / T)) / 2.0


# -------------------------------------------------------------- model state


@dataclass
class ModelState:
    """Classifier W, generator theta, EMA teacher and EMA encoder."""

    arch: Architecture
    classifier: Network
    teacher: Network
    encoder: Network
    generator: Params
    feature_layer: int = 3
    step: int = 0
    extra: dict = field(default_factory=dict)

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def init_state(arch: Architecture, feature_layer: int, rng: np.random.Generator) -> ModelState:
    from .mixblock import init_generator

    clf = init_classifier(arch, rng)
    c = arch.stage_shape(feature_layer)[0]
    return ModelState(
        arch=arch,
        classifier=clf,
        teacher=clf.copy(),
        encoder=clf.prefix(feature_layer),
        generator=init_generator(c, rng),
        feature_layer=feature_layer,
    )


# ---------------------------------------------------------------- checkpoint

MAGIC = b"ADVMIXCK"
VERSION = 1


def _groups(state: ModelState):
    yield "classifier.params", state.classifier.params
    yield "classifier.buffers", state.classifier.buffers
    yield "teacher.params", state.teacher.params
    yield "teacher.buffers", state.teacher.buffers
    yield "encoder.params", state.encoder.params
    yield "encoder.buffers", state.encoder.buffers
    yield "generator", state.generator


def checkpoint_bytes(state: ModelState) -> bytes:
    """Serialize to ``MAGIC | u32 version | u64 header len | JSON header | <f8 blobs``."""
    index = []
    blobs = []
    offset = 0
    for group, tensors in _groups(state):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "arch": asdict(state.arch),
        "feature_layer": state.feature_layer,
        "step": state.step,
        "extra": state.extra,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(path, state: ModelState) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    blob = checkpoint_bytes(state)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    body = blob[20 + hlen :]
    groups: dict[str, Params] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    arch = Architecture(**header["arch"])
    return ModelState(
        arch=arch,
        classifier=Network(groups.get("classifier.params", {}), groups.get("classifier.buffers", {})),
        teacher=Network(groups.get("teacher.params", {}), groups.get("teacher.buffers", {})),
        encoder=Network(groups.get("encoder.params", {}), groups.get("encoder.buffers", {})),
        generator=groups.get("generator", {}),
        feature_layer=header["feature_layer"],
        step=header["step"],
        extra=header.get("extra", {}),
    )
