"""Mini CNN and mini vision-transformer arms with feature/attention taps.

Both kinds expose the same surface: ``forward(batch, mode)`` returns logits of
width ``spec.head_dim_out``. Parameters live in an ordered ``name -> Tensor``
mapping whose names are stable across save/load; batch-norm running
statistics live separately as plain arrays.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkernel as nk

CHECKPOINT_MAGIC = b"CASS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")

HEAD_ACTIVATIONS = ("none", "softmax", "sigmoid")
KINDS = ("cnn", "transformer")

# depth -> (stem filters, stage widths)
CNN_LADDER = {
    "small": (8, (8, 16)),
    "base": (16, (16, 32, 32)),
    "large": (32, (32, 64, 64)),
}
# depth -> (blocks, embed_dim, heads)
TRANSFORMER_LADDER = {
    "small": (2, 32, 2),
    "base": (4, 64, 4),
    "large": (6, 96, 4),
}


class GeometryError(ValueError):
    pass


class KindError(TypeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ArmSpec:
    kind: str = "cnn"
    depth: str = "small"
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int | None = None
    num_heads: int | None = None
    num_blocks: int | None = None
    mlp_ratio: int = 2
    stem_filters: int | None = None
    stage_widths: tuple | None = None
    head_dim_out: int = 64
    head_activation: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.head_activation not in HEAD_ACTIVATIONS:
            raise ValueError(f"head_activation must be one of {HEAD_ACTIVATIONS}, got {self.head_activation!r}")
        if self.stage_widths is not None:
            self.stage_widths = tuple(int(w) for w in self.stage_widths)

    def resolved(self) -> ArmSpec:
        """Copy with every ladder-derived field filled in and geometry validated."""
        spec = dataclasses.replace(self)
        if spec.kind == "cnn":
            stem, widths = CNN_LADDER[spec.depth]
            spec.stem_filters = spec.stem_filters or stem
            spec.stage_widths = spec.stage_widths or widths
        else:
            blocks, dim, heads = TRANSFORMER_LADDER[spec.depth]
            spec.num_blocks = spec.num_blocks or blocks
            spec.embed_dim = spec.embed_dim or dim
            spec.num_heads = spec.num_heads or heads
            if spec.image_size % spec.patch_size:
                raise GeometryError(
                    f"image_size {spec.image_size} is not divisible by patch_size {spec.patch_size}"
                )
            if spec.embed_dim % spec.num_heads:
                raise GeometryError(f"embed_dim {spec.embed_dim} is not divisible by num_heads {spec.num_heads}")
        return spec

    def to_dict(self):
        d = dataclasses.asdict(self)
        if d["stage_widths"] is not None:
            d["stage_widths"] = list(d["stage_widths"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2


class ModelArm:
    """One arm: a spec, its named parameters, and its batch-norm buffers."""

    def __init__(self, spec: ArmSpec, params: dict, buffers: dict | None = None):
        self.spec = spec
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    @property
    def kind(self):
        return self.spec.kind

    def parameters(self):
        return self.params

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def clone(self) -> ModelArm:
        params = {k: nk.Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return ModelArm(dataclasses.replace(self.spec), params, buffers)

    def state_arrays(self):
        """Parameters followed by buffers, as plain arrays (for hashing and comparison)."""
        out = {k: v.data for k, v in self.params.items()}
        out.update({k: v for k, v in self.buffers.items()})
        return out

    def _check_geometry(self, x):
        s = self.spec
        want = (s.channels, s.image_size, s.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise GeometryError(f"expected batch of shape (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")

    def features(self, batch, mode="train", taps=None, bn_momentum=0.1):
        """Pooled backbone features (input to the head)."""
        x = batch if isinstance(batch, nk.Tensor) else nk.Tensor(batch, dtype=self._dtype())
        self._check_geometry(x)
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if self.kind == "cnn":
            return _cnn_features(self, x, mode == "train", taps, bn_momentum)
        return _vit_features(self, x, taps)

    def forward(self, batch, mode="train", taps=None, bn_momentum=0.1):
        feats = self.features(batch, mode, taps, bn_momentum)
        if taps is not None:
            taps["pooled"] = feats.data
        logits = nk.linear(feats, self.params["head.weight"], self.params["head.bias"])
        if self.spec.head_activation == "softmax":
            logits = nk.softmax(logits, axis=-1)
        elif self.spec.head_activation == "sigmoid":
            logits = nk.sigmoid(logits)
        return logits

    __call__ = forward

    def _dtype(self):
        return next(iter(self.params.values())).dtype


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


class _Init:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = {}
        self.buffers = {}

    def conv(self, name, filters, channels, k):
        std = math.sqrt(2.0 / (channels * k * k))
        self.params[name] = nk.parameter(self.rng.normal(0.0, std, (filters, channels, k, k)))

    def bn(self, name, channels):
        self.params[f"{name}.gain"] = nk.parameter(np.ones(channels))
        self.params[f"{name}.bias"] = nk.parameter(np.zeros(channels))
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=nk.default_dtype())
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=nk.default_dtype())

    def linear(self, name, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.params[f"{name}.weight"] = nk.parameter(self.rng.uniform(-bound, bound, (fan_in, fan_out)))
        self.params[f"{name}.bias"] = nk.parameter(np.zeros(fan_out))

    def ln(self, name, dim):
        self.params[f"{name}.gain"] = nk.parameter(np.ones(dim))
        self.params[f"{name}.bias"] = nk.parameter(np.zeros(dim))

    def normal(self, name, shape, std=0.02):
        self.params[name] = nk.parameter(self.rng.normal(0.0, std, shape))


def _cnn_layers(spec):
    """(stage index, in width, out width, stride) for each residual stage."""
    layers, width = [], spec.stem_filters
    for i, out in enumerate(spec.stage_widths):
        layers.append((i, width, out, 1 if i == 0 else 2))
        width = out
    return layers


def feature_width(spec: ArmSpec) -> int:
    spec = spec.resolved()
    return spec.stage_widths[-1] if spec.kind == "cnn" else spec.embed_dim


def build_arm(spec: ArmSpec, init="random", seed=0, checkpoint=None) -> ModelArm:
    """Build an arm with fresh parameters, or load one from ``checkpoint``."""
    if init == "checkpoint" or checkpoint is not None:
        if checkpoint is None:
            raise CheckpointError("init='checkpoint' requires a checkpoint path")
        arm = checkpoint_load(checkpoint)
        if arm.spec.resolved().to_dict() != spec.resolved().to_dict():
            raise CheckpointError(f"checkpoint spec {arm.spec.to_dict()} does not match requested {spec.to_dict()}")
        return arm
    if init != "random":
        raise ValueError(f"init must be 'random' or 'checkpoint', got {init!r}")
    spec = spec.resolved()
    b = _Init(seed)
    if spec.kind == "cnn":
        b.conv("stem.conv.weight", spec.stem_filters, spec.channels, 3)
        b.bn("stem.bn", spec.stem_filters)
        for i, cin, cout, stride in _cnn_layers(spec):
            b.conv(f"stage{i}.conv1.weight", cout, cin, 3)
            b.bn(f"stage{i}.bn1", cout)
            b.conv(f"stage{i}.conv2.weight", cout, cout, 3)
            b.bn(f"stage{i}.bn2", cout)
            if cin != cout or stride != 1:
                b.conv(f"stage{i}.proj.weight", cout, cin, 1)
                b.bn(f"stage{i}.proj_bn", cout)
        b.linear("head", spec.stage_widths[-1], spec.head_dim_out)
    else:
        d = spec.embed_dim
        patch_dim = spec.channels * spec.patch_size**2
        b.linear("patch_embed", patch_dim, d)
        b.normal("cls_token", (1, 1, d))
        b.normal("pos_embed", (1, spec.num_patches + 1, d))
        hidden = spec.mlp_ratio * d
        for i in range(spec.num_blocks):
            b.ln(f"block{i}.ln1", d)
            for proj in ("q", "k", "v", "out"):
                b.linear(f"block{i}.attn.{proj}", d, d)
            b.ln(f"block{i}.ln2", d)
            b.linear(f"block{i}.mlp.fc1", d, hidden)
            b.linear(f"block{i}.mlp.fc2", hidden, d)
        b.ln("norm", d)
        b.linear("head", d, spec.head_dim_out)
    return ModelArm(spec, b.params, b.buffers)


def _bn(arm, name, x, training, momentum):
    p = arm.params
    return nk.batch_norm(
        x,
        p[f"{name}.gain"],
        p[f"{name}.bias"],
        arm.buffers[f"{name}.running_mean"],
        arm.buffers[f"{name}.running_var"],
        training=training,
        momentum=momentum,
    )


def _cnn_features(arm, x, training, taps, momentum):
    p = arm.params
    h = nk.conv2d(x, p["stem.conv.weight"], stride=1, pad=1)
    if taps is not None:
        taps["first_conv"] = h.data
    h = nk.relu(_bn(arm, "stem.bn", h, training, momentum))
    for i, cin, cout, stride in _cnn_layers(arm.spec):
        y = nk.conv2d(h, p[f"stage{i}.conv1.weight"], stride=stride, pad=1)
        y = nk.relu(_bn(arm, f"stage{i}.bn1", y, training, momentum))
        y = nk.conv2d(y, p[f"stage{i}.conv2.weight"], stride=1, pad=1)
        y = _bn(arm, f"stage{i}.bn2", y, training, momentum)
        if f"stage{i}.proj.weight" in p:
            skip = nk.conv2d(h, p[f"stage{i}.proj.weight"], stride=stride, pad=0)
            skip = _bn(arm, f"stage{i}.proj_bn", skip, training, momentum)
        else:
            skip = h
        h = nk.relu(nk.add(y, skip))
        if taps is not None:
            taps[f"stage_{i}"] = h.data
    return nk.mean(h, axis=(2, 3))


def _attention(p, prefix, x, heads, taps, layer):
    batch, tokens, d = x.shape
    dh = d // heads

    def split(t):
        return nk.transpose(nk.reshape(t, (batch, tokens, heads, dh)), (0, 2, 1, 3))

    q = split(nk.linear(x, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]))
    k = split(nk.linear(x, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]))
    v = split(nk.linear(x, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]))
    scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = nk.softmax(scores, axis=-1)
    if taps is not None:
        taps.setdefault("attention", []).append(attn.data)
        taps.setdefault("queries", []).append(q.data)
        taps.setdefault("keys", []).append(k.data)
    y = nk.reshape(nk.transpose(nk.matmul(attn, v), (0, 2, 1, 3)), (batch, tokens, d))
    return nk.linear(y, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])


def _vit_features(arm, x, taps):
    p, s = arm.params, arm.spec
    batch = x.shape[0]
    tokens = nk.linear(nk.patchify(x, s.patch_size), p["patch_embed.weight"], p["patch_embed.bias"])
    cls = nk.broadcast_to(p["cls_token"], (batch, 1, s.embed_dim))
    h = nk.add(nk.concat([cls, tokens], axis=1), p["pos_embed"])
    for i in range(s.num_blocks):
        a = nk.layer_norm(h, p[f"block{i}.ln1.gain"], p[f"block{i}.ln1.bias"])
        h = nk.add(h, _attention(p, f"block{i}.attn", a, s.num_heads, taps, i))
        m = nk.layer_norm(h, p[f"block{i}.ln2.gain"], p[f"block{i}.ln2.bias"])
        m = nk.linear(nk.gelu(nk.linear(m, p[f"block{i}.mlp.fc1.weight"], p[f"block{i}.mlp.fc1.bias"])),
                      p[f"block{i}.mlp.fc2.weight"], p[f"block{i}.mlp.fc2.bias"])
        h = nk.add(h, m)
    h = nk.layer_norm(h, p["norm.gain"], p["norm.bias"])
    return h[:, 0]


# ---------------------------------------------------------------------------
# operations on built arms
# ---------------------------------------------------------------------------


def forward_logits(arm: ModelArm, batch, mode="train"):
    return arm.forward(batch, mode)


def swap_head(arm: ModelArm, num_classes: int, seed=0) -> ModelArm:
    """Replace the head with a fresh linear classifier of width ``num_classes``.

    Backbone parameters and buffers are copied unchanged. The new head has no
    output activation; classification losses apply their own softmax.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    new = arm.clone()
    new.spec = dataclasses.replace(new.spec, head_dim_out=int(num_classes), head_activation="none")
    fan_in = new.params["head.weight"].shape[0]
    with nk.precision(arm._dtype()):
        b = _Init(seed)
        b.linear("head", fan_in, num_classes)
    new.params["head.weight"] = b.params["head.weight"]
    new.params["head.bias"] = b.params["head.bias"]
    return new


def attention_weights(arm: ModelArm, batch, mode="eval"):
    """Post-softmax attention of every block, each of shape B×heads×T×T."""
    if arm.kind != "transformer":
        raise KindError("attention_weights needs a transformer arm")
    taps = {}
    arm.forward(batch, mode, taps=taps)
    return taps["attention"]


def feature_map(arm: ModelArm, batch, tap="first_conv", mode="eval"):
    """Pre-pooling CNN activation at ``tap`` (``first_conv`` or ``stage_k``)."""
    if arm.kind != "cnn":
        raise KindError("feature_map needs a cnn arm")
    valid = ["first_conv"] + [f"stage_{i}" for i in range(len(arm.spec.stage_widths))]
    if tap not in valid:
        raise KeyError(f"unknown tap {tap!r}; expected one of {valid}")
    taps = {}
    arm.features(batch, mode, taps=taps)
    return taps[tap]


def recompute_bn_stats(arm: ModelArm, images, batch_size=16):
    """Reset batch-norm buffers and refill them with a cumulative average over ``images``."""
    if not arm.buffers:
        return
    for name, buf in arm.buffers.items():
        buf[...] = 0.0 if name.endswith("running_mean") else 1.0
    for i, start in enumerate(range(0, len(images), batch_size)):
        arm.features(images[start : start + batch_size], mode="train", bn_momentum=1.0 / (i + 1))


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------


def checkpoint_save(arm: ModelArm, path) -> Path:
    """Write ``CASS`` magic, version, JSON index, then little-endian float32 blobs."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for kind, store in (("param", {k: v.data for k, v in arm.params.items()}), ("buffer", arm.buffers)):
        for name, arr in store.items():
            if arr.dtype != np.float32:
                raise CheckpointError(f"{name}: only float32 arms can be checkpointed, got {arr.dtype}")
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
    index = json.dumps({"spec": arm.spec.to_dict(), "tensors": entries}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(index)))
        fh.write(index)
        for blob in blobs:
            fh.write(blob)
    return path


def checkpoint_load(path) -> ModelArm:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, index_len = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    start = _HEADER.size + index_len
    try:
        index = json.loads(raw[_HEADER.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed index ({exc})") from exc
    spec = ArmSpec.from_dict(index["spec"])
    with nk.precision(np.float32):
        template = build_arm(spec, seed=0)
    stored = {e["name"]: e for e in index["tensors"]}
    expected = list(template.params) + list(template.buffers)
    missing = [n for n in expected if n not in stored]
    if missing:
        raise CheckpointError(f"{path}: missing tensor {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    extra = sorted(set(stored) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    blob = memoryview(raw)[start:]
    arrays = {}
    for name in expected:
        e = stored[name]
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        arrays[name] = np.frombuffer(blob[e["offset"] : end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    params = {n: nk.Tensor(arrays[n], requires_grad=True, dtype=np.float32) for n in template.params}
    buffers = {n: arrays[n].copy() for n in template.buffers}
    for n, t in params.items():
        if t.shape != template.params[n].shape:
            raise CheckpointError(f"{path}: {n!r} has shape {t.shape}, expected {template.params[n].shape}")
    return ModelArm(spec, params, buffers)
