"""Embedding networks built from autodiff ops, plus a bit-exact checkpoint format.

Two architectures: an MLP for vector data and a four-block conv net for
images (3x3 conv -> ReLU -> 2x2 max-pool per block, global spatial mean,
linear head). No batch norm, so there is no train/eval mode split and
per-task fine-tuning semantics stay unambiguous.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add_bias,
    conv2d_3x3,
    matmul,
    maxpool_2x2,
    relu,
    spatial_mean,
)

STAGES = ("random", "pretrained", "metatrained")

CHECKPOINT_MAGIC = b"PMFC"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    """BackboneSpec violates its invariants."""


class CheckpointError(Exception):
    """Base class for checkpoint (de)serialization failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    kind: str                    # "mlp" or "conv4"
    input_shape: tuple           # (D,) for mlp, (C, H, W) for conv4
    hidden_widths: tuple         # layer widths (mlp) or per-block channels (conv4)
    embed_dim: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden_widths", tuple(int(v) for v in self.hidden_widths))
        if self.kind not in ("mlp", "conv4"):
            raise SpecError(f"unknown backbone kind {self.kind!r}")
        if self.embed_dim < 2:
            raise SpecError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if any(w < 1 for w in self.hidden_widths):
            raise SpecError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.kind == "mlp":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise SpecError(f"mlp input_shape must be (D,), got {self.input_shape}")
        else:
            if len(self.input_shape) != 3:
                raise SpecError(f"conv4 input_shape must be (C,H,W), got {self.input_shape}")
            if len(self.hidden_widths) != 4:
                raise SpecError("conv4 takes exactly four per-block channel counts")
            _, h, w = self.input_shape
            if h % 16 or w % 16:
                raise SpecError(
                    f"conv4 needs H,W divisible by 16 (four 2x2 pools), got {h}x{w}"
                )


def parameter_shapes(spec: BackboneSpec) -> "OrderedDict[str, tuple]":
    """Parameter names and shapes are a pure function of the spec."""
    shapes = OrderedDict()
    if spec.kind == "mlp":
        widths = [spec.input_shape[0], *spec.hidden_widths, spec.embed_dim]
        for i in range(len(widths) - 1):
            shapes[f"w{i}"] = (widths[i], widths[i + 1])
            shapes[f"b{i}"] = (widths[i + 1],)
    else:
        c_in = spec.input_shape[0]
        for i, c_out in enumerate(spec.hidden_widths):
            shapes[f"conv{i}"] = (c_out, c_in, 3, 3)
            shapes[f"cbias{i}"] = (c_out,)
            c_in = c_out
        shapes["head_w"] = (c_in, spec.embed_dim)
        shapes["head_b"] = (spec.embed_dim,)
    return shapes


def parameter_count(spec: BackboneSpec) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(spec).values())


class Backbone:
    """Live trainable parameters; single-owner during a forward/backward pass."""

    def __init__(self, spec: BackboneSpec, params: "OrderedDict[str, Tensor]"):
        self.spec = spec
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        if self.spec.kind == "mlp":
            n_layers = len(self.spec.hidden_widths) + 1
            h = x
            for i in range(n_layers):
                h = add_bias(matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"])
                if i < n_layers - 1:
                    h = relu(h)
            return h
        h = x
        for i in range(4):
            h = conv2d_3x3(h, self.params[f"conv{i}"])
            h = relu(add_bias(h, self.params[f"cbias{i}"]))
            h = maxpool_2x2(h)
        h = spatial_mean(h)
        return add_bias(matmul(h, self.params["head_w"]), self.params["head_b"])

    def snapshot(self, stage: str, seed=None) -> "Checkpoint":
        return Checkpoint(
            spec=self.spec,
            params={k: v.data.copy() for k, v in self.params.items()},
            stage=stage,
            seed=self.spec.seed if seed is None else int(seed),
        )


@dataclass
class Checkpoint:
    """Immutable parameter snapshot; shareable across threads and tasks."""

    spec: BackboneSpec
    params: dict
    stage: str
    seed: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise SpecError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def metadata(self) -> dict:
        return {
            "kind": self.spec.kind,
            "input_shape": list(self.spec.input_shape),
            "hidden_widths": list(self.spec.hidden_widths),
            "embed_dim": self.spec.embed_dim,
            "stage": self.stage,
            "seed": self.seed,
        }

    def digest(self) -> str:
        blob = json.dumps(self.metadata(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_backbone(spec: BackboneSpec) -> Backbone:
    """He-uniform init, fully determined by spec (same spec -> same bits)."""
    rng = np.random.default_rng(spec.seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(spec).items():
        if len(shape) == 1:  # biases start at zero
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return Backbone(spec, params)


def embed(backbone: Backbone, batch) -> Tensor:
    """Map a batch to the m-dimensional feature space (not normalized here)."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = backbone.spec.input_shape
    if x.data.shape[1:] != expected:
        raise ShapeError(
            f"batch items have shape {x.data.shape[1:]}, backbone expects {expected}"
        )
    return backbone.forward(x)


def clone_for_task(checkpoint: Checkpoint) -> Backbone:
    """Independent copy; mutating it never touches the checkpoint or siblings."""
    params = OrderedDict(
        (name, Tensor(checkpoint.params[name].copy(), requires_grad=True))
        for name in parameter_shapes(checkpoint.spec)
    )
    return Backbone(checkpoint.spec, params)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Little-endian container: magic, version, tensors, JSON metadata."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", CHECKPOINT_VERSION, len(checkpoint.params))
    for name in parameter_shapes(checkpoint.spec):
        arr = np.ascontiguousarray(checkpoint.params[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    meta = json.dumps(checkpoint.metadata(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(meta))
    out += meta
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Cursor:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"payload ends at byte {len(self.blob)}, needed {self.pos + n}"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    cur = _Cursor(blob)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic in {path}")
    version, count = cur.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    tensors = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        (rank,) = cur.unpack("<B")
        dims = cur.unpack(f"<{rank}Q")
        size = int(np.prod(dims)) if rank else 1
        payload = cur.take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    (meta_len,) = cur.unpack("<I")
    try:
        meta = json.loads(cur.take(meta_len).decode("utf-8"))
        spec = BackboneSpec(
            kind=meta["kind"],
            input_shape=tuple(meta["input_shape"]),
            hidden_widths=tuple(meta["hidden_widths"]),
            embed_dim=int(meta["embed_dim"]),
            seed=int(meta["seed"]),
        )
        stage, seed = meta["stage"], int(meta["seed"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"bad metadata in {path}: {exc}") from exc
    expected = parameter_shapes(spec)
    if set(tensors) != set(expected):
        raise CheckpointShapeError(
            f"parameter names {sorted(tensors)} do not match spec {sorted(expected)}"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointShapeError(
                f"parameter {name!r} has shape {tensors[name].shape}, spec wants {shape}"
            )
    return Checkpoint(spec=spec, params=tensors, stage=stage, seed=seed)
