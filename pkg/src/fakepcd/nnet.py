"""Shared-MLP point encoder with max pooling, classifier and projection heads.

Everything runs in float64 numpy. The forward pass keeps every activation it
needs so :func:`backward` can produce exact reverse-mode gradients.

Weights are stored ``(in, out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .pointcloud import PointCloud, make_rng

CHECKPOINT_MAGIC = b"FPCD"
CHECKPOINT_VERSION = 1

STAGE_TAGS = {"init": 0, "closed": 1, "open": 2, "anchors": 3}
STAGE_NAMES = {v: k for k, v in STAGE_TAGS.items()}

PAPER_PRESET = {
    "encoder_widths": (3, 64, 128, 1024),
    "classifier_hidden": (512, 256),
    "projection_hidden": (512,),
    "embed_dim": 128,
}
DESK_PRESET = {
    "encoder_widths": (3, 32, 64, 128),
    "classifier_hidden": (512, 256),
    "projection_hidden": (512,),
    "embed_dim": 32,
}


class ModelError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A forward or backward pass produced a non-finite value."""


@dataclass
class Dense:
    W: np.ndarray
    b: np.ndarray
    relu: bool

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


def _init_stack(widths: Sequence[int], rng: np.random.Generator, relu_last: bool) -> List[Dense]:
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if fan_in < 1 or fan_out < 1:
            raise ModelError(f"layer widths must be >= 1, got {tuple(widths)}")
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        last = i == len(widths) - 2
        layers.append(Dense(W, np.zeros(fan_out), relu=relu_last or not last))
    return layers


@dataclass
class Model:
    encoder: List[Dense]
    classifier: List[Dense] = field(default_factory=list)
    projection: List[Dense] = field(default_factory=list)
    stage: str = "init"

    @property
    def global_dim(self) -> int:
        return self.encoder[-1].out_dim

    @property
    def num_classes(self) -> Optional[int]:
        return self.classifier[-1].out_dim if self.classifier else None

    @property
    def embed_dim(self) -> Optional[int]:
        return self.projection[-1].out_dim if self.projection else None

    def stacks(self) -> Iterator[Tuple[str, List[Dense]]]:
        yield "encoder", self.encoder
        yield "classifier", self.classifier
        yield "projection", self.projection

    def parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        """(name, array) pairs in declaration order; arrays are live views."""
        for stack_name, layers in self.stacks():
            for i, layer in enumerate(layers):
                yield f"{stack_name}.{i}.W", layer.W
                yield f"{stack_name}.{i}.b", layer.b

    def widths(self, stack: str) -> Tuple[int, ...]:
        layers = dict(self.stacks())[stack]
        if not layers:
            return ()
        return (layers[0].in_dim,) + tuple(layer.out_dim for layer in layers)

    def copy(self) -> "Model":
        def dup(layers):
            return [Dense(l.W.copy(), l.b.copy(), l.relu) for l in layers]

        return Model(dup(self.encoder), dup(self.classifier), dup(self.projection), self.stage)


def _check_chain(widths: Sequence[int], what: str) -> None:
    if len(widths) < 2:
        raise ModelError(f"{what} needs at least an input and output width, got {tuple(widths)}")
    if any(int(w) < 1 for w in widths):
        raise ModelError(f"{what} widths must be positive, got {tuple(widths)}")


def init_model(
    encoder_widths: Sequence[int] = DESK_PRESET["encoder_widths"],
    num_classes: Optional[int] = None,
    embed_dim: Optional[int] = None,
    seed: int = 0,
    classifier_hidden: Sequence[int] = (512, 256),
    projection_hidden: Sequence[int] = (512,),
) -> Model:
    """Build a model with Glorot-uniform weights and zero biases.

    ``num_classes`` / ``embed_dim`` of ``None`` leave the corresponding head out.
    """
    _check_chain(encoder_widths, "encoder")
    if encoder_widths[0] != 3:
        raise ModelError(f"encoder input width must be 3, got {encoder_widths[0]}")
    rng = make_rng(seed)
    g = encoder_widths[-1]
    encoder = _init_stack(encoder_widths, rng, relu_last=True)
    classifier: List[Dense] = []
    projection: List[Dense] = []
    if num_classes is not None:
        widths = (g, *classifier_hidden, num_classes)
        _check_chain(widths, "classifier")
        classifier = _init_stack(widths, rng, relu_last=False)
    if embed_dim is not None:
        if embed_dim < 2:
            raise ModelError(f"embedding dimension must be >= 2, got {embed_dim}")
        widths = (g, *projection_hidden, embed_dim)
        _check_chain(widths, "projection")
        projection = _init_stack(widths, rng, relu_last=False)
    return Model(encoder, classifier, projection)


def attach_projection(model: Model, embed_dim: int, seed: int, hidden: Sequence[int] = (512,)) -> Model:
    """Open-stage model from any checkpoint: encoder kept, classifier dropped, fresh projection."""
    out = model.copy()
    out.classifier = []
    widths = (model.global_dim, *hidden, embed_dim)
    _check_chain(widths, "projection")
    out.projection = _init_stack(widths, make_rng(seed), relu_last=False)
    return out


# --- forward ----------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Activations of one batched forward pass.

    Arrays carry a leading batch axis. ``feature_map`` is the pre-pool
    ``(B, n, g)`` map and ``argmax[b, c]`` is the point that wins channel ``c``.
    """

    inputs: np.ndarray
    encoder_acts: List[np.ndarray]
    feature_map: np.ndarray
    argmax: np.ndarray
    global_feature: np.ndarray
    classifier_acts: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    projection_acts: List[np.ndarray] = field(default_factory=list)
    raw_embedding: Optional[np.ndarray] = None
    embedding: Optional[np.ndarray] = None
    model_id: int = 0


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ W + b`` summed over input channels in a fixed order.

    BLAS kernels may round a row differently depending on where it sits in the
    matrix; accumulating channel by channel gives every row the same operation
    sequence, so a point's features do not depend on its position or on which
    other points share the batch.
    """
    cols = np.moveaxis(x, -1, 0)
    out = cols[0][..., None] * W[0]
    for k in range(1, W.shape[0]):
        out += cols[k][..., None] * W[k]
    out += b
    return out


def _dense_forward(x: np.ndarray, layers: Sequence[Dense], where: str) -> List[np.ndarray]:
    acts = [x]
    for i, layer in enumerate(layers):
        z = affine(acts[-1], layer.W, layer.b)
        if layer.relu:
            z = np.maximum(z, 0.0)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation in {where} layer {i}")
        acts.append(z)
    return acts


def encode_batch(model: Model, points: np.ndarray, heads: Sequence[str] = ("classifier", "projection")) -> ForwardTrace:
    """Forward a ``(B, n, 3)`` batch; heads absent from the model are skipped."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[1] == 0:
        raise ModelError(f"expected (B, n, 3) nonempty points, got {x.shape}")
    enc = _dense_forward(x, model.encoder, "encoder")
    fmap = enc[-1]
    # np.argmax returns the first maximum, so ties go to the lowest point index
    arg = np.argmax(fmap, axis=1)
    gfeat = np.take_along_axis(fmap, arg[:, None, :], axis=1)[:, 0, :]
    trace = ForwardTrace(x, enc, fmap, arg, gfeat, model_id=id(model))
    if "classifier" in heads and model.classifier:
        trace.classifier_acts = _dense_forward(gfeat, model.classifier, "classifier")
        trace.logits = trace.classifier_acts[-1]
    if "projection" in heads and model.projection:
        trace.projection_acts = _dense_forward(gfeat, model.projection, "projection")
        raw = trace.projection_acts[-1]
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise NumericError("projection output has zero norm")
        trace.raw_embedding = raw
        trace.embedding = raw / norm
    return trace


def encode(model: Model, cloud: PointCloud | np.ndarray, heads: Sequence[str] = ("classifier", "projection")) -> ForwardTrace:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return encode_batch(model, pts[None], heads)


def embed(model: Model, points: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Unit embeddings for a ``(B, n, 3)`` array, computed in chunks."""
    out = [
        encode_batch(model, points[i : i + batch_size], heads=("projection",)).embedding
        for i in range(0, len(points), batch_size)
    ]
    return np.concatenate(out, axis=0)


def predict_logits(model: Model, points: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [
        encode_batch(model, points[i : i + batch_size], heads=("classifier",)).logits
        for i in range(0, len(points), batch_size)
    ]
    return np.concatenate(out, axis=0)


# --- backward ---------------------------------------------------------------


def _dense_backward(acts: List[np.ndarray], layers: Sequence[Dense], grad: np.ndarray, prefix: str, out: Dict[str, np.ndarray]) -> np.ndarray:
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.relu:
            # subgradient 0 at exactly zero
            grad = grad * (acts[i + 1] > 0)
        x = acts[i]
        out[f"{prefix}.{i}.W"] = x.reshape(-1, x.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        out[f"{prefix}.{i}.b"] = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        grad = grad @ layer.W.T
    return grad


def backward(
    model: Model,
    trace: ForwardTrace,
    grad_logits: Optional[np.ndarray] = None,
    grad_embedding: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. logits and/or unit embeddings.

    Returns a dict keyed like :meth:`Model.parameters`; heads that receive no
    upstream gradient get zero gradients.
    """
    if trace.model_id != id(model):
        raise ModelError("trace was produced by a different model")
    grads: Dict[str, np.ndarray] = {}
    B, g = trace.global_feature.shape
    dglobal = np.zeros((B, g))
    if grad_logits is not None:
        if trace.logits is None:
            raise ModelError("trace has no classifier output")
        grad_logits = np.asarray(grad_logits, dtype=np.float64).reshape(trace.logits.shape)
        dglobal += _dense_backward(trace.classifier_acts, model.classifier, grad_logits, "classifier", grads)
    if grad_embedding is not None:
        if trace.embedding is None:
            raise ModelError("trace has no projection output")
        dz = np.asarray(grad_embedding, dtype=np.float64).reshape(trace.embedding.shape)
        z = trace.embedding
        norm = np.linalg.norm(trace.raw_embedding, axis=1, keepdims=True)
        draw = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm
        dglobal += _dense_backward(trace.projection_acts, model.projection, draw, "projection", grads)
    # max pool routes each channel's gradient to its argmax point only
    dfmap = np.zeros_like(trace.feature_map)
    np.put_along_axis(dfmap, trace.argmax[:, None, :], dglobal[:, None, :], axis=1)
    _dense_backward(trace.encoder_acts, model.encoder, dfmap, "encoder", grads)
    for name, p in model.parameters():
        if name not in grads:
            grads[name] = np.zeros_like(p)
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


# --- checkpoints ------------------------------------------------------------


class CheckpointError(IOError):
    pass


def _pack_dims(model: Model) -> bytes:
    seq: List[int] = []
    for stack_name, _ in model.stacks():
        w = model.widths(stack_name)
        seq.append(len(w))
        seq.extend(w)
    return struct.pack("<I", len(seq)) + struct.pack(f"<{len(seq)}I", *seq)


def save_checkpoint(model: Model, path) -> None:
    """Layout: magic, u16 version, u32 dims sequence, stage byte, float64 params, CRC32."""
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<H", CHECKPOINT_VERSION)
    body += _pack_dims(model)
    body += struct.pack("<B", STAGE_TAGS[model.stage])
    for _, p in model.parameters():
        body += np.ascontiguousarray(p, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def _read_header(data: bytes, path) -> Tuple[int, List[int], int]:
    """Return (offset after stage byte, dims sequence, stage tag)."""
    if len(data) < 4 + 2 + 4 + 1 + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    crc_stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch (truncated or corrupt)")
    (count,) = struct.unpack_from("<I", data, 6)
    off = 10
    if off + 4 * count + 1 > len(data) - 4:
        raise CheckpointError(f"{path}: truncated dims")
    dims = list(struct.unpack_from(f"<{count}I", data, off))
    off += 4 * count
    stage = data[off]
    return off + 1, dims, stage


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    off, dims, stage = _read_header(data, path)
    if stage not in STAGE_NAMES or STAGE_NAMES[stage] == "anchors":
        raise CheckpointError(f"{path}: not a model checkpoint (stage tag {stage})")
    stacks = []
    i = 0
    for _ in range(3):
        if i >= len(dims):
            raise CheckpointError(f"{path}: malformed dims sequence")
        k = dims[i]
        stacks.append(tuple(dims[i + 1 : i + 1 + k]))
        i += 1 + k
    payload = data[off:-4]
    values = np.frombuffer(payload, dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > values.size:
            raise CheckpointError(f"{path}: truncated parameters")
        arr = values[pos : pos + size].reshape(shape).astype(np.float64)
        pos += size
        return arr

    built = []
    for s, widths in enumerate(stacks):
        layers = []
        for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            W = take((a, b))
            bias = take((b,))
            last = j == len(widths) - 2
            relu = True if s == 0 else not last
            layers.append(Dense(W, bias, relu))
        built.append(layers)
    if pos != values.size:
        raise CheckpointError(f"{path}: {values.size - pos} trailing parameter values")
    return Model(built[0], built[1], built[2], STAGE_NAMES[stage])
