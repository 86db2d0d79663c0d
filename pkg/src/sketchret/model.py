"""Encoders, classifier heads, gradient reversal, and exact backward passes.

Everything is plain numpy with float64 parameters. Each layer caches what its
backward pass needs, so a forward call in training mode returns a ForwardTrace
that can later be replayed backwards to accumulate parameter gradients.
"""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, UsageError

Array = np.ndarray

LOG_EPS = 1e-12

# ---------------------------------------------------------------------------
# layers


class DenseLayer:
    """y = act(x @ w + b) with w of shape (in, out)."""

    kind = "dense"

    def __init__(self, w: Array, b: Array, activation: str = "none", name: str = "dense"):
        if activation not in ("none", "relu"):
            raise ConfigurationError(f"layer {name}: unknown activation {activation!r}")
        self.w = w
        self.b = b
        self.activation = activation
        self.name = name
        self.dw = np.zeros_like(w)
        self.db = np.zeros_like(b)

    def forward(self, x: Array, train: bool):
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ConfigurationError(
                f"layer {self.name}: expected input width {self.w.shape[0]}, got shape {x.shape}")
        pre = x @ self.w + self.b
        out = np.maximum(pre, 0.0) if self.activation == "relu" else pre
        cache = (x, pre) if train else None
        return out, cache

    def backward(self, cache, dy: Array) -> Array:
        x, pre = cache
        if self.activation == "relu":
            dy = dy * (pre > 0)
        self.dw += x.T @ dy
        self.db += dy.sum(axis=0)
        return dy @ self.w.T

    def zero_grad(self):
        self.dw[...] = 0.0
        self.db[...] = 0.0

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]

    def grads(self):
        return [(f"{self.name}.w", self.dw), (f"{self.name}.b", self.db)]

    def spec(self) -> dict:
        return {"kind": "dense", "in": int(self.w.shape[0]), "out": int(self.w.shape[1]),
                "activation": self.activation}


class ConvLayer:
    """3x3 same-padding convolution + ReLU + 2x2 average pooling.

    Input (B, H, W, Cin), kernel (3, 3, Cin, Cout). Implemented with im2col so
    the backward pass is an exact transpose of the forward matmul.
    """

    kind = "conv"

    def __init__(self, w: Array, b: Array, name: str = "conv"):
        self.w = w  # (3, 3, cin, cout)
        self.b = b  # (cout,)
        self.name = name
        self.dw = np.zeros_like(w)
        self.db = np.zeros_like(b)

    def _im2col(self, x: Array) -> Array:
        bsz, h, wd, cin = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((bsz, h, wd, 3, 3, cin), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + wd, :]
        return cols.reshape(bsz * h * wd, 9 * cin)

    def forward(self, x: Array, train: bool):
        if x.ndim != 4 or x.shape[3] != self.w.shape[2]:
            raise ConfigurationError(
                f"layer {self.name}: expected (B,H,W,{self.w.shape[2]}), got {x.shape}")
        bsz, h, wd, cin = x.shape
        if h % 2 or wd % 2:
            raise ConfigurationError(f"layer {self.name}: spatial dims must be even for 2x2 pooling")
        cout = self.w.shape[3]
        cols = self._im2col(x)
        pre = (cols @ self.w.reshape(9 * cin, cout) + self.b).reshape(bsz, h, wd, cout)
        act = np.maximum(pre, 0.0)
        out = 0.25 * (act[:, 0::2, 0::2] + act[:, 0::2, 1::2] + act[:, 1::2, 0::2] + act[:, 1::2, 1::2])
        cache = (cols, pre, x.shape) if train else None
        return out, cache

    def backward(self, cache, dy: Array) -> Array:
        cols, pre, xshape = cache
        bsz, h, wd, cin = xshape
        cout = self.w.shape[3]
        dact = np.zeros((bsz, h, wd, cout))
        for di in (0, 1):
            for dj in (0, 1):
                dact[:, di::2, dj::2] = 0.25 * dy
        dpre = (dact * (pre > 0)).reshape(bsz * h * wd, cout)
        self.dw += (cols.T @ dpre).reshape(self.w.shape)
        self.db += dpre.sum(axis=0)
        dcols = (dpre @ self.w.reshape(9 * cin, cout).T).reshape(bsz, h, wd, 3, 3, cin)
        dxp = np.zeros((bsz, h + 2, wd + 2, cin))
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :]

    def zero_grad(self):
        self.dw[...] = 0.0
        self.db[...] = 0.0

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]

    def grads(self):
        return [(f"{self.name}.w", self.dw), (f"{self.name}.b", self.db)]

    def spec(self) -> dict:
        return {"kind": "conv", "in_channels": int(self.w.shape[2]),
                "out_channels": int(self.w.shape[3])}


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Array, Array]:
    # uniform fan-in scaling, zero bias
    s = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-s, s, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


# ---------------------------------------------------------------------------
# forward trace


@dataclass
class ForwardTrace:
    """Per-layer caches retained by a training-mode forward pass."""

    caches: list
    logits: Array | None = None
    probs: Array | None = None
    out_kind: str | None = None  # softmax | sigmoid | embedding


# ---------------------------------------------------------------------------
# encoder


class Encoder:
    """Configurable image encoder: conv/pool stack with global average pooling,
    or a dense stack over the flattened image.

    Architecture descriptor::

        {"input_shape": [H, W, C],
         "layers": [{"kind": "dense", "width": 128}, ...]  # or conv layers
                   [{"kind": "conv", "channels": 8}, ...],
         "embedding_dim": 64}

    A conv stack ends in global average pooling followed by a linear projection
    to embedding_dim; a dense stack ends in a linear layer of that width.
    """

    def __init__(self, arch: dict, layers: list):
        self.arch = arch
        self.layers = layers
        self.embedding_dim = int(arch["embedding_dim"])

    @classmethod
    def create(cls, arch: dict, rng: np.random.Generator) -> "Encoder":
        validate_encoder_arch(arch)
        h, w, c = arch["input_shape"]
        emb = int(arch["embedding_dim"])
        layers = []
        specs = arch.get("layers", [])
        kinds = {s["kind"] for s in specs}
        if kinds <= {"dense"}:
            width_in = h * w * c
            for i, s in enumerate(specs):
                wm, b = _init_dense(rng, width_in, s["width"])
                layers.append(DenseLayer(wm, b, activation="relu", name=f"l{i}"))
                width_in = s["width"]
            wm, b = _init_dense(rng, width_in, emb)
            layers.append(DenseLayer(wm, b, activation="none", name=f"l{len(specs)}"))
        elif kinds <= {"conv"}:
            cin, hh, ww = c, h, w
            for i, s in enumerate(specs):
                cout = s["channels"]
                sc = 1.0 / np.sqrt(9 * cin)
                wm = rng.uniform(-sc, sc, size=(3, 3, cin, cout))
                layers.append(ConvLayer(wm, np.zeros(cout), name=f"l{i}"))
                cin, hh, ww = cout, hh // 2, ww // 2
            wm, b = _init_dense(rng, cin, emb)
            layers.append(DenseLayer(wm, b, activation="none", name=f"l{len(specs)}"))
        else:
            raise ConfigurationError("encoder layers must be all dense or all conv")
        return cls(arch, layers)

    def forward(self, images: Array, train: bool = False):
        """Encode a batch of (B, H, W, C) images to (B, embedding_dim)."""
        h, w, c = self.arch["input_shape"]
        if images.ndim != 4 or images.shape[1:] != (h, w, c):
            raise ConfigurationError(
                f"encoder input: expected (B, {h}, {w}, {c}), got {images.shape}")
        caches = []
        x = images
        conv_path = self.layers and self.layers[0].kind == "conv"
        if not conv_path:
            x = images.reshape(images.shape[0], -1)
        for layer in self.layers:
            if layer.kind == "dense" and x.ndim == 4:
                # global average pooling between the conv stack and the projection
                gap_shape = x.shape
                x = x.mean(axis=(1, 2))
                caches.append(("gap", gap_shape))
            out, cache = layer.forward(x, train)
            caches.append((layer, cache))
            x = out
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0][0])
            raise NumericalError(f"non-finite embedding in batch row {bad}")
        trace = ForwardTrace(caches=caches, out_kind="embedding") if train else None
        return x, trace

    def backward(self, trace: ForwardTrace, d_embedding: Array) -> None:
        """Accumulate parameter gradients from an upstream embedding gradient."""
        if trace is None:
            raise UsageError("backward requires a trace from a training-mode forward pass")
        dy = d_embedding
        for entry in reversed(trace.caches):
            if entry[0] == "gap":
                _, gap_shape = entry
                b, hh, ww, cc = gap_shape
                dy = np.broadcast_to(dy[:, None, None, :] / (hh * ww), gap_shape).copy()
                continue
            layer, cache = entry
            dy = layer.backward(cache, dy)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def params(self):
        return [(n, a) for layer in self.layers for n, a in layer.params()]

    def grads(self):
        return [(n, a) for layer in self.layers for n, a in layer.grads()]

    def copy(self) -> "Encoder":
        return copy.deepcopy(self)


def validate_encoder_arch(arch: dict) -> None:
    for key in ("input_shape", "embedding_dim"):
        if key not in arch:
            raise ConfigurationError(f"encoder architecture missing {key!r}")
    if int(arch["embedding_dim"]) <= 0:
        raise ConfigurationError("embedding_dim must be positive")
    if len(arch["input_shape"]) != 3:
        raise ConfigurationError("input_shape must be [H, W, C]")


# ---------------------------------------------------------------------------
# heads

HEAD_KINDS = ("identity_source", "identity_target", "attribute", "domain")


class Head:
    """Classifier head over embeddings.

    Identity heads are a single dense layer with softmax output. The attribute
    and domain heads are three dense layers (512-wide hidden) with sigmoid and
    softmax outputs respectively.
    """

    def __init__(self, kind: str, layers: list, out_kind: str, label_space: str | None = None):
        self.kind = kind
        self.layers = layers
        self.out_kind = out_kind  # softmax | sigmoid
        self.label_space = label_space
        self.output_dim = layers[-1].w.shape[1]

    @classmethod
    def create(cls, kind: str, in_dim: int, out_dim: int, rng: np.random.Generator,
               hidden: int = 512, label_space: str | None = None) -> "Head":
        if kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown head kind {kind!r}")
        if out_dim <= 0:
            raise ConfigurationError(f"head {kind}: output_dim must be positive")
        if kind in ("identity_source", "identity_target"):
            w, b = _init_dense(rng, in_dim, out_dim)
            layers = [DenseLayer(w, b, "none", name="l0")]
            out_kind = "softmax"
        else:
            w0, b0 = _init_dense(rng, in_dim, hidden)
            w1, b1 = _init_dense(rng, hidden, hidden)
            w2, b2 = _init_dense(rng, hidden, out_dim)
            layers = [DenseLayer(w0, b0, "relu", name="l0"),
                      DenseLayer(w1, b1, "relu", name="l1"),
                      DenseLayer(w2, b2, "none", name="l2")]
            out_kind = "sigmoid" if kind == "attribute" else "softmax"
        return cls(kind, layers, out_kind, label_space)

    def forward(self, embeddings: Array, train: bool = False):
        """Map (B, D) embeddings to probabilities (softmax rows or sigmoid entries)."""
        x = embeddings
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append((layer, cache))
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0][0])
            raise NumericalError(f"non-finite logits in batch row {bad}")
        probs = softmax(x) if self.out_kind == "softmax" else sigmoid(x)
        trace = None
        if train:
            trace = ForwardTrace(caches=caches, logits=x, probs=probs, out_kind=self.out_kind)
        return probs, trace

    def backward(self, trace: ForwardTrace, d_probs: Array) -> Array:
        """Chain an upstream probability gradient back to the embedding input."""
        if trace is None:
            raise UsageError("backward requires a trace from a training-mode forward pass")
        if self.out_kind == "softmax":
            p = trace.probs
            dy = p * (d_probs - np.sum(d_probs * p, axis=1, keepdims=True))
        else:
            p = trace.probs
            dy = d_probs * p * (1.0 - p)
        for layer, cache in reversed(trace.caches):
            dy = layer.backward(cache, dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def params(self):
        return [(n, a) for layer in self.layers for n, a in layer.params()]

    def grads(self):
        return [(n, a) for layer in self.layers for n, a in layer.grads()]

    def spec(self) -> dict:
        return {"kind": self.kind, "out_kind": self.out_kind, "label_space": self.label_space,
                "layers": [l.spec() for l in self.layers]}


def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(logits: Array) -> Array:
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# gradient reversal


def grl_apply(x: Array, mode: str = "forward", upstream: Array | None = None) -> Array:
    """Gradient reversal: identity forward, exact sign flip backward.

    Any adversarial trade-off weight is applied by the caller on the upstream
    gradient, never inside this function.
    """
    if mode == "forward":
        return x
    if mode == "backward":
        if upstream is None:
            raise UsageError("grl_apply backward mode requires an upstream gradient")
        if upstream.shape != x.shape:
            raise ConfigurationError(
                f"grl_apply: upstream shape {upstream.shape} != input shape {x.shape}")
        return -upstream
    raise UsageError(f"grl_apply: unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# model container

BLOCK_NAMES = ("e1", "e2", "c_id_s", "c_id_t", "c_att", "c_d")


@dataclass
class Model:
    """All learnable blocks of one training configuration.

    Blocks that a given run does not use are simply None. e1 encodes photos
    (source and target), e2 encodes sketches.
    """

    e1: Encoder
    e2: Encoder | None = None
    c_id_s: Head | None = None
    c_id_t: Head | None = None
    c_att: Head | None = None
    c_d: Head | None = None
    meta: dict = field(default_factory=dict)

    def blocks(self) -> dict:
        out = {}
        for name in BLOCK_NAMES:
            b = getattr(self, name)
            if b is not None:
                out[name] = b
        return out

    def params(self) -> dict[str, Array]:
        return {f"{bn}.{n}": a for bn, b in self.blocks().items() for n, a in b.params()}

    def grads(self) -> dict[str, Array]:
        return {f"{bn}.{n}": a for bn, b in self.blocks().items() for n, a in b.grads()}

    def zero_grad(self):
        for b in self.blocks().values():
            b.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_META = "__meta__.json"


def save_checkpoint(path, model: Model, rng_state: dict | None = None, epoch: int = 0,
                    extra: dict | None = None) -> None:
    """Write a self-describing checkpoint; round-trips bit-exactly."""
    meta = {
        "epoch": int(epoch),
        "rng_state": rng_state,
        "extra": extra or {},
        "model_meta": model.meta,
        "blocks": {},
    }
    arrays: dict[str, Array] = {}
    for bn, block in model.blocks().items():
        if isinstance(block, Encoder):
            meta["blocks"][bn] = {"type": "encoder", "arch": block.arch,
                                  "layers": [l.spec() for l in block.layers]}
        else:
            meta["blocks"][bn] = {"type": "head", **block.spec()}
        for n, a in block.params():
            arrays[f"{bn}.{n}"] = a
    def entry(name: str) -> zipfile.ZipInfo:
        # fixed timestamp so identical states produce identical bytes
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        info.compress_type = zipfile.ZIP_DEFLATED
        return info

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(entry(_CKPT_META), json.dumps(meta, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            zf.writestr(entry(name + ".npy"), buf.getvalue())


def _rebuild_layer(spec: dict, arrays: dict, prefix: str, idx: int):
    name = f"l{idx}"
    w = arrays[f"{prefix}.{name}.w"]
    b = arrays[f"{prefix}.{name}.b"]
    if spec["kind"] == "dense":
        return DenseLayer(w, b, spec["activation"], name=name)
    return ConvLayer(w, b, name=name)


def load_checkpoint(path) -> tuple[Model, dict]:
    """Load a checkpoint written by save_checkpoint; returns (model, meta)."""
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read(_CKPT_META))
        arrays = {}
        for info in zf.namelist():
            if info == _CKPT_META:
                continue
            arrays[info[:-4]] = np.load(io.BytesIO(zf.read(info)), allow_pickle=False)
    kwargs: dict = {}
    for bn, bmeta in meta["blocks"].items():
        layers = [_rebuild_layer(ls, arrays, bn, i) for i, ls in enumerate(bmeta["layers"])]
        if bmeta["type"] == "encoder":
            kwargs[bn] = Encoder(bmeta["arch"], layers)
        else:
            kwargs[bn] = Head(bmeta["kind"], layers, bmeta["out_kind"], bmeta["label_space"])
    model = Model(**kwargs)
    model.meta = meta.get("model_meta", {})
    return model, meta
