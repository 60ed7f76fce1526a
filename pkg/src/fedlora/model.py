"""Frozen toy base network: visual projection, concat with text, ReLU MLP, linear head.

The head's weight is the ``W0`` that every LoRA adapter attaches to.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fedlora.data import split_train_eval
from fedlora.layers import (
    LinearLayer,
    linear_forward,
    lora_forward,
    make_dropout_mask,
    relu,
    relu_backward,
    softmax_cross_entropy_rows,
)
from fedlora.linalg import ShapeError, checksum, frozen, gaussian_matrix, matmul
from fedlora.metrics import predict

logger = logging.getLogger(__name__)

BASE_MAGIC = b"FVLM-BASE/1\n"


class PretrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    visual_dim: int = 8
    text_dim: int = 4
    visual_tokens: int = 2
    text_tokens: int = 2
    hidden_dim: int = 64
    num_classes: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("visual_dim", "text_dim", "visual_tokens", "text_tokens", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def input_dim(self):
        return (self.visual_tokens + self.text_tokens) * self.text_dim


@dataclass(frozen=True)
class ProjectionLayer:
    P: np.ndarray  # (D_t, D_v)


@dataclass
class FrozenBase:
    config: ModelConfig
    projection: ProjectionLayer
    extractor: tuple  # of LinearLayer
    activations: tuple  # one tag per extractor layer
    head: LinearLayer
    pretrain_meta: dict = field(default_factory=dict)
    _locked: bool = field(default=False, repr=False)

    def lock(self):
        """Mark the base as in federated use; pretraining is refused afterwards."""
        self._locked = True

    @property
    def locked(self):
        return self._locked

    def named_arrays(self):
        out = [("projection.P", self.projection.P)]
        for i, layer in enumerate(self.extractor):
            out.append((f"extractor.{i}.weight", layer.weight))
            out.append((f"extractor.{i}.bias", layer.bias))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def checksum(self):
        return checksum(*[a for _, a in self.named_arrays()])


def _layer(weight, bias):
    return LinearLayer(frozen(weight), frozen(bias))


def build_base(config, rng):
    """Gaussian-initialized base; He scaling for ReLU layers."""
    c = config
    P = gaussian_matrix(c.text_dim, c.visual_dim, 1.0 / np.sqrt(c.visual_dim), rng.child(0))
    W1 = gaussian_matrix(c.hidden_dim, c.input_dim, np.sqrt(2.0 / c.input_dim), rng.child(1))
    W2 = gaussian_matrix(c.num_classes, c.hidden_dim, 1.0 / np.sqrt(c.hidden_dim), rng.child(2))
    return FrozenBase(
        config=c,
        projection=ProjectionLayer(frozen(P)),
        extractor=(_layer(W1, np.zeros(c.hidden_dim)),),
        activations=("relu",),
        head=_layer(W2, np.zeros(c.num_classes)),
    )


def project_concat(visual, text, proj):
    """Flatten ``[V P^T ; T]``. Accepts one example or a leading batch axis."""
    visual = np.asarray(visual, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    dt, dv = proj.P.shape
    if visual.shape[-1] != dv or text.shape[-1] != dt or visual.ndim != text.ndim or visual.ndim not in (2, 3):
        raise ShapeError(f"visual {visual.shape} / text {text.shape} do not fit projection {proj.P.shape}")
    if visual.ndim == 2:
        return np.concatenate([matmul(visual, proj.P.T), text], axis=0).reshape(-1)
    n = visual.shape[0]
    if text.shape[0] != n:
        raise ShapeError(f"batch sizes differ: {n} visual vs {text.shape[0]} text")
    projected = matmul(visual.reshape(-1, dv), proj.P.T).reshape(n, -1, dt)
    return np.concatenate([projected, text], axis=1).reshape(n, -1)


def extract_features(base, visual, text):
    """Everything up to the head input: projection, concat, hidden layers."""
    h = project_concat(visual, text, base.projection)
    for layer, act in zip(base.extractor, base.activations):
        h = linear_forward(layer, h)
        if act == "relu":
            h = relu(h)
    return h


def forward_base(base, visual, text):
    return linear_forward(base.head, extract_features(base, visual, text))


def forward_adapted(base, adapter, visual, text, mode="eval", rng=None):
    """Logits with the adapter on the head; dropout only in train mode."""
    if adapter.B.shape[0] != base.head.out_dim or adapter.A.shape[1] != base.head.in_dim:
        raise ShapeError(
            f"adapter ({adapter.m}x{adapter.n}) does not fit head {base.head.weight.shape}"
        )
    feats = extract_features(base, visual, text)
    mask = None
    if mode == "train" and adapter.dropout > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng stream")
        batch = None if feats.ndim == 1 else feats.shape[0]
        mask = make_dropout_mask(feats.shape[-1], adapter.dropout, rng, batch=batch)
    elif mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return lora_forward(base.head, adapter, feats, mask)


def _full_backward(params, visual, text, labels):
    """Loss and gradients for every base parameter (pretraining only)."""
    P, W1, b1, W2, b2 = params
    n, nv, dv = visual.shape
    dt = P.shape[0]
    proj = matmul(visual.reshape(-1, dv), P.T).reshape(n, nv, dt)
    x = np.concatenate([proj, text], axis=1).reshape(n, -1)
    z1 = matmul(x, W1.T) + b1
    a1 = relu(z1)
    logits = matmul(a1, W2.T) + b2
    losses, dlogits = softmax_cross_entropy_rows(logits, labels)
    dlogits = dlogits / n
    dW2 = matmul(dlogits.T, a1)
    db2 = dlogits.sum(axis=0)
    dz1 = relu_backward(z1, matmul(dlogits, W2))
    dW1 = matmul(dz1.T, x)
    db1 = dz1.sum(axis=0)
    dx = matmul(dz1, W1).reshape(n, -1, dt)
    dproj = dx[:, :nv, :].reshape(-1, dt)
    dP = matmul(dproj.T, visual.reshape(-1, dv))
    return float(losses.mean()), (dP, dW1, db1, dW2, db2)


def _accuracy(params, visual, text, labels):
    P, W1, b1, W2, b2 = params
    h = relu(linear_forward(LinearLayer(W1, b1), project_concat(visual, text, ProjectionLayer(P))))
    return float(np.mean(predict(linear_forward(LinearLayer(W2, b2), h)) == labels))


def pretrain_base(base, dataset, indices, epochs, lr, rng, batch_size=16, heldout_fraction=0.2):
    """Central full-network SGD on a pooled split, then freeze.

    A ``heldout_fraction`` of ``indices`` is kept out of training to measure
    the accuracy stored in ``pretrain_meta``.
    """
    if base.locked:
        raise PretrainError("base is already in federated use; pretraining must happen before any round")
    if epochs == 0:
        return base
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size < 2:
        raise PretrainError("pretraining set is empty")
    if len(base.extractor) != 1:
        raise PretrainError("pretraining supports the single-hidden-layer extractor only")
    tr, ho = split_train_eval(indices, heldout_fraction, rng.child(0))
    params = [
        np.array(base.projection.P),
        np.array(base.extractor[0].weight),
        np.array(base.extractor[0].bias),
        np.array(base.head.weight),
        np.array(base.head.bias),
    ]
    losses = []
    for epoch in range(epochs):
        order = tr[rng.child(1, epoch).generator().permutation(tr.size)]
        epoch_loss = 0.0
        for start in range(0, order.size, batch_size):
            b = order[start : start + batch_size]
            loss, grads = _full_backward(params, dataset.visual[b], dataset.text[b], dataset.labels[b])
            for p, g in zip(params, grads):
                p -= lr * g
            epoch_loss += loss * b.size
        losses.append(epoch_loss / order.size)
    acc = _accuracy(params, dataset.visual[ho], dataset.text[ho], dataset.labels[ho])
    chance = 1.0 / base.config.num_classes
    logger.info("pretrained %d epochs: final loss %.4f, held-out accuracy %.4f", epochs, losses[-1], acc)
    if not acc > chance:
        raise PretrainError(f"held-out accuracy {acc:.4f} does not beat chance {chance:.4f}")
    P, W1, b1, W2, b2 = params
    return FrozenBase(
        config=base.config,
        projection=ProjectionLayer(frozen(P)),
        extractor=(_layer(W1, b1),),
        activations=base.activations,
        head=_layer(W2, b2),
        pretrain_meta={
            "epochs": int(epochs),
            "lr": float(lr),
            "pooled_size": int(indices.size),
            "train_size": int(tr.size),
            "heldout_size": int(ho.size),
            "heldout_accuracy": acc,
            "final_train_loss": losses[-1],
        },
    )


# --- checkpoint -------------------------------------------------------------------


def base_to_bytes(base):
    arrays = base.named_arrays()
    header = json.dumps(
        {
            "config": asdict(base.config),
            "activations": list(base.activations),
            "pretrain_meta": base.pretrain_meta,
            "arrays": [[name, list(a.shape)] for name, a in arrays],
        },
        sort_keys=True,
    ).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return BASE_MAGIC + struct.pack("<I", len(header)) + header + body


def base_from_bytes(data):
    if data[: len(BASE_MAGIC)] != BASE_MAGIC:
        raise ValueError("not an FVLM-BASE/1 checkpoint")
    off = len(BASE_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen])
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise ValueError(f"checkpoint truncated while reading {name}")
        arrays[name] = np.frombuffer(data, "<f8", count, off).reshape(shape)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes in checkpoint")
    depth = len(header["activations"])
    return FrozenBase(
        config=ModelConfig(**header["config"]),
        projection=ProjectionLayer(frozen(arrays["projection.P"])),
        extractor=tuple(
            _layer(arrays[f"extractor.{i}.weight"], arrays[f"extractor.{i}.bias"]) for i in range(depth)
        ),
        activations=tuple(header["activations"]),
        head=_layer(arrays["head.weight"], arrays["head.bias"]),
        pretrain_meta=header["pretrain_meta"],
    )


def save_base(base, path):
    Path(path).write_bytes(base_to_bytes(base))


def load_base(path):
    return base_from_bytes(Path(path).read_bytes())
