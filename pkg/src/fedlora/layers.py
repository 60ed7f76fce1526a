"""Hand-written forward and backward rules for the differentiable core.

Vectors may be passed one at a time (1-D) or as a batch with one example per
row (2-D); the batched path gives bitwise the same rows as the 1-D path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedlora.linalg import ShapeError, matmul


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None = None

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray  # bool, (dim,) or (batch, dim)
    rate: float
    scale: float

    def apply(self, x):
        if self.keep.shape != np.shape(x):
            raise ShapeError(f"dropout mask shape {self.keep.shape} does not match input {np.shape(x)}")
        if self.rate == 0.0:
            return np.asarray(x, dtype=np.float64)
        return np.where(self.keep, x, 0.0) * self.scale


@dataclass(frozen=True)
class GradPair:
    dA: np.ndarray
    dB: np.ndarray


def keep_all(shape):
    """Evaluation-mode mask: everything kept, scale 1."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    return DropoutMask(np.ones(shape, dtype=bool), 0.0, 1.0)


def make_dropout_mask(dim, rate, rng, batch=None):
    """Inverted-dropout mask keeping each coordinate with probability ``1 - rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    shape = (dim,) if batch is None else (batch, dim)
    if rate == 0.0:
        return keep_all(shape)
    keep = rng.generator().random(shape) >= rate
    return DropoutMask(keep, float(rate), 1.0 / (1.0 - rate))


def linear_forward(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input length {x.shape[-1]} does not match layer in-dimension {layer.in_dim}")
    y = matmul(layer.weight, x) if x.ndim == 1 else matmul(x, layer.weight.T)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def _check_lora_shapes(w0, adapter, x):
    m, n = w0.weight.shape
    r = adapter.rank
    if r >= min(m, n):
        raise ShapeError(f"rank {r} is not low-rank for a {m}x{n} weight (need r < {min(m, n)})")
    if adapter.A.shape != (r, n) or adapter.B.shape != (m, r):
        raise ShapeError(
            f"adapter shapes A{adapter.A.shape} B{adapter.B.shape} do not fit weight {m}x{n} at rank {r}"
        )
    if np.shape(x)[-1] != n:
        raise ShapeError(f"input length {np.shape(x)[-1]} does not match weight in-dimension {n}")


def _adapter_input(x, mask):
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        return x
    return mask.apply(x)


def lora_forward(w0, adapter, x, mask=None):
    """``W0 x (+ b) + s * B A (mask * x)``; ``mask=None`` is evaluation mode."""
    _check_lora_shapes(w0, adapter, x)
    base = linear_forward(w0, x)
    xt = _adapter_input(x, mask)
    if np.ndim(xt) == 1:
        delta = matmul(adapter.B, matmul(adapter.A, xt))
    else:
        delta = matmul(matmul(xt, adapter.A.T), adapter.B.T)
    return base + adapter.scale * delta


def lora_backward(w0, adapter, x, mask, upstream):
    """Gradients of a scalar loss w.r.t. A and B given ``dL/dh = upstream``.

    For a batch, gradients are summed over rows. W0 gets nothing.
    """
    _check_lora_shapes(w0, adapter, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != w0.out_dim or upstream.ndim != np.ndim(x):
        raise ShapeError(f"upstream shape {upstream.shape} does not fit output dim {w0.out_dim}")
    xt = _adapter_input(x, mask)
    s = adapter.scale
    if xt.ndim == 1:
        z = matmul(adapter.A, xt)
        dB = s * np.outer(upstream, z)
        dA = s * np.outer(matmul(adapter.B.T, upstream), xt)
    else:
        z = matmul(xt, adapter.A.T)
        dB = s * matmul(upstream.T, z)
        dA = s * matmul(matmul(upstream, adapter.B).T, xt)
    return GradPair(dA=dA, dB=dB)


def lora_input_grad(w0, adapter, mask, upstream):
    """``dL/dx`` through both the frozen and adapter paths (used by gradient checks)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    up2 = upstream[None, :] if upstream.ndim == 1 else upstream
    dx = matmul(up2, w0.weight)
    dxt = adapter.scale * matmul(matmul(up2, adapter.B), adapter.A)
    if mask is not None and mask.rate > 0.0:
        keep = mask.keep[None, :] if mask.keep.ndim == 1 else mask.keep
        dxt = np.where(keep, dxt, 0.0) * mask.scale
    out = dx + dxt
    return out[0] if upstream.ndim == 1 else out


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_class):
    """Return ``(-log softmax(logits)[target], softmax - onehot)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"logits must be a vector of length >= 2, got shape {logits.shape}")
    if not 0 <= target_class < logits.shape[0]:
        raise IndexError(f"target class {target_class} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[target_class])
    grad = np.exp(shifted - log_z)
    grad[target_class] -= 1.0
    return loss, grad


def softmax_cross_entropy_rows(logits, targets):
    """Row-wise ``softmax_cross_entropy`` over a ``(batch, C)`` logits matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"expected (batch, C>=2) logits and matching targets, got {logits.shape}, {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError(f"target class out of range for {logits.shape[1]} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = log_z - shifted[rows, targets]
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, targets] -= 1.0
    return losses, grad


def sequence_cross_entropy(step_logits, targets):
    """Teacher-forced token loss: sum of per-step cross entropies."""
    if len(step_logits) != len(targets):
        raise ShapeError(f"{len(step_logits)} logit steps but {len(targets)} targets")
    if len(targets) == 0:
        raise ValueError("sequence must contain at least one step")
    total = 0.0
    grads = []
    for logits, t in zip(step_logits, targets):
        loss, g = softmax_cross_entropy(logits, t)
        total += loss
        grads.append(g)
    return total, grads


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(pre, upstream):
    return np.where(pre > 0.0, upstream, 0.0)
