"""Deterministic dense linear algebra and splittable seeded random streams.

Matrices are plain 2-D ``float64`` numpy arrays. ``matmul`` accumulates over
the inner dimension in a fixed order with separate multiply/add rounding, so
its output does not depend on the BLAS build or thread count and matches a
textbook triple loop bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b):
    """Return ``a @ b`` computed as an ordered sum of rank-1 products.

    Supports 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D operands.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a2.ndim != 2 or b2.ndim != 2:
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    inner = a2.shape[1]
    if inner == 0:
        out = np.zeros((a2.shape[0], b2.shape[1]))
    else:
        out = a2[:, 0:1] * b2[0:1, :]
        for k in range(1, inner):
            out += a2[:, k : k + 1] * b2[k : k + 1, :]
    if a.ndim == 1 and b.ndim == 1:
        return out[0, 0]
    if a.ndim == 1:
        return out[0]
    if b.ndim == 1:
        return out[:, 0]
    return out


def identity(n):
    return np.eye(n, dtype=np.float64)


@dataclass(frozen=True)
class RngStream:
    """A random stream addressed by ``(master_seed, path)``.

    Streams are derived through numpy's ``SeedSequence`` spawn keys and drive a
    Philox counter-based generator, so a given address always yields the same
    sequence and sibling paths are independent.
    """

    master_seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError(f"master_seed must fit in 64 unsigned bits, got {self.master_seed}")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if any(p < 0 for p in self.path):
            raise ValueError(f"path entries must be non-negative, got {self.path}")

    def child(self, *tags):
        return RngStream(self.master_seed, self.path + tuple(tags))

    def generator(self):
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def gaussian_matrix(rows, cols, std, rng):
    """Draw a ``rows x cols`` matrix with i.i.d. Normal(0, std**2) entries."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if std == 0:
        return np.zeros((rows, cols))
    return rng.generator().standard_normal((rows, cols)) * std


def check_finite(a, name="value"):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return a


def checksum(*arrays):
    """SHA-256 over the shapes and raw little-endian bytes of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def frozen(a):
    """Return a read-only float64 copy of ``a``."""
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out
