"""LoRA adapter lifecycle: init, uplink/downlink under each sharing strategy, persistence.

Binary layouts (all little-endian)::

    adapter file   b"FVLM-ADPT/1" | version u8 | strategy u8 | m, n, r u32 | alpha, dropout f64 | B | A
    uplink payload b"FVLM-UPLK/1" | version u8 | strategy u8 | flags u8 | client u32 | round u32
                   | sample_count u64 | m, n, r u32 | B | A (only if flags & HAS_A)

Matrices are row-major float64.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fedlora.linalg import ShapeError, frozen, gaussian_matrix, matmul
from fedlora.streams import ADAPTER_INIT, SHARED


class StrategyKind(enum.Enum):
    PLORA = 1  # personal A, shared B
    FULL_LORA = 2  # shared A and B
    FFA_LORA = 3  # frozen A, shared B

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper().replace("-", "_")]
        except KeyError:
            raise ValueError(f"unknown strategy {value!r}; expected one of {[s.name for s in cls]}") from None

    @property
    def shares_a(self):
        return self is StrategyKind.FULL_LORA

    @property
    def trains_a(self):
        return self is not StrategyKind.FFA_LORA


@dataclass(frozen=True)
class LoraAdapter:
    A: np.ndarray  # (r, n)
    B: np.ndarray  # (m, r)
    rank: int
    alpha: float
    dropout: float
    strategy: StrategyKind

    def __post_init__(self):
        object.__setattr__(self, "A", frozen(self.A))
        object.__setattr__(self, "B", frozen(self.B))
        r = self.rank
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != r or self.B.shape[1] != r:
            raise ShapeError(f"adapter shapes A{self.A.shape} B{self.B.shape} inconsistent with rank {r}")
        if r < 1 or r >= min(self.m, self.n):
            raise ShapeError(f"rank {r} is not low-rank for a {self.m}x{self.n} weight")

    @property
    def m(self):
        return self.B.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def scale(self):
        return self.alpha / self.rank

    def with_matrices(self, A=None, B=None):
        return replace(self, A=self.A if A is None else A, B=self.B if B is None else B)


def init_adapter(m, n, r, alpha, dropout, strategy, rng):
    """Fresh adapter: ``B = 0`` and ``A ~ Normal(0, 1/n)`` drawn from ``rng``."""
    strategy = StrategyKind.parse(strategy)
    if r < 1 or r >= min(m, n):
        raise ShapeError(f"rank {r} is not low-rank for a {m}x{n} weight (need 1 <= r < {min(m, n)})")
    if not 0.0 <= dropout < 1.0:
        raise ValueError(f"dropout must be in [0, 1), got {dropout}")
    A = gaussian_matrix(r, n, 1.0 / np.sqrt(n), rng)
    return LoraAdapter(A=A, B=np.zeros((m, r)), rank=r, alpha=float(alpha), dropout=float(dropout), strategy=strategy)


def effective_weights(w0, adapter):
    """Materialize ``W0 + s B A``. Inspection only; training never calls this."""
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (adapter.m, adapter.n):
        raise ShapeError(f"weight shape {w0.shape} does not match adapter ({adapter.m}, {adapter.n})")
    return w0 + adapter.scale * matmul(adapter.B, adapter.A)


# --- uplink / downlink -----------------------------------------------------------

PAYLOAD_MAGIC = b"FVLM-UPLK/1"
PAYLOAD_VERSION = 1
_FLAG_HAS_A = 1
_PAYLOAD_HEADER = struct.Struct("<BBBIIQIII")
PAYLOAD_HEADER_BYTES = len(PAYLOAD_MAGIC) + _PAYLOAD_HEADER.size


class PayloadError(ValueError):
    pass


@dataclass(frozen=True)
class UplinkPayload:
    client_id: int
    round: int
    strategy: StrategyKind
    matrices: dict = field(default_factory=dict)  # "B" always, "A" iff FULL_LORA
    sample_count: int = 1
    shape: tuple[int, int, int] = (0, 0, 0)  # (m, n, r)

    def to_bytes(self):
        m, n, r = self.shape
        has_a = "A" in self.matrices
        head = _PAYLOAD_HEADER.pack(
            PAYLOAD_VERSION, self.strategy.value, _FLAG_HAS_A if has_a else 0,
            self.client_id, self.round, self.sample_count, m, n, r,
        )
        parts = [PAYLOAD_MAGIC, head, np.ascontiguousarray(self.matrices["B"], dtype="<f8").tobytes()]
        if has_a:
            parts.append(np.ascontiguousarray(self.matrices["A"], dtype="<f8").tobytes())
        return b"".join(parts)

    @property
    def byte_size(self):
        return len(self.to_bytes())

    @property
    def coefficient_count(self):
        return sum(int(np.size(v)) for v in self.matrices.values())

    @classmethod
    def from_bytes(cls, data):
        if data[: len(PAYLOAD_MAGIC)] != PAYLOAD_MAGIC:
            raise PayloadError("bad payload magic")
        if len(data) < PAYLOAD_HEADER_BYTES:
            raise PayloadError("payload truncated inside header")
        version, strat, flags, cid, rnd, count, m, n, r = _PAYLOAD_HEADER.unpack_from(data, len(PAYLOAD_MAGIC))
        if version != PAYLOAD_VERSION:
            raise PayloadError(f"unsupported payload version {version}")
        off = PAYLOAD_HEADER_BYTES
        need = off + 8 * (m * r + (r * n if flags & _FLAG_HAS_A else 0))
        if len(data) != need:
            raise PayloadError(f"payload length {len(data)} != expected {need}")
        mats = {"B": np.frombuffer(data, "<f8", m * r, off).reshape(m, r).astype(np.float64)}
        if flags & _FLAG_HAS_A:
            mats["A"] = np.frombuffer(data, "<f8", r * n, off + 8 * m * r).reshape(r, n).astype(np.float64)
        return cls(cid, rnd, StrategyKind(strat), mats, count, (m, n, r))


def payload_bytes(strategy, m, n, r):
    """Serialized size of one payload for the given shapes, without building it."""
    coeffs = m * r + (r * n if StrategyKind.parse(strategy).shares_a else 0)
    return PAYLOAD_HEADER_BYTES + 8 * coeffs


def extract_uplink(adapter, strategy, sample_count, client_id=0, round=0):
    strategy = StrategyKind.parse(strategy)
    if adapter.strategy is not strategy:
        raise ValueError(f"adapter strategy {adapter.strategy.name} does not match requested {strategy.name}")
    if sample_count < 0:
        raise ValueError("sample_count must be non-negative")
    mats = {"B": np.array(adapter.B)}
    if strategy.shares_a:
        mats["A"] = np.array(adapter.A)
    return UplinkPayload(int(client_id), int(round), strategy, mats, int(sample_count), (adapter.m, adapter.n, adapter.rank))


def install_downlink(adapter, global_mats, strategy):
    """Apply aggregated matrices. Only FULL_LORA touches A."""
    strategy = StrategyKind.parse(strategy)
    if adapter.strategy is not strategy:
        raise ValueError(f"adapter strategy {adapter.strategy.name} does not match requested {strategy.name}")
    B = np.asarray(global_mats["B"], dtype=np.float64)
    if B.shape != adapter.B.shape:
        raise ShapeError(f"downlink B shape {B.shape} != adapter B shape {adapter.B.shape}")
    if strategy.shares_a:
        A = np.asarray(global_mats["A"], dtype=np.float64)
        if A.shape != adapter.A.shape:
            raise ShapeError(f"downlink A shape {A.shape} != adapter A shape {adapter.A.shape}")
        return adapter.with_matrices(A=A, B=B)
    return adapter.with_matrices(B=B)


# --- adapter checkpoint ----------------------------------------------------------

ADAPTER_MAGIC = b"FVLM-ADPT/1"
ADAPTER_VERSION = 1
_ADAPTER_HEADER = struct.Struct("<BBIIIdd")
ADAPTER_HEADER_BYTES = len(ADAPTER_MAGIC) + _ADAPTER_HEADER.size
# refuse to allocate absurd shapes from a corrupt file
MAX_COEFFICIENTS = 1 << 28


class AdapterFormatError(ValueError):
    pass


class CorruptHeaderError(AdapterFormatError):
    pass


class ShapeOverflowError(AdapterFormatError):
    pass


class TruncatedFileError(AdapterFormatError):
    pass


def adapter_to_bytes(adapter):
    head = _ADAPTER_HEADER.pack(
        ADAPTER_VERSION, adapter.strategy.value, adapter.m, adapter.n, adapter.rank, adapter.alpha, adapter.dropout
    )
    return b"".join([
        ADAPTER_MAGIC,
        head,
        np.ascontiguousarray(adapter.B, dtype="<f8").tobytes(),
        np.ascontiguousarray(adapter.A, dtype="<f8").tobytes(),
    ])


def adapter_from_bytes(data):
    if len(data) < len(ADAPTER_MAGIC) or data[: len(ADAPTER_MAGIC)] != ADAPTER_MAGIC:
        if ADAPTER_MAGIC.startswith(bytes(data)):
            raise TruncatedFileError(f"file ends after {len(data)} bytes, inside the magic header")
        raise CorruptHeaderError("missing FVLM-ADPT/1 magic")
    if len(data) < ADAPTER_HEADER_BYTES:
        raise TruncatedFileError(f"file ends after {len(data)} bytes, inside the {ADAPTER_HEADER_BYTES}-byte header")
    version, strat, m, n, r, alpha, dropout = _ADAPTER_HEADER.unpack_from(data, len(ADAPTER_MAGIC))
    if version != ADAPTER_VERSION:
        raise CorruptHeaderError(f"unsupported adapter format version {version}")
    try:
        strategy = StrategyKind(strat)
    except ValueError:
        raise CorruptHeaderError(f"unknown strategy tag {strat}") from None
    coeffs = m * r + r * n
    if coeffs > MAX_COEFFICIENTS or r == 0 or m == 0 or n == 0:
        raise ShapeOverflowError(f"implausible adapter shape m={m} n={n} r={r}")
    expected = ADAPTER_HEADER_BYTES + 8 * coeffs
    if len(data) < expected:
        raise TruncatedFileError(f"file has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CorruptHeaderError(f"{len(data) - expected} trailing bytes after adapter data")
    off = ADAPTER_HEADER_BYTES
    B = np.frombuffer(data, "<f8", m * r, off).reshape(m, r)
    A = np.frombuffer(data, "<f8", r * n, off + 8 * m * r).reshape(r, n)
    return LoraAdapter(A=A, B=B, rank=r, alpha=alpha, dropout=dropout, strategy=strategy)


def save_adapter(adapter, path):
    path = Path(path)
    path.write_bytes(adapter_to_bytes(adapter))
    return path


def load_adapter(path):
    return adapter_from_bytes(Path(path).read_bytes())


def client_adapter_rng(root, strategy, client_id, shared_frozen_a=False):
    """Stream for a client's initial A.

    FULL_LORA clients (and FFA_LORA with ``shared_frozen_a``) start from one
    common A; everyone else draws a personal one.
    """
    strategy = StrategyKind.parse(strategy)
    if strategy is StrategyKind.FULL_LORA or (strategy is StrategyKind.FFA_LORA and shared_frozen_a):
        return root.child(ADAPTER_INIT, SHARED)
    return root.child(ADAPTER_INIT, client_id)
