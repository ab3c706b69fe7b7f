"""16-bit quantization and the binary round-update message.

Layout (little-endian)::

    magic "PRFE" | version u8 | msg_type u8 | algorithm u8 | sender u16 | round u32
    | n_tensors u16 | n_prototypes u16
    | n_tensors x tensor record
    | n_prototypes x (class u16 | count u64 | tensor record)

    tensor record: mode u8 | ndim u8 | dims u32 x ndim | [scale f32, INT16_AFFINE only]
                   | codes (2 bytes each, 4 for FLOAT32)
"""
from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import DataError, MagicError, ProtocolError, TruncationError, VersionError
from .prototype import Prototype

MAGIC = b"PRFE"
VERSION = 1
MSG_ROUND_UPDATE = 0
INT16_MAX = 32767

_HEADER = struct.Struct("<4sBBBHIHH")
HEADER_SIZE = _HEADER.size  # 17


class QuantMode(IntEnum):
    INT16_AFFINE = 0
    FLOAT16 = 1
    FLOAT32 = 2

    @property
    def itemsize(self) -> int:
        return 4 if self is QuantMode.FLOAT32 else 2


class Algorithm(IntEnum):
    PROFE = 0
    FEDAVG = 1
    FEDPROTO = 2


_CODE_DTYPES = {
    QuantMode.INT16_AFFINE: np.dtype("<i2"),
    QuantMode.FLOAT16: np.dtype("<f2"),
    QuantMode.FLOAT32: np.dtype("<f4"),
}


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, ...]
    mode: QuantMode
    codes: np.ndarray
    scale: float = 1.0

    def __eq__(self, other):
        return (isinstance(other, QuantizedTensor) and self.shape == other.shape
                and self.mode == other.mode and np.float32(self.scale) == np.float32(other.scale)
                and np.array_equal(self.codes.view(np.uint8), other.codes.view(np.uint8)))

    @property
    def payload_bytes(self) -> int:
        return self.codes.size * self.mode.itemsize

    @property
    def record_bytes(self) -> int:
        extra = 4 if self.mode is QuantMode.INT16_AFFINE else 0
        return 2 + 4 * len(self.shape) + extra + self.payload_bytes


def quantize(t, mode: QuantMode = QuantMode.FLOAT16, scale: float | None = None) -> QuantizedTensor:
    """Encode a float tensor with 16 (or, for FLOAT32, 32) bits per element.

    INT16_AFFINE stores ``floor(x / scale + 0.5)`` with ``scale = max|x| / 32767``
    unless ``scale`` is given. An all-zero tensor gets ``scale = 1``.
    """
    mode = QuantMode(mode)
    x = np.asarray(getattr(t, "data", t), dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot quantize a tensor containing NaN or Inf")
    shape = tuple(int(s) for s in x.shape)
    if mode is QuantMode.FLOAT16:
        if x.size and float(np.max(np.abs(x))) > float(np.finfo(np.float16).max):
            raise DataError("value exceeds the binary16 range")
        return QuantizedTensor(shape, mode, x.astype("<f2").reshape(-1))
    if mode is QuantMode.FLOAT32:
        return QuantizedTensor(shape, mode, x.astype("<f4").reshape(-1))
    if scale is None:
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        scale = float(np.float32(peak / INT16_MAX)) if peak > 0 else 1.0
    if not scale > 0:
        raise DataError(f"quantization step must be positive, got {scale}")
    codes = np.floor(x.astype(np.float64) / scale + 0.5)
    codes = np.clip(codes, -INT16_MAX, INT16_MAX).astype("<i2").reshape(-1)
    return QuantizedTensor(shape, mode, codes, float(np.float32(scale)))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Back to float32: ``code * scale`` for INT16_AFFINE, a widening cast otherwise."""
    if q.mode is QuantMode.INT16_AFFINE:
        out = q.codes.astype(np.float64) * q.scale
    else:
        out = q.codes
    return np.asarray(out, dtype=np.float32).reshape(q.shape)


@dataclass(frozen=True, eq=False)
class WirePrototype:
    class_id: int
    count: int
    vector: QuantizedTensor

    def __eq__(self, other):
        return (isinstance(other, WirePrototype) and self.class_id == other.class_id
                and self.count == other.count and self.vector == other.vector)

    def decode(self) -> Prototype:
        return Prototype(self.class_id, dequantize(self.vector), self.count)


@dataclass(frozen=True, eq=False)
class RoundMessage:
    sender: int
    round_index: int
    algorithm: Algorithm
    tensors: tuple[QuantizedTensor, ...] = ()
    prototypes: tuple[WirePrototype, ...] = ()

    def __eq__(self, other):
        return (isinstance(other, RoundMessage) and self.sender == other.sender
                and self.round_index == other.round_index and self.algorithm == other.algorithm
                and list(self.tensors) == list(other.tensors)
                and list(self.prototypes) == list(other.prototypes))

    @property
    def encoded_size(self) -> int:
        return (HEADER_SIZE + sum(t.record_bytes for t in self.tensors)
                + sum(10 + p.vector.record_bytes for p in self.prototypes))

    def parameters(self) -> list[np.ndarray]:
        return [dequantize(t) for t in self.tensors]

    def local_prototypes(self) -> list[Prototype]:
        return [p.decode() for p in self.prototypes]


def build_message(sender: int, round_index: int, algorithm: Algorithm, params: Sequence = (),
                  prototypes: Sequence[Prototype] = (), mode: QuantMode = QuantMode.FLOAT16) -> RoundMessage:
    return RoundMessage(
        sender, round_index, Algorithm(algorithm),
        tuple(quantize(p, mode) for p in params),
        tuple(WirePrototype(p.class_id, p.count, quantize(p.vector, mode)) for p in prototypes),
    )


def _check_range(name: str, value: int, bits: int) -> None:
    if not 0 <= value < (1 << bits):
        raise ProtocolError(f"{name}={value} does not fit in u{bits}")


def _encode_tensor(q: QuantizedTensor, out: list[bytes]) -> None:
    _check_range("ndim", len(q.shape), 8)
    for d in q.shape:
        _check_range("dimension", d, 32)
    if q.codes.size != math.prod(q.shape):
        raise ProtocolError(f"tensor has {q.codes.size} codes for shape {q.shape}")
    out.append(struct.pack(f"<BB{len(q.shape)}I", int(q.mode), len(q.shape), *q.shape))
    if q.mode is QuantMode.INT16_AFFINE:
        out.append(struct.pack("<f", q.scale))
    out.append(np.ascontiguousarray(q.codes, dtype=_CODE_DTYPES[q.mode]).tobytes())


def encode_message(m: RoundMessage) -> bytes:
    _check_range("sender", m.sender, 16)
    _check_range("round", m.round_index, 32)
    _check_range("n_tensors", len(m.tensors), 16)
    _check_range("n_prototypes", len(m.prototypes), 16)
    out = [_HEADER.pack(MAGIC, VERSION, MSG_ROUND_UPDATE, int(m.algorithm), m.sender, m.round_index,
                        len(m.tensors), len(m.prototypes))]
    for t in m.tensors:
        _encode_tensor(t, out)
    for p in m.prototypes:
        _check_range("class", p.class_id, 16)
        _check_range("count", p.count, 64)
        out.append(struct.pack("<HQ", p.class_id, p.count))
        _encode_tensor(p.vector, out)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if n > len(self.buf) - self.pos:
            raise TruncationError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self) -> QuantizedTensor:
        start = self.pos
        mode_raw, ndim = self.unpack("<BB", "tensor header")
        try:
            mode = QuantMode(mode_raw)
        except ValueError:
            raise ProtocolError(f"unknown tensor mode {mode_raw}", start) from None
        dims = self.unpack(f"<{ndim}I", "tensor dims")
        scale = 1.0
        if mode is QuantMode.INT16_AFFINE:
            (scale,) = self.unpack("<f", "tensor scale")
            if not (math.isfinite(scale) and scale > 0):
                raise ProtocolError(f"invalid quantization step {scale}", self.pos - 4)
        count = math.prod(dims)
        raw = self.take(count * mode.itemsize, "tensor payload")
        codes = np.frombuffer(raw, dtype=_CODE_DTYPES[mode]).copy()
        return QuantizedTensor(tuple(dims), mode, codes, scale)


def decode_message(data: bytes) -> RoundMessage:
    """Parse one message; every malformation surfaces as a :class:`ProtocolError`."""
    r = _Reader(data)
    if len(data) < 4:
        raise TruncationError(f"message of {len(data)} bytes is shorter than the magic", 0)
    if bytes(data[:4]) != MAGIC:
        raise MagicError(f"bad magic {bytes(data[:4])!r}", 0)
    _, version, msg_type, algo, sender, rnd, n_tensors, n_protos = r.unpack(_HEADER.format, "header")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}", 4)
    if msg_type != MSG_ROUND_UPDATE:
        raise ProtocolError(f"unknown message type {msg_type}", 5)
    try:
        algorithm = Algorithm(algo)
    except ValueError:
        raise ProtocolError(f"unknown algorithm tag {algo}", 6) from None
    tensors = tuple(r.tensor() for _ in range(n_tensors))
    protos = []
    for _ in range(n_protos):
        class_id, count = r.unpack("<HQ", "prototype header")
        start = r.pos
        vec = r.tensor()
        if len(vec.shape) != 1:
            raise ProtocolError(f"prototype vector must be 1-D, got shape {vec.shape}", start)
        if count < 1:
            raise ProtocolError(f"prototype for class {class_id} has count 0", start - 8)
        protos.append(WirePrototype(class_id, count, vec))
    if r.pos != len(data):
        raise ProtocolError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return RoundMessage(sender, rnd, algorithm, tensors, tuple(protos))


@dataclass
class ByteLedger:
    """Exact per-node wire byte counts; safe to update from several threads."""

    sent: dict[int, int] = field(default_factory=dict)
    received: dict[int, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_send(self, node: int, nbytes: int) -> None:
        with self._lock:
            self.sent[node] = self.sent.get(node, 0) + nbytes

    def record_receive(self, node: int, nbytes: int) -> None:
        with self._lock:
            self.received[node] = self.received.get(node, 0) + nbytes

    def bytes_sent(self, node: int) -> int:
        return self.sent.get(node, 0)

    def bytes_received(self, node: int) -> int:
        return self.received.get(node, 0)

    @property
    def total_sent(self) -> int:
        return sum(self.sent.values())

    @property
    def total_received(self) -> int:
        return sum(self.received.values())
