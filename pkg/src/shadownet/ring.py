"""Arithmetic over Z_{2^l}, fixed-point encoding and additive 2-of-2 sharing.

Ring tensors are plain ``numpy.uint64`` arrays whose entries are reduced
mod ``2**l``.  All arithmetic wraps; nothing here ever raises on overflow.

The pseudorandom generators are seeded Philox streams.  They are fine for
simulation and testing but are not a vetted cryptographic PRG.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolMisuseError, RangeError, ShapeError

RingTensor = np.ndarray


@dataclass(frozen=True)
class RingParams:
    """Ring width ``l``, comparison field ``p`` and fixed-point scale."""

    l: int = 64
    p: int = 67
    f_scale: int = 13

    def __post_init__(self):
        if not 8 <= self.l <= 64:
            raise ValueError(f"bit width must be in [8, 64], got {self.l}")
        if self.f_scale < 0 or self.l < 2 * self.f_scale + 8:
            raise ValueError(
                f"l={self.l} leaves no headroom for f_scale={self.f_scale} "
                "(need l >= 2*f_scale + 8)")
        if self.p < 2:
            raise ValueError("comparison field size must be >= 2")

    @property
    def modulus(self) -> int:
        return 1 << self.l

    @property
    def mask(self) -> np.uint64:
        return np.uint64(self.modulus - 1)

    @property
    def word_bytes(self) -> int:
        return (self.l + 7) // 8

    @property
    def one(self) -> int:
        return 1 << self.f_scale

    # -- conversion -------------------------------------------------------

    def reduce(self, x) -> RingTensor:
        """Bring integers (signed or unsigned, any numpy int dtype) into the ring."""
        a = np.asarray(x)
        if a.dtype == object:
            a = np.array([int(v) % self.modulus for v in a.ravel()],
                         dtype=np.uint64).reshape(a.shape)
            return a
        a = a.astype(np.int64, copy=False) if a.dtype.kind in "ib" else a
        a = a.astype(np.uint64)
        if self.l < 64:
            a = a & self.mask
        return a

    def signed(self, x: RingTensor) -> np.ndarray:
        """Two's-complement view of ring elements as ``int64``."""
        a = np.asarray(x, dtype=np.uint64)
        if self.l == 64:
            return a.view(np.int64)
        s = a.astype(np.int64)
        return np.where(s >= (1 << (self.l - 1)), s - (1 << self.l), s)

    def is_nonneg(self, x: RingTensor) -> np.ndarray:
        return np.asarray(x, dtype=np.uint64) < np.uint64(1 << (self.l - 1))

    def encode(self, x) -> RingTensor:
        """Round-to-nearest fixed-point encoding of reals."""
        a = np.asarray(x, dtype=np.float64)
        bound = 2.0 ** (self.l - 1 - self.f_scale)
        if np.any(np.abs(a) >= bound) or not np.all(np.isfinite(a)):
            raise RangeError(f"value outside fixed-point range (|x| < {bound})")
        return self.reduce(np.rint(a * self.one).astype(np.int64))

    def decode(self, v: RingTensor) -> np.ndarray:
        return self.signed(v).astype(np.float64) / self.one

    # -- arithmetic -------------------------------------------------------

    def _coerce(self, b):
        if isinstance(b, np.ndarray):
            return b
        return np.uint64(int(b) % self.modulus)

    def _wrap(self, a: np.ndarray) -> RingTensor:
        return a & self.mask if self.l < 64 else a

    def add(self, a, b) -> RingTensor:
        b = self._coerce(b)
        _check_broadcast(a, b)
        return self._wrap(np.asarray(a, np.uint64) + np.asarray(b, np.uint64))

    def sub(self, a, b) -> RingTensor:
        b = self._coerce(b)
        _check_broadcast(a, b)
        return self._wrap(np.asarray(a, np.uint64) - np.asarray(b, np.uint64))

    def neg(self, a) -> RingTensor:
        return self._wrap(np.uint64(0) - np.asarray(a, np.uint64))

    def mul(self, a, b) -> RingTensor:
        b = self._coerce(b)
        _check_broadcast(a, b)
        return self._wrap(np.asarray(a, np.uint64) * np.asarray(b, np.uint64))

    scalar_mul = mul

    def matmul(self, a, b) -> RingTensor:
        a = np.asarray(a, np.uint64)
        b = np.asarray(b, np.uint64)
        if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        return self._wrap(np.matmul(a, b))

    def shift_right_signed(self, a: RingTensor, bits: int) -> RingTensor:
        """Arithmetic right shift of the two's-complement interpretation."""
        return self.reduce(self.signed(a) >> bits)

    # -- serialization ----------------------------------------------------

    def to_bytes(self, a: RingTensor) -> bytes:
        """Little-endian words of ``word_bytes`` each, row-major."""
        a = np.ascontiguousarray(a, dtype="<u8")
        if self.word_bytes == 8:
            return a.tobytes()
        raw = a.view(np.uint8).reshape(-1, 8)[:, :self.word_bytes]
        return raw.tobytes()

    def from_bytes(self, buf: bytes, shape) -> RingTensor:
        n = int(np.prod(shape, dtype=np.int64))
        wb = self.word_bytes
        if len(buf) != n * wb:
            raise ShapeError(f"payload of {len(buf)} bytes does not hold {n} words of {wb} bytes")
        if wb == 8:
            return np.frombuffer(buf, dtype="<u8").astype(np.uint64).reshape(shape)
        raw = np.zeros((n, 8), dtype=np.uint8)
        raw[:, :wb] = np.frombuffer(buf, dtype=np.uint8).reshape(n, wb)
        return raw.view("<u8").astype(np.uint64).reshape(shape)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"incompatible shapes {np.shape(a)} and {np.shape(b)}") from None


DEFAULT = RingParams()


def encode_fixed(x, params: RingParams = DEFAULT):
    """Encode a real (or array of reals) as fixed point in the ring."""
    out = params.encode(x)
    return int(out) if np.ndim(x) == 0 else out


def decode_fixed(v, params: RingParams = DEFAULT):
    out = params.decode(np.asarray(v, dtype=np.uint64))
    return float(out) if np.ndim(v) == 0 else out


def ring_arith(op: str, a, b=None, params: RingParams = DEFAULT) -> RingTensor:
    """Dispatch ``add``/``sub``/``neg``/``mul``/``scalar_mul``/``matmul``."""
    if op == "neg":
        return params.neg(a)
    try:
        fn = {"add": params.add, "sub": params.sub, "mul": params.mul,
              "scalar_mul": params.scalar_mul, "matmul": params.matmul}[op]
    except KeyError:
        raise ValueError(f"unknown ring op {op!r}") from None
    return fn(a, b)


# -- randomness -----------------------------------------------------------

def derive_seed(master, *labels) -> bytes:
    """32-byte seed derived from a master seed and a label path."""
    h = hashlib.blake2b(digest_size=32)
    h.update(master if isinstance(master, bytes) else str(master).encode())
    for lab in labels:
        h.update(b"/" + str(lab).encode())
    return h.digest()


def generator(seed, *labels) -> np.random.Generator:
    """Seeded counter-mode (Philox) generator for a label path."""
    key = np.frombuffer(derive_seed(seed, *labels)[:16], dtype="<u8").astype(np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def random_ring(rng: np.random.Generator, shape, params: RingParams) -> RingTensor:
    return rng.integers(0, params.modulus, size=shape, dtype=np.uint64, endpoint=False)


@dataclass
class CommonRandomness:
    """Seed shared by two parties; each draw advances ``counter``.

    Both holders draw in the same order, so identical (seed, counter,
    shape) always yields identical output on both sides.
    """

    seed: bytes
    counter: int = 0

    def __post_init__(self):
        if len(self.seed) != 32:
            raise ValueError("common randomness seed must be 32 bytes")

    def draw(self, shape, params: RingParams) -> RingTensor:
        rng = generator(self.seed, "cr", self.counter)
        self.counter += 1
        return random_ring(rng, shape, params)


def zero_shares(cr: CommonRandomness, shape, params: RingParams = DEFAULT):
    """Pseudorandom pair ``(u0, u1)`` with ``u0 + u1 = 0``; advances the counter."""
    u0 = cr.draw(shape, params)
    return u0, params.neg(u0)


# -- sharing --------------------------------------------------------------

@dataclass(frozen=True)
class ShareHalf:
    owner: int
    payload: RingTensor = field(repr=False)

    def __post_init__(self):
        if self.owner not in (0, 1):
            raise ProtocolMisuseError(f"share owner must be 0 or 1, got {self.owner}")

    @property
    def shape(self):
        return self.payload.shape


def share(x: RingTensor, rng: np.random.Generator, params: RingParams = DEFAULT):
    x = params.reduce(x)
    s0 = random_ring(rng, x.shape, params)
    return ShareHalf(0, s0), ShareHalf(1, params.sub(x, s0))


def reconstruct(s0: ShareHalf, s1: ShareHalf, params: RingParams = DEFAULT) -> RingTensor:
    if {s0.owner, s1.owner} != {0, 1}:
        raise ProtocolMisuseError("reconstruct needs one share from each of parties 0 and 1")
    if s0.shape != s1.shape:
        raise ProtocolMisuseError(f"share shapes differ: {s0.shape} vs {s1.shape}")
    return params.add(s0.payload, s1.payload)


def truncate_local(payload: RingTensor, owner: int, params: RingParams,
                   bits: int | None = None) -> RingTensor:
    """Local fixed-point rescale of one party's share (no communication).

    Party 0 shifts its signed share; party 1 negates, shifts and negates.
    The reconstruction is off from exact truncation by at most one unit,
    unless the two signed shares wrap, which happens with probability
    about ``|x| / 2**l``.
    """
    bits = params.f_scale if bits is None else bits
    if bits == 0:
        return payload
    if owner == 0:
        return params.shift_right_signed(payload, bits)
    return params.neg(params.shift_right_signed(params.neg(payload), bits))


def truncate_share(s: ShareHalf, params: RingParams = DEFAULT) -> ShareHalf:
    return ShareHalf(s.owner, truncate_local(s.payload, s.owner, params))


# -- golden share files ---------------------------------------------------

def write_tensor_file(path, a: RingTensor, params: RingParams = DEFAULT) -> None:
    """Rank (u64), dims (u64 each), then little-endian ring words."""
    a = np.asarray(a, dtype=np.uint64)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(params.to_bytes(a))


def read_tensor_file(path, params: RingParams = DEFAULT) -> RingTensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    (rank,) = struct.unpack_from("<Q", buf, 0)
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    return params.from_bytes(buf[8 + 8 * rank:], shape)
