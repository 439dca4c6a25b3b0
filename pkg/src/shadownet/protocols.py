"""Three-party protocols over additive shares.

Every function here is run by all three parties at once, each passing its
own :class:`~shadownet.transport.PartyContext` and its local share.  P0 and
P1 hold real shares.  P2, the crypto producer, holds an all-zero
placeholder of the right shape: it runs the same local code on it so that
shapes and round counts stay in lockstep, and its results are meaningless.

Transcript tags used here are stable: ``offline`` (P2 dealing triples),
``matmul-open`` (masked openings between P0 and P1), ``ideal-drelu`` (the
ideal sign oracle hosted by P2), ``input``/``weights``/``output``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolMisuseError, ShapeError
from .ring import RingParams, random_ring, truncate_local, zero_shares
from .transport import P0, P1, P2, PartyContext

ACTIVATIONS = ("relu", "relu6", "leakyrelu", "none")
LEAKY_SLOPE = 0.1


def placeholder(shape) -> np.ndarray:
    return np.zeros(shape, dtype=np.uint64)


def activated_channels(ratio: float, channels: int) -> int:
    """``ceil(ratio * channels)``, robust to float noise like ``0.1 * 30``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"partial activation ratio must be in [0, 1], got {ratio}")
    return min(channels, math.ceil(round(ratio * channels, 9)))


@dataclass(frozen=True)
class PartialActivationSpec:
    ratio: float
    inner: str = "relu"

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.inner not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.inner!r}")

    def k(self, channels: int) -> int:
        return 0 if self.inner == "none" else activated_channels(self.ratio, channels)


# -- packing --------------------------------------------------------------

def _pack(params: RingParams, *arrays) -> bytes:
    return b"".join(params.to_bytes(a) for a in arrays)


def _unpack(params: RingParams, buf: bytes, *shapes):
    out, off = [], 0
    wb = params.word_bytes
    for shp in shapes:
        n = int(np.prod(shp, dtype=np.int64)) * wb
        out.append(params.from_bytes(buf[off:off + n], shp))
        off += n
    if off != len(buf):
        raise ProtocolMisuseError(f"payload has {len(buf) - off} trailing bytes")
    return out


def _add_public(ctx: PartyContext, x, c):
    """Add a public constant to the shared value (P0 absorbs it)."""
    return ctx.params.add(x, c) if ctx.pid == P0 else x


def _fresh(ctx: PartyContext, x):
    """Re-randomize an output share with common zero shares of P0 and P1."""
    if ctx.is_helper:
        return x
    u0, u1 = zero_shares(ctx.common(P1 if ctx.pid == P0 else P0), x.shape, ctx.params)
    return ctx.params.add(x, u0 if ctx.pid == P0 else u1)


# -- input / output -------------------------------------------------------

def share_tensors(ctx: PartyContext, owner: int, values, shapes, tag="input"):
    """``owner`` (P0 or P1) secret-shares plaintext ring tensors in one round."""
    if owner not in (P0, P1):
        raise ProtocolMisuseError("only P0 or P1 can own private inputs")
    p = ctx.params
    other = P1 - owner
    shapes = [tuple(s) for s in shapes]
    if ctx.pid == owner:
        if values is None or len(values) != len(shapes):
            raise ProtocolMisuseError("owner must supply one value per shape")
        masks = [random_ring(ctx.rng, s, p) for s in shapes]
        mine = []
        for v, m, s in zip(values, masks, shapes):
            v = p.reduce(v)
            if v.shape != s:
                raise ShapeError(f"input of shape {v.shape} where {s} was declared")
            mine.append(p.sub(v, m))
        ctx.exchange(tag, {other: _pack(p, *masks)})
        return mine
    if ctx.pid == other:
        got = ctx.exchange(tag, expect=[owner])
        return _unpack(p, got[owner], *shapes)
    ctx.exchange(tag)
    return [placeholder(s) for s in shapes]


def reveal(ctx: PartyContext, x, to: int = P1, tag="output"):
    """Open a shared value to ``to`` (P0 or P1); other parties get ``None``."""
    if to not in (P0, P1):
        raise ProtocolMisuseError("values are revealed to P0 or P1 only")
    other = P1 - to
    if ctx.pid == other:
        ctx.exchange(tag, {to: ctx.params.to_bytes(x)})
        return None
    if ctx.pid == to:
        got = ctx.exchange(tag, expect=[other])
        (theirs,) = _unpack(ctx.params, got[other], x.shape)
        return ctx.params.add(x, theirs)
    ctx.exchange(tag)
    return None


# -- multiplication -------------------------------------------------------

_OPS = {
    "matmul": lambda p, a, b: p.matmul(a, b),
    "mul": lambda p, a, b: p.mul(a, b),
}


def _out_shape(op, a_shape, b_shape):
    if op == "mul":
        if a_shape != b_shape:
            raise ShapeError(f"elementwise product needs equal shapes, got {a_shape} and {b_shape}")
        return a_shape
    if len(a_shape) < 2 or len(b_shape) < 2 or a_shape[-1] != b_shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a_shape} @ {b_shape}")
    return np.broadcast_shapes(a_shape[:-2], b_shape[:-2]) + (a_shape[-2], b_shape[-1])


def deal_triples(ctx: PartyContext, a_shape, b_shape, op="matmul"):
    """P2 deals Beaver shares ``(U, V, W = U op V)`` to P0 and P1 in one round."""
    p = ctx.params
    a_shape, b_shape = tuple(a_shape), tuple(b_shape)
    w_shape = _out_shape(op, a_shape, b_shape)
    if ctx.pid == P2:
        u = [random_ring(ctx.rng, a_shape, p) for _ in (0, 1)]
        v = [random_ring(ctx.rng, b_shape, p) for _ in (0, 1)]
        w = _OPS[op](p, p.add(u[0], u[1]), p.add(v[0], v[1]))
        w0 = random_ring(ctx.rng, w_shape, p)
        ws = [w0, p.sub(w, w0)]
        ctx.exchange("offline", {j: _pack(p, u[j], v[j], ws[j]) for j in (P0, P1)})
        return None
    got = ctx.exchange("offline", expect=[P2])
    return tuple(_unpack(p, got[P2], a_shape, b_shape, w_shape))


def _beaver(ctx: PartyContext, a, b, op: str, truncate: bool):
    p = ctx.params
    out_shape = _out_shape(op, a.shape, b.shape)
    triple = deal_triples(ctx, a.shape, b.shape, op)
    if ctx.is_helper:
        ctx.exchange("matmul-open")
        return placeholder(out_shape)
    u, v, w = triple
    e_mine, f_mine = p.sub(a, u), p.sub(b, v)
    peer = P1 - ctx.pid
    got = ctx.exchange("matmul-open", {peer: _pack(p, e_mine, f_mine)}, expect=[peer])
    e_peer, f_peer = _unpack(p, got[peer], a.shape, b.shape)
    e, f = p.add(e_mine, e_peer), p.add(f_mine, f_peer)
    fn = _OPS[op]
    z = p.add(p.add(fn(p, e, v), fn(p, u, f)), w)
    if ctx.pid == P0:
        z = p.add(z, fn(p, e, f))
    if truncate:
        z = truncate_local(z, ctx.pid, p)
    return z


def pi_matmul(ctx: PartyContext, a, b, truncate=False):
    """Shared matrix product in two rounds: triple dealing, masked openings.

    Leading dimensions broadcast like ``numpy.matmul``.  Pass
    ``truncate=True`` when both operands carry the fixed-point scale.
    """
    return _beaver(ctx, a, b, "matmul", truncate)


def pi_mul(ctx: PartyContext, a, b, truncate=False):
    """Elementwise shared product (a batch of 1x1 matmuls), two rounds."""
    return _beaver(ctx, a, b, "mul", truncate)


# -- convolution ----------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int, exact=False) -> int:
    """Output length of a sliding window; trailing rows are dropped unless ``exact``."""
    span = size + 2 * pad - kernel
    if span < 0 or (exact and span % stride):
        raise ShapeError(f"size {size} with kernel {kernel}, stride {stride}, padding {pad} "
                         "does not tile evenly")
    return span // stride + 1


def resolve_padding(padding, kernel: int) -> int:
    if padding == "same":
        return (kernel - 1) // 2
    if padding == "valid" or padding is None:
        return 0
    return int(padding)


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """``(h, w, c)`` -> patches ``(ho * wo, kernel * kernel, c)`` and ``(ho, wo)``."""
    h, w, c = x.shape
    ho = conv_output_size(h, kernel, stride, pad)
    wo = conv_output_size(w, kernel, stride, pad)
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[pad:pad + h, pad:pad + w] = x
    cols = np.empty((ho, wo, kernel, kernel, c), dtype=x.dtype)
    for di in range(kernel):
        for dj in range(kernel):
            cols[:, :, di, dj, :] = xp[di:di + stride * (ho - 1) + 1:stride,
                                       dj:dj + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(ho * wo, kernel * kernel, c), (ho, wo)


def pi_conv2d(ctx: PartyContext, x, k, stride=1, padding=0, truncate=True):
    """Shared convolution of ``x: (h, w, i)`` with ``k: (f, f, i, o)`` via im2col."""
    if x.ndim != 3 or k.ndim != 4 or k.shape[0] != k.shape[1] or k.shape[2] != x.shape[2]:
        raise ShapeError(f"conv2d shapes incompatible: input {x.shape}, kernel {k.shape}")
    f, _, i, o = k.shape
    cols, (ho, wo) = im2col(x, f, stride, resolve_padding(padding, f))
    y = pi_matmul(ctx, cols.reshape(ho * wo, f * f * i), k.reshape(f * f * i, o), truncate)
    return y.reshape(ho, wo, o)


def pi_dwconv2d(ctx: PartyContext, x, k, stride=1, padding=0, truncate=True):
    """Depthwise convolution, ``k: (f, f, c)``; one batched matmul per channel."""
    if x.ndim != 3 or k.ndim != 3 or k.shape[2] != x.shape[2]:
        raise ShapeError(f"dwconv2d shapes incompatible: input {x.shape}, kernel {k.shape}")
    f, _, c = k.shape
    cols, (ho, wo) = im2col(x, f, stride, resolve_padding(padding, f))
    a = np.ascontiguousarray(cols.transpose(2, 0, 1))          # (c, P, f*f)
    b = np.ascontiguousarray(k.reshape(f * f, c).T)[:, :, None]  # (c, f*f, 1)
    y = pi_matmul(ctx, a, b, truncate)                        # (c, P, 1)
    return np.ascontiguousarray(y[:, :, 0].T).reshape(ho, wo, c)


# -- non-linearities ------------------------------------------------------

def pi_drelu(ctx: PartyContext, a):
    """Shares of ``H(a)`` (1 where signed(a) >= 0, else 0).

    Realized as an ideal functionality hosted by P2: P0 and P1 submit
    re-randomized shares, P2 reconstructs, evaluates the sign bit and
    returns fresh shares.  The real protocol is not implemented; its
    cost is charged analytically by :mod:`shadownet.costmodel`.
    """
    p = ctx.params
    if ctx.is_helper:
        got = ctx.exchange("ideal-drelu", expect=[P0, P1])
        s0, = _unpack(p, got[P0], a.shape)
        s1, = _unpack(p, got[P1], a.shape)
        bit = p.is_nonneg(p.add(s0, s1)).astype(np.uint64)
        b0 = random_ring(ctx.rng, a.shape, p)
        ctx.exchange("ideal-drelu", {P0: p.to_bytes(b0), P1: p.to_bytes(p.sub(bit, b0))})
        return placeholder(a.shape)
    masked = _fresh(ctx, a)
    ctx.exchange("ideal-drelu", {P2: p.to_bytes(masked)})
    got = ctx.exchange("ideal-drelu", expect=[P2])
    return _unpack(p, got[P2], a.shape)[0]


def pi_relu(ctx: PartyContext, a):
    """``a * H(a)``; the multiplier is a bit, so no truncation is needed."""
    return pi_mul(ctx, a, pi_drelu(ctx, a))


def pi_relu6(ctx: PartyContext, a, trace: dict | None = None):
    """``min(max(a, 0), 6)`` as ``H(a) * (a + (6 - a) * H(a - 6))``.

    Steps: alpha = H(a - 6); c = alpha * (6 - a); beta = H(a);
    d = beta * (a + c); output d plus fresh zero shares.  When ``trace`` is
    a dict the local shares of alpha, c, beta and d are stored in it.
    """
    p = ctx.params
    six = 6 * p.one
    alpha = pi_drelu(ctx, _add_public(ctx, a, -six))
    c = pi_mul(ctx, alpha, _add_public(ctx, p.neg(a), six))
    beta = pi_drelu(ctx, a)
    d = pi_mul(ctx, beta, p.add(a, c))
    if trace is not None:
        trace.update(alpha=alpha, c=c, beta=beta, d=d)
    return _fresh(ctx, d)


def leaky_constants(params: RingParams) -> tuple[int, int]:
    """Encoded ``(0.1, 0.9)``; round-to-nearest so they sum to exactly 1.0."""
    lo = int(round(LEAKY_SLOPE * params.one))
    hi = int(round((1 - LEAKY_SLOPE) * params.one))
    return lo, hi


def pi_leaky_relu(ctx: PartyContext, a):
    """``a * (0.1 + 0.9 * H(a))`` with one truncation."""
    p = ctx.params
    lo, hi = leaky_constants(p)
    alpha = pi_drelu(ctx, a)
    m = _add_public(ctx, p.mul(alpha, hi), lo)
    c = pi_mul(ctx, a, m, truncate=True)
    return _fresh(ctx, c)


def activation(ctx: PartyContext, x, kind: str):
    if kind == "relu":
        return pi_relu(ctx, x)
    if kind == "relu6":
        return pi_relu6(ctx, x)
    if kind == "leakyrelu":
        return pi_leaky_relu(ctx, x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def pi_partial_activation(ctx: PartyContext, x, spec: PartialActivationSpec):
    """Activate the first ``ceil(ratio * C)`` channels; copy the rest unchanged."""
    channels = x.shape[-1]
    if channels < 1:
        raise ShapeError("partial activation needs at least one channel")
    k = spec.k(channels)
    if k == 0:
        return x
    head = activation(ctx, np.ascontiguousarray(x[..., :k]), spec.inner)
    if k == channels:
        return head
    return np.concatenate([head, x[..., k:]], axis=-1)


# -- pooling --------------------------------------------------------------

def pool_windows(x: np.ndarray, kernel: int, stride: int):
    """The ``kernel**2`` strided views of an ``(h, w, c)`` tensor, one per window offset."""
    if x.ndim != 3:
        raise ShapeError(f"pooling expects (h, w, c), got {x.shape}")
    h, w, _ = x.shape
    ho = conv_output_size(h, kernel, stride, 0, exact=True)
    wo = conv_output_size(w, kernel, stride, 0, exact=True)
    return [x[di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]
            for di in range(kernel) for dj in range(kernel)]


def pi_max(ctx: PartyContext, a, b):
    """``b + H(a - b) * (a - b)``."""
    p = ctx.params
    diff = p.sub(a, b)
    return p.add(b, pi_mul(ctx, pi_drelu(ctx, diff), diff))


def pi_maxpool(ctx: PartyContext, x, kernel=2, stride=None):
    """``kernel**2 - 1`` sequential pairwise maxima; all windows batched per stage.

    Exact as long as pairwise differences stay inside the signed range,
    i.e. inputs lie in ``[-2**(l-2), 2**(l-2))``.
    """
    stride = kernel if stride is None else stride
    wins = pool_windows(x, kernel, stride)
    cur = np.ascontiguousarray(wins[0])
    for w in wins[1:]:
        cur = pi_max(ctx, cur, np.ascontiguousarray(w))
    return cur


def _scale_sum(ctx: PartyContext, total, count: int):
    p = ctx.params
    inv = int(round(p.one / count))
    return truncate_local(p.mul(total, inv), ctx.pid, p) if not ctx.is_helper \
        else placeholder(total.shape)


def avgpool(ctx: PartyContext, x, kernel=2, stride=None):
    """Local average pooling: window sum times encoded ``1/kernel**2``, truncated.

    No messages are sent.
    """
    stride = kernel if stride is None else stride
    wins = pool_windows(x, kernel, stride)
    total = wins[0]
    for w in wins[1:]:
        total = ctx.params.add(total, w)
    return _scale_sum(ctx, total, kernel * kernel)


def global_avgpool(ctx: PartyContext, x):
    h, w, c = x.shape
    total = ctx.params.reduce(x.sum(axis=(0, 1), dtype=np.uint64)).reshape(1, 1, c)
    return _scale_sum(ctx, total, h * w)


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    c = x.shape[-1]
    if c % groups:
        raise ShapeError(f"{c} channels do not split into {groups} groups")
    lead = x.shape[:-1]
    return x.reshape(*lead, groups, c // groups).swapaxes(-1, -2).reshape(*lead, c)
