"""Plaintext reference evaluation of a graph, in float64 or in fixed point.

The fixed-point mode is the oracle the secure path is checked against.  It
is written independently of the ring and protocol code: signed ``int64``
arithmetic wrapped to ``l`` bits, direct shift-and-add convolution, and an
exact arithmetic shift wherever the secure path truncates shares.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import GraphError, WeightsFormatError
from ..protocols import activated_channels
from ..ring import RingParams
from .graph import INPUT, NetworkGraph, split_sizes

TRUNCATING_KINDS = ("conv2d", "dwconv2d", "fullyconnected", "leakyrelu", "avgpool",
                    "globalavgpool")


class _Fixed:
    def __init__(self, params: RingParams):
        self.l = params.l
        self.f = params.f_scale
        self.one = 1 << params.f_scale

    def wrap(self, v):
        v = np.asarray(v, dtype=np.int64)
        if self.l == 64:
            return v
        half = np.int64(1 << (self.l - 1))
        return ((v + half) & np.int64((1 << self.l) - 1)) - half

    def encode(self, x):
        return self.wrap(np.rint(np.asarray(x, dtype=np.float64) * self.one).astype(np.int64))

    def trunc(self, v):
        return self.wrap(self.wrap(v) >> self.f)

    def scale_const(self, c: float) -> int:
        return int(round(c * self.one))


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)))


def _pad_amount(params, f):
    padding = params.get("padding", "same")
    if padding == "same":
        return (f - 1) // 2
    if padding in ("valid", None):
        return 0
    return int(padding)


def _conv(x, k, stride, pad, depthwise=False):
    """Shift-and-add convolution; works for float64 and wrapping int64 alike."""
    xp = _pad(x, pad)
    f = k.shape[0]
    ho = (xp.shape[0] - f) // stride + 1
    wo = (xp.shape[1] - f) // stride + 1
    out_c = k.shape[2] if depthwise else k.shape[3]
    acc = np.zeros((ho, wo, out_c), dtype=x.dtype)
    for di in range(f):
        for dj in range(f):
            patch = xp[di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            if depthwise:
                acc += patch * k[di, dj]
            else:
                acc += np.tensordot(patch, k[di, dj], axes=([2], [0]))
    return acc


def _windows(x, f, stride):
    ho = (x.shape[0] - f) // stride + 1
    wo = (x.shape[1] - f) // stride + 1
    return [x[di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            for di in range(f) for dj in range(f)]


def _shuffle(x, groups):
    c = x.shape[-1]
    lead = x.shape[:-1]
    return x.reshape(*lead, groups, c // groups).swapaxes(-1, -2).reshape(*lead, c)


def _act_float(kind, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "relu6":
        return np.minimum(np.maximum(x, 0.0), 6.0)
    if kind == "leakyrelu":
        return np.maximum(0.1 * x, x)
    return x


def _act_fixed(fx: _Fixed, kind, x):
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "relu6":
        return np.clip(x, 0, 6 * fx.one)
    if kind == "leakyrelu":
        lo, hi = fx.scale_const(0.1), fx.scale_const(0.9)
        return fx.trunc(x * np.where(x >= 0, lo + hi, lo))
    return x


def eval_plaintext(graph: NetworkGraph, weights, x, mode="float", params: RingParams | None = None,
                   raw=False):
    """Evaluate ``graph`` on a real-valued input.

    ``mode="float"`` is a float64 reference.  ``mode="fixed"`` encodes input
    and weights at ``params.f_scale`` bits and mirrors the secure path's
    arithmetic exactly (with exact truncation); its result is decoded to
    floats unless ``raw=True``, which returns the signed fixed-point integers.
    """
    if mode not in ("float", "fixed"):
        raise ValueError(f"mode must be 'float' or 'fixed', got {mode!r}")
    shapes = graph.shapes()
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != tuple(graph.input_shape):
        raise GraphError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
    fixed = mode == "fixed"
    fx = _Fixed(params or RingParams()) if fixed else None
    vals = {INPUT: fx.encode(x) if fixed else x}

    def w(name, key, required=True):
        entry = weights.get(name) if weights is not None else None
        if entry is None or key not in entry:
            if not required:
                return None
            raise WeightsFormatError(f"missing weights for layer {name!r} ({key})")
        arr = np.asarray(entry[key], dtype=np.float64)
        return fx.encode(arr) if fixed else arr

    for lyr in graph.layers:
        k, p = lyr.kind, lyr.params
        ins = [vals[r] for r in lyr.inputs]
        a = ins[0]
        if k in ("conv2d", "dwconv2d"):
            kern = w(lyr.name, "kernel")
            f = kern.shape[0]
            y = _conv(a, kern, int(p.get("stride", 1)), _pad_amount(p, f), k == "dwconv2d")
            if fixed:
                y = fx.trunc(y)
            b = w(lyr.name, "bias", required=False)
            if b is not None:
                y = fx.wrap(y + b) if fixed else y + b
        elif k == "fullyconnected":
            kern = w(lyr.name, "kernel")
            y = a @ kern
            if fixed:
                y = fx.trunc(y)
            b = w(lyr.name, "bias", required=False)
            if b is not None:
                y = fx.wrap(y + b) if fixed else y + b
        elif k in ("relu", "relu6", "leakyrelu"):
            y = _act_fixed(fx, k, a) if fixed else _act_float(k, a)
        elif k == "partial_activation":
            inner = p.get("inner", "relu")
            n = 0 if inner == "none" else activated_channels(float(p["ratio"]), a.shape[-1])
            y = a.copy()
            head = a[..., :n]
            y[..., :n] = _act_fixed(fx, inner, head) if fixed else _act_float(inner, head)
        elif k == "maxpool":
            f = int(p.get("kernel", 2))
            y = np.max(np.stack(_windows(a, f, int(p.get("stride", f)))), axis=0)
        elif k == "avgpool":
            f = int(p.get("kernel", 2))
            wins = _windows(a, f, int(p.get("stride", f)))
            y = _mean(fx, wins)
        elif k == "globalavgpool":
            y = _mean(fx, [a[i:i + 1, j:j + 1] for i in range(a.shape[0]) for j in range(a.shape[1])])
        elif k == "channel_split":
            sizes = split_sizes(p.get("fractions", [0.5, 0.5]), a.shape[-1])
            off = 0
            for i, n in enumerate(sizes):
                vals[f"{lyr.name}:{i}"] = a[..., off:off + n]
                off += n
            y = vals[f"{lyr.name}:0"]
        elif k == "concat":
            y = np.concatenate(ins, axis=-1)
        elif k == "channel_shuffle":
            y = _shuffle(a, int(p.get("groups", 2)))
        elif k == "residual_add":
            y = fx.wrap(ins[0] + ins[1]) if fixed else ins[0] + ins[1]
        elif k == "flatten":
            y = a.reshape(-1)
        elif k == "batchnorm":
            if fixed:
                raise GraphError(f"batchnorm {lyr.name!r} must be folded before fixed-point evaluation")
            eps = float(p.get("eps", 1e-5))
            y = (a - w(lyr.name, "mean")) / np.sqrt(w(lyr.name, "var") + eps) \
                * w(lyr.name, "gamma") + w(lyr.name, "beta")
        else:
            raise GraphError(f"layer {lyr.name!r}: cannot evaluate kind {k!r}")
        if tuple(np.shape(y)) != tuple(shapes[lyr.name]):
            raise GraphError(f"layer {lyr.name!r} produced {np.shape(y)}, expected {shapes[lyr.name]}")
        vals[lyr.name] = y
    out = vals[graph.output]
    if fixed and not raw:
        return out.astype(np.float64) / fx.one
    return out


def _mean(fx, wins):
    total = wins[0]
    for v in wins[1:]:
        total = total + v
    if fx is None:
        return total / len(wins)
    return fx.trunc(total * fx.scale_const(1.0 / len(wins)))


# -- error budget ---------------------------------------------------------

def multiplication_depth(graph: NetworkGraph) -> int:
    """Largest number of truncating layers on any input-to-output path."""
    depth = {INPUT: 0}
    for lyr in graph.layers:
        d = max(depth[r.split(":")[0]] for r in lyr.inputs)
        depth[lyr.name] = d + (lyr.kind in TRUNCATING_KINDS
                               or (lyr.kind == "partial_activation"
                                   and lyr.params.get("inner") == "leakyrelu"))
    return depth[graph.output]


def ulp_budget(graph: NetworkGraph, weights, params: RingParams | None = None) -> int:
    """Worst-case deviation (in ULPs) of the secure output from the fixed oracle.

    Each truncation contributes at most one unit; errors already present
    are carried through linear layers scaled by the largest absolute
    row sum of the encoded weights, and unchanged through 1-Lipschitz
    layers (ReLU, ReLU6, max pooling, permutations).
    """
    fx = _Fixed(params or RingParams())
    err = {INPUT: 0}
    for lyr in graph.layers:
        k = lyr.kind
        ins = [err[r.split(":")[0]] for r in lyr.inputs]
        e = max(ins)
        if k in ("conv2d", "dwconv2d", "fullyconnected"):
            kern = np.abs(fx.encode(np.asarray(weights[lyr.name]["kernel"], dtype=np.float64)))
            if k == "conv2d":
                gain = kern.sum(axis=(0, 1, 2)).max()
            elif k == "dwconv2d":
                gain = kern.sum(axis=(0, 1)).max()
            else:
                gain = kern.sum(axis=0).max()
            e = math.ceil(int(gain) * e / fx.one) + 1
        elif k == "leakyrelu" or (k == "partial_activation" and lyr.params.get("inner") == "leakyrelu"):
            e = e + 1
        elif k in ("avgpool", "globalavgpool"):
            if k == "avgpool":
                n = int(lyr.params.get("kernel", 2)) ** 2
            else:
                h, w_, _ = graph.shapes()[lyr.inputs[0]]
                n = h * w_
            e = math.ceil(n * e * fx.scale_const(1.0 / n) / fx.one) + 1
        elif k == "residual_add":
            e = sum(ins)
        err[lyr.name] = e
    return err[graph.output]
