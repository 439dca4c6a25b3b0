"""Secure evaluation of a whole network graph by the three parties.

P0 holds the weights and P1 the input.  Both are secret-shared up front
(one ``weights`` round, one ``input`` round), every layer then runs on
shares, and the output is opened to P1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .netgraph.graph import INPUT, NetworkGraph, split_sizes
from .netgraph.weights import WeightStore, expected_shapes
from .protocols import (PartialActivationSpec, activation, avgpool, channel_shuffle,
                        global_avgpool, pi_conv2d, pi_dwconv2d, pi_matmul, pi_maxpool,
                        pi_partial_activation, reveal, share_tensors)
from .ring import DEFAULT, RingParams
from .transport import P0, P1, PartyContext, Session, Transcript, connect_party


def _share_weights(ctx: PartyContext, graph: NetworkGraph, weights):
    layout = [(layer, name, shape) for layer, params in expected_shapes(graph).items()
              for name, shape in params.items()]
    values = None
    if ctx.pid == P0:
        WeightStore(weights).check(graph)
        values = [ctx.params.encode(np.asarray(weights[layer][name], dtype=np.float64))
                  for layer, name, _ in layout]
    shared = share_tensors(ctx, P0, values, [s for _, _, s in layout], tag="weights")
    out: dict = {}
    for (layer, name, _), v in zip(layout, shared):
        out.setdefault(layer, {})[name] = v
    return out


def _with_bias(ctx, y, w):
    b = w.get("bias")
    return y if b is None else ctx.params.add(y, b)


def secure_forward(ctx: PartyContext, graph: NetworkGraph, weights=None, x=None,
                   marks: dict | None = None):
    """Run ``graph`` on shares; P1 gets the output ring tensor, others ``None``.

    ``weights`` (a :class:`WeightStore`) is read only by P0 and ``x`` (real
    valued, the graph's input shape) only by P1.  When ``marks`` is a dict
    it receives ``layer name -> (first round, end round)`` for this party.
    """
    p = ctx.params
    shapes = graph.shapes()
    w = _share_weights(ctx, graph, weights)
    xin = None
    if ctx.pid == P1:
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape) != tuple(graph.input_shape):
            raise ShapeError(f"input shape {x.shape} does not match graph input "
                             f"{graph.input_shape}")
        xin = [p.encode(x)]
    vals = {INPUT: share_tensors(ctx, P1, xin, [graph.input_shape], tag="input")[0]}

    for lyr in graph.layers:
        start = ctx.round
        k, prm = lyr.kind, lyr.params
        ins = [vals[r] for r in lyr.inputs]
        a = ins[0]
        if k == "conv2d":
            y = pi_conv2d(ctx, a, w[lyr.name]["kernel"], int(prm.get("stride", 1)),
                          prm.get("padding", "same"))
            y = _with_bias(ctx, y, w[lyr.name])
        elif k == "dwconv2d":
            y = pi_dwconv2d(ctx, a, w[lyr.name]["kernel"], int(prm.get("stride", 1)),
                            prm.get("padding", "same"))
            y = _with_bias(ctx, y, w[lyr.name])
        elif k == "fullyconnected":
            y = pi_matmul(ctx, a.reshape(1, -1), w[lyr.name]["kernel"], truncate=True)[0]
            y = _with_bias(ctx, y, w[lyr.name])
        elif k in ("relu", "relu6", "leakyrelu"):
            y = activation(ctx, a, k)
        elif k == "partial_activation":
            spec = PartialActivationSpec(float(prm["ratio"]), prm.get("inner", "relu"))
            y = pi_partial_activation(ctx, a, spec)
        elif k == "maxpool":
            f = int(prm.get("kernel", 2))
            y = pi_maxpool(ctx, a, f, int(prm.get("stride", f)))
        elif k == "avgpool":
            f = int(prm.get("kernel", 2))
            y = avgpool(ctx, a, f, int(prm.get("stride", f)))
        elif k == "globalavgpool":
            y = global_avgpool(ctx, a)
        elif k == "channel_split":
            off = 0
            for i, n in enumerate(split_sizes(prm.get("fractions", [0.5, 0.5]), a.shape[-1])):
                vals[f"{lyr.name}:{i}"] = np.ascontiguousarray(a[..., off:off + n])
                off += n
            y = vals[f"{lyr.name}:0"]
        elif k == "concat":
            y = np.concatenate(ins, axis=-1)
        elif k == "channel_shuffle":
            y = channel_shuffle(a, int(prm.get("groups", 2)))
        elif k == "residual_add":
            y = p.add(ins[0], ins[1])
        elif k == "flatten":
            y = a.reshape(-1)
        else:
            hint = " (fold batchnorm first)" if k == "batchnorm" else ""
            raise GraphError(f"layer {lyr.name!r}: kind {k!r} cannot run securely{hint}")
        if tuple(y.shape) != tuple(shapes[lyr.name]):
            raise ShapeError(f"layer {lyr.name!r} produced {y.shape}, expected "
                             f"{shapes[lyr.name]}")
        vals[lyr.name] = y
        if marks is not None:
            marks[lyr.name] = (start, ctx.round)
    return reveal(ctx, vals[graph.output], to=P1)


@dataclass
class SecureResult:
    raw: np.ndarray
    params: RingParams
    transcript: Transcript
    marks: dict

    @property
    def output(self) -> np.ndarray:
        return self.params.decode(self.raw)

    def layer_cost(self, name: str) -> tuple[int, int]:
        """Measured ``(rounds, bytes)`` of one layer."""
        lo, hi = self.marks[name]
        recs = [r for r in self.transcript.records if lo <= r.round < hi]
        return hi - lo, sum(r.nbytes for r in recs)


def run_secure(graph: NetworkGraph, weights, x, seed=0, params: RingParams = DEFAULT,
               transport="inproc", endpoints=None) -> SecureResult:
    """All three parties in this process, over the in-process hub or loopback TCP."""
    marks: dict = {}
    with Session(transport, seed, params, endpoints) as s:
        args = [(graph, weights, None, None), (graph, None, x, marks), (graph, None, None, None)]
        out = s.run(secure_forward, args)
        return SecureResult(out[P1], params, s.transcript, marks)


def run_party(pid: int, graph: NetworkGraph, endpoints, seed=0, params: RingParams = DEFAULT,
              weights=None, x=None, timeout=60.0):
    """One party in its own process.  Returns ``(output or None, local transcript)``."""
    ctx = connect_party(pid, endpoints, seed, params, timeout)
    try:
        out = secure_forward(ctx, graph, weights if pid == P0 else None,
                             x if pid == P1 else None)
        return out, ctx.transcript
    finally:
        ctx.endpoint.close()
