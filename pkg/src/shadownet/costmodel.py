"""Analytic round and communication cost of secure layers and whole networks.

Per-element activation costs, with ``l`` the share width and ``p`` the
comparison field (``log2 p`` is taken real-valued):

=========  ======  ============================
layer      rounds  bits per element
=========  ======  ============================
DReLU      8       8 l log2 p + 19 l
ReLU       10      8 l log2 p + 24 l
ReLU6      20      16 l log2 p + 48 l
LeakyReLU  10      same as ReLU
=========  ======  ============================

A convolution over an ``m x m x i`` input with ``o`` kernels of size
``f x f`` costs 2 rounds and ``(2 m^2 f^2 i + 2 f^2 o i + m^2 o) l`` bits;
``m`` is the output side, which is also the input side for stride-1
"same" convolutions.  Max pooling costs ``9 (f^2 - 1)`` rounds and
``(8 l log2 p + 29 l)(f^2 - 1)`` bits per output element.  Element-wise
layers run all elements in parallel, so their rounds do not depend on size.
Layers in a network compose sequentially: totals are plain sums.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import AnalysisError
from .netgraph.graph import NetworkGraph
from .protocols import activated_channels

MB = 10 ** 6


@dataclass(frozen=True)
class CostParams:
    l: int = 64
    p: int = 67
    mb_unit: int = MB

    @property
    def log_p(self) -> float:
        return math.log2(self.p)

    @classmethod
    def from_ring(cls, ring) -> "CostParams":
        return cls(l=ring.l, p=ring.p)


DEFAULT = CostParams()


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    rounds: int
    bits: float
    phase: str = "online"
    note: str = ""

    def __post_init__(self):
        if self.bits < 0 or self.rounds < 0:
            raise ValueError("costs are non-negative")
        if self.phase == "local" and (self.rounds or self.bits):
            raise ValueError("local layers cost nothing")

    @property
    def bytes(self) -> float:
        return self.bits / 8

    def mb(self, params: CostParams = DEFAULT) -> float:
        return self.bytes / params.mb_unit

    def __add__(self, other: "LayerCost") -> "LayerCost":
        return LayerCost(f"{self.name}+{other.name}", self.kind, self.rounds + other.rounds,
                         self.bits + other.bits, self.phase)

    def scaled(self, factor: float) -> "LayerCost":
        return LayerCost(self.name, self.kind, self.rounds, self.bits * factor, self.phase,
                         self.note)


def _local(name="", kind="local") -> LayerCost:
    return LayerCost(name, kind, 0, 0.0, "local")


def _elementwise(n, rounds, bits_per_elem, name, kind) -> LayerCost:
    if n < 0:
        raise ValueError("element count must be non-negative")
    if n == 0:
        return LayerCost(name, kind, 0, 0.0)
    return LayerCost(name, kind, rounds, n * bits_per_elem)


def conv_cost(m, f, i, o, params: CostParams = DEFAULT, name="conv") -> LayerCost:
    if min(m, f, i, o) < 1:
        raise ValueError("conv dimensions must be >= 1")
    elems = 2 * m * m * f * f * i + 2 * f * f * o * i + m * m * o
    return LayerCost(name, "conv2d", 2, float(elems * params.l))


def fc_cost(n_in, n_out, params: CostParams = DEFAULT, name="fc") -> LayerCost:
    """A fully connected layer is a 1x1 convolution on a 1x1 input."""
    return LayerCost(name, "fullyconnected", 2, conv_cost(1, 1, n_in, n_out, params).bits)


def scalar_matmul_cost(n=1, params: CostParams = DEFAULT) -> LayerCost:
    return _elementwise(n, 2, 5 * params.l, "matmul", "matmul")


def drelu_cost(n, params: CostParams = DEFAULT, name="drelu") -> LayerCost:
    return _elementwise(n, 8, 8 * params.l * params.log_p + 19 * params.l, name, "drelu")


def relu_cost(n, params: CostParams = DEFAULT, name="relu") -> LayerCost:
    """DReLU followed by one multiplication with the input."""
    d, m = drelu_cost(n, params), scalar_matmul_cost(n, params)
    return LayerCost(name, "relu", d.rounds + m.rounds, d.bits + m.bits)


def relu6_cost(n, params: CostParams = DEFAULT, name="relu6") -> LayerCost:
    r = relu_cost(n, params)
    return LayerCost(name, "relu6", 2 * r.rounds, 2 * r.bits)


def leaky_relu_cost(n, params: CostParams = DEFAULT, name="leakyrelu") -> LayerCost:
    c = relu_cost(n, params)
    return LayerCost(name, "leakyrelu", c.rounds, c.bits)


def maxpool_cost(n_out, f, params: CostParams = DEFAULT, name="maxpool") -> LayerCost:
    if f < 1:
        raise ValueError("pool kernel must be >= 1")
    stages = f * f - 1
    if stages == 0 or n_out == 0:
        return LayerCost(name, "maxpool", 0, 0.0)
    per = (8 * params.l * params.log_p + 29 * params.l) * stages
    return LayerCost(name, "maxpool", 9 * stages, n_out * per)


def avgpool_cost(*_, name="avgpool", **__) -> LayerCost:
    return _local(name, "avgpool")


_ACT_COST = {"relu": relu_cost, "relu6": relu6_cost, "leakyrelu": leaky_relu_cost}


def activation_cost(kind, n, params: CostParams = DEFAULT, name=None) -> LayerCost:
    if kind == "none":
        return _local(name or kind, kind)
    if kind not in _ACT_COST:
        raise AnalysisError(f"no cost formula for activation {kind!r}")
    return _ACT_COST[kind](n, params, name=name or kind)


def partial_activation_cost(n, channels, ratio, inner="relu", params: CostParams = DEFAULT,
                            name="partial_activation") -> LayerCost:
    """Cost of activating the first ``ceil(ratio * channels)`` of ``channels``."""
    if not 0 <= ratio <= 1 or channels < 1:
        raise ValueError("need 0 <= ratio <= 1 and channels >= 1")
    k = activated_channels(ratio, channels)
    if k == 0 or inner == "none":
        return LayerCost(name, "partial_activation", 0, 0.0)
    full = activation_cost(inner, n, params)
    return LayerCost(name, "partial_activation", full.rounds, full.bits * k / channels)


# -- networks -------------------------------------------------------------

_LOCAL = ("avgpool", "globalavgpool", "channel_split", "concat", "channel_shuffle",
          "residual_add", "flatten")
_DW_NOTE = "depthwise: per-channel conv formula (extrapolated)"


def layer_cost(lyr, in_shape, out_shape, params: CostParams = DEFAULT) -> LayerCost:
    k, p = lyr.kind, lyr.params
    n = math.prod(in_shape)
    if k == "conv2d":
        c = conv_cost(out_shape[0], int(p["kernel"]), in_shape[-1], int(p["out_channels"]),
                      params)
        return LayerCost(lyr.name, k, c.rounds, c.bits)
    if k == "dwconv2d":
        per = conv_cost(out_shape[0], int(p["kernel"]), 1, 1, params)
        return LayerCost(lyr.name, k, per.rounds, per.bits * in_shape[-1], note=_DW_NOTE)
    if k == "fullyconnected":
        return fc_cost(n, int(p["out_features"]), params, name=lyr.name)
    if k in _ACT_COST:
        return activation_cost(k, n, params, name=lyr.name)
    if k == "partial_activation":
        return partial_activation_cost(n, in_shape[-1], float(p["ratio"]),
                                       p.get("inner", "relu"), params, name=lyr.name)
    if k == "maxpool":
        return maxpool_cost(math.prod(out_shape), int(p.get("kernel", 2)), params, name=lyr.name)
    if k in _LOCAL:
        return _local(lyr.name, k)
    if k == "batchnorm":
        raise AnalysisError(f"layer {lyr.name!r}: fold batchnorm into its conv before analysis")
    raise AnalysisError(f"layer {lyr.name!r}: no cost formula for kind {k!r}")


@dataclass
class CostReport:
    name: str
    layers: list = field(default_factory=list)
    params: CostParams = DEFAULT
    measured: dict | None = None

    @property
    def rounds(self) -> int:
        return sum(c.rounds for c in self.layers)

    @property
    def bits(self) -> float:
        return sum(c.bits for c in self.layers)

    @property
    def bytes(self) -> float:
        return self.bits / 8

    @property
    def mb(self) -> float:
        return self.bytes / self.params.mb_unit

    def by_kind(self) -> dict:
        out = {}
        for c in self.layers:
            r, b = out.get(c.kind, (0, 0.0))
            out[c.kind] = (r + c.rounds, b + c.bits)
        return out

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "params": {"l": self.params.l, "p": self.params.p, "log_p": self.params.log_p,
                       "mb_unit": self.params.mb_unit},
            "layers": [{"name": c.name, "kind": c.kind, "rounds": c.rounds, "bits": c.bits,
                        "bytes": c.bytes, "mb": c.mb(self.params), "phase": c.phase,
                        **({"note": c.note} if c.note else {})} for c in self.layers],
            "total": {"rounds": self.rounds, "bits": self.bits, "bytes": self.bytes,
                      "mb": self.mb},
        }
        if self.measured is not None:
            doc["measured"] = dict(self.measured)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, only_costly=False) -> str:
        rows = [c for c in self.layers if c.phase != "local" or not only_costly]
        width = max([len("layer")] + [len(c.name) for c in rows])
        kw = max([len("kind")] + [len(c.kind) for c in rows])
        head = f"{'layer':<{width}}  {'kind':<{kw}}  {'rounds':>6}  {'MB':>12}"
        lines = [f"# {self.name}  (l={self.params.l}, p={self.params.p})", head,
                 "-" * len(head)]
        for c in rows:
            lines.append(f"{c.name:<{width}}  {c.kind:<{kw}}  {c.rounds:>6}  "
                         f"{c.mb(self.params):>12.6f}" + (f"  [{c.note}]" if c.note else ""))
        lines.append("-" * len(head))
        lines.append(f"total: {self.rounds} rounds, {self.mb:.4f} MB "
                     f"({self.bits:.1f} bits)")
        if self.measured is not None:
            m = self.measured
            lines.append(f"measured: {m['rounds']} rounds, {m['bytes']} bytes "
                         f"(online {m.get('online_rounds', '-')} rounds, "
                         f"{m.get('online_bytes', '-')} bytes)")
        return "\n".join(lines)


def network_cost(graph: NetworkGraph, params: CostParams = DEFAULT) -> CostReport:
    shapes = graph.shapes()
    report = CostReport(graph.name, params=params)
    for lyr in graph.layers:
        c = layer_cost(lyr, shapes[lyr.inputs[0]], shapes[lyr.name], params)
        report.layers.append(c)
    return report


def reduction(before: CostReport, after: CostReport) -> tuple[float, float]:
    """Fractional (communication, rounds) saved going from ``before`` to ``after``."""
    return 1 - after.bits / before.bits, 1 - after.rounds / before.rounds
