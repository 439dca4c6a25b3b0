"""Layer graph description: parsing, validation, shape inference, serialization.

A graph document is JSON::

    {"name": ..., "input_shape": [h, w, c], "metadata": {...},
     "layers": [{"name": ..., "kind": ..., "params": {...}, "inputs": [...]}]}

``inputs`` entries name earlier layers, ``"input"`` for the graph input, or
``"<split>:<i>"`` for the i-th output of a ``channel_split``.  A missing
``inputs`` list means "the previous layer" (or the graph input for the
first layer).  Shapes are ``(h, w, c)`` for feature maps and ``(n,)`` after
``flatten``/``fullyconnected``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any

from ..errors import GraphError
from ..protocols import ACTIVATIONS, activated_channels, conv_output_size, resolve_padding

INPUT = "input"

ACTIVATION_KINDS = ("relu", "relu6", "leakyrelu")
PARAMETRIC_KINDS = ("conv2d", "dwconv2d", "fullyconnected", "batchnorm")
LOCAL_KINDS = ("avgpool", "globalavgpool", "channel_split", "concat", "channel_shuffle",
               "residual_add", "flatten")
KINDS = ("conv2d", "dwconv2d", "fullyconnected", *ACTIVATION_KINDS, "partial_activation",
         "maxpool", *LOCAL_KINDS, "batchnorm")

_ARITY = {"concat": (2, None), "residual_add": (2, 2)}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict, compare=True, hash=False)
    inputs: tuple = ()

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": dict(self.params),
                "inputs": list(self.inputs)}

    @property
    def is_activation(self) -> bool:
        return self.kind in ACTIVATION_KINDS or self.kind == "partial_activation"


@dataclass(frozen=True)
class NetworkGraph:
    name: str
    input_shape: tuple
    layers: tuple
    metadata: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def layer(self, name: str) -> LayerSpec:
        for lyr in self.layers:
            if lyr.name == name:
                return lyr
        raise KeyError(name)

    @property
    def output(self) -> str:
        """Name of the single layer nobody consumes (the input for an empty graph)."""
        sinks = _sinks(self.layers)
        return sinks[-1] if sinks else INPUT

    def shapes(self) -> dict:
        """Output shape of every layer (and split output); raises on invalid graphs."""
        shapes, problems = _infer(self)
        if problems:
            raise GraphError(f"graph {self.name!r} is invalid: " + "; ".join(problems), problems)
        return shapes

    def input_shapes(self, lyr: LayerSpec, shapes: dict | None = None) -> list:
        shapes = self.shapes() if shapes is None else shapes
        return [shapes[r] for r in lyr.inputs]

    def output_shape(self) -> tuple:
        return self.shapes()[self.output]

    def with_layers(self, layers, **meta) -> "NetworkGraph":
        md = dict(self.metadata)
        md.update(meta)
        return replace(self, layers=tuple(layers), metadata=md)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "metadata": dict(self.metadata),
                "layers": [lyr.to_dict() for lyr in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def serialize_graph(graph: NetworkGraph) -> str:
    return graph.to_json()


def parse_graph(text: str) -> NetworkGraph:
    """Parse and validate a graph document; every violation is reported at once."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GraphError(f"not valid JSON: {e}") from None
    return graph_from_dict(doc)


def load_graph(path) -> NetworkGraph:
    with open(path) as fh:
        return parse_graph(fh.read())


def graph_from_dict(doc: Any) -> NetworkGraph:
    problems = []
    if not isinstance(doc, dict):
        raise GraphError("graph document must be a JSON object")
    for key in ("input_shape", "layers"):
        if key not in doc:
            problems.append(f"missing field {key!r}")
    if problems:
        raise GraphError("; ".join(problems), problems)
    shape = doc["input_shape"]
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(d, int) and d > 0 for d in shape)):
        problems.append(f"input_shape must be a list of positive integers, got {shape!r}")
    layers = []
    prev = INPUT
    for i, raw in enumerate(doc["layers"]):
        if not isinstance(raw, dict) or "name" not in raw or "kind" not in raw:
            problems.append(f"layer #{i} needs 'name' and 'kind'")
            continue
        inputs = raw.get("inputs")
        if inputs is None:
            inputs = [prev]
        layers.append(LayerSpec(str(raw["name"]), str(raw["kind"]),
                                dict(raw.get("params") or {}), tuple(inputs)))
        prev = layers[-1].name
    if problems:
        raise GraphError("; ".join(problems), problems)
    g = NetworkGraph(str(doc.get("name", "graph")), tuple(shape), tuple(layers),
                     dict(doc.get("metadata") or {}))
    g = _toposort(g)
    g.shapes()
    return g


def validate(graph: NetworkGraph) -> list:
    """List of problems (empty when the graph is valid)."""
    return _infer(graph)[1]


def _base(ref: str) -> str:
    return ref.split(":", 1)[0]


def _toposort(g: NetworkGraph) -> NetworkGraph:
    names = [lyr.name for lyr in g.layers]
    by_name = {lyr.name: lyr for lyr in g.layers}
    problems = []
    seen = set()
    for n in names:
        if n in seen or n == INPUT:
            problems.append(f"duplicate or reserved layer name {n!r}")
        seen.add(n)
    for lyr in g.layers:
        for r in lyr.inputs:
            if _base(r) != INPUT and _base(r) not in by_name:
                problems.append(f"layer {lyr.name!r} reads unknown input {r!r}")
    if problems:
        raise GraphError("; ".join(problems), problems)

    order, state = [], {}

    def visit(n):
        state[n] = 1
        for r in by_name[n].inputs:
            b = _base(r)
            if b == INPUT:
                continue
            if state.get(b) == 1:
                raise GraphError(f"cycle: back edge {n} -> {b}", [f"cycle: back edge {n} -> {b}"])
            if b not in state:
                visit(b)
        state[n] = 2
        order.append(by_name[n])

    for n in names:
        if n not in state:
            visit(n)
    if [lyr.name for lyr in order] == names:
        return g
    return replace(g, layers=tuple(order))


def _p(lyr, key, default=None, required=False):
    if key in lyr.params:
        return lyr.params[key]
    if required:
        raise GraphError(f"layer {lyr.name!r} ({lyr.kind}) is missing param {key!r}")
    return default


def split_sizes(fractions, channels: int) -> list:
    sizes = []
    for fr in fractions:
        n = fr * channels
        if abs(n - round(n)) > 1e-9 or round(n) <= 0:
            raise GraphError(f"split fraction {fr} of {channels} channels is not a positive integer")
        sizes.append(int(round(n)))
    if sum(sizes) != channels:
        raise GraphError(f"split fractions {fractions} do not cover {channels} channels")
    return sizes


def _layer_shape(lyr: LayerSpec, ins: list):
    k = lyr.kind

    def fmap(i=0):
        s = ins[i]
        if len(s) != 3:
            raise GraphError(f"layer {lyr.name!r} ({k}) needs an (h, w, c) input, got {s}")
        return s

    if k in ("conv2d", "dwconv2d"):
        h, w, c = fmap()
        f = int(_p(lyr, "kernel", required=True))
        stride = int(_p(lyr, "stride", 1))
        pad = resolve_padding(_p(lyr, "padding", "same"), f)
        if _p(lyr, "in_channels") not in (None, c):
            raise GraphError(f"layer {lyr.name!r} declares in_channels="
                             f"{lyr.params['in_channels']} but receives {c}")
        o = int(_p(lyr, "out_channels", required=True)) if k == "conv2d" else c
        try:
            return (conv_output_size(h, f, stride, pad), conv_output_size(w, f, stride, pad), o)
        except ValueError as e:
            raise GraphError(f"layer {lyr.name!r}: {e}") from None
    if k == "fullyconnected":
        s = ins[0]
        if len(s) != 1:
            raise GraphError(f"layer {lyr.name!r} needs a flat input, got {s}; add a flatten layer")
        return (int(_p(lyr, "out_features", required=True)),)
    if k in ACTIVATION_KINDS or k == "batchnorm":
        return ins[0]
    if k == "partial_activation":
        ratio = float(_p(lyr, "ratio", required=True))
        inner = _p(lyr, "inner", "relu")
        if inner not in ACTIVATIONS:
            raise GraphError(f"layer {lyr.name!r}: unknown inner activation {inner!r}")
        try:
            activated_channels(ratio, ins[0][-1])
        except ValueError as e:
            raise GraphError(f"layer {lyr.name!r}: {e}") from None
        return ins[0]
    if k in ("maxpool", "avgpool"):
        h, w, c = fmap()
        f = int(_p(lyr, "kernel", 2))
        stride = int(_p(lyr, "stride", f))
        try:
            return (conv_output_size(h, f, stride, 0, exact=True),
                    conv_output_size(w, f, stride, 0, exact=True), c)
        except ValueError as e:
            raise GraphError(f"layer {lyr.name!r}: {e}") from None
    if k == "globalavgpool":
        return (1, 1, fmap()[2])
    if k == "channel_split":
        h, w, c = fmap()
        sizes = split_sizes(_p(lyr, "fractions", [0.5, 0.5]), c)
        return [(h, w, n) for n in sizes]
    if k == "concat":
        first = fmap()
        for i, s in enumerate(ins):
            if len(s) != 3 or s[:2] != first[:2]:
                raise GraphError(f"layer {lyr.name!r}: concat inputs disagree spatially "
                                 f"({first} vs {s})")
        return (first[0], first[1], sum(s[2] for s in ins))
    if k == "channel_shuffle":
        s = ins[0]
        g = int(_p(lyr, "groups", 2))
        if s[-1] % g:
            raise GraphError(f"layer {lyr.name!r}: {s[-1]} channels not divisible by {g} groups")
        return s
    if k == "residual_add":
        if ins[0] != ins[1]:
            raise GraphError(f"layer {lyr.name!r}: residual operands differ ({ins[0]} vs {ins[1]})")
        return ins[0]
    if k == "flatten":
        n = 1
        for d in ins[0]:
            n *= d
        return (n,)
    raise GraphError(f"layer {lyr.name!r} has unknown kind {k!r}")


def _infer(g: NetworkGraph):
    shapes = {INPUT: tuple(g.input_shape)}
    problems = []
    for lyr in g.layers:
        if lyr.kind not in KINDS:
            problems.append(f"layer {lyr.name!r} has unknown kind {lyr.kind!r}")
            continue
        lo, hi = _ARITY.get(lyr.kind, (1, 1))
        if len(lyr.inputs) < lo or (hi is not None and len(lyr.inputs) > hi):
            problems.append(f"layer {lyr.name!r} ({lyr.kind}) takes "
                            f"{lo if lo == hi else f'at least {lo}'} input(s), got {len(lyr.inputs)}")
            continue
        missing = [r for r in lyr.inputs if r not in shapes]
        if missing:
            problems.append(f"layer {lyr.name!r} reads unavailable input(s) {missing}")
            continue
        try:
            out = _layer_shape(lyr, [shapes[r] for r in lyr.inputs])
        except GraphError as e:
            problems.append(str(e))
            continue
        if lyr.kind == "channel_split":
            for i, s in enumerate(out):
                shapes[f"{lyr.name}:{i}"] = s
            shapes[lyr.name] = out[0]
        else:
            shapes[lyr.name] = tuple(out)
    if not problems and g.layers:
        sinks = _sinks(g.layers)
        if len(sinks) != 1:
            problems.append(f"graph must have a single output layer, found {sinks}")
    return shapes, problems


def _sinks(layers) -> list:
    consumed = {_base(r) for lyr in layers for r in lyr.inputs}
    return [lyr.name for lyr in layers if lyr.name not in consumed]
