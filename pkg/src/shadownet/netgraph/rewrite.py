"""Graph rewrite passes that trade non-linearities for secure-evaluation cost.

Passes return new graphs; the input graph is never modified.  Activation
layers built by :mod:`shadownet.netgraph.blocks` carry ``block`` and
``slot`` params (slot 1 or 2 = first or second activation of the block),
which the ``first``/``second`` selectors use.  Any other selector string
is a glob pattern on layer names; ``all`` matches every activation.
"""

from __future__ import annotations

import fnmatch

from ..errors import SelectorMissError
from .graph import ACTIVATION_KINDS, LayerSpec, NetworkGraph

PASSES = ("pa_replace", "remove_activation", "relu6_to_relu", "maxpool_to_avgpool")


def _selected(lyr: LayerSpec, selector: str) -> bool:
    if not lyr.is_activation:
        return False
    if selector == "all":
        return True
    if selector in ("first", "second"):
        return lyr.params.get("slot") == (1 if selector == "first" else 2)
    return fnmatch.fnmatchcase(lyr.name, selector)


def _matches(graph: NetworkGraph, selector: str) -> list:
    hits = [lyr.name for lyr in graph.layers if _selected(lyr, selector)]
    if not hits:
        raise SelectorMissError(f"selector {selector!r} matched no activation layer "
                                f"in graph {graph.name!r}")
    return hits


def _inner(lyr: LayerSpec) -> str:
    return lyr.params.get("inner", "relu") if lyr.kind == "partial_activation" else lyr.kind


def _tags(lyr: LayerSpec) -> dict:
    return {k: lyr.params[k] for k in ("block", "slot") if k in lyr.params}


def remove_activation(graph: NetworkGraph, selector: str = "all") -> NetworkGraph:
    hits = set(_matches(graph, selector))
    alias = {}
    layers = []
    for lyr in graph.layers:
        inputs = tuple(alias.get(r, r) for r in lyr.inputs)
        if lyr.name in hits:
            alias[lyr.name] = inputs[0]
            continue
        layers.append(LayerSpec(lyr.name, lyr.kind, lyr.params, inputs))
    return graph.with_layers(layers)


def pa_replace(graph: NetworkGraph, selector: str, ratio: float) -> NetworkGraph:
    """Turn the selected activations into partial activations of the same kind.

    A ratio of 0 removes them outright.
    """
    if ratio == 0:
        return remove_activation(graph, selector)
    hits = set(_matches(graph, selector))
    layers = []
    for lyr in graph.layers:
        if lyr.name in hits:
            lyr = LayerSpec(lyr.name, "partial_activation",
                            {"ratio": float(ratio), "inner": _inner(lyr), **_tags(lyr)},
                            lyr.inputs)
        layers.append(lyr)
    return graph.with_layers(layers)


def relu6_to_relu(graph: NetworkGraph, selector: str = "all") -> NetworkGraph:
    hits = [lyr.name for lyr in graph.layers
            if _selected(lyr, selector) and _inner(lyr) == "relu6"]
    if not hits:
        raise SelectorMissError(f"no relu6 activation matched {selector!r} in {graph.name!r}")
    layers = []
    for lyr in graph.layers:
        if lyr.name in hits:
            if lyr.kind == "relu6":
                lyr = LayerSpec(lyr.name, "relu", lyr.params, lyr.inputs)
            else:
                lyr = LayerSpec(lyr.name, lyr.kind, {**lyr.params, "inner": "relu"}, lyr.inputs)
        layers.append(lyr)
    return graph.with_layers(layers)


def maxpool_to_avgpool(graph: NetworkGraph, selector: str = "*") -> NetworkGraph:
    hits = [lyr.name for lyr in graph.layers
            if lyr.kind == "maxpool" and fnmatch.fnmatchcase(lyr.name, selector)]
    if not hits:
        raise SelectorMissError(f"no max pooling layer matched {selector!r} in {graph.name!r}")
    return graph.with_layers(
        LayerSpec(lyr.name, "avgpool", lyr.params, lyr.inputs) if lyr.name in hits else lyr
        for lyr in graph.layers)


def rewrite(graph: NetworkGraph, pass_name: str, selector: str | None = None,
            ratio: float | None = None) -> NetworkGraph:
    """Apply one pass by name."""
    if pass_name == "pa_replace":
        if ratio is None:
            raise ValueError("pa_replace needs a ratio")
        return pa_replace(graph, selector or "all", ratio)
    if pass_name == "remove_activation":
        return remove_activation(graph, selector or "all")
    if pass_name == "relu6_to_relu":
        return relu6_to_relu(graph, selector or "all")
    if pass_name == "maxpool_to_avgpool":
        return maxpool_to_avgpool(graph, selector or "*")
    raise ValueError(f"unknown rewrite pass {pass_name!r}; choose from {PASSES}")


def parse_pass(text: str):
    """``name[:selector[:ratio]]`` -> ``(name, selector, ratio)``.

    Examples: ``relu6_to_relu``, ``remove_activation:first``,
    ``pa_replace:second:0.5``.
    """
    parts = text.split(":")
    name = parts[0]
    if name not in PASSES:
        raise ValueError(f"unknown rewrite pass {name!r}; choose from {PASSES}")
    selector = parts[1] if len(parts) > 1 and parts[1] else None
    ratio = float(parts[2]) if len(parts) > 2 else None
    if name == "pa_replace" and ratio is None:
        raise ValueError("pa_replace needs a ratio, e.g. pa_replace:second:0.5")
    return name, selector, ratio


def apply_passes(graph: NetworkGraph, passes) -> NetworkGraph:
    for p in passes:
        name, selector, ratio = parse_pass(p) if isinstance(p, str) else p
        graph = rewrite(graph, name, selector, ratio)
    return graph


def count_kinds(graph: NetworkGraph) -> dict:
    out: dict = {}
    for lyr in graph.layers:
        key = lyr.kind
        if lyr.kind == "partial_activation":
            key = f"partial_activation({lyr.params['ratio']:g},{lyr.params.get('inner', 'relu')})"
        out[key] = out.get(key, 0) + 1
    return out


__all__ = ["rewrite", "pa_replace", "remove_activation", "relu6_to_relu", "maxpool_to_avgpool",
           "apply_passes", "parse_pass", "count_kinds", "PASSES", "ACTIVATION_KINDS"]
