"""Network graphs, weights, the plaintext oracle, blocks and rewrite passes."""

from .blocks import (BlockTemplate, crypto_passes, load_shipped, make_block, mobilenetv2,
                     shipped_graphs, shufflenetv2, squeezenet, toy_network)
from .graph import (INPUT, KINDS, LayerSpec, NetworkGraph, graph_from_dict, load_graph,
                    parse_graph, serialize_graph, validate)
from .oracle import eval_plaintext, multiplication_depth, ulp_budget
from .rewrite import apply_passes, count_kinds, parse_pass, rewrite
from .weights import (WeightStore, fold_batchnorm, gen_weights, load_input, load_weights,
                      save_input, save_weights)

__all__ = [
    "BlockTemplate", "crypto_passes", "load_shipped", "make_block", "mobilenetv2",
    "shipped_graphs", "shufflenetv2", "squeezenet", "toy_network", "INPUT", "KINDS",
    "LayerSpec", "NetworkGraph", "graph_from_dict", "load_graph", "parse_graph",
    "serialize_graph", "validate", "eval_plaintext", "multiplication_depth", "ulp_budget",
    "apply_passes", "count_kinds", "parse_pass", "rewrite", "WeightStore", "fold_batchnorm",
    "gen_weights", "load_input", "load_weights", "save_input", "save_weights",
]
