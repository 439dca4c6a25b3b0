import numpy as np
import pytest

from shadownet.engine import run_secure
from shadownet.errors import WeightsFormatError
from shadownet.netgraph import (BlockTemplate, eval_plaintext, gen_weights, graph_from_dict,
                                make_block, ulp_budget)
from shadownet.netgraph.blocks import toy_network
from shadownet.ring import DEFAULT
from shadownet.transport import P2


def _g(layers, shape):
    return graph_from_dict({"name": "net", "input_shape": list(shape), "layers": layers})


def _deviation(g, seed=1, wseed=3):
    w = gen_weights(g, wseed)
    x = np.random.default_rng(seed).uniform(-1, 1, g.input_shape)
    r = run_secure(g, w, x, seed=seed)
    ref = eval_plaintext(g, w, x, "fixed", raw=True)
    return int(np.abs(DEFAULT.signed(r.raw).astype(np.int64) - ref).max()), ulp_budget(g, w), r


KITCHEN_SINK = [
    {"name": "c1", "kind": "conv2d", "params": {"out_channels": 8, "kernel": 3}},
    {"name": "a1", "kind": "relu6"},
    {"name": "dw", "kind": "dwconv2d", "params": {"kernel": 3, "stride": 2}},
    {"name": "a2", "kind": "leakyrelu"},
    {"name": "mp", "kind": "maxpool", "params": {"kernel": 2}},
    {"name": "sh", "kind": "channel_shuffle", "params": {"groups": 2}},
    {"name": "pa", "kind": "partial_activation", "params": {"ratio": 0.5, "inner": "relu"}},
    {"name": "ap", "kind": "avgpool", "params": {"kernel": 2}},
    {"name": "gap", "kind": "globalavgpool"},
    {"name": "fl", "kind": "flatten"},
    {"name": "fc", "kind": "fullyconnected", "params": {"out_features": 5}},
]


class TestSecureVsOracle:
    def test_toy(self):
        dev, budget, r = _deviation(toy_network())
        assert dev <= budget
        assert r.output.shape == (32, 32, 16)

    def test_every_layer_kind(self):
        dev, budget, _ = _deviation(_g(KITCHEN_SINK, (8, 8, 3)))
        assert dev <= budget

    @pytest.mark.parametrize("template", [
        BlockTemplate("fire", in_channels=8, out_channels=16, size=8),
        BlockTemplate("fire", "crypto", 8, 16, size=8),
        BlockTemplate("shuffle_unit", in_channels=8, out_channels=8, size=8),
        BlockTemplate("shuffle_unit", "crypto", 8, 16, stride=2, size=8),
        BlockTemplate("inverted_residual", in_channels=8, out_channels=8, size=8),
        BlockTemplate("inverted_residual", "crypto", 8, 16, stride=2, size=8),
    ], ids=lambda t: f"{t.kind}-{t.variant}-s{t.stride}")
    def test_blocks(self, template):
        dev, budget, _ = _deviation(make_block(template))
        assert dev <= budget

    def test_close_to_float(self):
        g = make_block(BlockTemplate("inverted_residual", in_channels=8, out_channels=8, size=8))
        w = gen_weights(g, 3)
        x = np.random.default_rng(0).uniform(-1, 1, g.input_shape)
        out = run_secure(g, w, x, seed=2).output
        assert np.max(np.abs(out - eval_plaintext(g, w, x))) < 0.05


class TestRun:
    def test_deterministic(self):
        g = toy_network()
        w = gen_weights(g, 0)
        x = np.zeros(g.input_shape)
        a, b = run_secure(g, w, x, seed=4), run_secure(g, w, x, seed=4)
        assert a.transcript.to_jsonl() == b.transcript.to_jsonl()
        assert np.array_equal(a.raw, b.raw)

    def test_seed_changes_shares_not_output(self):
        g = toy_network()
        w = gen_weights(g, 0)
        x = np.random.default_rng(0).uniform(-1, 1, g.input_shape)
        a, b = run_secure(g, w, x, seed=4), run_secure(g, w, x, seed=5)
        assert a.transcript.measured_cost() == b.transcript.measured_cost()
        assert np.max(np.abs(DEFAULT.signed(a.raw).astype(np.int64)
                             - DEFAULT.signed(b.raw).astype(np.int64))) <= 2

    def test_layer_marks(self):
        g = toy_network()
        r = run_secure(g, gen_weights(g, 0), np.zeros(g.input_shape))
        assert r.layer_cost("conv")[0] == 2
        assert r.layer_cost("relu")[0] == 4

    def test_p2_learns_nothing_but_ideal_calls(self):
        g = toy_network()
        r = run_secure(g, gen_weights(g, 0), np.zeros(g.input_shape))
        to_p2 = {rec.tag for rec in r.transcript.records if rec.receiver == P2}
        assert to_p2 <= {"ideal-drelu"}

    def test_missing_weights(self):
        g = toy_network()
        with pytest.raises(WeightsFormatError):
            run_secure(g, {}, np.zeros(g.input_shape))
