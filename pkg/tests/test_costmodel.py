import json
import math

import pytest

from shadownet.costmodel import (CostParams, avgpool_cost, conv_cost, drelu_cost, fc_cost,
                                 leaky_relu_cost, maxpool_cost, network_cost,
                                 partial_activation_cost, reduction, relu6_cost, relu_cost,
                                 scalar_matmul_cost)
from shadownet.errors import AnalysisError
from shadownet.netgraph.blocks import toy_network
from shadownet.netgraph.graph import graph_from_dict
from shadownet.netgraph.rewrite import relu6_to_relu

P = CostParams()
LOG67 = math.log2(67)


class TestFormulas:
    def test_conv_toy(self):
        c = conv_cost(32, 3, 3, 16)
        assert c.rounds == 2
        assert c.bits == (2 * 1024 * 9 * 3 + 2 * 9 * 16 * 3 + 1024 * 16) * 64
        assert c.mb() == pytest.approx(0.580352, abs=1e-12)

    def test_conv_scalar(self):
        c = conv_cost(1, 1, 1, 1)
        assert (c.rounds, c.bits) == (2, 320)

    def test_conv_monotone_in_outputs(self):
        assert conv_cost(8, 3, 4, 16).bits > conv_cost(8, 3, 4, 8).bits

    def test_relu(self):
        c = relu_cost(16384)
        assert c.rounds == 10
        assert c.bits == pytest.approx(16384 * (8 * 64 * LOG67 + 24 * 64))
        assert c.mb() == pytest.approx(9.5, abs=0.05)
        assert relu_cost(0).rounds == 0 and relu_cost(0).bits == 0

    def test_drelu(self):
        c = drelu_cost(1)
        assert c.rounds == 8
        assert c.bits == 8 * 64 * LOG67 + 19 * 64      # 4321.84
        assert c.bits == pytest.approx(4321.9, abs=0.1)
        assert (drelu_cost(0).rounds, drelu_cost(0).bits) == (0, 0)

    @pytest.mark.parametrize("n", [1, 100, 16384, 123457])
    def test_identities(self, n):
        r = relu_cost(n)
        r6 = relu6_cost(n)
        assert (r6.rounds, r6.bits) == (2 * r.rounds, 2 * r.bits)
        lk = leaky_relu_cost(n)
        assert (lk.rounds, lk.bits) == (r.rounds, r.bits)
        d, m = drelu_cost(n), scalar_matmul_cost(n)
        assert d.rounds + m.rounds == r.rounds
        assert d.bits + m.bits == r.bits

    def test_identities_other_params(self):
        p = CostParams(l=32, p=131)
        r = relu_cost(77, p)
        assert relu6_cost(77, p).bits == 2 * r.bits
        assert drelu_cost(77, p).bits + scalar_matmul_cost(77, p).bits == r.bits

    def test_relu6_figure(self):
        assert relu6_cost(16384).mb() == pytest.approx(19.0, abs=0.1)

    def test_maxpool(self):
        c = maxpool_cost(768, 2)
        assert c.rounds == 27
        assert c.mb() == pytest.approx(1.43, abs=0.01)
        assert (maxpool_cost(10, 1).rounds, maxpool_cost(10, 1).bits) == (0, 0)
        assert maxpool_cost(10, 3).rounds == 72
        # rounds do not scale with element count
        assert maxpool_cost(1, 2).rounds == maxpool_cost(10 ** 6, 2).rounds

    def test_avgpool(self):
        c = avgpool_cost(32, 2)
        assert (c.rounds, c.bits, c.phase) == (0, 0, "local")

    def test_partial_activation(self):
        half = partial_activation_cost(16384, 16, 0.5)
        assert half.rounds == 10
        assert half.mb() == pytest.approx(relu_cost(16384).mb() / 2)
        zero = partial_activation_cost(16384, 16, 0)
        assert (zero.rounds, zero.bits) == (0, 0)
        full = partial_activation_cost(16384, 16, 1)
        assert (full.rounds, full.bits) == (relu_cost(16384).rounds, relu_cost(16384).bits)

    def test_partial_activation_monotone(self):
        bits = [partial_activation_cost(1000, 10, r / 20).bits for r in range(21)]
        assert bits == sorted(bits)

    def test_partial_activation_ceil(self):
        c = partial_activation_cost(30, 3, 0.5)     # k = 2 of 3 channels
        assert c.bits == pytest.approx(relu_cost(30).bits * 2 / 3)

    def test_fc_is_conv_on_one_pixel(self):
        assert fc_cost(100, 10).bits == conv_cost(1, 1, 100, 10).bits

    def test_log_p_is_not_ceiled(self):
        assert P.log_p == pytest.approx(6.0660, abs=1e-4)


def _graph(layers, shape=(32, 32, 3)):
    return graph_from_dict({"name": "g", "input_shape": list(shape), "layers": layers})


class TestNetwork:
    def test_toy(self):
        r = network_cost(toy_network())
        assert r.rounds == 12
        assert r.mb == pytest.approx(10.08, abs=0.01)
        assert r.bits == sum(c.bits for c in r.layers)

    def test_empty(self):
        r = network_cost(_graph([]))
        assert (r.rounds, r.bits) == (0, 0)

    def test_only_avgpool(self):
        r = network_cost(_graph([{"name": "a", "kind": "avgpool"},
                                 {"name": "b", "kind": "avgpool"}]))
        assert (r.rounds, r.bits) == (0, 0)

    def test_relu6_rewrite_halves(self):
        g = _graph([{"name": "c", "kind": "conv2d", "params": {"out_channels": 4, "kernel": 3}},
                    {"name": "a", "kind": "relu6"}])
        before = network_cost(g).layers[1]
        after = network_cost(relu6_to_relu(g)).layers[1]
        assert after.bits == before.bits / 2

    def test_strided_conv_uses_output_size(self):
        g = _graph([{"name": "c", "kind": "conv2d",
                     "params": {"out_channels": 8, "kernel": 3, "stride": 2}}])
        assert network_cost(g).layers[0].bits == conv_cost(16, 3, 3, 8).bits

    def test_depthwise_per_channel(self):
        g = _graph([{"name": "d", "kind": "dwconv2d", "params": {"kernel": 3}}], (8, 8, 5))
        row = network_cost(g).layers[0]
        assert row.bits == 5 * conv_cost(8, 3, 1, 1).bits
        assert "extrapolated" in row.note

    def test_batchnorm_unpriced(self):
        g = _graph([{"name": "c", "kind": "conv2d", "params": {"out_channels": 4, "kernel": 1}},
                    {"name": "bn", "kind": "batchnorm"}])
        with pytest.raises(AnalysisError, match="bn"):
            network_cost(g)

    def test_local_layers_free(self):
        g = _graph([{"name": "s", "kind": "channel_split"},
                    {"name": "x", "kind": "channel_shuffle", "inputs": ["s:0"]},
                    {"name": "cat", "kind": "concat", "inputs": ["x", "s:1"]},
                    {"name": "add", "kind": "residual_add", "inputs": ["cat", "input"]},
                    {"name": "gap", "kind": "globalavgpool"},
                    {"name": "fl", "kind": "flatten"}], (4, 4, 4))
        r = network_cost(g)
        assert (r.rounds, r.bits) == (0, 0)
        assert all(c.phase == "local" for c in r.layers)

    def test_renderings_agree(self):
        r = network_cost(toy_network())
        doc = json.loads(r.to_json())
        assert doc["total"]["rounds"] == r.rounds
        assert doc["total"]["bits"] == r.bits
        assert sum(row["bits"] for row in doc["layers"]) == doc["total"]["bits"]
        text = r.to_text()
        assert "total: 12 rounds, 10.0868 MB" in text

    def test_reduction(self):
        a = network_cost(toy_network())
        assert reduction(a, a) == (0, 0)
