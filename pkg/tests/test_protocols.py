"""Secure protocols against independent plaintext oracles."""

import numpy as np
import pytest

from conftest import L8, run_shared
from shadownet.errors import ShapeError
from shadownet.netgraph.graph import graph_from_dict
from shadownet.netgraph.oracle import eval_plaintext
from shadownet.protocols import (PartialActivationSpec, activated_channels, avgpool,
                                 channel_shuffle, deal_triples, global_avgpool, leaky_constants,
                                 pi_conv2d, pi_drelu, pi_dwconv2d, pi_leaky_relu, pi_matmul,
                                 pi_maxpool, pi_mul, pi_partial_activation, pi_relu, pi_relu6)
from shadownet.ring import DEFAULT, RingParams
from shadownet.transport import P2, Session

ALL8 = np.arange(256, dtype=np.uint64)
F64_0 = RingParams(l=64, f_scale=0)


def signed8(v):
    """Brute-force two's complement for l=8, via Python ints."""
    return np.array([int(x) - 256 if int(x) >= 128 else int(x) for x in np.ravel(v)]).reshape(np.shape(v))


def enc(x, params=DEFAULT):
    return params.encode(np.asarray(x, dtype=np.float64))


def sgn(v, params=DEFAULT):
    return params.signed(v).astype(np.int64)


# -- multiplication -------------------------------------------------------

class TestTriples:
    def _triples(self, params, a_shape, b_shape, seed=0, op="matmul"):
        with Session("inproc", seed, params) as s:
            out = s.run(lambda ctx: deal_triples(ctx, a_shape, b_shape, op))
            tr = s.transcript
        (u0, v0, w0), (u1, v1, w1) = out[0], out[1]
        return params.add(u0, u1), params.add(v0, v1), params.add(w0, w1), tr

    def test_scalar_triple(self):
        u, v, w, tr = self._triples(DEFAULT, (1, 1), (1, 1))
        assert np.array_equal(w, DEFAULT.matmul(u, v))
        assert tr.rounds == 1 and {r.tag for r in tr.records} == {"offline"}
        assert {(r.sender, r.receiver) for r in tr.records} == {(2, 0), (2, 1)}

    def test_shape_contract(self):
        _, _, w, _ = self._triples(DEFAULT, (4, 4), (4, 4))
        assert w.shape == (4, 4)

    def test_l8_brute_force(self):
        u, v, w, _ = self._triples(L8, (100,), (100,), op="mul")
        for a, b, c in zip(u, v, w):
            assert (int(a) * int(b)) % 256 == int(c)


class TestMatmul:
    def test_scalar(self):
        out, s = run_shared(pi_matmul, np.array([[3]]), np.array([[4]]), params=F64_0)
        assert out[0, 0] == 12
        assert s.transcript.rounds == 2

    def test_identity(self):
        b = enc([[1.5, -2.0], [0.25, 7.0]])
        out, _ = run_shared(pi_matmul, enc(np.eye(2)), b, extra=(True,))
        assert np.array_equal(out, b)

    def test_random_fixed_point(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(-4, 4, (4, 4)), rng.uniform(-4, 4, (4, 4))
        out, s = run_shared(pi_matmul, enc(a), enc(b), extra=(True,))
        exact = (sgn(enc(a)) @ sgn(enc(b))) >> 13
        assert np.abs(sgn(out) - exact).max() <= 1
        assert s.transcript.rounds == 2

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            run_shared(pi_matmul, np.zeros((2, 3)), np.zeros((2, 3)))

    def test_randomized_l64(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(-16, 16, 10_000), rng.uniform(-16, 16, 10_000)
        out, _ = run_shared(pi_mul, enc(a), enc(b), extra=(True,))
        exact = (sgn(enc(a)) * sgn(enc(b))) >> 13
        assert np.abs(sgn(out) - exact).max() <= 1


def _conv_graph(shape, f, o, stride=1, kind="conv2d"):
    params = {"kernel": f, "stride": stride, "padding": "same", "bias": False}
    if kind == "conv2d":
        params["out_channels"] = o
    return graph_from_dict({"name": "c", "input_shape": list(shape),
                            "layers": [{"name": "c", "kind": kind, "params": params}]})


class TestConv:
    def test_degenerate_matches_matmul(self):
        x, k = enc([[[1.25]]]), enc([[[[-2.0]]]])
        out, s = run_shared(pi_conv2d, x, k)
        ref, _ = run_shared(pi_matmul, x.reshape(1, 1), k.reshape(1, 1), extra=(True,))
        assert np.array_equal(out.reshape(1, 1), ref)
        assert s.transcript.rounds == 2

    def test_zero_kernel(self):
        x = enc(np.random.default_rng(0).uniform(-1, 1, (5, 5, 2)))
        out, _ = run_shared(pi_conv2d, x, np.zeros((3, 3, 2, 3), np.uint64), extra=(1, "same"))
        assert not out.any()

    @pytest.mark.parametrize("stride", [1, 2])
    def test_random_against_direct_loop(self, stride):
        rng = np.random.default_rng(3)
        x, k = rng.uniform(-1, 1, (8, 8, 3)), rng.uniform(-0.5, 0.5, (3, 3, 3, 4))
        out, s = run_shared(pi_conv2d, enc(x), enc(k), extra=(stride, "same"))
        ref = eval_plaintext(_conv_graph((8, 8, 3), 3, 4, stride), {"c": {"kernel": k}}, x,
                             "fixed", raw=True)
        assert out.shape == ref.shape
        assert np.abs(sgn(out) - ref).max() <= 1
        assert s.transcript.rounds == 2

    def test_depthwise(self):
        rng = np.random.default_rng(4)
        x, k = rng.uniform(-1, 1, (6, 6, 5)), rng.uniform(-0.5, 0.5, (3, 3, 5))
        out, s = run_shared(pi_dwconv2d, enc(x), enc(k), extra=(1, "same"))
        ref = eval_plaintext(_conv_graph((6, 6, 5), 3, None, kind="dwconv2d"),
                             {"c": {"kernel": k}}, x, "fixed", raw=True)
        assert np.abs(sgn(out) - ref).max() <= 1
        assert s.transcript.rounds == 2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            run_shared(pi_conv2d, np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))


# -- non-linearities ------------------------------------------------------

class TestDrelu:
    def test_examples(self):
        out, _ = run_shared(pi_drelu, enc([-2.0, 0.0, 1e-3, -1e-3]))
        assert out.tolist() == [0, 1, 1, 0]

    def test_exhaustive_l8(self):
        out, _ = run_shared(pi_drelu, ALL8, params=L8)
        assert np.array_equal(out, (signed8(ALL8) >= 0).astype(np.uint64))

    def test_only_ideal_tag_reaches_p2(self):
        _, s = run_shared(pi_relu6, enc(np.linspace(-8, 8, 9)))
        to_p2 = [r for r in s.transcript.records if r.receiver == P2]
        assert to_p2 and all(r.tag == "ideal-drelu" for r in to_p2)


class TestRelu:
    def test_examples(self):
        out, _ = run_shared(pi_relu, enc([-1.5, 2.25]))
        assert np.array_equal(out, enc([0.0, 2.25]))

    def test_exhaustive_l8(self):
        out, _ = run_shared(pi_relu, ALL8, params=L8)
        assert np.array_equal(signed8(out), np.maximum(signed8(ALL8), 0))

    def test_randomized_l64(self):
        x = enc(np.random.default_rng(5).uniform(-1000, 1000, 10_000))
        out, _ = run_shared(pi_relu, x)
        assert np.array_equal(sgn(out), np.maximum(sgn(x), 0))


def _relu6_ref(v, six):
    return np.minimum(np.maximum(v, 0), six)


class TestRelu6:
    def test_examples(self):
        out, _ = run_shared(pi_relu6, enc([-1.0, 3.5, 7.0]))
        assert np.array_equal(out, enc([0.0, 3.5, 6.0]))

    def test_exhaustive_l8(self):
        out, _ = run_shared(pi_relu6, ALL8, params=L8)
        assert np.array_equal(signed8(out), _relu6_ref(signed8(ALL8), 6))

    def test_randomized_l64(self):
        x = enc(np.random.default_rng(6).uniform(-20, 20, 10_000))
        out, _ = run_shared(pi_relu6, x)
        assert np.array_equal(sgn(out), _relu6_ref(sgn(x), 6 * 8192))

    def test_decomposition_identity(self):
        H = lambda v: (v >= 0).astype(np.int64)  # noqa: E731
        xs = np.arange(-20 * 8192, 20 * 8192 + 1, 7, dtype=np.int64)
        six = 6 * 8192
        assert np.array_equal(H(xs) * (xs + (six - xs) * H(xs - six)), _relu6_ref(xs, six))

    def test_output_freshness(self):
        x = enc(np.linspace(-8, 8, 33))
        shares = []
        for seed in (1, 2):
            with Session("inproc", seed) as s:
                from shadownet.ring import generator, share
                h0, h1 = share(x, generator(0, "fixed-input"))
                out = s.run(pi_relu6, [(h0.payload,), (h1.payload,), (np.zeros_like(x),)])
            shares.append(out)
        assert np.array_equal(DEFAULT.add(*shares[0][:2]), DEFAULT.add(*shares[1][:2]))
        assert not np.array_equal(shares[0][0], shares[1][0])


class TestLeakyRelu:
    def test_constants(self):
        lo, hi = leaky_constants(DEFAULT)
        assert (lo, hi) == (819, 7373) and lo + hi == DEFAULT.one

    def _oracle(self, v):
        lo, hi = leaky_constants(DEFAULT)
        return (v * np.where(v >= 0, lo + hi, lo)) >> 13

    def test_positive_passes_through(self):
        out, _ = run_shared(pi_leaky_relu, enc([4.0]))
        assert abs(int(sgn(out)[0]) - int(sgn(enc([4.0]))[0])) <= 1

    def test_negative_branch(self):
        x = enc([-10.0])
        out, _ = run_shared(pi_leaky_relu, x)
        got = int(sgn(out)[0])
        assert abs(got - int(self._oracle(sgn(x))[0])) <= 1
        # encode(0.1) = 819 is 0.2 ULP below 0.1 * 2^13; the error grows with |x|
        assert abs(got / 8192 - (-1.0)) <= 10 * abs(819 / 8192 - 0.1) + 1 / 8192

    def test_grid_against_oracle(self):
        x = enc(np.linspace(-8, 8, 1000))
        out, _ = run_shared(pi_leaky_relu, x)
        assert np.abs(sgn(out) - self._oracle(sgn(x))).max() <= 1

    def test_randomized_l64(self):
        x = enc(np.random.default_rng(7).uniform(-500, 500, 10_000))
        out, _ = run_shared(pi_leaky_relu, x)
        assert np.abs(sgn(out) - self._oracle(sgn(x))).max() <= 1


class TestPartialActivation:
    def test_ratio_zero_is_identity(self):
        x = enc(np.random.default_rng(0).uniform(-2, 2, (3, 3, 4)))
        with Session("inproc", 1) as s:
            out = s.run(pi_partial_activation, [(x, PartialActivationSpec(0.0))] * 3)
            assert len(s.transcript.records) == 0
        assert out[0] is x

    def test_ratio_one_equals_relu(self):
        x = enc(np.random.default_rng(1).uniform(-2, 2, (4, 4, 3)))
        a, _ = run_shared(pi_partial_activation, x, extra=(PartialActivationSpec(1.0),), seed=9)
        b, _ = run_shared(pi_relu, x, seed=9)
        assert np.array_equal(a, b)

    def test_half_of_two_channels(self):
        x = enc([[-1.0, -1.0]])
        out, _ = run_shared(pi_partial_activation, x, extra=(PartialActivationSpec(0.5),))
        assert np.array_equal(out, enc([[0.0, -1.0]]))

    def test_channel_count(self):
        assert [activated_channels(r, 10) for r in (0, 0.25, 0.5, 1)] == [0, 3, 5, 10]
        assert activated_channels(0.1, 30) == 3

    @pytest.mark.parametrize("ratio", [0, 0.25, 0.5, 1])
    @pytest.mark.parametrize("inner", ["relu", "relu6"])
    def test_exhaustive_l8(self, ratio, inner):
        x = np.stack([np.roll(ALL8, 64 * c) for c in range(4)], axis=-1)
        out, _ = run_shared(pi_partial_activation, x, params=L8,
                            extra=(PartialActivationSpec(ratio, inner),))
        k = {0: 0, 0.25: 1, 0.5: 2, 1: 4}[ratio]
        sx = signed8(x)
        ref = sx.copy()
        ref[:, :k] = np.maximum(sx[:, :k], 0) if inner == "relu" else _relu6_ref(sx[:, :k], 6)
        assert np.array_equal(signed8(out), ref)


# -- pooling --------------------------------------------------------------

def _maxpool_ref(v, f=2):
    h, w, c = v.shape
    return v.reshape(h // f, f, w // f, f, c).max(axis=(1, 3))


class TestMaxPool:
    def test_examples(self):
        out, _ = run_shared(pi_maxpool, enc([[[1.0], [2.0]], [[3.0], [4.0]]]))
        assert np.array_equal(out, enc([[[4.0]]]))
        out, _ = run_shared(pi_maxpool, enc(np.full((2, 2, 1), -2.5)))
        assert np.array_equal(out, enc([[[-2.5]]]))

    def test_random(self):
        x = enc(np.random.default_rng(8).uniform(-10, 10, (8, 8, 2)))
        out, s = run_shared(pi_maxpool, x)
        assert np.array_equal(sgn(out), _maxpool_ref(sgn(x)))
        assert s.transcript.rounds == 3 * 4

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            run_shared(pi_maxpool, np.zeros((5, 4, 1)))

    def test_all_pairs_l8(self):
        # pairwise max is exact whenever the difference fits the signed range
        v = np.arange(-64, 64)
        a, b = (m.ravel() for m in np.meshgrid(v, v))
        t = np.zeros((2, 2 * a.size, 1), dtype=np.int64)   # window j holds [a, b; b, a]
        t[0, 0::2, 0], t[0, 1::2, 0] = a, b
        t[1, 0::2, 0], t[1, 1::2, 0] = b, a
        out, _ = run_shared(pi_maxpool, L8.reduce(t), params=L8)
        assert np.array_equal(signed8(out)[0, :, 0], np.maximum(a, b))

    def test_all_values_l8(self):
        # every ring value appears; windows hold consecutive values in varied orders
        vals = signed8(ALL8)
        rng = np.random.default_rng(0)
        wins = np.stack([rng.permutation(vals[i:i + 4]) for i in range(0, 256, 4)])
        x = wins.reshape(8, 8, 2, 2).transpose(0, 2, 1, 3).reshape(16, 16, 1)
        out, _ = run_shared(pi_maxpool, L8.reduce(x), params=L8)
        assert np.array_equal(signed8(out), _maxpool_ref(x))


def _avg_ref(v, f=2):
    h, w, c = v.shape
    total = v.reshape(h // f, f, w // f, f, c).sum(axis=(1, 3))
    return (total * round(8192 / (f * f))) >> 13


class TestAvgPool:
    def test_example_and_no_traffic(self):
        with Session("inproc", 0) as s:
            x = enc(np.full((2, 2, 1), 2.0))
            out = s.run(avgpool, [(x,), (np.zeros_like(x),), (np.zeros_like(x),)])
            assert len(s.transcript.records) == 0
        assert abs(int(sgn(DEFAULT.add(out[0], out[1]))[0, 0, 0]) - 2 * 8192) <= 1

    def test_random(self):
        x = enc(np.random.default_rng(9).uniform(-10, 10, (50, 50, 4)))
        out, s = run_shared(avgpool, x)
        assert s.transcript.records == []
        assert np.abs(sgn(out) - _avg_ref(sgn(x))).max() <= 1

    def test_global(self):
        x = enc(np.random.default_rng(10).uniform(-3, 3, (4, 4, 3)))
        out, s = run_shared(global_avgpool, x)
        ref = (sgn(x).sum(axis=(0, 1)) * round(8192 / 16)) >> 13
        assert np.abs(sgn(out).ravel() - ref).max() <= 1
        assert s.transcript.records == []


class TestShuffle:
    def test_permutation(self):
        x = np.arange(6).reshape(1, 1, 6)
        assert channel_shuffle(x, 2).ravel().tolist() == [0, 3, 1, 4, 2, 5]
        with pytest.raises(ShapeError):
            channel_shuffle(x, 4)


class TestRoundStructure:
    @pytest.mark.parametrize("fn,rounds", [(pi_relu, 4), (pi_relu6, 8), (pi_leaky_relu, 4),
                                           (pi_drelu, 2)])
    def test_rounds_independent_of_size(self, fn, rounds):
        seen = set()
        for n in (1, 10, 1000):
            _, s = run_shared(fn, enc(np.linspace(-3, 3, n)))
            seen.add(s.transcript.rounds)
        assert seen == {rounds}


class TestRelu6Trace:
    def test_intermediates_on_grid(self):
        xs = np.linspace(-10, 10, 41)
        x = enc(xs)
        traces = [{}, {}, {}]
        from shadownet.ring import generator, share
        h0, h1 = share(x, generator(0, "trace"))
        with Session("inproc", 4) as s:
            s.run(pi_relu6, [(h0.payload, traces[0]), (h1.payload, traces[1]),
                             (np.zeros_like(x), traces[2])])
        rec = {k: sgn(DEFAULT.add(traces[0][k], traces[1][k])) for k in ("alpha", "c", "beta", "d")}
        v, six = sgn(x), 6 * 8192
        alpha = (v - six >= 0).astype(np.int64)
        beta = (v >= 0).astype(np.int64)
        c = alpha * (six - v)
        assert np.array_equal(rec["alpha"], alpha)
        assert np.array_equal(rec["c"], c)
        assert np.array_equal(rec["beta"], beta)
        assert np.array_equal(rec["d"], beta * (v + c))
        assert np.array_equal(rec["d"], np.clip(v, 0, six))
