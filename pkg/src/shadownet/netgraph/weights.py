"""Weight container (``SNW1``), seeded weight generation and batch-norm folding.

Container layout, all little-endian: the magic ``SNW1``, then entries until
end of file, each ``u16 name length, name (utf-8), u8 dtype (0 = f32),
u8 rank, u32 dims..., payload``.  Entries are named ``<layer>/<param>``;
input tensors use a single entry named ``input``.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import GraphError, WeightsFormatError
from ..ring import generator
from .graph import LayerSpec, NetworkGraph

MAGIC = b"SNW1"
_DTYPES = {0: np.dtype("<f4")}


class WeightStore(dict):
    """``layer name -> {param name -> float32 array}``."""

    def flat(self) -> dict:
        return {f"{layer}/{name}": arr for layer, params in sorted(self.items())
                for name, arr in sorted(params.items())}

    @classmethod
    def from_flat(cls, entries: dict) -> "WeightStore":
        store = cls()
        for key, arr in entries.items():
            layer, sep, name = key.rpartition("/")
            if not sep:
                raise WeightsFormatError(f"entry {key!r} is not of the form layer/param")
            store.setdefault(layer, {})[name] = arr
        return store

    def __eq__(self, other):
        if not isinstance(other, dict) or set(self) != set(other):
            return False
        return all(set(self[k]) == set(other[k])
                   and all(np.array_equal(self[k][n], other[k][n]) for n in self[k])
                   for k in self)

    def __ne__(self, other):
        return not self == other

    __hash__ = None

    def check(self, graph: NetworkGraph) -> None:
        """Raise if a parametric layer lacks weights or a shape disagrees."""
        problems = []
        for name, params in expected_shapes(graph).items():
            have = self.get(name)
            if have is None:
                problems.append(f"no weights for layer {name!r}")
                continue
            for pname, shape in params.items():
                if pname not in have:
                    problems.append(f"layer {name!r} is missing {pname!r}")
                elif tuple(have[pname].shape) != shape:
                    problems.append(f"layer {name!r} {pname} has shape "
                                    f"{tuple(have[pname].shape)}, graph expects {shape}")
        if problems:
            raise WeightsFormatError("; ".join(problems))


def layer_param_shapes(lyr: LayerSpec, in_shape) -> dict:
    if lyr.kind == "conv2d":
        f, o = int(lyr.params["kernel"]), int(lyr.params["out_channels"])
        shapes = {"kernel": (f, f, in_shape[-1], o)}
        return shapes | ({"bias": (o,)} if lyr.params.get("bias", True) else {})
    if lyr.kind == "dwconv2d":
        f, c = int(lyr.params["kernel"]), in_shape[-1]
        return {"kernel": (f, f, c)} | ({"bias": (c,)} if lyr.params.get("bias", True) else {})
    if lyr.kind == "fullyconnected":
        o = int(lyr.params["out_features"])
        shapes = {"kernel": (in_shape[0], o)}
        return shapes | ({"bias": (o,)} if lyr.params.get("bias", True) else {})
    if lyr.kind == "batchnorm":
        c = in_shape[-1]
        return {k: (c,) for k in ("gamma", "beta", "mean", "var")}
    return {}


def expected_shapes(graph: NetworkGraph) -> dict:
    shapes = graph.shapes()
    out = {}
    for lyr in graph.layers:
        ps = layer_param_shapes(lyr, shapes[lyr.inputs[0]])
        if ps:
            out[lyr.name] = ps
    return out


def gen_weights(graph: NetworkGraph, seed) -> WeightStore:
    """Uniform(-0.5, 0.5) weights, deterministic per (seed, layer name).

    Batch-norm variances are drawn from (0.5, 1.5) so they stay positive.
    """
    store = WeightStore()
    for name, params in expected_shapes(graph).items():
        rng = generator(seed, "weights", name)
        entry = {}
        for pname, shape in params.items():
            lo, hi = (0.5, 1.5) if pname == "var" else (-0.5, 0.5)
            entry[pname] = rng.uniform(lo, hi, size=shape).astype(np.float32)
        store[name] = entry
    return store


# -- container ------------------------------------------------------------

def write_container(path, entries: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in entries.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_container(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    entries, off = {}, 4
    try:
        while off < len(buf):
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode()
            off += nl
            dtype_code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            if dtype_code not in _DTYPES:
                raise WeightsFormatError(f"{path}: entry {name!r} has unknown dtype {dtype_code}")
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = _DTYPES[dtype_code]
            n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + n > len(buf):
                raise WeightsFormatError(f"{path}: entry {name!r} is truncated")
            entries[name] = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize,
                                          offset=off).astype(np.float32).reshape(dims)
            off += n
    except (struct.error, UnicodeDecodeError) as e:
        raise WeightsFormatError(f"{path}: corrupt container ({e})") from None
    return entries


def save_weights(store: WeightStore, path) -> None:
    write_container(path, store.flat())


def load_weights(path, graph: NetworkGraph | None = None) -> WeightStore:
    store = WeightStore.from_flat(read_container(path))
    if graph is not None:
        store.check(graph)
    return store


def save_input(x, path) -> None:
    write_container(path, {"input": np.asarray(x, dtype=np.float32)})


def load_input(path) -> np.ndarray:
    entries = read_container(path)
    if set(entries) != {"input"}:
        raise WeightsFormatError(f"{path}: input file must hold one entry named 'input'")
    return entries["input"]


# -- batch norm -----------------------------------------------------------

def fold_batchnorm(graph: NetworkGraph, weights: WeightStore):
    """Fold every batchnorm into the conv that feeds it; returns ``(graph, weights)``.

    Folded kernels stay float64 in memory; saving narrows them to f32.
    """
    by_name = {lyr.name: lyr for lyr in graph.layers}
    consumers = {}
    for lyr in graph.layers:
        for r in lyr.inputs:
            consumers.setdefault(r, []).append(lyr.name)
    new_w = WeightStore({k: dict(v) for k, v in weights.items()})
    rename = {}
    for lyr in graph.layers:
        if lyr.kind != "batchnorm":
            continue
        src = by_name.get(lyr.inputs[0])
        if src is None or src.kind not in ("conv2d", "dwconv2d") or len(consumers[src.name]) != 1:
            raise GraphError(f"batchnorm {lyr.name!r} does not directly follow a conv layer")
        bn = weights[lyr.name]
        eps = float(lyr.params.get("eps", 1e-5))
        scale = bn["gamma"].astype(np.float64) / np.sqrt(bn["var"].astype(np.float64) + eps)
        conv = new_w[src.name]
        kernel = conv["kernel"].astype(np.float64) * scale
        bias = conv.get("bias", np.zeros_like(scale)).astype(np.float64)
        bias = (bias - bn["mean"]) * scale + bn["beta"]
        new_w[src.name] = {"kernel": kernel, "bias": bias}
        del new_w[lyr.name]
        rename[lyr.name] = src.name
    if not rename:
        return graph, weights
    layers = []
    for lyr in graph.layers:
        if lyr.kind == "batchnorm":
            continue
        if lyr.kind in ("conv2d", "dwconv2d") and lyr.name in rename.values():
            lyr = LayerSpec(lyr.name, lyr.kind, {**lyr.params, "bias": True}, lyr.inputs)
        layers.append(LayerSpec(lyr.name, lyr.kind, lyr.params,
                                tuple(rename.get(r, r) for r in lyr.inputs)))
    return graph.with_layers(layers), new_w
