"""Building blocks (Fire, ShuffleNetV2 unit, inverted residual) and full networks.

Each block has two activation "slots".  Original variants follow the base
architectures; crypto variants are derived from them by rewrite passes:

* fire, CIFAR profile: slot 1 removed, slot 2 -> 50% partial activation
* fire, MNIST profile: slot 2 removed, slot 1 -> 25% partial activation
* shuffle unit: slot 2 removed, slot 1 -> partial activation (50% / 25%)
* inverted residual: slot 1 removed, slot 2 -> partial activation
  (50% / 25%), ReLU6 -> ReLU

At network level the crypto SqueezeNet also swaps max for average
pooling, and the crypto MobileNetV2 uses ReLU outside the blocks too.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from ..errors import GraphError
from .graph import INPUT, LayerSpec, NetworkGraph, parse_graph
from .rewrite import apply_passes

BLOCK_KINDS = ("fire", "shuffle_unit", "inverted_residual")
PROFILES = {"cifar": {"input_shape": (32, 32, 3), "pa_ratio": 0.5},
            "mnist": {"input_shape": (28, 28, 1), "pa_ratio": 0.25}}


@dataclass(frozen=True)
class BlockTemplate:
    kind: str
    variant: str = "original"
    in_channels: int = 16
    out_channels: int = 16
    stride: int = 1
    expansion: int = 6
    squeeze: int | None = None
    pa_ratio: float | None = None
    profile: str = "cifar"
    size: int = 32

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise GraphError(f"unknown block kind {self.kind!r}")
        if self.variant not in ("original", "crypto"):
            raise GraphError(f"unknown variant {self.variant!r}")
        if self.profile not in PROFILES:
            raise GraphError(f"unknown profile {self.profile!r}")

    @property
    def ratio(self) -> float:
        return PROFILES[self.profile]["pa_ratio"] if self.pa_ratio is None else self.pa_ratio


def crypto_passes(kind: str, profile: str = "cifar", ratio: float | None = None) -> list:
    """Rewrite passes turning original blocks of ``kind`` into crypto blocks."""
    r = PROFILES[profile]["pa_ratio"] if ratio is None else ratio
    if kind == "fire":
        if profile == "mnist":
            return [("remove_activation", "second", None), ("pa_replace", "first", r)]
        return [("remove_activation", "first", None), ("pa_replace", "second", r)]
    if kind == "shuffle_unit":
        return [("remove_activation", "second", None), ("pa_replace", "first", r)]
    if kind == "inverted_residual":
        return [("remove_activation", "first", None), ("pa_replace", "second", r),
                ("relu6_to_relu", "all", None)]
    raise GraphError(f"unknown block kind {kind!r}")


class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def add(self, name, kind, inputs, **params) -> str:
        self.layers.append(LayerSpec(name, kind, params, tuple(inputs)))
        return name

    def conv(self, name, src, out, kernel=1, stride=1):
        return self.add(name, "conv2d", [src], out_channels=out, kernel=kernel, stride=stride,
                        padding="same")

    def dw(self, name, src, kernel=3, stride=1):
        return self.add(name, "dwconv2d", [src], kernel=kernel, stride=stride, padding="same")

    def act(self, name, src, kind, block=None, slot=None):
        tags = {"block": block, "slot": slot} if block else {}
        return self.add(name, kind, [src], **tags)


def _fire(b: _Builder, p: str, src: str, t: BlockTemplate) -> str:
    s = t.squeeze or max(1, t.out_channels // 8)
    e = t.out_channels // 2
    if 2 * e != t.out_channels:
        raise GraphError(f"fire block needs an even output width, got {t.out_channels}")
    sq = b.act(f"{p}/squeeze_act", b.conv(f"{p}/squeeze", src, s), "relu", p, 1)
    e1 = b.act(f"{p}/expand1x1_act", b.conv(f"{p}/expand1x1", sq, e), "relu", p, 2)
    e3 = b.act(f"{p}/expand3x3_act", b.conv(f"{p}/expand3x3", sq, e, kernel=3), "relu", p, 2)
    return b.add(f"{p}/concat", "concat", [e1, e3])


def _shuffle_unit(b: _Builder, p: str, src: str, t: BlockTemplate) -> str:
    half = t.out_channels // 2
    if 2 * half != t.out_channels:
        raise GraphError(f"shuffle unit needs an even output width, got {t.out_channels}")
    if t.stride == 1:
        if t.in_channels != t.out_channels:
            raise GraphError("stride-1 shuffle unit needs equal input and output widths")
        sp = b.add(f"{p}/split", "channel_split", [src], fractions=[0.5, 0.5])
        x = b.act(f"{p}/pw1_act", b.conv(f"{p}/pw1", f"{sp}:1", half), "relu", p, 1)
        x = b.dw(f"{p}/dw", x)
        x = b.act(f"{p}/pw2_act", b.conv(f"{p}/pw2", x, half), "relu", p, 2)
        cat = b.add(f"{p}/concat", "concat", [f"{sp}:0", x])
    else:
        y = b.dw(f"{p}/short_dw", src, stride=t.stride)
        y = b.act(f"{p}/short_pw_act", b.conv(f"{p}/short_pw", y, half), "relu", p, 2)
        x = b.act(f"{p}/pw1_act", b.conv(f"{p}/pw1", src, half), "relu", p, 1)
        x = b.dw(f"{p}/dw", x, stride=t.stride)
        x = b.act(f"{p}/pw2_act", b.conv(f"{p}/pw2", x, half), "relu", p, 2)
        cat = b.add(f"{p}/concat", "concat", [y, x])
    return b.add(f"{p}/shuffle", "channel_shuffle", [cat], groups=2)


def _inverted_residual(b: _Builder, p: str, src: str, t: BlockTemplate) -> str:
    x = src
    hidden = t.in_channels * t.expansion
    if t.expansion != 1:
        x = b.act(f"{p}/expand_act", b.conv(f"{p}/expand", x, hidden), "relu6", p, 1)
    x = b.act(f"{p}/dw_act", b.dw(f"{p}/dw", x, stride=t.stride), "relu6", p, 2)
    x = b.conv(f"{p}/project", x, t.out_channels)
    if t.stride == 1 and t.in_channels == t.out_channels:
        x = b.add(f"{p}/add", "residual_add", [src, x])
    return x


_BLOCKS = {"fire": _fire, "shuffle_unit": _shuffle_unit, "inverted_residual": _inverted_residual}


def make_block(template: BlockTemplate, name: str = "block") -> NetworkGraph:
    """A standalone graph holding one block, fed by a ``size x size x in_channels`` input."""
    b = _Builder()
    _BLOCKS[template.kind](b, name, INPUT, template)
    g = NetworkGraph(f"{template.kind}.{template.variant}",
                     (template.size, template.size, template.in_channels), tuple(b.layers),
                     {"block": template.kind, "variant": "original", "profile": template.profile})
    if template.variant == "crypto":
        g = apply_passes(g, crypto_passes(template.kind, template.profile, template.ratio))
        g = g.with_layers(g.layers, variant="crypto")
    g.shapes()
    return g


# -- networks -------------------------------------------------------------

_CAVEAT = ("channel widths follow the base architecture with the downscaling edits; "
           "exact widths of the downscaled networks are not published")


def _finish(name, profile, variant, shape, b: _Builder, kind, extra_passes=()):
    g = NetworkGraph(f"{name}_{profile}", shape, tuple(b.layers),
                     {"architecture": name, "profile": profile, "variant": "original",
                      "note": _CAVEAT})
    g.shapes()
    if variant == "crypto":
        passes = crypto_passes(kind, profile) + list(extra_passes)
        g = apply_passes(g, passes)
        g = g.with_layers(g.layers, variant="crypto")
    return g


def squeezenet(profile="cifar", variant="original", classes=10) -> NetworkGraph:
    """SqueezeNet 1.0 layout; 3x3 stride-1 first conv and 2x2 pools.

    The MNIST profile pads digits to 32x32 so the three 2x2 pools tile evenly.
    """
    shape = (32, 32, 3) if profile == "cifar" else (32, 32, 1)
    b = _Builder()
    x = b.act("conv1_act", b.conv("conv1", INPUT, 96, kernel=3), "relu")
    x = b.add("pool1", "maxpool", [x], kernel=2, stride=2)
    fires = [(2, 16, 128), (3, 16, 128), (4, 32, 256), "pool", (5, 32, 256), (6, 48, 384),
             (7, 48, 384), (8, 64, 512), "pool", (9, 64, 512)]
    c, pools = 96, 2
    for entry in fires:
        if entry == "pool":
            x = b.add(f"pool{pools}", "maxpool", [x], kernel=2, stride=2)
            pools += 1
            continue
        i, s, o = entry
        x = _fire(b, f"fire{i}", x, BlockTemplate("fire", in_channels=c, out_channels=o, squeeze=s))
        c = o
    x = b.act("conv10_act", b.conv("conv10", x, classes), "relu")
    x = b.add("gap", "globalavgpool", [x])
    b.add("flatten", "flatten", [x])
    return _finish("squeezenet", profile, variant, shape, b, "fire",
                   [("maxpool_to_avgpool", None, None)])


def shufflenetv2(profile="cifar", variant="original", classes=10) -> NetworkGraph:
    """ShuffleNetV2 1x; stride-1 first conv and no first pooling layer."""
    shape = PROFILES[profile]["input_shape"]
    b = _Builder()
    x = b.act("conv1_act", b.conv("conv1", INPUT, 24, kernel=3), "relu")
    c = 24
    for stage, (out, repeats) in enumerate([(116, 4), (232, 8), (464, 4)], start=2):
        for r in range(repeats):
            t = BlockTemplate("shuffle_unit", in_channels=c, out_channels=out,
                              stride=2 if r == 0 else 1)
            x = _shuffle_unit(b, f"stage{stage}.{r}", x, t)
            c = out
    x = b.act("conv5_act", b.conv("conv5", x, 1024), "relu")
    x = b.add("gap", "globalavgpool", [x])
    x = b.add("flatten", "flatten", [x])
    b.add("fc", "fullyconnected", [x], out_features=classes)
    return _finish("shufflenetv2", profile, variant, shape, b, "shuffle_unit")


MOBILENETV2_STAGES = [(1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2),
                      (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]


def mobilenetv2(profile="cifar", variant="original", classes=10) -> NetworkGraph:
    """MobileNetV2 1.0; first conv and first strided stage run at stride 1."""
    shape = PROFILES[profile]["input_shape"]
    b = _Builder()
    x = b.act("conv1_act", b.conv("conv1", INPUT, 32, kernel=3), "relu6")
    c, idx = 32, 0
    for t, out, n, s in MOBILENETV2_STAGES:
        for r in range(n):
            tmpl = BlockTemplate("inverted_residual", in_channels=c, out_channels=out,
                                 stride=s if r == 0 else 1, expansion=t)
            x = _inverted_residual(b, f"block{idx}", x, tmpl)
            c, idx = out, idx + 1
    x = b.act("conv_last_act", b.conv("conv_last", x, 1280), "relu6")
    x = b.add("gap", "globalavgpool", [x])
    x = b.add("flatten", "flatten", [x])
    b.add("fc", "fullyconnected", [x], out_features=classes)
    return _finish("mobilenetv2", profile, variant, shape, b, "inverted_residual")


def toy_network() -> NetworkGraph:
    """32x32x3 input, 3x3 conv to 16 channels, ReLU."""
    b = _Builder()
    b.act("relu", b.conv("conv", INPUT, 16, kernel=3), "relu")
    return NetworkGraph("toy", (32, 32, 3), tuple(b.layers), {})


ARCHITECTURES = {"squeezenet": squeezenet, "shufflenetv2": shufflenetv2,
                 "mobilenetv2": mobilenetv2}


def shipped_name(arch: str, profile: str, variant: str) -> str:
    short = "orig" if variant == "original" else "crypto"
    suffix = "" if profile == "cifar" else "_mnist"
    return f"{arch}_cifar{suffix}.{short}.json" if profile == "cifar" \
        else f"{arch}_mnist.{short}.json"


def shipped_graphs() -> dict:
    """File name -> graph for every shipped configuration."""
    out = {}
    for arch, fn in ARCHITECTURES.items():
        for profile in PROFILES:
            for variant in ("original", "crypto"):
                out[shipped_name(arch, profile, variant)] = fn(profile, variant)
    out["toy.json"] = toy_network()
    return out


def load_shipped(name: str) -> NetworkGraph:
    """Load a shipped graph file by name, e.g. ``mobilenetv2_cifar.crypto.json``."""
    ref = resources.files("shadownet") / "data" / "graphs" / name
    return parse_graph(ref.read_text())


def write_shipped(directory) -> list:
    import pathlib
    d = pathlib.Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for name, g in shipped_graphs().items():
        (d / name).write_text(g.to_json())
        written.append(d / name)
    return written

