"""Multi-scale inputs C3..C7 and analytic ResNet trunk accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConvParams, ConvSpec, RngSpec, ShapeError, as_tensor, conv2d, relu

LEVELS = (3, 4, 5, 6, 7)
BACKBONE_LEVELS = (3, 4, 5)
PROFILES = ("faithful-r50", "faithful-r101", "tiny")

# (width, blocks, out) per bottleneck stage; expansion 4
_RESNET_STAGES = {
    50: (3, 4, 6, 3),
    101: (3, 4, 23, 3),
}
_STAGE_WIDTHS = (64, 128, 256, 512)


def stride_of(level: int) -> int:
    return 2**level


def _bottleneck_params(in_ch: int, width: int, downsample: bool) -> int:
    out = 4 * width
    n = in_ch * width + 2 * width  # 1x1 reduce + BN affine
    n += 9 * width * width + 2 * width  # 3x3 + BN
    n += width * out + 2 * out  # 1x1 expand + BN
    if downsample:
        n += in_ch * out + 2 * out
    return n


def resnet_trunk_param_count(depth: int) -> int:
    """Parameters of a bottleneck ResNet trunk: stem, four stages, BN affines; no classifier."""
    if depth not in _RESNET_STAGES:
        raise ValueError(f"unsupported ResNet depth {depth}; expected one of {sorted(_RESNET_STAGES)}")
    total = 7 * 7 * 3 * 64 + 2 * 64
    in_ch = 64
    for width, blocks in zip(_STAGE_WIDTHS, _RESNET_STAGES[depth]):
        for b in range(blocks):
            total += _bottleneck_params(in_ch, width, downsample=(b == 0))
            in_ch = 4 * width
    return total


@dataclass(frozen=True)
class BackboneProfile:
    name: str = "faithful-r50"
    tiny_channels: tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        if self.name not in PROFILES:
            raise ValueError(f"unknown backbone profile {self.name!r}; expected one of {PROFILES}")
        if len(self.tiny_channels) != 3 or min(self.tiny_channels) < 1:
            raise ValueError(f"tiny_channels must be three positive ints, got {self.tiny_channels}")

    @property
    def faithful(self) -> bool:
        return self.name != "tiny"

    @property
    def depth(self) -> int | None:
        return {"faithful-r50": 50, "faithful-r101": 101}.get(self.name)

    @property
    def level_channels(self) -> dict[int, int]:
        chans = (512, 1024, 2048) if self.faithful else tuple(self.tiny_channels)
        return dict(zip(BACKBONE_LEVELS, chans))


class BackboneStub:
    """Small conv stack with the channel/stride signature of a ResNet trunk.

    Three stride-2 3x3 convs reach stride 8 (C3); two stride-2 1x1 convs give
    C4 and C5. Not a ResNet forward.
    """

    def __init__(self, profile: BackboneProfile):
        self.profile = profile
        ch = profile.level_channels
        stem = min(ch[3], 64)
        self.specs = {
            "stem1": ConvSpec(3, stem, 3, 2, 1),
            "stem2": ConvSpec(stem, stem, 3, 2, 1),
            "c3": ConvSpec(stem, ch[3], 3, 2, 1),
            "c4": ConvSpec(ch[3], ch[4], 1, 2, 0),
            "c5": ConvSpec(ch[4], ch[5], 1, 2, 0),
        }
        self.params: dict[str, ConvParams] = {}

    def initialize(self, rng: RngSpec, stream: int = 0) -> "BackboneStub":
        gen = rng.generator(stream)
        # He-scaled so activations stay O(1) through the stack
        self.params = {}
        for name, spec in self.specs.items():
            std = np.sqrt(2.0 / (spec.in_channels * spec.kernel_size**2))
            self.params[name] = spec.init(gen, RngSpec(rng.seed, "gaussian", 0.0, std))
        return self

    def param_count(self) -> int:
        return sum(s.param_count for s in self.specs.values())

    def parameters(self):
        for name, p in self.params.items():
            yield f"{name}.weight", p.weight
            yield f"{name}.bias", p.bias

    def forward(self, image: np.ndarray) -> dict[int, np.ndarray]:
        if not self.params:
            raise RuntimeError("backbone stub used before initialize()")
        x = as_tensor(image, "image")
        if x.shape[1] != 3:
            raise ShapeError(f"image must have 3 channels, got shape {x.shape}")
        for name in ("stem1", "stem2"):
            x = relu(conv2d(x, self.params[name]))
        out = {}
        for level in BACKBONE_LEVELS:
            x = relu(conv2d(x, self.params[f"c{level}"]))
            out[level] = x
        return out

    def flop_layers(self, batch: int, h: int, w: int):
        for name, spec in self.specs.items():
            yield f"backbone.{name}", "conv", spec.macs(batch, h, w), (spec, h, w)
            h, w = spec.output_hw(h, w)


def build_backbone_stub(profile: BackboneProfile, rng: RngSpec) -> BackboneStub:
    return BackboneStub(profile).initialize(rng)


class LevelExtender:
    """C6 = conv3x3/s2(source), C7 = conv3x3/s2(C6); exactly two conv layers.

    ``in_channels`` is the C5 width (2048 for faithful RetinaNet) or the FPN
    width when the extra levels hang off the 256-channel C5 projection.
    ``relu_between`` inserts a nonlinearity before the C7 conv; parameter
    counts are unchanged by it.
    """

    def __init__(self, in_channels: int, out_channels: int = 256, relu_between: bool = False):
        self.specs = {
            "c6": ConvSpec(in_channels, out_channels, 3, 2, 1),
            "c7": ConvSpec(out_channels, out_channels, 3, 2, 1),
        }
        self.relu_between = relu_between
        self.params: dict[str, ConvParams] = {}

    def initialize(self, rng: RngSpec, stream: int = 1) -> "LevelExtender":
        gen = rng.generator(stream)
        self.params = {name: spec.init(gen, rng) for name, spec in self.specs.items()}
        return self

    def param_count(self) -> int:
        return sum(s.param_count for s in self.specs.values())

    def parameters(self):
        for name, p in self.params.items():
            yield f"{name}.weight", p.weight
            yield f"{name}.bias", p.bias

    def forward(self, source: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if not self.params:
            raise RuntimeError("level extender used before initialize()")
        source = as_tensor(source, "C5")
        if min(source.shape[2:]) < 2:
            raise ShapeError(
                f"C5 spatial size {source.shape[2:]} is too small to downsample for C6/C7"
            )
        c6 = conv2d(source, self.params["c6"])
        c7 = conv2d(relu(c6) if self.relu_between else c6, self.params["c7"])
        return c6, c7

    def flop_layers(self, batch: int, h: int, w: int):
        for name, spec in self.specs.items():
            yield f"extra.{name}", "conv", spec.macs(batch, h, w), (spec, h, w)
            h, w = spec.output_hw(h, w)


def extend_levels(c5: np.ndarray, rng: RngSpec, out_channels: int = 256):
    """Convenience: build a fresh extender for ``c5`` and return ``(C6, C7)``."""
    ext = LevelExtender(as_tensor(c5, "C5").shape[1], out_channels).initialize(rng)
    return ext.forward(c5)


@dataclass
class Pyramid:
    """Ordered levels 3..7 with their stride and channel metadata."""

    levels: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.levels = {k: self.levels[k] for k in sorted(self.levels)}
        for lvl, t in self.levels.items():
            if lvl not in LEVELS:
                raise ValueError(f"pyramid level {lvl} outside 3..7")
            as_tensor(t, f"level {lvl}")

    def __getitem__(self, level: int) -> np.ndarray:
        try:
            return self.levels[level]
        except KeyError:
            raise KeyError(f"pyramid has no level {level}; present: {list(self.levels)}") from None

    def __contains__(self, level: int) -> bool:
        return level in self.levels

    def stride(self, level: int) -> int:
        return stride_of(level)

    def channels(self, level: int) -> int:
        return self[level].shape[1]

    def spatial(self, level: int) -> tuple[int, int]:
        return self[level].shape[2], self[level].shape[3]

    def require(self, levels=LEVELS) -> None:
        missing = [lvl for lvl in levels if lvl not in self.levels]
        if missing:
            raise ValueError(f"pyramid is missing levels {missing}")


def level_sizes(h: int, w: int) -> dict[int, tuple[int, int]]:
    """Spatial size of levels 3..7 as produced by the stride-2 conv chain."""
    sizes = {}
    for level in LEVELS:
        if level == 3:
            for _ in range(3):
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        else:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        sizes[level] = (h, w)
    return sizes
