"""Whole one-stage detector: backbone stub, C6/C7, feature pyramid, shared head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import HeadAssembly, HeadConfig, HeadOutput
from .pyramid import (
    BACKBONE_LEVELS,
    LEVELS,
    BackboneProfile,
    BackboneStub,
    LevelExtender,
    Pyramid,
    level_sizes,
    resnet_trunk_param_count,
)
from .safpn import FPN_WIDTH, FeaturePyramid, FpnOutput
from .tensor import RngSpec, as_tensor

EXTRA_SOURCES = ("c5", "p5")


@dataclass
class DetectorOutput:
    fpn: FpnOutput
    heads: dict[int, HeadOutput]

    @property
    def levels(self) -> dict[int, np.ndarray]:
        return self.fpn.levels


class Detector:
    """A RetinaNet-style (anchor-based) or FCOS-style (anchor-free) detector.

    ``extra_source`` picks what the C6 conv reads: ``"c5"`` is the raw C5
    (2048 channels on a faithful trunk), ``"p5"`` is the 256-channel
    projection of C5.
    """

    def __init__(self, profile: BackboneProfile | str = "faithful-r50", fpn_scheme="als-light",
                 head_scheme="cls-first", head_config: HeadConfig | None = None,
                 attention_dim: int | None = None, attention_relu: bool = True,
                 extra_source: str = "c5", extra_relu: bool = False, width: int = FPN_WIDTH):
        if isinstance(profile, str):
            profile = BackboneProfile(profile)
        if extra_source not in EXTRA_SOURCES:
            raise ValueError(f"extra_source must be one of {EXTRA_SOURCES}, got {extra_source!r}")
        self.profile = profile
        self.extra_source = extra_source
        self.width = width
        chans = profile.level_channels
        self.backbone = BackboneStub(profile)
        extra_in = chans[5] if extra_source == "c5" else width
        self.extender = LevelExtender(extra_in, width, relu_between=extra_relu)
        self.fpn = FeaturePyramid(fpn_scheme, chans, width, attention_dim, attention_relu)
        cfg = head_config or HeadConfig()
        if cfg.channels != width:
            cfg = HeadConfig(**{**cfg.__dict__, "channels": width})
        self.heads = HeadAssembly(cfg, head_scheme)
        self.initialized = False

    @classmethod
    def retinanet(cls, profile="faithful-r50", **kw) -> "Detector":
        kw.setdefault("head_config", HeadConfig.retinanet())
        kw.setdefault("extra_source", "c5")
        return cls(profile, **kw)

    @classmethod
    def fcos(cls, profile="faithful-r50", **kw) -> "Detector":
        kw.setdefault("head_config", HeadConfig.fcos())
        kw.setdefault("extra_source", "p5")
        return cls(profile, **kw)

    def initialize(self, rng: RngSpec | int = 42) -> "Detector":
        if isinstance(rng, int):
            rng = RngSpec(rng)
        self.backbone.initialize(rng, stream=0)
        self.extender.initialize(rng, stream=1)
        self.fpn.initialize(rng, stream=2)
        self.heads.initialize(rng, stream=3)
        self.initialized = True
        return self

    def astype(self, dtype) -> "Detector":
        """Cast every parameter array in place. Single precision is for benchmarking only."""
        if not self.initialized:
            raise RuntimeError("detector used before initialize()")

        def conv(p):
            p.weight, p.bias = p.weight.astype(dtype), p.bias.astype(dtype)

        for group in (self.backbone.params, self.extender.params, self.fpn.laterals,
                      self.fpn.posts, self.heads.outputs):
            for p in group.values():
                conv(p)
        for p in (*self.heads.cls_tower, *self.heads.reg_tower):
            conv(p)
        for block in self.fpn.blocks.values():
            for p in (block.reduce, *block.expand):
                conv(p)
        self.heads.norms = {k: (g.astype(dtype), b.astype(dtype)) for k, (g, b) in self.heads.norms.items()}
        self.heads.scales = [s.astype(dtype) for s in self.heads.scales]
        return self

    # -- accounting --------------------------------------------------------

    def component_param_counts(self) -> dict[str, int]:
        if self.profile.faithful:
            trunk = resnet_trunk_param_count(self.profile.depth)
        else:
            trunk = self.backbone.param_count()
        return {
            "trunk": trunk,
            "fpn": self.extender.param_count() + self.fpn.param_count(),
            "heads": self.heads.param_count(),
        }

    def named_params(self):
        """Every materialized parameter array. Faithful trunks have none (analytic only)."""
        if not self.profile.faithful:
            for name, arr in self.backbone.parameters():
                yield f"backbone.{name}", arr
        for name, arr in self.extender.parameters():
            yield f"extra.{name}", arr
        for name, arr in self.fpn.named_params():
            yield f"fpn.{name}", arr
        for name, arr in self.heads.named_params():
            yield f"head.{name}", arr

    def flop_layers(self, batch: int, h: int, w: int):
        sizes = level_sizes(h, w)
        if not self.profile.faithful:
            yield from self.backbone.flop_layers(batch, h, w)
        yield from self.extender.flop_layers(batch, *sizes[5])
        if self.extra_source == "p5":
            # lateral of C5 is evaluated a second time to feed C6
            spec = self.fpn.lateral_specs[5]
            yield "extra.source_lateral", "conv", spec.macs(batch, *sizes[5]), None
        yield from self.fpn.flop_layers(batch, sizes)
        yield from self.heads.flop_layers(batch, sizes)

    # -- forward -----------------------------------------------------------

    def pyramid(self, image: np.ndarray) -> Pyramid:
        if not self.initialized:
            raise RuntimeError("detector used before initialize()")
        feats = self.backbone.forward(as_tensor(image, "image"))
        source = feats[5] if self.extra_source == "c5" else self.fpn.lateral(5, feats[5])
        c6, c7 = self.extender.forward(source)
        return Pyramid({**{lvl: feats[lvl] for lvl in BACKBONE_LEVELS}, 6: c6, 7: c7})

    def forward(self, image: np.ndarray) -> DetectorOutput:
        fpn_out = self.fpn.forward(self.pyramid(image))
        heads = {lvl: self.heads.forward(fpn_out.levels[lvl], lvl) for lvl in LEVELS}
        return DetectorOutput(fpn_out, heads)

    __call__ = forward
