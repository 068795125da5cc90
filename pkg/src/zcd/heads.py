"""Parallel and sequential detection heads shared across pyramid levels."""

from __future__ import annotations

import enum
import re
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvParams,
    ConvSpec,
    Conv2dNode,
    GroupNormNode,
    Node,
    ReluNode,
    RngSpec,
    ShapeError,
    Tape,
    as_tensor,
)

PRIOR_PROBABILITY = 0.01


class HeadScheme(enum.Enum):
    PARALLEL = "parallel"
    CLS_FIRST = "cls-first"
    REG_FIRST = "reg-first"

    @classmethod
    def parse(cls, value) -> "HeadScheme":
        if isinstance(value, cls):
            return value
        # accepts "cls-first", "cls_first" and "ClsFirst" spellings
        key = re.sub(r"(?<=[a-z])(?=[A-Z])", "-", str(value).strip()).lower().replace("_", "-")
        for scheme in cls:
            if scheme.value == key:
                return scheme
        raise ValueError(f"unknown head scheme {value!r}; expected one of {[s.value for s in cls]}")


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 80
    anchors_per_loc: int = 9
    anchor_free: bool = False
    centerness: bool = False
    norm_affine: bool = False
    channels: int = 256
    tower_depth: int = 4
    norm_groups: int = 32
    n_levels: int = 5

    def __post_init__(self):
        if self.num_classes < 1 or self.anchors_per_loc < 1 or self.tower_depth < 1:
            raise ValueError(f"invalid head config {self}")
        if self.anchor_free and self.anchors_per_loc != 1:
            object.__setattr__(self, "anchors_per_loc", 1)
        if self.centerness and not self.anchor_free:
            raise ValueError("centerness is only defined for the anchor-free head")

    @classmethod
    def retinanet(cls, **kw) -> "HeadConfig":
        return cls(**{"num_classes": 80, "anchors_per_loc": 9, **kw})

    @classmethod
    def fcos(cls, **kw) -> "HeadConfig":
        return cls(**{"num_classes": 80, "anchors_per_loc": 1, "anchor_free": True,
                      "centerness": True, "norm_affine": True, **kw})

    @property
    def cls_channels(self) -> int:
        return self.num_classes if self.anchor_free else self.anchors_per_loc * self.num_classes

    @property
    def reg_channels(self) -> int:
        return 4 if self.anchor_free else 4 * self.anchors_per_loc


class ScaleNode(Node):
    """Multiplies a map by one learnable scalar."""

    op = "scale"

    def __init__(self, scale: np.ndarray):
        super().__init__()
        self.scale = scale

    def _forward(self, x):
        return x * self.scale[0], x

    def _backward(self, dy, x):
        return (dy * self.scale[0],), {"value": np.array([(dy * x).sum()])}


@dataclass
class HeadOutput:
    cls: np.ndarray
    reg: np.ndarray
    centerness: np.ndarray | None
    tape: Tape
    keys: dict[str, str] = field(default_factory=dict)

    def maps(self) -> dict[str, np.ndarray]:
        out = {"cls": self.cls, "reg": self.reg}
        if self.centerness is not None:
            out["centerness"] = self.centerness
        return out

    def backward(self, grads: dict[str, np.ndarray]):
        """Returns ``(d input, param grads)`` given upstream grads per output map."""
        values, params = self.tape.backward({self.keys[k]: g for k, g in grads.items()})
        dp = values.get(self.keys["input"], np.zeros_like(self.tape[self.keys["input"]]))
        return dp, params


class HeadAssembly:
    """Two 4-conv towers plus output convs; one instance serves every level."""

    def __init__(self, config: HeadConfig | None = None, scheme="cls-first"):
        self.config = config or HeadConfig()
        self.scheme = HeadScheme.parse(scheme)
        cfg = self.config
        c = cfg.channels
        self.tower_spec = ConvSpec(c, c, 3, 1, 1)
        self.out_specs = {"cls_out": ConvSpec(c, cfg.cls_channels, 3, 1, 1),
                          "reg_out": ConvSpec(c, cfg.reg_channels, 3, 1, 1)}
        if cfg.centerness:
            self.out_specs["centerness_out"] = ConvSpec(c, 1, 3, 1, 1)
        self.cls_tower: list[ConvParams] = []
        self.reg_tower: list[ConvParams] = []
        self.outputs: dict[str, ConvParams] = {}
        self.norms: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.scales: list[np.ndarray] = []

    def param_count(self) -> int:
        cfg = self.config
        n = 2 * cfg.tower_depth * self.tower_spec.param_count
        n += sum(s.param_count for s in self.out_specs.values())
        if cfg.norm_affine:
            n += 2 * cfg.tower_depth * 2 * cfg.channels
        if cfg.anchor_free:
            n += cfg.n_levels
        return n

    def initialize(self, rng: RngSpec, stream: int = 3, prior: float = PRIOR_PROBABILITY):
        cfg = self.config
        gen = rng.generator(stream)
        self.cls_tower = [self.tower_spec.init(gen, rng) for _ in range(cfg.tower_depth)]
        self.reg_tower = [self.tower_spec.init(gen, rng) for _ in range(cfg.tower_depth)]
        self.outputs = {name: spec.init(gen, rng) for name, spec in self.out_specs.items()}
        self.outputs["cls_out"].bias[:] = -math.log((1.0 - prior) / prior)
        self.norms = {}
        if cfg.norm_affine:
            for tower in ("cls_tower", "reg_tower"):
                for k in range(cfg.tower_depth):
                    self.norms[f"{tower}{k}.norm"] = (np.ones(cfg.channels), np.zeros(cfg.channels))
        self.scales = [np.ones(1) for _ in range(cfg.n_levels)] if cfg.anchor_free else []
        return self

    def named_params(self):
        for tower, layers in (("cls_tower", self.cls_tower), ("reg_tower", self.reg_tower)):
            for k, p in enumerate(layers):
                yield f"{tower}{k}.weight", p.weight
                yield f"{tower}{k}.bias", p.bias
        for name, p in self.outputs.items():
            yield f"{name}.weight", p.weight
            yield f"{name}.bias", p.bias
        for name, (g, b) in self.norms.items():
            yield f"{name}.weight", g
            yield f"{name}.bias", b
        for i, s in enumerate(self.scales):
            yield f"scale{i}.value", s

    def _tower(self, tape: Tape, name: str, layers, key: str, prefix: str) -> str:
        for k, p in enumerate(layers):
            tape.apply(Conv2dNode(p), key, f"{prefix}{name}{k}", f"{name}{k}")
            key = f"{prefix}{name}{k}"
            if self.config.norm_affine:
                gamma, beta = self.norms[f"{name}{k}.norm"]
                tape.apply(GroupNormNode(gamma, beta, self.config.norm_groups), key,
                           f"{key}.gn", f"{name}{k}.norm")
                key = f"{key}.gn"
            tape.apply(ReluNode(), key, f"{key}.relu")
            key = f"{key}.relu"
        return key

    def record(self, tape: Tape, key: str, level: int | None = None, prefix: str = "") -> dict[str, str]:
        """Append this head applied to value ``key``; returns output keys."""
        if not self.cls_tower:
            raise RuntimeError("head assembly used before initialize()")
        x = tape[key]
        if x.shape[1] != self.config.channels:
            raise ShapeError(
                f"head input shape {x.shape} has {x.shape[1]} channels, expected {self.config.channels}"
            )
        if self.scheme is HeadScheme.PARALLEL:
            cls_feat = self._tower(tape, "cls_tower", self.cls_tower, key, prefix)
            reg_feat = self._tower(tape, "reg_tower", self.reg_tower, key, prefix)
        elif self.scheme is HeadScheme.CLS_FIRST:
            cls_feat = self._tower(tape, "cls_tower", self.cls_tower, key, prefix)
            reg_feat = self._tower(tape, "reg_tower", self.reg_tower, cls_feat, prefix)
        else:
            reg_feat = self._tower(tape, "reg_tower", self.reg_tower, key, prefix)
            cls_feat = self._tower(tape, "cls_tower", self.cls_tower, reg_feat, prefix)
        keys = {"input": key}
        tape.apply(Conv2dNode(self.outputs["cls_out"]), cls_feat, f"{prefix}cls", "cls_out")
        keys["cls"] = f"{prefix}cls"
        tape.apply(Conv2dNode(self.outputs["reg_out"]), reg_feat, f"{prefix}reg", "reg_out")
        keys["reg"] = f"{prefix}reg"
        if self.config.anchor_free and level is not None:
            idx = level - 3
            tape.apply(ScaleNode(self.scales[idx]), keys["reg"], f"{prefix}reg.scaled", f"scale{idx}")
            keys["reg"] = f"{prefix}reg.scaled"
        if "centerness_out" in self.outputs:
            tape.apply(Conv2dNode(self.outputs["centerness_out"]), cls_feat,
                       f"{prefix}centerness", "centerness_out")
            keys["centerness"] = f"{prefix}centerness"
        return keys

    def forward(self, p: np.ndarray, level: int | None = None) -> HeadOutput:
        tape = Tape(p=as_tensor(p, "head input"))
        keys = self.record(tape, "p", level)
        ctr = tape[keys["centerness"]] if "centerness" in keys else None
        return HeadOutput(tape[keys["cls"]], tape[keys["reg"]], ctr, tape, keys)

    __call__ = forward

    def flop_layers(self, batch: int, sizes: dict[int, tuple[int, int]]):
        cfg = self.config
        towers = ("cls_tower", "reg_tower")
        if self.scheme is HeadScheme.REG_FIRST:
            towers = towers[::-1]
        for level in sorted(sizes):
            h, w = sizes[level]
            elems = batch * cfg.channels * h * w
            for tower in towers:
                for k in range(cfg.tower_depth):
                    yield (f"head.level{level}.{tower}{k}", "conv",
                           self.tower_spec.macs(batch, h, w), None)
                    if cfg.norm_affine:
                        yield f"head.level{level}.{tower}{k}.norm", "norm", elems, None
            for name, spec in self.out_specs.items():
                yield f"head.level{level}.{name}", "conv", spec.macs(batch, h, w), None
            if cfg.anchor_free:
                yield f"head.level{level}.scale", "scale", batch * cfg.reg_channels * h * w, None


def head_forward(assembly: HeadAssembly, p: np.ndarray, level: int | None = None):
    out = assembly.forward(p, level)
    if out.centerness is None:
        return out.cls, out.reg
    return out.cls, out.reg, out.centerness


def count_head_params(config: HeadConfig, scheme="parallel") -> int:
    return HeadAssembly(config, scheme).param_count()


def init_heads(assembly: HeadAssembly, rng: RngSpec) -> HeadAssembly:
    return assembly.initialize(rng)
