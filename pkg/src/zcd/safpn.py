"""Scale-attention feature pyramid and the baseline FPN it replaces.

Each output level ``P_i`` is a per-channel convex combination of every
backbone level resized to level ``i`` (plus ``P_{i+1}`` below the top). The
combination weights come from a squeeze step on the summed branches followed
by one expand map per branch and a softmax across branches.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

import numpy as np

from .pyramid import BACKBONE_LEVELS, LEVELS, Pyramid
from .tensor import (
    ConvParams,
    ConvSpec,
    Conv2dNode,
    LinearNode,
    LinearParams,
    LinearSpec,
    Node,
    PoolNode,
    ReluNode,
    AddNode,
    ResizeNode,
    RngSpec,
    ShapeError,
    SoftmaxBranchesNode,
    StackNode,
    SumNode,
    Tape,
    bilinear_resize,
    conv2d,
    global_avg_pool,
    linear,
    relu,
    softmax_branches,
    tree_sum,
)

FPN_WIDTH = 256


class FpnScheme(enum.Enum):
    BASELINE = "baseline"
    ALS = "als"
    ALS_LIGHT = "als-light"
    LLS = "lls"

    @classmethod
    def parse(cls, value) -> "FpnScheme":
        if isinstance(value, cls):
            return value
        # accepts "cls-first", "cls_first" and "ClsFirst" spellings
        key = re.sub(r"(?<=[a-z])(?=[A-Z])", "-", str(value).strip()).lower().replace("_", "-")
        for scheme in cls:
            if scheme.value == key:
                return scheme
        raise ValueError(f"unknown fpn scheme {value!r}; expected one of {[s.value for s in cls]}")

    def attention_levels(self) -> tuple[int, ...]:
        return {
            FpnScheme.BASELINE: (),
            FpnScheme.ALS: LEVELS,
            FpnScheme.ALS_LIGHT: LEVELS,
            FpnScheme.LLS: BACKBONE_LEVELS,
        }[self]

    def post_conv_levels(self) -> tuple[int, ...]:
        return {
            FpnScheme.BASELINE: BACKBONE_LEVELS,
            FpnScheme.ALS: LEVELS,
            FpnScheme.ALS_LIGHT: (),
            FpnScheme.LLS: BACKBONE_LEVELS,
        }[self]


def default_attention_dim(channels: int = FPN_WIDTH, reduction: int = 16, floor: int = 32) -> int:
    return max(channels // reduction, floor)


def n_branches(level: int) -> int:
    """Five inputs at the top level (no P_{i+1}), six everywhere else."""
    if level not in LEVELS:
        raise ValueError(f"level {level} outside 3..7")
    return 5 if level == max(LEVELS) else 6


class ScaleAttentionBlock:
    """Learnable state of one fusion block: a reduce map and per-branch expand maps."""

    def __init__(self, level: int, channels: int = FPN_WIDTH, dim: int | None = None,
                 use_relu: bool = True):
        self.level = level
        self.channels = channels
        self.dim = dim or default_attention_dim(channels)
        self.n_branches = n_branches(level)
        self.use_relu = use_relu
        self.reduce_spec = LinearSpec(channels, self.dim)
        self.expand_spec = LinearSpec(self.dim, channels)
        self.reduce: LinearParams | None = None
        self.expand: list[LinearParams] = []

    @property
    def param_count(self) -> int:
        return self.reduce_spec.param_count + self.n_branches * self.expand_spec.param_count

    def initialize(self, gen: np.random.Generator, rng: RngSpec) -> "ScaleAttentionBlock":
        self.reduce = self.reduce_spec.init(gen, rng)
        self.expand = [self.expand_spec.init(gen, rng) for _ in range(self.n_branches)]
        return self

    def named_params(self, prefix: str = ""):
        yield f"{prefix}reduce.weight", self.reduce.weight
        yield f"{prefix}reduce.bias", self.reduce.bias
        for b, p in enumerate(self.expand):
            yield f"{prefix}expand{b}.weight", p.weight
            yield f"{prefix}expand{b}.bias", p.bias

    def logits(self, v1: np.ndarray) -> np.ndarray:
        """(B, C) pooled descriptor -> (n_branches, B, C) logits."""
        h = linear(v1, self.reduce)
        if self.use_relu:
            h = relu(h)
        return np.stack([linear(h, p) for p in self.expand])

    def record(self, tape: Tape, branch_keys: list[str], prefix: str, out: str) -> str:
        """Append the block to ``tape``; returns the key of the attention weights."""
        if len(branch_keys) != self.n_branches:
            raise ShapeError(
                f"level {self.level} block expects {self.n_branches} branches, got {len(branch_keys)}"
            )
        tape.apply(SumNode(), branch_keys, f"{prefix}F")
        tape.apply(PoolNode(), f"{prefix}F", f"{prefix}v1")
        tape.apply(LinearNode(self.reduce), f"{prefix}v1", f"{prefix}z", f"{prefix}reduce")
        hidden = f"{prefix}z"
        if self.use_relu:
            tape.apply(ReluNode(), hidden, f"{prefix}v2")
            hidden = f"{prefix}v2"
        logit_keys = []
        for b, p in enumerate(self.expand):
            key = f"{prefix}logit{b}"
            tape.apply(LinearNode(p), hidden, key, f"{prefix}expand{b}")
            logit_keys.append(key)
        tape.apply(StackNode(), logit_keys, f"{prefix}logits")
        tape.apply(SoftmaxBranchesNode(), f"{prefix}logits", f"{prefix}weights")
        tape.apply(FuseNode(), [f"{prefix}weights", *branch_keys], out)
        return f"{prefix}weights"


def gather_branches(level: int, pyramid: Pyramid, prev: np.ndarray | None = None) -> list[np.ndarray]:
    """Inputs to the level-``level`` block in fixed order (C3..C7, P_{level+1}).

    ``pyramid`` holds the 256-channel inputs for levels 3..7; every branch is
    resized to the native size of ``level``.
    """
    pyramid.require()
    if level == max(LEVELS):
        if prev is not None:
            raise ValueError("the top level takes no P_{i+1} input")
    elif prev is None:
        raise ValueError(f"level {level} requires P_{level + 1}")
    h, w = pyramid.spatial(level)
    branches = [bilinear_resize(pyramid[j], h, w) for j in LEVELS]
    if prev is not None:
        branches.append(bilinear_resize(prev, h, w))
    return branches


def aggregate(branches) -> np.ndarray:
    return tree_sum(list(branches))


def attention_weights(f: np.ndarray, block: ScaleAttentionBlock) -> np.ndarray:
    """(n_branches, B, C) weights from the aggregated map ``f``."""
    if f.shape[1] != block.channels:
        raise ShapeError(f"aggregated map has {f.shape[1]} channels, block expects {block.channels}")
    return softmax_branches(block.logits(global_avg_pool(f)))


def fuse(branches, weights: np.ndarray) -> np.ndarray:
    return FuseNode().forward(weights, *branches)


class FuseNode(Node):
    """Channel-wise convex combination of branches.

    Evaluated as ``X_0 + sum_b w_b (X_b - X_0)``, which equals ``sum_b w_b X_b``
    when the weights sum to one and returns ``X`` exactly when every branch is
    the same tensor.
    """

    op = "fuse"

    def _forward(self, weights, *branches):
        if len(branches) != weights.shape[0]:
            raise ShapeError(f"fuse: {len(branches)} branches but {weights.shape[0]} weight rows")
        ref = branches[0]
        out = ref.copy()
        for b in range(1, len(branches)):
            if branches[b].shape != ref.shape:
                raise ShapeError(f"fuse: branch shapes {ref.shape} and {branches[b].shape} differ")
            out += weights[b][:, :, None, None] * (branches[b] - ref)
        return out, (weights, branches)

    def _backward(self, dy, saved):
        weights, branches = saved
        ref = branches[0]
        dw = np.zeros_like(weights)
        dbranches = [dy * (1.0 - weights[1:].sum(axis=0))[:, :, None, None]]
        for b in range(1, len(branches)):
            dbranches.append(dy * weights[b][:, :, None, None])
            dw[b] = (dy * (branches[b] - ref)).sum(axis=(2, 3))
        return (dw, *dbranches), {}


@dataclass
class FpnOutput:
    levels: dict[int, np.ndarray]
    attention: dict[int, np.ndarray]
    tape: Tape
    order: list[int]
    out_keys: dict[int, str]

    @property
    def pyramid(self) -> Pyramid:
        return Pyramid(dict(self.levels))

    def backward(self, grads: dict[int, np.ndarray]):
        """Returns ``(input_grads by level, param_grads by name)``."""
        seeds: dict[str, np.ndarray] = {}
        for level, g in grads.items():
            key = self.out_keys[level]
            seeds[key] = seeds[key] + g if key in seeds else g
        values, params = self.tape.backward(seeds)
        inputs = {lvl: values.get(f"C{lvl}", np.zeros_like(self.tape[f"C{lvl}"])) for lvl in LEVELS}
        return inputs, params

    def attention_table(self):
        """Rows ``(level, branch, channel, weight)`` averaged over the batch."""
        rows = []
        for level in sorted(self.attention):
            w = self.attention[level].mean(axis=1)
            for b in range(w.shape[0]):
                for c in range(w.shape[1]):
                    rows.append((level, b, c, float(w[b, c])))
        return rows


class FeaturePyramid:
    """Baseline FPN or one of the scale-attention wirings over levels 3..7.

    ``in_channels`` are the backbone widths of C3..C5; C6/C7 must already be
    ``width`` channels wide.
    """

    def __init__(self, scheme="als-light", in_channels: dict[int, int] | None = None,
                 width: int = FPN_WIDTH, attention_dim: int | None = None,
                 attention_relu: bool = True):
        self.scheme = FpnScheme.parse(scheme)
        self.in_channels = dict(in_channels or {3: 512, 4: 1024, 5: 2048})
        self.width = width
        self.attention_dim = attention_dim or default_attention_dim(width)
        self.lateral_specs = {
            lvl: ConvSpec(self.in_channels[lvl], width, 1, 1, 0) for lvl in BACKBONE_LEVELS
        }
        self.post_specs = {lvl: ConvSpec(width, width, 3, 1, 1) for lvl in self.scheme.post_conv_levels()}
        self.blocks = {
            lvl: ScaleAttentionBlock(lvl, width, self.attention_dim, attention_relu)
            for lvl in self.scheme.attention_levels()
        }
        self.laterals: dict[int, ConvParams] = {}
        self.posts: dict[int, ConvParams] = {}

    # -- parameters --------------------------------------------------------

    def param_count(self) -> int:
        n = sum(s.param_count for s in self.lateral_specs.values())
        n += sum(s.param_count for s in self.post_specs.values())
        return n + sum(b.param_count for b in self.blocks.values())

    def initialize(self, rng: RngSpec, stream: int = 2) -> "FeaturePyramid":
        gen = rng.generator(stream)
        self.laterals = {lvl: s.init(gen, rng) for lvl, s in self.lateral_specs.items()}
        self.posts = {lvl: s.init(gen, rng) for lvl, s in self.post_specs.items()}
        for lvl in sorted(self.blocks, reverse=True):
            self.blocks[lvl].initialize(gen, rng)
        return self

    def named_params(self):
        for lvl, p in self.laterals.items():
            yield f"lateral{lvl}.weight", p.weight
            yield f"lateral{lvl}.bias", p.bias
        for lvl, p in self.posts.items():
            yield f"post{lvl}.weight", p.weight
            yield f"post{lvl}.bias", p.bias
        for lvl, block in self.blocks.items():
            yield from block.named_params(f"block{lvl}.")

    # -- forward -----------------------------------------------------------

    def lateral(self, level: int, c: np.ndarray) -> np.ndarray:
        return conv2d(c, self.laterals[level])

    def forward(self, pyramid: Pyramid) -> FpnOutput:
        if not self.laterals:
            raise RuntimeError("feature pyramid used before initialize()")
        pyramid.require()
        for lvl in (6, 7):
            if pyramid.channels(lvl) != self.width:
                raise ShapeError(f"C{lvl} has {pyramid.channels(lvl)} channels, expected {self.width}")
        tape = Tape(**{f"C{lvl}": pyramid[lvl] for lvl in LEVELS})
        src = {}
        for lvl in BACKBONE_LEVELS:
            tape.apply(Conv2dNode(self.laterals[lvl]), f"C{lvl}", f"L{lvl}", f"lateral{lvl}")
            src[lvl] = f"L{lvl}"
        src[6], src[7] = "C6", "C7"
        sizes = {lvl: pyramid.spatial(lvl) for lvl in LEVELS}

        out_keys: dict[int, str] = {}
        attention: dict[int, np.ndarray] = {}
        order: list[int] = []
        merged: dict[int, str] = {}
        for lvl in sorted(LEVELS, reverse=True):
            order.append(lvl)
            if lvl in self.blocks:
                keys = []
                for j in LEVELS:
                    key = f"R{lvl}_{j}"
                    tape.apply(ResizeNode(*sizes[lvl]), src[j], key)
                    keys.append(key)
                if lvl < max(LEVELS):
                    key = f"R{lvl}_P"
                    tape.apply(ResizeNode(*sizes[lvl]), out_keys[lvl + 1], key)
                    keys.append(key)
                wkey = self.blocks[lvl].record(tape, keys, f"block{lvl}.", f"Q{lvl}")
                attention[lvl] = tape[wkey]
                fused = f"Q{lvl}"
            elif lvl in BACKBONE_LEVELS:
                # baseline top-down: lateral + upsampled coarser merge
                fused = src[lvl]
                if lvl + 1 in merged:
                    tape.apply(ResizeNode(*sizes[lvl]), merged[lvl + 1], f"U{lvl}")
                    tape.apply(AddNode(), (src[lvl], f"U{lvl}"), f"M{lvl}")
                    fused = f"M{lvl}"
                merged[lvl] = fused
            else:
                fused = src[lvl]
            if lvl in self.posts:
                tape.apply(Conv2dNode(self.posts[lvl]), fused, f"P{lvl}", f"post{lvl}")
                out_keys[lvl] = f"P{lvl}"
            else:
                out_keys[lvl] = fused
        return FpnOutput({lvl: tape[out_keys[lvl]] for lvl in LEVELS}, attention, tape, order, out_keys)

    __call__ = forward

    # -- symbolic cost -----------------------------------------------------

    def flop_layers(self, batch: int, sizes: dict[int, tuple[int, int]]):
        """Yields ``(name, kind, macs, detail)`` without touching any array."""
        c = self.width
        for lvl, spec in self.lateral_specs.items():
            yield f"fpn.lateral{lvl}", "conv", spec.macs(batch, *sizes[lvl]), None
        for lvl in sorted(LEVELS, reverse=True):
            h, w = sizes[lvl]
            elems = batch * c * h * w
            if lvl in self.blocks:
                block = self.blocks[lvl]
                sources = list(LEVELS) + ([lvl + 1] if lvl < max(LEVELS) else [])
                for j in sources:
                    if sizes[j] != (h, w):
                        yield f"fpn.level{lvl}.resize{j}", "resize", 4 * elems, None
                yield f"fpn.level{lvl}.aggregate", "add", (block.n_branches - 1) * elems, None
                yield f"fpn.level{lvl}.pool", "pool", elems, None
                yield f"fpn.level{lvl}.reduce", "linear", block.reduce_spec.macs(batch), None
                yield (f"fpn.level{lvl}.expand", "linear",
                       block.n_branches * block.expand_spec.macs(batch), None)
                yield f"fpn.level{lvl}.fuse", "fuse", block.n_branches * elems, None
            elif lvl in BACKBONE_LEVELS and lvl < max(BACKBONE_LEVELS):
                if sizes[lvl + 1] != (h, w):
                    yield f"fpn.level{lvl}.upsample", "resize", 4 * elems, None
                yield f"fpn.level{lvl}.merge", "add", elems, None
            if lvl in self.post_specs:
                yield f"fpn.post{lvl}", "conv", self.post_specs[lvl].macs(batch, h, w), None


def init_sa_fpn(fpn: FeaturePyramid, rng: RngSpec) -> FeaturePyramid:
    """Gaussian weights, zero biases for every fc and conv of ``fpn``."""
    return fpn.initialize(rng)


__all__ = [
    "FPN_WIDTH",
    "FeaturePyramid",
    "FpnOutput",
    "FpnScheme",
    "FuseNode",
    "ScaleAttentionBlock",
    "aggregate",
    "attention_weights",
    "default_attention_dim",
    "fuse",
    "gather_branches",
    "init_sa_fpn",
    "n_branches",
]
