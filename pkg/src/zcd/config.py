"""Run configuration: flat JSON file, ``ZCD_SEED`` env var, then CLI overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .heads import HeadConfig, HeadScheme
from .model import Detector
from .pyramid import PROFILES, BackboneProfile
from .safpn import FpnScheme

SEED_ENV = "ZCD_SEED"


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass
class RunConfig:
    backbone_profile: str = "faithful-r50"
    fpn_scheme: str = "als-light"
    head_scheme: str = "cls-first"
    anchor_free: bool = False
    anchors_per_loc: int = 9
    num_classes: int = 80
    centerness: bool | None = None  # anchor-free default: on
    norm_affine: bool | None = None  # anchor-free default: on
    attention_dim_d: int | None = None  # default max(256 // 16, 32)
    attention_relu: bool = True
    tiny_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    seed: int = 42
    image_size: list[int] = field(default_factory=lambda: [256, 320])
    rounds: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"config key {key!r}: {msg}")

        if self.backbone_profile not in PROFILES:
            bad("backbone_profile", f"expected one of {list(PROFILES)}, got {self.backbone_profile!r}")
        try:
            self.fpn_scheme = FpnScheme.parse(self.fpn_scheme).value
        except ValueError as e:
            bad("fpn_scheme", str(e))
        try:
            self.head_scheme = HeadScheme.parse(self.head_scheme).value
        except ValueError as e:
            bad("head_scheme", str(e))
        for key in ("anchor_free", "attention_relu"):
            if not isinstance(getattr(self, key), bool):
                bad(key, "expected true/false")
        for key in ("centerness", "norm_affine"):
            if getattr(self, key) is not None and not isinstance(getattr(self, key), bool):
                bad(key, "expected true/false")
        for key in ("anchors_per_loc", "num_classes", "rounds"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                bad(key, f"expected a positive integer, got {v!r}")
        if self.rounds < 10:
            bad("rounds", f"at least 10 rounds are required, got {self.rounds}")
        if self.attention_dim_d is not None and (
            not isinstance(self.attention_dim_d, int) or self.attention_dim_d < 1
        ):
            bad("attention_dim_d", f"expected a positive integer, got {self.attention_dim_d!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            bad("seed", f"expected an unsigned 64-bit integer, got {self.seed!r}")
        if (len(self.tiny_channels) != 3
                or not all(isinstance(c, int) and c > 0 for c in self.tiny_channels)):
            bad("tiny_channels", f"expected three positive integers, got {self.tiny_channels!r}")
        if (len(self.image_size) != 2
                or not all(isinstance(c, int) and c > 0 for c in self.image_size)):
            bad("image_size", f"expected [H, W] positive integers, got {self.image_size!r}")
        if min(self.image_size) < 64:
            bad("image_size", "both sides must be at least 64 so C5 can be halved")
        if self.centerness and not self.anchor_free:
            bad("centerness", "only valid with anchor_free = true")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(map(repr, unknown))}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: dict | None = None,
             env: dict | None = None) -> "RunConfig":
        """File values, then ``ZCD_SEED``, then ``overrides`` (already snake_case)."""
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must be a JSON object")
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                data["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- model construction --------------------------------------------------

    def head_config(self) -> HeadConfig:
        if self.anchor_free:
            return HeadConfig.fcos(
                num_classes=self.num_classes,
                centerness=True if self.centerness is None else self.centerness,
                norm_affine=True if self.norm_affine is None else self.norm_affine,
            )
        return HeadConfig.retinanet(
            num_classes=self.num_classes,
            anchors_per_loc=self.anchors_per_loc,
            norm_affine=bool(self.norm_affine),
        )

    def profile(self, name: str | None = None) -> BackboneProfile:
        return BackboneProfile(name or self.backbone_profile, tuple(self.tiny_channels))

    def build(self, profile: str | None = None, fpn_scheme: str | None = None,
              head_scheme: str | None = None) -> Detector:
        """Unmaterialized detector; call ``initialize`` before a forward pass."""
        kw = dict(
            fpn_scheme=fpn_scheme or self.fpn_scheme,
            head_scheme=head_scheme or self.head_scheme,
            head_config=self.head_config(),
            attention_dim=self.attention_dim_d,
            attention_relu=self.attention_relu,
        )
        ctor = Detector.fcos if self.anchor_free else Detector.retinanet
        return ctor(self.profile(profile), **kw)
