"""Scale-attention feature pyramids and sequential detection heads in numpy."""

from .analysis import (
    BenchReport,
    FlopReport,
    GradCheckReport,
    ParamReport,
    bench,
    bench_pair,
    brute_force_param_count,
    count_flops,
    count_params,
    grad_check,
)
from .config import ConfigError, RunConfig
from .heads import HeadAssembly, HeadConfig, HeadScheme
from .model import Detector
from .pyramid import BackboneProfile, Pyramid, extend_levels, resnet_trunk_param_count
from .safpn import FeaturePyramid, FpnScheme, ScaleAttentionBlock
from .tensor import GraphError, RngSpec, ShapeError

__all__ = [
    "BackboneProfile",
    "BenchReport",
    "ConfigError",
    "Detector",
    "FeaturePyramid",
    "FlopReport",
    "FpnScheme",
    "GradCheckReport",
    "GraphError",
    "HeadAssembly",
    "HeadConfig",
    "HeadScheme",
    "ParamReport",
    "Pyramid",
    "RngSpec",
    "RunConfig",
    "ScaleAttentionBlock",
    "ShapeError",
    "bench",
    "bench_pair",
    "brute_force_param_count",
    "count_flops",
    "count_params",
    "extend_levels",
    "grad_check",
    "resnet_trunk_param_count",
]
