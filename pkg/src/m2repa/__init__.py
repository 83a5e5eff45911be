"""Tri-modal (RGB, depth, mask) flow-matching video at desk scale, with
decoupled multi-expert representation alignment."""

from .align import ProjectorBank, decouple_loss, linear_cka, m2repa_loss, total_loss
from .backbone import BackboneConfig, build_model, extend_from_rgb
from .config import RunConfig, load_config, parse_config
from .numcore import Tensor, finite_diff_check, grad

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "ProjectorBank", "RunConfig", "Tensor", "build_model", "decouple_loss",
    "extend_from_rgb", "finite_diff_check", "grad", "linear_cka", "load_config", "m2repa_loss",
    "parse_config", "total_loss",
]
