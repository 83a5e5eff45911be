"""Run configuration and its plain-text file format.

A config file has ``[model]``, ``[train]``, ``[data]``, ``[align]`` and
``[eval]`` sections of ``key = value`` lines. ``#`` and ``;`` start comments.
Every key below is optional and falls back to its default; unknown sections
or keys are errors that name the offending line.

[model]
  backbone          pixel-concat | latent-sum            (pixel-concat)
  embed_dim         token width d                        (32)
  depth             transformer blocks L                 (6)
  tap_layer         block whose output is aligned        (2)
  patch             pixel patch size                     (4)
  heads             attention heads                      (1)
  mlp_ratio         block MLP expansion                  (2)
  conditioning      pose | action                        (pose)
  seed              parameter init seed                  (0)

[train]
  variant           baseline | repa-rgb | repa-depth | repa-mask |
                    naive-multi | m2repa-cos2 | m2repa-cka (m2repa-cka)
  steps             optimizer steps                      (500)
  batch             clips per step                       (8)
  lr                learning rate                        (1e-3; published runs used 8e-6)
  seed              run seed for noise, timesteps, batches (1)
  optimizer         adam | sgd                           (adam)
  projector_depth   linear layers per projector          (3)
  timestep_mode     uniform-iid | shared                 (uniform-iid)

[data]
  seed              dataset seed                         (0)
  n_clips           clips rendered before the split      (64)
  split_ratio       train fraction                       (0.875)
  frames            frames per training clip             (8)
  context           clean context frames                 (1)
  motion            static | pan | random-walk           (pan)
  n_objects         objects per scene                    (3)
  height, width     frame size in pixels                 (16, 16)
  mask_channels     mask channels C                      (3)

[align]
  lambda_align      alignment weight                     (0.5)
  lambda_decouple   decoupling weight                    (0.05)
  expert_dim        expert feature width D               (24)
  expert_layers     expert mixing blocks                 (2)
  expert_seed       expert weight seed                   (0)
  cka_max_rows      row cap for the CKA estimate         (1024)

[eval]
  short             short-horizon rollout length         (8)
  long              long-horizon rollout length          (40)
  euler_steps       Euler steps per generated frame      (8)
  window            frames per generation window         (8)
  max_horizon       longest rollout accepted             (200)
  n_clips           validation clips evaluated           (4)
  seed              sampling noise seed                  (0)
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .synthworld import MOTIONS, SIZES, SceneConfig

TRAIN_VARIANTS = ("baseline", "repa-rgb", "repa-depth", "repa-mask",
                  "naive-multi", "m2repa-cos2", "m2repa-cka")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path: str | None = None):
        self.line = line
        where = ""
        if path:
            where = f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + msg)


@dataclass(frozen=True)
class ModelSection:
    backbone: str = "pixel-concat"
    embed_dim: int = 32
    depth: int = 6
    tap_layer: int = 2
    patch: int = 4
    heads: int = 1
    mlp_ratio: int = 2
    conditioning: str = "pose"
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    variant: str = "m2repa-cka"
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 1
    optimizer: str = "adam"
    projector_depth: int = 3
    timestep_mode: str = "uniform-iid"


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    n_clips: int = 64
    split_ratio: float = 0.875
    frames: int = 8
    context: int = 1
    motion: str = "pan"
    n_objects: int = 3
    height: int = 16
    width: int = 16
    mask_channels: int = 3


@dataclass(frozen=True)
class AlignSection:
    lambda_align: float = 0.5
    lambda_decouple: float = 0.05
    expert_dim: int = 24
    expert_layers: int = 2
    expert_seed: int = 0
    cka_max_rows: int = 1024


@dataclass(frozen=True)
class EvalSection:
    short: int = 8
    long: int = 40
    euler_steps: int = 8
    window: int = 8
    max_horizon: int = 200
    n_clips: int = 4
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    align: AlignSection = field(default_factory=AlignSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        t, d, a, e = self.train, self.data, self.align, self.eval
        if t.variant not in TRAIN_VARIANTS:
            raise ConfigError(f"unknown variant {t.variant!r}; expected one of {', '.join(TRAIN_VARIANTS)}")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {t.optimizer!r}")
        if t.steps < 1 or t.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if t.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {t.lr}")
        if t.projector_depth < 1:
            raise ConfigError("projector depth must be at least 1")
        if d.motion not in MOTIONS:
            raise ConfigError(f"unknown motion {d.motion!r}")
        if d.height not in SIZES or d.width not in SIZES:
            raise ConfigError(f"frame size must be one of {SIZES}, got {d.height}x{d.width}")
        if not 1 <= d.context < d.frames:
            raise ConfigError(f"context {d.context} must be at least 1 and below frames {d.frames}")
        if d.n_clips < 2 or not 0 < d.split_ratio < 1:
            raise ConfigError("need at least 2 clips and a split ratio in (0, 1)")
        if a.lambda_align < 0 or a.lambda_decouple < 0:
            raise ConfigError("loss weights must be non-negative")
        if e.window <= d.context or e.window > d.frames:
            raise ConfigError(f"eval window {e.window} must exceed context and fit {d.frames} frames")
        if e.short > e.max_horizon or e.long > e.max_horizon:
            raise ConfigError(f"rollout horizons exceed max_horizon {e.max_horizon}")
        try:
            self.backbone_config().validate()
            self.scene_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def backbone_config(self) -> BackboneConfig:
        m, d = self.model, self.data
        return BackboneConfig(
            height=d.height, width=d.width, mask_channels=d.mask_channels,
            embed_dim=m.embed_dim, depth=m.depth, tap_layer=m.tap_layer, patch=m.patch,
            heads=m.heads, mlp_ratio=m.mlp_ratio, variant=m.backbone,
            conditioning=m.conditioning, max_frames=d.frames, seed=m.seed,
        )

    def scene_config(self) -> SceneConfig:
        d = self.data
        kind = "camera-pose" if self.model.conditioning == "pose" else "discrete-action"
        return SceneConfig(height=d.height, width=d.width, mask_channels=d.mask_channels,
                           n_objects=d.n_objects, motion=d.motion, control_kind=kind)

    def with_values(self, **sections) -> "RunConfig":
        """``cfg.with_values(train={"steps": 10})`` returns an updated copy."""
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for f in fields(getattr(self, sec.name)):
                lines.append(f"{f.name} = {getattr(getattr(self, sec.name), f.name)!s}")
            lines.append("")
        return "\n".join(lines)


_SECTION_TYPES = {"model": ModelSection, "train": TrainSection, "data": DataSection,
                  "align": AlignSection, "eval": EvalSection}
_HEADER = re.compile(r"^\[\s*([A-Za-z_]+)\s*\]$")


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, path: str | None = None) -> RunConfig:
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTION_TYPES}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = re.split(r"\s[#;]|^[#;]", line, maxsplit=1)[0].strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m:
            section = m.group(1)
            if section not in _SECTION_TYPES:
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any section", lineno, path)
        key, raw = (s.strip() for s in line.split("=", 1))
        defaults = _SECTION_TYPES[section]()
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno, path)
        try:
            values[section][key] = _coerce(raw, getattr(defaults, key))
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {section}.{key}", lineno, path) from None
    cfg = RunConfig(**{name: cls(**values[name]) for name, cls in _SECTION_TYPES.items()})
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), None, path) from None
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from None
    return parse_config(text, str(p))
