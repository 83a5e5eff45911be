"""Frozen per-modality feature extractors used as alignment targets.

Each mock expert is a fixed-seed random network: a patch embedding of its own
modality's channels followed by residual token-mixing blocks. Nothing here is
ever trained, and features are always computed from clean frames.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileformat import FormatError, read_tensor, write_tensor
from .numcore import Tensor
from .synthworld import TriModalClip

MODALITY_INDEX = {"rgb": 0, "depth": 1, "mask": 2}


@dataclass(frozen=True)
class ExpertSpec:
    modality: str
    seed: int
    feature_dim: int = 24
    n_tokens: int = 16
    patch: int = 4
    layers: int = 2

    def validate(self) -> None:
        if self.modality not in MODALITY_INDEX:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.feature_dim < 4:
            raise ValueError(f"feature dim must be at least 4, got {self.feature_dim}")
        if self.layers < 1:
            raise ValueError("an expert needs at least one mixing block")


class Expert:
    """Frozen extractor. Weights are tensors with ``requires_grad=False``."""

    def __init__(self, spec: ExpertSpec, in_channels: int):
        spec.validate()
        self.spec = spec
        self.in_channels = in_channels
        rng = np.random.default_rng([spec.seed, MODALITY_INDEX[spec.modality], 0xE4])
        D, N = spec.feature_dim, spec.n_tokens
        fan_in = in_channels * spec.patch ** 2
        self.embed = Tensor(rng.normal(0, 1.0 / np.sqrt(fan_in), (fan_in, D)))
        self.embed_bias = Tensor(rng.normal(0, 0.5, D))
        self.blocks = []
        for _ in range(spec.layers):
            mix = rng.normal(0, 1.0 / np.sqrt(N), (N, N))
            w1 = rng.normal(0, 1.0 / np.sqrt(D), (D, 2 * D))
            w2 = rng.normal(0, 1.0 / np.sqrt(2 * D), (2 * D, D))
            self.blocks.append(tuple(Tensor(a) for a in (mix, w1, w2)))

    def weights(self) -> list[Tensor]:
        return [self.embed, self.embed_bias] + [w for blk in self.blocks for w in blk]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.weights():
            h.update(np.ascontiguousarray(w.data).tobytes())
        return h.hexdigest()

    def features(self, frames: np.ndarray) -> np.ndarray:
        """frames: [F, c, H, W] for this expert's modality -> [F, N, D]."""
        F, c, H, W = frames.shape
        p = self.spec.patch
        if c != self.in_channels:
            raise ValueError(f"{self.spec.modality} expert expects {self.in_channels} channels, got {c}")
        n = (H // p) * (W // p)
        if n != self.spec.n_tokens or H % p or W % p:
            raise ValueError(f"frames {H}x{W} give {n} tokens; expert grid has {self.spec.n_tokens}")
        x = frames.astype(np.float32).reshape(F, c, H // p, p, W // p, p)
        x = x.transpose(0, 2, 4, 1, 3, 5).reshape(F, n, c * p * p)
        h = np.tanh(x @ self.embed.data + self.embed_bias.data)
        for mix, w1, w2 in self.blocks:
            h = h + np.tanh(np.einsum("nm,fmd->fnd", mix.data, h))
            mu = h.mean(-1, keepdims=True)
            hn = (h - mu) / np.sqrt(h.var(-1, keepdims=True) + 1e-5)
            h = h + np.tanh(hn @ w1.data) @ w2.data
        return h.astype(np.float32)


def build_expert(spec: ExpertSpec, mask_channels: int = 3) -> Expert:
    in_ch = {"rgb": 3, "depth": 1, "mask": mask_channels}[spec.modality]
    return Expert(spec, in_ch)


def default_experts(seed: int = 0, feature_dim: int = 24, n_tokens: int = 16, patch: int = 4,
                    layers: int = 2, mask_channels: int = 3) -> list[Expert]:
    """RGB, depth and mask experts in that order."""
    return [
        build_expert(ExpertSpec(m, seed + 101 * (i + 1), feature_dim, n_tokens, patch, layers),
                     mask_channels)
        for i, m in enumerate(("rgb", "depth", "mask"))
    ]


def _modality_slice(clip_frames: np.ndarray, modality: str, mask_channels: int) -> np.ndarray:
    if modality == "rgb":
        return clip_frames[:, 0:3]
    if modality == "depth":
        return clip_frames[:, 3:4]
    return clip_frames[:, 4:4 + mask_channels]


def extract(expert: Expert, clip) -> Tensor:
    """Features of the clean frames of one clip (or a stack of clips).

    ``clip`` is a :class:`TriModalClip`, a ``[T, 3+1+C, H, W]`` array, or a
    ``[B, T, 3+1+C, H, W]`` array. Returns a constant ``[B*T, N, D]`` tensor.
    """
    frames = clip.stacked() if isinstance(clip, TriModalClip) else np.asarray(clip)
    if frames.ndim == 5:
        frames = frames.reshape((-1,) + frames.shape[2:])
    mask_ch = frames.shape[1] - 4
    part = _modality_slice(frames, expert.spec.modality, mask_ch)
    return Tensor(expert.features(part))


def export_features(path: str | Path, feats, name: str = "features") -> None:
    arr = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    if arr.ndim != 3:
        raise ValueError(f"feature tensors are [B*T, N, D], got shape {arr.shape}")
    write_tensor(path, arr, name=name)


def ingest_features(path: str | Path, n_tokens: int | None = None,
                    feature_dim: int | None = None) -> Tensor:
    """Load externally computed features ``[B*T, N, D]`` and validate them."""
    _, arr = read_tensor(path)
    if arr.ndim != 3:
        raise FormatError(f"feature file must hold a rank-3 tensor, found rank {arr.ndim}", 0)
    if n_tokens is not None and arr.shape[1] != n_tokens:
        raise ValueError(f"token count mismatch: expected N={n_tokens}, found N={arr.shape[1]}")
    if feature_dim is not None and arr.shape[2] != feature_dim:
        raise ValueError(f"feature dim mismatch: expected D={feature_dim}, found D={arr.shape[2]}")
    if not np.isfinite(arr).all() or not np.isfinite(np.linalg.norm(arr, axis=-1)).all():
        raise ValueError("feature file contains non-finite values")
    return Tensor(arr)
