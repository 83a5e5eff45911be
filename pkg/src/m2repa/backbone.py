"""Tri-modal velocity networks.

Two input/output paths share one transformer trunk:

* ``pixel-concat``: per-modality patch encoders, channel concat, a fuse MLP;
  at the output a split MLP and per-modality patch decoders.
* ``latent-sum``: a frozen orthogonal 2x2 codec maps every modality to a
  4-channel latent; the per-modality embeddings are summed; RGB keeps its
  original head while depth and mask come from an auxiliary branch (Conv3D
  over noisy latents + denoised RGB, plus trunk hidden states) that starts at
  zero. :func:`extend_from_rgb` grows an RGB-only model into this form.

Frames are ``[B, T, C, H, W]``. The trunk runs global self-attention over all
``T * N`` tokens of a clip and exposes the hidden state after block ``tap_layer``
as ``[B * T, N, d]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .layers import MLP, LayerNorm, Linear, Module
from .numcore import Tensor
from .synthworld import control_dim

VARIANTS = ("pixel-concat", "latent-sum")
MODALITIES = ("rgb", "depth", "mask")


@dataclass(frozen=True)
class BackboneConfig:
    height: int = 16
    width: int = 16
    mask_channels: int = 3
    embed_dim: int = 32
    depth: int = 6
    tap_layer: int = 2
    patch: int = 4
    heads: int = 1
    mlp_ratio: int = 2
    variant: str = "pixel-concat"
    conditioning: str = "pose"
    max_frames: int = 8
    latent_channels: int = 4
    aux_channels: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}; expected one of {VARIANTS}")
        if self.conditioning not in ("pose", "action"):
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if not 1 <= self.tap_layer <= self.depth:
            raise ValueError(f"tap layer {self.tap_layer} outside 1..{self.depth}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        side = self.patch if self.variant == "pixel-concat" else 2 * self.latent_patch
        if self.height % side or self.width % side:
            raise ValueError(f"{self.height}x{self.width} frames do not tile into {side}px patches")

    @property
    def latent_patch(self) -> int:
        # the 2x2 codec halves the grid; keep the token grid equal to the pixel path's
        return self.patch // 2

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def modality_channels(self) -> tuple[int, int, int]:
        return 3, 1, self.mask_channels

    @property
    def cond_dim(self) -> int:
        return control_dim("camera-pose" if self.conditioning == "pose" else "discrete-action")


# ---------------------------------------------------------------------------
# patch helpers (differentiable)


def patchify(x, p: int) -> Tensor:
    """[B, T, C, H, W] -> [B, T, N, C*p*p]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    B, T, C, H, W = x.shape
    y = nc.reshape(x, (B, T, C, H // p, p, W // p, p))
    y = nc.transpose(y, (0, 1, 3, 5, 2, 4, 6))
    return nc.reshape(y, (B, T, (H // p) * (W // p), C * p * p))


def unpatchify(tokens: Tensor, C: int, H: int, W: int, p: int) -> Tensor:
    """[B, T, N, C*p*p] -> [B, T, C, H, W]."""
    B, T = tokens.shape[:2]
    y = nc.reshape(tokens, (B, T, H // p, W // p, C, p, p))
    y = nc.transpose(y, (0, 1, 4, 2, 5, 3, 6))
    return nc.reshape(y, (B, T, C, H, W))


def timestep_features(t: np.ndarray, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape t.shape + (dim,)."""
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------
# trunk


class Block(Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int, rng):
        self.norm1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP([d, mlp_ratio * d, d], rng)
        self._heads = heads

    def attention(self, x: Tensor) -> Tensor:
        B, S, d = x.shape
        h = self._heads
        dh = d // h
        q, k, v = nc.split(self.qkv(x), [d, d, d], axis=-1)
        if h > 1:
            q, k, v = (nc.transpose(nc.reshape(a, (B, S, h, dh)), (0, 2, 1, 3)) for a in (q, k, v))
        scores = nc.matmul(q, nc.transpose(k)) * (1.0 / np.sqrt(dh))
        out = nc.matmul(nc.softmax(scores, axis=-1), v)
        if h > 1:
            out = nc.reshape(nc.transpose(out, (0, 2, 1, 3)), (B, S, d))
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Trunk(Module):
    def __init__(self, cfg: BackboneConfig, rng):
        d = cfg.embed_dim
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm_out = LayerNorm(d)

    def __call__(self, x: Tensor, tap_layer: int) -> tuple[Tensor, Tensor]:
        """x: [B, T, N, d] -> (normed output [B, T, N, d], tap [B*T, N, d])."""
        if not 1 <= tap_layer <= len(self.blocks):
            raise ValueError(f"tap layer {tap_layer} outside 1..{len(self.blocks)}")
        B, T, N, d = x.shape
        h = nc.reshape(x, (B, T * N, d))
        tap = None
        for i, block in enumerate(self.blocks, 1):
            h = block(h)
            if i == tap_layer:
                tap = nc.reshape(h, (B * T, N, d))
        out = nc.reshape(self.norm_out(h), (B, T, N, d))
        return out, tap


class Conditioner(Module):
    """Position, per-frame timestep, and per-frame control embeddings."""

    def __init__(self, cfg: BackboneConfig, rng):
        d = cfg.embed_dim
        self.pos_space = Tensor(rng.normal(0, 0.02, (cfg.n_tokens, d)), requires_grad=True)
        self.pos_time = Tensor(rng.normal(0, 0.02, (cfg.max_frames, 1, d)), requires_grad=True)
        self.t_mlp = MLP([16, d, d], rng)
        self.c_proj = Linear(cfg.cond_dim, d, rng)
        self._max_frames = cfg.max_frames

    def __call__(self, e: Tensor, cond: np.ndarray, t_vec: np.ndarray) -> Tensor:
        B, T, N, d = e.shape
        if T > self._max_frames:
            raise ValueError(f"{T} frames exceed the configured maximum {self._max_frames}")
        t_vec = np.asarray(t_vec)
        if t_vec.shape != (B, T):
            raise ValueError(f"timestep vector shape {t_vec.shape} does not match {B} clips x {T} frames")
        cond = np.asarray(cond, dtype=np.float32)
        if cond.shape[:2] != (B, T) or cond.shape[-1] != self.c_proj.weight.shape[0]:
            raise ValueError(f"conditioning shape {cond.shape} does not match "
                             f"({B}, {T}, {self.c_proj.weight.shape[0]})")
        temb = self.t_mlp(Tensor(timestep_features(t_vec)))
        cemb = self.c_proj(Tensor(cond))
        frame = nc.reshape(temb + cemb, (B, T, 1, d))
        pos_t = nc.take_slice(self.pos_time, (slice(0, T),))
        return e + self.pos_space + pos_t + frame


class TimestepSkip(Module):
    """Per-channel input skip c(t) * x_t with c an affine map of the timestep
    features, zero at init.

    Velocity targets carry the noise sample at full resolution, which a narrow
    patch embedding cannot pass through on its own.
    """

    def __init__(self, channels: int, rng):
        self.coef = Linear(16, channels, rng, init="zero")

    def __call__(self, x_t: Tensor, t_vec) -> Tensor:
        c = self.coef(Tensor(timestep_features(np.asarray(t_vec))))
        return x_t * nc.reshape(c, c.shape + (1, 1))


# ---------------------------------------------------------------------------
# pixel-concat model


class PixelConcatModel(Module):
    def __init__(self, cfg: BackboneConfig):
        cfg.validate()
        if cfg.variant != "pixel-concat":
            raise ValueError("PixelConcatModel needs variant 'pixel-concat'")
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, p = cfg.embed_dim, cfg.patch
        c_rgb, c_d, c_m = cfg.modality_channels
        self.enc_rgb = Linear(c_rgb * p * p, d, rng)
        self.enc_depth = Linear(c_d * p * p, d, rng)
        self.enc_mask = Linear(c_m * p * p, d, rng)
        self.fuse = MLP([3 * d, d, d], rng)
        self.cond = Conditioner(cfg, rng)
        self.trunk = Trunk(cfg, rng)
        self.split = MLP([d, d, 3 * d], rng)
        self.dec_rgb = Linear(d, c_rgb * p * p, rng)
        self.dec_depth = Linear(d, c_d * p * p, rng)
        self.dec_mask = Linear(d, c_m * p * p, rng)
        self.skip = TimestepSkip(self.channels, rng)

    @property
    def config(self) -> BackboneConfig:
        return self._cfg

    @property
    def channels(self) -> int:
        return sum(self._cfg.modality_channels)

    def _check_input(self, x) -> None:
        cfg = self._cfg
        want = (self.channels, cfg.height, cfg.width)
        if tuple(x.shape[2:]) != want:
            raise ValueError(f"input frames {tuple(x.shape[2:])} do not match model {want}")

    # data <-> model space
    def to_model(self, frames: np.ndarray) -> np.ndarray:
        return (2.0 * np.asarray(frames, dtype=np.float32) - 1.0).astype(np.float32)

    def to_data(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) + 1.0) * 0.5).astype(np.float32)

    def encode(self, x_t) -> Tensor:
        self._check_input(x_t)
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        p = self._cfg.patch
        parts = nc.split(x_t, list(self._cfg.modality_channels), axis=2)
        e = [enc(patchify(part, p)) for enc, part in
             zip((self.enc_rgb, self.enc_depth, self.enc_mask), parts)]
        return self.fuse(nc.concat(e, axis=-1))

    def forward(self, e_t: Tensor, cond, t_vec, tap_layer: int | None = None) -> tuple[Tensor, Tensor]:
        h = self.cond(e_t, cond, t_vec)
        return self.trunk(h, tap_layer or self._cfg.tap_layer)

    def decode(self, v_raw: Tensor) -> list[Tensor]:
        cfg = self._cfg
        d = cfg.embed_dim
        if v_raw.shape[2] != cfg.n_tokens:
            raise ValueError(f"{v_raw.shape[2]} tokens do not match the {cfg.n_tokens}-token grid")
        parts = nc.split(self.split(v_raw), [d, d, d], axis=-1)
        return [
            unpatchify(dec(part), c, cfg.height, cfg.width, cfg.patch)
            for dec, part, c in zip((self.dec_rgb, self.dec_depth, self.dec_mask), parts,
                                    cfg.modality_channels)
        ]

    def __call__(self, x_t, cond, t_vec, tap_layer: int | None = None) -> tuple[Tensor, Tensor]:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        v_raw, tap = self.forward(self.encode(x_t), cond, t_vec, tap_layer)
        return nc.concat(self.decode(v_raw), axis=2) + self.skip(x_t, t_vec), tap

    def velocity(self, x, t, cond, frame_index=None) -> np.ndarray:
        with nc.no_grad():
            v, _ = self(x, cond, t)
        return v.data


# ---------------------------------------------------------------------------
# latent-sum model


class OrthoCodec:
    """Frozen per-modality 2x2 patch codec with orthonormal columns.

    ``encode`` projects each 2x2 patch of ``c`` channels (4c values) onto 4
    orthonormal directions; ``decode`` is the transpose, so decode(encode(x))
    is the orthogonal projection of x onto the codec's range.
    """

    def __init__(self, modality_channels: tuple[int, ...], latent_channels: int = 4, seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.modality_channels = tuple(modality_channels)
        self.latent_channels = latent_channels
        self.bases = []
        for c in self.modality_channels:
            n = 4 * c
            if n < latent_channels:
                raise ValueError(f"{c}-channel modality cannot fill {latent_channels} latent channels")
            q, _ = np.linalg.qr(rng.standard_normal((n, latent_channels)))
            self.bases.append(q.astype(np.float32))

    def encode(self, x: np.ndarray) -> np.ndarray:
        """[..., sum(c), H, W] -> [..., K*latent, H/2, W/2]."""
        lead = x.shape[:-3]
        H, W = x.shape[-2:]
        out, start = [], 0
        for c, q in zip(self.modality_channels, self.bases):
            part = x[..., start:start + c, :, :]
            start += c
            pt = part.reshape(lead + (c, H // 2, 2, W // 2, 2))
            pt = np.moveaxis(pt, (-5, -3, -1), (-3, -2, -1)).reshape(lead + (H // 2, W // 2, 4 * c))
            z = pt @ q
            out.append(np.moveaxis(z, -1, -3))
        return np.concatenate(out, axis=-3).astype(np.float32)

    def decode(self, z: np.ndarray) -> np.ndarray:
        lead = z.shape[:-3]
        h, w = z.shape[-2:]
        L = self.latent_channels
        out = []
        for k, (c, q) in enumerate(zip(self.modality_channels, self.bases)):
            zk = np.moveaxis(z[..., k * L:(k + 1) * L, :, :], -3, -1)
            pt = (zk @ q.T).reshape(lead + (h, w, c, 2, 2))
            pt = np.moveaxis(pt, (-5, -4, -3, -2, -1), (-4, -2, -5, -3, -1))
            out.append(pt.reshape(lead + (c, 2 * h, 2 * w)))
        return np.concatenate(out, axis=-3).astype(np.float32)


class GatedDuplicate(Module):
    """A copy of the RGB input projection whose output is scaled by a zero-initialised gate."""

    def __init__(self, source: Linear):
        self.weight = Tensor(source.weight.data.copy(), requires_grad=True)
        self.bias = Tensor(source.bias.data.copy(), requires_grad=True)
        self.gate = Tensor(np.zeros(source.weight.shape[1]), requires_grad=True)

    def __call__(self, x):
        return (nc.matmul(x, self.weight) + self.bias) * self.gate


class AuxBranch(Module):
    """Depth/mask velocity path: Conv3D over [noisy latents; denoised RGB] plus trunk states."""

    def __init__(self, cfg: BackboneConfig, rng):
        L, a, lp = cfg.latent_channels, cfg.aux_channels, cfg.latent_patch
        c_in = 3 * L + L
        self.conv_w = Tensor(np.zeros((a, c_in, 3, 3, 3)), requires_grad=True)
        self.conv_b = Tensor(np.zeros(a), requires_grad=True)
        self.hidden = Linear(cfg.embed_dim, a * lp * lp, rng)
        self.out_depth = Linear(a, L, rng, init="zero")
        self.out_mask = Linear(a, L, rng, init="zero")
        self.skip = TimestepSkip(2 * L, rng)
        self._cfg = cfg

    def local_features(self, z_t: Tensor, denoised_rgb: Tensor) -> Tensor:
        """Conv3D features, [B, T, aux, h, w]."""
        x = nc.concat([z_t, denoised_rgb], axis=2)
        x = nc.transpose(x, (0, 2, 1, 3, 4))
        y = nc.conv3d(x, self.conv_w, self.conv_b)
        return nc.transpose(y, (0, 2, 1, 3, 4))

    def __call__(self, z_t: Tensor, denoised_rgb: Tensor, hidden: Tensor, t_vec) -> tuple[Tensor, Tensor]:
        cfg = self._cfg
        L = cfg.latent_channels
        h, w = cfg.height // 2, cfg.width // 2
        local = self.local_features(z_t, denoised_rgb)
        glob = unpatchify(self.hidden(hidden), cfg.aux_channels, h, w, cfg.latent_patch)
        feat = nc.silu(local + glob)
        feat = nc.transpose(feat, (0, 1, 3, 4, 2))
        v_d = nc.transpose(self.out_depth(feat), (0, 1, 4, 2, 3))
        v_m = nc.transpose(self.out_mask(feat), (0, 1, 4, 2, 3))
        z_dm = nc.take_slice(z_t, (slice(None), slice(None), slice(L, 3 * L)))
        s_d, s_m = nc.split(self.skip(z_dm, t_vec), [L, L], axis=2)
        return v_d + s_d, v_m + s_m


class LatentSumModel(Module):
    def __init__(self, cfg: BackboneConfig, tri_modal: bool = True):
        cfg = replace(cfg, variant="latent-sum")
        cfg.validate()
        if cfg.patch % 2:
            raise ValueError("latent-sum variant needs an even patch size")
        self._cfg = cfg
        self._tri = tri_modal
        rng = np.random.default_rng(cfg.seed)
        L, lp, d = cfg.latent_channels, cfg.latent_patch, cfg.embed_dim
        chans = cfg.modality_channels if tri_modal else cfg.modality_channels[:1]
        self._codec = OrthoCodec(chans, L)
        self.proj_rgb = Linear(L * lp * lp, d, rng)
        self.cond = Conditioner(cfg, rng)
        self.trunk = Trunk(cfg, rng)
        self.head_rgb = Linear(d, L * lp * lp, rng)
        self.skip_rgb = TimestepSkip(L, rng)
        if tri_modal:
            self.proj_depth = GatedDuplicate(self.proj_rgb)
            self.proj_mask = GatedDuplicate(self.proj_rgb)
            self.aux = AuxBranch(cfg, rng)

    @property
    def config(self) -> BackboneConfig:
        return self._cfg

    @property
    def tri_modal(self) -> bool:
        return self._tri

    @property
    def codec(self) -> OrthoCodec:
        return self._codec

    @property
    def channels(self) -> int:
        return self._cfg.latent_channels * (3 if self._tri else 1)

    def to_model(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float32)
        if not self._tri:
            frames = frames[..., :3, :, :]
        return self._codec.encode(2.0 * frames - 1.0)

    def to_data(self, z: np.ndarray) -> np.ndarray:
        return ((self._codec.decode(np.asarray(z, dtype=np.float32)) + 1.0) * 0.5).astype(np.float32)

    def _split_latents(self, z: Tensor) -> list[Tensor]:
        L = self._cfg.latent_channels
        return nc.split(z, [L] * (3 if self._tri else 1), axis=2)

    def encode(self, z_t) -> Tensor:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        cfg = self._cfg
        want = (self.channels, cfg.height // 2, cfg.width // 2)
        if tuple(z_t.shape[2:]) != want:
            raise ValueError(f"latent frames {tuple(z_t.shape[2:])} do not match model {want}")
        lp = cfg.latent_patch
        parts = self._split_latents(z_t)
        e = self.proj_rgb(patchify(parts[0], lp))
        if self._tri:
            e = e + self.proj_depth(patchify(parts[1], lp)) + self.proj_mask(patchify(parts[2], lp))
        return e

    def forward(self, e_t: Tensor, cond, t_vec, tap_layer: int | None = None) -> tuple[Tensor, Tensor]:
        return self.trunk(self.cond(e_t, cond, t_vec), tap_layer or self._cfg.tap_layer)

    def rgb_velocity(self, hidden: Tensor, z_rgb: Tensor, t_vec) -> Tensor:
        cfg = self._cfg
        head = unpatchify(self.head_rgb(hidden), cfg.latent_channels, cfg.height // 2,
                          cfg.width // 2, cfg.latent_patch)
        return head + self.skip_rgb(z_rgb, t_vec)

    def aux_branch(self, z_t, denoised_rgb: Tensor, hidden: Tensor, t_vec) -> tuple[Tensor, Tensor]:
        if not self._tri:
            raise ValueError("aux branch exists only on the tri-modal latent-sum model")
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        return self.aux(z_t, denoised_rgb, hidden, t_vec)

    def __call__(self, z_t, cond, t_vec, tap_layer: int | None = None) -> tuple[Tensor, Tensor]:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        hidden, tap = self.forward(self.encode(z_t), cond, t_vec, tap_layer)
        z_rgb = self._split_latents(z_t)[0]
        v_rgb = self.rgb_velocity(hidden, z_rgb, t_vec)
        if not self._tri:
            return v_rgb, tap
        remaining = (1.0 - np.asarray(t_vec, dtype=np.float32))[:, :, None, None, None]
        denoised = z_rgb + v_rgb * remaining
        v_d, v_m = self.aux(z_t, denoised, hidden, t_vec)
        return nc.concat([v_rgb, v_d, v_m], axis=2), tap

    def velocity(self, x, t, cond, frame_index=None) -> np.ndarray:
        with nc.no_grad():
            v, _ = self(x, cond, t)
        return v.data


def extend_from_rgb(rgb) -> LatentSumModel:
    """Tri-modal latent-sum model that reproduces an RGB-only model's RGB output at init.

    ``rgb`` is an RGB-only :class:`LatentSumModel` or its ``(config, state_dict)``.
    Shared parts are copied; depth/mask embedders duplicate the RGB projection
    behind zero gates; Conv3D and the depth/mask output projectors start at zero.
    """
    if isinstance(rgb, LatentSumModel):
        if rgb.tri_modal:
            raise ValueError("source model is already tri-modal")
        cfg, state = rgb.config, rgb.state_dict()
    else:
        cfg, state = rgb
    base = LatentSumModel(cfg, tri_modal=False)
    base.load_state_dict(state)
    tri = LatentSumModel(cfg, tri_modal=True)
    own = dict(tri.named_parameters())
    for name, arr in state.items():
        own[name].data = arr.copy()
    tri.proj_depth = GatedDuplicate(tri.proj_rgb)
    tri.proj_mask = GatedDuplicate(tri.proj_rgb)
    return tri


def build_model(cfg: BackboneConfig):
    cfg.validate()
    if cfg.variant == "pixel-concat":
        return PixelConcatModel(cfg)
    return LatentSumModel(cfg, tri_modal=True)
