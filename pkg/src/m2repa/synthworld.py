"""Deterministic synthetic scenes rendered as pixel-aligned RGB / depth / mask clips.

A scene is a handful of flat rectangles and discs at distinct depths, seen by a
camera that translates in the image plane. Each frame after the first carries a
control signal (a camera pose or a discrete action) that fully determines how
the scene moves, so ``apply_control`` + ``render_frame`` replays a clip exactly.
The image plane wraps around, so objects never leave the view.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels

POSE = "camera-pose"
ACTION = "discrete-action"
# action alphabet: image-plane shift applied to the world, in pixels
ACTIONS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))
N_ACTIONS = len(ACTIONS)
MOTIONS = ("static", "pan", "random-walk")
SIZES = (16, 32, 64)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 16
    width: int = 16
    mask_channels: int = 3
    n_objects: int = 3
    motion: str = "pan"
    control_kind: str = POSE
    d_max: float = 1.0

    def validate(self) -> None:
        if self.height not in SIZES or self.width not in SIZES:
            raise ValueError(f"height/width must be one of {SIZES}, got {self.height}x{self.width}")
        if self.n_objects < 1:
            raise ValueError(f"object count must be at least 1, got {self.n_objects}")
        if self.n_objects > self.mask_channels:
            raise ValueError(
                f"object count {self.n_objects} exceeds mask channels {self.mask_channels}")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion model {self.motion!r}; expected one of {MOTIONS}")
        if self.control_kind not in (POSE, ACTION):
            raise ValueError(f"unknown control kind {self.control_kind!r}")

    @property
    def channels(self) -> int:
        return 3 + 1 + self.mask_channels


@dataclass(frozen=True)
class ControlSignal:
    kind: str
    pose: tuple[float, ...] | None = None
    action: int | None = None

    def __post_init__(self):
        if self.kind == POSE:
            if self.pose is None or len(self.pose) != 6 or self.action is not None:
                raise ValueError("camera-pose control needs exactly 6 pose floats and no action")
        elif self.kind == ACTION:
            if self.action is None or self.pose is not None:
                raise ValueError("discrete-action control needs an action and no pose")
            if not 0 <= self.action < N_ACTIONS:
                raise ValueError(f"action {self.action} outside alphabet 0..{N_ACTIONS - 1}")
        else:
            raise ValueError(f"unknown control kind {self.kind!r}")

    @property
    def shift(self) -> tuple[float, float]:
        if self.kind == POSE:
            return float(self.pose[0]), float(self.pose[1])
        dx, dy = ACTIONS[self.action]
        return float(dx), float(dy)

    @classmethod
    def identity(cls, kind: str) -> "ControlSignal":
        if kind == POSE:
            return cls(POSE, pose=(0.0,) * 6)
        return cls(ACTION, action=0)

    def features(self) -> np.ndarray:
        """Dense conditioning vector: the pose, or a one-hot action."""
        if self.kind == POSE:
            return np.asarray(self.pose, dtype=np.float32)
        v = np.zeros(N_ACTIONS, dtype=np.float32)
        v[self.action] = 1.0
        return v


def control_dim(kind: str) -> int:
    return 6 if kind == POSE else N_ACTIONS


@dataclass
class SceneState:
    config: SceneConfig
    seed: int
    # rows of (kind, cx, cy, half_a, half_b, depth); kind 0 = rectangle, 1 = disc
    objects: np.ndarray
    colors: np.ndarray
    background: np.ndarray
    velocity: tuple[int, int] = (0, 0)

    def copy(self) -> "SceneState":
        return replace(self, objects=self.objects.copy())


@dataclass(frozen=True)
class TriModalFrame:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


@dataclass
class TriModalClip:
    rgb: np.ndarray  # [T, 3, H, W]
    depth: np.ndarray  # [T, 1, H, W]
    mask: np.ndarray  # [T, C, H, W]
    controls: list[ControlSignal]
    context_count: int = 1
    seed: int | None = None
    states: list[SceneState] = field(default_factory=list, repr=False)

    def __post_init__(self):
        T = self.rgb.shape[0]
        if not (self.depth.shape[0] == self.mask.shape[0] == len(self.controls) == T):
            raise ValueError("frame and control counts disagree")
        if self.rgb.shape[2:] != self.depth.shape[2:] or self.rgb.shape[2:] != self.mask.shape[2:]:
            raise ValueError("modalities are not pixel-aligned")
        if not 1 <= self.context_count < T:
            raise ValueError(f"context_count must be in [1, {T - 1}], got {self.context_count}")

    def __len__(self) -> int:
        return self.rgb.shape[0]

    def frame(self, i: int) -> TriModalFrame:
        return TriModalFrame(self.rgb[i], self.depth[i], self.mask[i])

    def stacked(self) -> np.ndarray:
        """[T, 3+1+C, H, W] in data units."""
        return np.concatenate([self.rgb, self.depth, self.mask], axis=1)

    def control_features(self) -> np.ndarray:
        return np.stack([c.features() for c in self.controls])

    @property
    def kind(self) -> str:
        return self.controls[0].kind


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneState:
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    H, W, n = config.height, config.width, config.n_objects
    levels = np.linspace(0.25, 0.85, 7)
    depths = np.sort(rng.choice(levels, size=n, replace=False))
    objs = np.zeros((n, 6))
    lo, hi = H / 8.0, H / 4.0
    for k in range(n):
        kind = int(rng.integers(0, 2))
        objs[k] = (kind, rng.uniform(0, W), rng.uniform(0, H),
                   rng.uniform(lo, hi), rng.uniform(lo, hi), depths[k])
        if kind == 1:
            objs[k, 4] = objs[k, 3]
    colors = rng.uniform(0.15, 0.95, size=(n, 3))
    background = rng.uniform(0.0, 0.1, size=3)
    if config.motion == "pan":
        if config.control_kind == ACTION:
            velocity = ACTIONS[int(rng.integers(1, N_ACTIONS))]
        else:
            choices = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]
            velocity = choices[int(rng.integers(0, len(choices)))]
    else:
        velocity = (0, 0)
    return SceneState(config, int(seed), objs, colors, background, tuple(velocity))


def apply_control(state: SceneState, control: ControlSignal) -> SceneState:
    """Scene state after the world shifts by the control's image-plane translation."""
    cfg = state.config
    dx, dy = control.shift
    nxt = state.copy()
    nxt.objects[:, 1] = np.mod(nxt.objects[:, 1] + dx, cfg.width)
    nxt.objects[:, 2] = np.mod(nxt.objects[:, 2] + dy, cfg.height)
    return nxt


def render_frame(state: SceneState) -> TriModalFrame:
    cfg = state.config
    H, W = cfg.height, cfg.width
    owner, depth = _kernels.rasterize(state.objects, H, W, cfg.d_max)
    rgb = np.broadcast_to(state.background[:, None, None], (3, H, W)).copy()
    mask = np.zeros((cfg.mask_channels, H, W))
    for k in range(state.objects.shape[0]):
        hit = owner == k
        rgb[:, hit] = state.colors[k][:, None]
        mask[k] = hit
    return TriModalFrame(rgb.astype(np.float32), depth[None].astype(np.float32),
                         mask.astype(np.float32))


def _motion_controls(state: SceneState, T: int) -> list[ControlSignal]:
    cfg = state.config
    kind = cfg.control_kind
    controls = [ControlSignal.identity(kind)]
    walk = np.random.default_rng([state.seed, 0x5CE4E])
    for _ in range(1, T):
        if cfg.motion == "random-walk":
            a = int(walk.integers(0, N_ACTIONS))
            dx, dy = ACTIONS[a]
        else:
            dx, dy = state.velocity
            a = ACTIONS.index((dx, dy)) if (dx, dy) in ACTIONS else None
        if kind == POSE:
            controls.append(ControlSignal(POSE, pose=(float(dx), float(dy), 0.0, 0.0, 0.0, 0.0)))
        else:
            controls.append(ControlSignal(ACTION, action=a))
    return controls


def render_clip(scene: SceneState, T: int, context_count: int = 1) -> TriModalClip:
    if T < 2:
        raise ValueError(f"a clip needs at least 2 frames, got {T}")
    controls = _motion_controls(scene, T)
    state = scene.copy()
    states, frames = [], []
    for i in range(T):
        if i > 0:
            state = apply_control(state, controls[i])
        states.append(state)
        frames.append(render_frame(state))
    return TriModalClip(
        rgb=np.stack([f.rgb for f in frames]),
        depth=np.stack([f.depth for f in frames]),
        mask=np.stack([f.mask for f in frames]),
        controls=controls,
        context_count=context_count,
        seed=scene.seed,
        states=states,
    )


def make_clip(seed: int, config: SceneConfig, T: int, context_count: int = 1) -> TriModalClip:
    return render_clip(generate_scene(seed, config), T, context_count)


def clip_seed(master_seed: int, index: int) -> int:
    """Per-clip seed: first 8 bytes (big-endian) of sha256("m2repa-clip/<master>/<index>"), masked to 63 bits."""
    digest = hashlib.sha256(f"m2repa-clip/{master_seed}/{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


@dataclass(frozen=True)
class Split:
    train: list[int]
    val: list[int]


def dataset(seed: int, n_clips: int, split_ratio: float) -> Split:
    """Disjoint train/val lists of clip seeds derived from one master seed."""
    if n_clips < 2:
        raise ValueError(f"need at least 2 clips to split, got {n_clips}")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    seeds = [clip_seed(seed, i) for i in range(n_clips)]
    order = np.random.default_rng(seed).permutation(n_clips)
    n_train = min(max(int(round(n_clips * split_ratio)), 1), n_clips - 1)
    train = [seeds[i] for i in order[:n_train]]
    val = [seeds[i] for i in order[n_train:]]
    return Split(train, val)


def export_clip(clip: TriModalClip, directory: str | Path) -> Path:
    """Write one tensor file per frame plus ``controls.txt``."""
    from .fileformat import write_tensor

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    stacked = clip.stacked()
    for i in range(len(clip)):
        write_tensor(out / f"frame_{i:04d}.m2t", stacked[i], name="frame")
    lines = []
    for c in clip.controls:
        if c.kind == POSE:
            lines.append(POSE + " " + " ".join(repr(float(v)) for v in c.pose))
        else:
            lines.append(f"{ACTION} {c.action}")
    (out / "controls.txt").write_text("\n".join(lines) + "\n")
    return out


def read_controls(path: str | Path) -> list[ControlSignal]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == POSE and len(parts) == 7:
            out.append(ControlSignal(POSE, pose=tuple(float(v) for v in parts[1:])))
        elif parts[0] == ACTION and len(parts) == 2:
            out.append(ControlSignal(ACTION, action=int(parts[1])))
        else:
            raise ValueError(f"{path}:{lineno}: malformed control line {line!r}")
    return out
