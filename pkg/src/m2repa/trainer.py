"""Training loop, ablation variants, sweeps and rollout evaluation.

Seed streams: a run seed feeds ``np.random.SeedSequence(seed).spawn(4)``,
whose children drive, in order, batch selection, per-frame timesteps, flow
noise and the CKA row subsample. Data, model init and experts have their own
seeds in the config, so runs that differ only in ``train.seed`` share a split.
"""

from __future__ import annotations

import functools
import hashlib
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import align as al
from . import numcore as nc
from .align import LossBreakdown, ProjectorBank
from .backbone import build_model
from .config import RunConfig
from .experts import Expert, default_experts
from .flowmatch import fm_loss, interpolate, rollout, sample_timesteps
from .metrics import metric_row
from .numcore import NonFiniteError, Tensor
from .synthworld import TriModalClip, dataset, make_clip

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "repa-rgb", "repa-depth", "repa-mask",
            "naive-multi", "m2repa-cos2", "m2repa-cka")
SWEEP_AXES = ("lambda_decouple", "tap-layer", "projector-depth")
METRIC_COLUMNS = ("psnr", "ssim", "abs_rel", "delta1", "miou", "matched_fraction")
LOSS_COLUMNS = ("step", "fm", "align", "decouple", "total")
MIXING_TOL = 1e-6


def active_experts(variant: str) -> list[int]:
    """Indices (0 = rgb, 1 = depth, 2 = mask) of experts entering the alignment loss."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    single = {"baseline": [], "repa-rgb": [0], "repa-depth": [1], "repa-mask": [2]}
    return single.get(variant, [0, 1, 2])


def decouple_kind(variant: str) -> str | None:
    return {"m2repa-cka": "cka", "m2repa-cos2": "cos2"}.get(variant)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, term: str, detail: str = ""):
        self.step, self.term = step, term
        super().__init__(f"non-finite {term} loss at step {step}" + (f": {detail}" if detail else ""))


# --------------------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[Tensor | None]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            g = g.data
            self.m[i] = (b1 * self.m[i] + (1 - b1) * g).astype(p.dtype)
            self.v[i] = (b2 * self.v[i] + (1 - b2) * g * g).astype(p.dtype)
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.asarray(state[f"m.{i}"], dtype=p.dtype).reshape(p.shape)
            self.v[i] = np.asarray(state[f"v.{i}"], dtype=p.dtype).reshape(p.shape)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads: Sequence[Tensor | None]) -> None:
        self.t += 1
        for p, g in zip(self.params, grads):
            if g is not None:
                p.data = (p.data - self.lr * g.data).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {"t": np.array([self.t], dtype=np.float32)}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])


def make_optimizer(name: str, params: Sequence[Tensor], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------------------- data


@dataclass
class PreparedData:
    train: list[TriModalClip]
    val_seeds: list[int]
    frames: np.ndarray            # [n_train, T, 3+1+C, H, W] clean data-space frames
    controls: np.ndarray          # [n_train, T, cond_dim]
    features: list[np.ndarray]    # per expert, [n_train, T, N, D]
    experts: list[Expert]


def build_experts(cfg: RunConfig) -> list[Expert]:
    a, d, m = cfg.align, cfg.data, cfg.model
    n_tokens = (d.height // m.patch) * (d.width // m.patch)
    return default_experts(seed=a.expert_seed, feature_dim=a.expert_dim, n_tokens=n_tokens,
                           patch=m.patch, layers=a.expert_layers, mask_channels=d.mask_channels)


@functools.lru_cache(maxsize=8)
def _prepare(data_sec, align_sec, model_patch: int, conditioning: str) -> PreparedData:
    from .config import ModelSection
    cfg = RunConfig(data=data_sec, align=align_sec,
                    model=ModelSection(patch=model_patch, conditioning=conditioning))
    scene = cfg.scene_config()
    split = dataset(data_sec.seed, data_sec.n_clips, data_sec.split_ratio)
    clips = [make_clip(s, scene, data_sec.frames, data_sec.context) for s in split.train]
    frames = np.stack([c.stacked() for c in clips])
    controls = np.stack([c.control_features() for c in clips]).astype(np.float32)
    experts = build_experts(cfg)
    n, T = frames.shape[:2]
    feats = []
    for e in experts:
        f = e.features(_expert_input(frames.reshape((n * T,) + frames.shape[2:]), e))
        feats.append(f.reshape((n, T) + f.shape[1:]))
    return PreparedData(clips, list(split.val), frames, controls, feats, experts)


def _expert_input(frames: np.ndarray, expert: Expert) -> np.ndarray:
    C = frames.shape[1] - 4
    return {"rgb": frames[:, 0:3], "depth": frames[:, 3:4], "mask": frames[:, 4:4 + C]}[expert.spec.modality]


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Training clips and their clean expert features, cached per data/expert settings."""
    return _prepare(cfg.data, cfg.align, cfg.model.patch, cfg.model.conditioning)


@dataclass
class Batch:
    x1: np.ndarray               # [B, T, C, ...] clean frames in model space
    cond: np.ndarray             # [B, T, cond_dim]
    targets: list[np.ndarray]    # per expert, [B*T, N, D]


def make_batch(model, data: PreparedData, idx: np.ndarray) -> Batch:
    x1 = model.to_model(data.frames[idx])
    targets = [f[idx].reshape((-1,) + f.shape[2:]) for f in data.features]
    return Batch(x1=x1, cond=data.controls[idx], targets=targets)


# --------------------------------------------------------------------------- one step


@dataclass
class StepStreams:
    batch: np.random.Generator
    timesteps: np.random.Generator
    noise: np.random.Generator
    cka: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "StepStreams":
        kids = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(k) for k in kids))


def compute_losses(model, bank: ProjectorBank, batch: Batch, cfg: RunConfig,
                   streams: StepStreams, step: int = 0) -> tuple[LossBreakdown, float]:
    """Forward pass and loss terms for one batch. Returns the breakdown and the
    flow-state mixing error of the noised inputs."""
    variant = cfg.train.variant
    B, T = batch.x1.shape[:2]
    t_vec = sample_timesteps(T, cfg.train.timestep_mode, streams.timesteps, batch=B)
    x0 = streams.noise.standard_normal(batch.x1.shape).astype(np.float32)
    state = interpolate(batch.x1, x0, t_vec)
    mixing = state.mixing_error()
    if mixing > MIXING_TOL:
        raise AssertionError(f"step {step}: noised inputs deviate from the interpolant by {mixing:.3g}")

    def term(name, fn):
        try:
            val = fn()
        except NonFiniteError as exc:
            raise TrainingAborted(step, name, str(exc)) from None
        if not np.isfinite(val.data).all():
            raise TrainingAborted(step, name)
        return val

    try:
        v_pred, tap = model(state.x_t, batch.cond, state.t_vec)
    except NonFiniteError as exc:
        raise TrainingAborted(step, "fm", str(exc)) from None
    fm = term("fm", lambda: fm_loss(v_pred, state.v_target))
    active = active_experts(variant)
    align_t, dec_t = 0.0, 0.0
    projected = []
    if active:
        projected = al.project(bank, tap, active)
        targets = [batch.targets[k] for k in active]
        align_t = term("align", lambda: al.m2repa_loss(projected, targets))
    kind = decouple_kind(variant)
    if kind == "cka":
        dec_t = term("decouple", lambda: al.decouple_loss(projected, cfg.align.cka_max_rows, streams.cka))
    elif kind == "cos2":
        dec_t = term("decouple", lambda: al.cos2_decouple_loss(projected))
    la = cfg.align.lambda_align if active else 0.0
    ld = cfg.align.lambda_decouple if kind else 0.0
    breakdown = al.total_loss(fm, align_t, dec_t, la, ld)
    if not np.isfinite(breakdown.total):
        raise TrainingAborted(step, "total")
    return breakdown, mixing


def trainable_parameters(model, bank: ProjectorBank) -> list[Tensor]:
    return model.parameters() + bank.parameters()


def run_step(model, bank: ProjectorBank, batch: Batch, cfg: RunConfig, optimizer,
             streams: StepStreams, step: int = 0) -> tuple[LossBreakdown, float]:
    """One optimizer update on the backbone and projectors; experts stay frozen."""
    if batch.x1.shape[0] == 0:
        raise ValueError("empty batch")
    breakdown, mixing = compute_losses(model, bank, batch, cfg, streams, step)
    params = optimizer.params
    grads = nc.grad(breakdown.tensor, params, allow_unused=True)
    optimizer.step(grads)
    breakdown.tensor = None
    return breakdown, mixing


# --------------------------------------------------------------------------- run loop


@functools.lru_cache(maxsize=1)
def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunReport:
    config: RunConfig
    history: list[LossBreakdown]
    wall_clock: float
    code_hash: str
    max_mixing_error: float = 0.0
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    proj_cka: float | None = None
    model: object = field(default=None, repr=False)
    bank: ProjectorBank | None = field(default=None, repr=False)
    optimizer: object = field(default=None, repr=False)

    def loss_csv(self) -> str:
        return loss_csv(self.history)

    def summary(self) -> str:
        cfg = self.config
        active = active_experts(cfg.train.variant)
        kind = decouple_kind(cfg.train.variant)
        names = ["rgb", "depth", "mask"]
        lines = [
            f"variant: {cfg.train.variant}",
            f"steps: {len(self.history)}",
            f"align: {'enabled (' + ', '.join(names[k] for k in active) + ')' if active else 'disabled'}",
            f"decouple: {('enabled (' + kind + ')') if kind else 'disabled'}",
            f"lambda_align: {cfg.align.lambda_align if active else 0.0}",
            f"lambda_decouple: {cfg.align.lambda_decouple if kind else 0.0}",
            f"first_total: {self.history[0].total!r}",
            f"final_total: {self.history[-1].total!r}",
            f"max_mixing_error: {self.max_mixing_error:.3g}",
            f"wall_clock_s: {self.wall_clock:.2f}",
            f"code_hash: {self.code_hash}",
        ]
        if self.proj_cka is not None:
            lines.append(f"proj_cka: {self.proj_cka!r}")
        for horizon, row in self.metrics.items():
            lines.append(f"metrics[{horizon}]: " + ", ".join(f"{k}={v:.6g}" for k, v in row.items()))
        lines.append("")
        lines.append("# config")
        lines.append(cfg.to_text())
        return "\n".join(lines)


def loss_csv(history: Sequence[LossBreakdown]) -> str:
    buf = io.StringIO()
    buf.write(",".join(LOSS_COLUMNS) + "\n")
    for i, b in enumerate(history):
        buf.write(f"{i},{b.fm!r},{b.align!r},{b.decouple!r},{b.total!r}\n")
    return buf.getvalue()


def init_run(cfg: RunConfig):
    """Fresh model, projector bank and optimizer for a config."""
    model = build_model(cfg.backbone_config())
    bank = ProjectorBank(cfg.model.embed_dim, [cfg.align.expert_dim] * 3,
                         depth=cfg.train.projector_depth, seed=cfg.model.seed)
    optimizer = make_optimizer(cfg.train.optimizer, trainable_parameters(model, bank), cfg.train.lr)
    return model, bank, optimizer


def run_loop(cfg: RunConfig, data: PreparedData | None = None, progress=None) -> RunReport:
    cfg.validate()
    data = data or prepare_data(cfg)
    model, bank, optimizer = init_run(cfg)
    checks = [e.checksum() for e in data.experts]
    streams = StepStreams.from_seed(cfg.train.seed)
    n = len(data.train)
    history, worst = [], 0.0
    start = time.perf_counter()
    for step in range(cfg.train.steps):
        idx = streams.batch.choice(n, size=cfg.train.batch, replace=cfg.train.batch > n)
        batch = make_batch(model, data, idx)
        b, mixing = run_step(model, bank, batch, cfg, optimizer, streams, step)
        history.append(b)
        worst = max(worst, mixing)
        if progress is not None:
            progress(step, b)
    wall = time.perf_counter() - start
    if [e.checksum() for e in data.experts] != checks:
        raise AssertionError("expert weights changed during training")
    return RunReport(cfg, history, wall, code_hash(), worst, model=model, bank=bank, optimizer=optimizer)


# --------------------------------------------------------------------------- evaluation


class OracleVelocity:
    """Planted model returning (x1 - x) / (1 - t) toward known clean frames.

    One Euler step from t to t + dt moves x a fraction dt / (1 - t) of the way to
    x1, so the final step of any schedule lands on x1.
    """

    def __init__(self, clean: np.ndarray):
        self.clean = np.asarray(clean, dtype=np.float32)
        self.channels = self.clean.shape[1]

    def to_model(self, frames):
        return np.asarray(frames, dtype=np.float32)

    def to_data(self, x):
        return np.asarray(x, dtype=np.float32)

    def velocity(self, x, t, cond, frame_index=None) -> np.ndarray:
        target = self.clean[np.asarray(frame_index)][None]
        remaining = (1.0 - np.asarray(t, dtype=np.float32))[:, :, None, None, None]
        safe = np.where(remaining > 0, remaining, 1.0)
        return np.where(remaining > 0, (target - x) / safe, 0.0).astype(np.float32)


def val_clip(cfg: RunConfig, seed: int, horizon: int) -> TriModalClip:
    return make_clip(seed, cfg.scene_config(), cfg.data.context + horizon, cfg.data.context)


def evaluate(model, cfg: RunConfig, horizon: int | str = "short", val_seeds: Sequence[int] | None = None,
             model_factory=None) -> dict[str, float]:
    """Roll out each validation clip and average the frame metrics over clips.

    Context frames are excluded from every metric. ``model_factory(clip)``
    replaces ``model`` per clip (used for planted oracles).
    """
    if isinstance(horizon, str):
        horizon = {"short": cfg.eval.short, "long": cfg.eval.long}.get(horizon) or _bad_horizon(horizon)
    if horizon > cfg.eval.max_horizon:
        raise ValueError(f"horizon {horizon} exceeds configured maximum {cfg.eval.max_horizon}")
    if val_seeds is None:
        val_seeds = prepare_split_val(cfg)[: cfg.eval.n_clips]
    n_ctx = cfg.data.context
    rows = []
    for i, s in enumerate(val_seeds):
        clip = val_clip(cfg, s, horizon)
        gt = clip.stacked()
        m = model_factory(clip) if model_factory else model
        ctx = m.to_model(gt[:n_ctx])
        gen = rollout(m, ctx, clip.control_features().astype(np.float32), horizon,
                      steps_per_frame=cfg.eval.euler_steps, window=cfg.eval.window,
                      seed=cfg.eval.seed + i, max_horizon=cfg.eval.max_horizon)
        pred = m.to_data(gen)
        pred[:n_ctx] = gt[:n_ctx]
        rows.append(metric_row(pred, gt, n_ctx, cfg.data.mask_channels))
    out = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_COLUMNS}
    out["horizon"] = horizon
    return out


def _bad_horizon(h):
    raise ValueError(f"unknown horizon {h!r}; expected 'short', 'long' or an integer")


def prepare_split_val(cfg: RunConfig) -> list[int]:
    return dataset(cfg.data.seed, cfg.data.n_clips, cfg.data.split_ratio).val


def projected_cka(model, bank: ProjectorBank, cfg: RunConfig, data: PreparedData | None = None,
                  n_clips: int = 8, t: float = 0.5) -> float:
    """Mean pairwise linear CKA among the three projected features on a fixed probe batch."""
    data = data or prepare_data(cfg)
    idx = np.arange(min(n_clips, len(data.train)))
    batch = make_batch(model, data, idx)
    rng = np.random.default_rng([cfg.train.seed, 0xC4A])
    x0 = rng.standard_normal(batch.x1.shape).astype(np.float32)
    t_vec = np.full(batch.x1.shape[:2], t, dtype=np.float32)
    state = interpolate(batch.x1, x0, t_vec)
    with nc.no_grad():
        _, tap = model(state.x_t, batch.cond, state.t_vec)
        feats = al.project(bank, tap)
        return al.decouple_loss(feats, cfg.align.cka_max_rows).item()


# --------------------------------------------------------------------------- sweeps


def _apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "lambda_decouple":
        return cfg.with_values(align={"lambda_decouple": float(value)})
    if axis == "tap-layer":
        return cfg.with_values(model={"tap_layer": int(value)})
    if axis == "projector-depth":
        return cfg.with_values(train={"projector_depth": int(value)})
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


def sweep(axis: str, values: Sequence, base: RunConfig, evaluate_runs: bool = True) -> list[RunReport]:
    """One seeded run per value on the shared split."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if len(values) == 0:
        raise ValueError("sweep needs at least one value")
    reports = []
    for v in values:
        cfg = _apply_axis(base, axis, v)
        cfg.validate()
        rep = run_loop(cfg)
        if evaluate_runs:
            rep.metrics["short"] = evaluate(rep.model, cfg, "short")
            rep.proj_cka = projected_cka(rep.model, rep.bank, cfg)
        reports.append(rep)
    return reports


def sweep_csv(axis: str, values: Sequence, reports: Sequence[RunReport]) -> str:
    cols = ["value", "final_total", "proj_cka"] + list(METRIC_COLUMNS)
    buf = io.StringIO()
    buf.write(axis + "," + ",".join(cols[1:]) + "\n")
    for v, r in zip(values, reports):
        m = r.metrics.get("short", {})
        cells = [repr(v), repr(r.history[-1].total), repr(r.proj_cka)]
        cells += [repr(m[c]) if c in m else "" for c in METRIC_COLUMNS]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


# --------------------------------------------------------------------------- ablation


ABLATION_COLUMNS = METRIC_COLUMNS + ("proj_cka",)


class AblationError(RuntimeError):
    def __init__(self, variant: str, seed: int, detail: str):
        self.variant, self.seed = variant, seed
        super().__init__(f"ablation run failed: variant {variant}, seed {seed}: {detail}")


def worker_cap() -> int:
    """Worker limit from ``M2REPA_THREADS`` (default: logical cores)."""
    raw = os.environ.get("M2REPA_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"M2REPA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"M2REPA_THREADS must be a positive integer, got {raw!r}")
    return n


def ablation_job(cfg: RunConfig, variant: str, seed: int, out_dir: str | None = None) -> dict[str, float]:
    """Train one variant with one seed, then evaluate it. Safe to run in a worker process."""
    run_cfg = cfg.with_values(train={"variant": variant, "seed": seed}, model={"seed": seed})
    try:
        rep = run_loop(run_cfg)
        rep.metrics["short"] = evaluate(rep.model, run_cfg, "short")
        rep.proj_cka = projected_cka(rep.model, rep.bank, run_cfg)
    except Exception as exc:
        raise AblationError(variant, seed, f"{type(exc).__name__}: {exc}") from exc
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "loss.csv").write_text(rep.loss_csv())
        (d / "summary.txt").write_text(rep.summary())
    row = {k: rep.metrics["short"][k] for k in METRIC_COLUMNS}
    row["proj_cka"] = rep.proj_cka
    return row


def run_ablation(cfg: RunConfig, seeds: Sequence[int], out_dir: str | Path | None = None,
                 workers: int | None = None) -> dict[str, dict[int, dict[str, float]]]:
    """All seven variants for every seed on the shared split.

    Returns ``results[variant][seed] -> metric row``. The first failing run
    aborts the suite with an :class:`AblationError` naming it.
    """
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    cfg.validate()
    jobs = [(v, s) for v in VARIANTS for s in seeds]
    dirs = {j: (str(Path(out_dir) / "runs" / f"{j[0]}-seed{j[1]}") if out_dir else None) for j in jobs}
    workers = min(workers or worker_cap(), len(jobs))
    results: dict[str, dict[int, dict[str, float]]] = {v: {} for v in VARIANTS}
    if workers <= 1:
        for v, s in jobs:
            results[v][s] = ablation_job(cfg, v, s, dirs[(v, s)])
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(ablation_job, cfg, v, s, dirs[(v, s)]): (v, s) for v, s in jobs}
        try:
            for fut in as_completed(futures):
                v, s = futures[fut]
                results[v][s] = fut.result()
        except BaseException:
            for f in futures:
                f.cancel()
            raise
    return results


def ablation_csv(results: dict[str, dict[int, dict[str, float]]], seeds: Sequence[int]) -> str:
    """Rows = variants; per metric one column per seed followed by the mean."""
    cols = ["variant"]
    for m in ABLATION_COLUMNS:
        cols += [f"{m}_seed{s}" for s in seeds] + [f"{m}_mean"]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for v in VARIANTS:
        cells = [v]
        for m in ABLATION_COLUMNS:
            vals = [results[v][s][m] for s in seeds]
            cells += [repr(float(x)) for x in vals] + [repr(float(np.mean(vals)))]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def ablation_means(results, seeds) -> dict[str, dict[str, float]]:
    return {v: {m: float(np.mean([results[v][s][m] for s in seeds])) for m in ABLATION_COLUMNS}
            for v in VARIANTS}


# metric direction: +1 when higher is better
_BETTER = {"psnr": 1, "ssim": 1, "abs_rel": -1, "delta1": 1, "miou": 1, "matched_fraction": 1}


def ablation_report(results, seeds) -> str:
    """Plain-text table of seed means plus the trend checks (reported, never gated)."""
    means = ablation_means(results, seeds)
    head = f"{'variant':<12}" + "".join(f"{m:>18}" for m in ABLATION_COLUMNS)
    lines = [f"seeds: {', '.join(str(s) for s in seeds)}", head, "-" * len(head)]
    for v in VARIANTS:
        lines.append(f"{v:<12}" + "".join(f"{means[v][m]:>18.6g}" for m in ABLATION_COLUMNS))
    lines.append("")
    cka, naive = means["m2repa-cka"]["proj_cka"], means["naive-multi"]["proj_cka"]
    verdict = "yes" if cka < naive else "no"
    lines.append(f"projected-feature CKA lower with decoupling than naive-multi: {verdict} "
                 f"({cka:.6g} vs {naive:.6g})")
    for m, sign in _BETTER.items():
        a, b = means["m2repa-cka"][m], means["baseline"][m]
        better = sign * (a - b) > 0
        lines.append(f"trend {m}: m2repa-cka {'beats' if better else 'does not beat'} baseline "
                     f"({a:.6g} vs {b:.6g})")
    return "\n".join(lines) + "\n"
