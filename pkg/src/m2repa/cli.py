"""Command-line entry point: ``m2repa {train,eval,ablate,export-features,export-clip}``."""

from __future__ import annotations

import argparse
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import align as al
from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .experts import export_features
from .fileformat import FormatError
from .flowmatch import interpolate
from .synthworld import export_clip, make_clip
from .trainer import (
    METRIC_COLUMNS, VARIANTS, TrainingAborted, ablation_csv, ablation_report, evaluate,
    run_ablation, run_loop, build_experts,
)

log = logging.getLogger("m2repa")

CHECKPOINT_NAME = "checkpoint.m2rp"
EVAL_COLUMNS = ("variant", "horizon") + METRIC_COLUMNS
MODALITIES = ("rgb", "depth", "mask")


class CommandError(Exception):
    pass


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    return out


# --------------------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.variant is not None:
        over["variant"] = args.variant
    if args.steps is not None:
        over["steps"] = args.steps
    cfg = cfg.with_values(train=over)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise CommandError(str(exc)) from None
    out = _out_dir(args.out)

    def progress(step, b):
        if step % 50 == 0 or step == cfg.train.steps - 1:
            log.info("step %d total %.5f fm %.5f align %.5f decouple %.5f",
                     step, b.total, b.fm, b.align, b.decouple)

    rep = run_loop(cfg, progress=progress)
    save_checkpoint(out / CHECKPOINT_NAME, cfg, rep.model, rep.bank, rep.optimizer)
    (out / "loss.csv").write_text(rep.loss_csv(), encoding="utf-8")
    (out / "summary.txt").write_text(rep.summary(), encoding="utf-8")
    print(f"trained {cfg.train.variant} for {cfg.train.steps} steps; "
          f"final total loss {rep.history[-1].total:.6g}; wrote {out}")
    return 0


# --------------------------------------------------------------------------- eval


def metrics_csv(variant: str, rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(EVAL_COLUMNS) + "\n")
    for row in rows:
        cells = [variant, str(int(row["horizon"]))] + [repr(float(row[k])) for k in METRIC_COLUMNS]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    horizons = ["short", "long"] if args.frames == "both" else [args.frames]
    rows = [evaluate(ck.model, ck.config, h) for h in horizons]
    text = metrics_csv(ck.config.train.variant, rows)
    (out / "metrics.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------- ablate


def parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.replace(" ", "").split(",") if s]
    except ValueError:
        raise CommandError(f"--seeds must be a comma-separated list of integers, got {raw!r}") from None
    if not seeds:
        raise CommandError("--seeds needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise CommandError(f"--seeds has duplicates: {raw!r}")
    return seeds


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seeds = parse_seeds(args.seeds)
    out = _out_dir(args.out)
    results = run_ablation(cfg, seeds, out, workers=args.workers)
    (out / "ablation.csv").write_text(ablation_csv(results, seeds), encoding="utf-8")
    report = ablation_report(results, seeds)
    (out / "ablation.txt").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


# --------------------------------------------------------------------------- export-features


def pca_rgb(feats: np.ndarray) -> np.ndarray:
    """Project ``[F, N, D]`` features onto their top 3 principal components,
    scaled jointly over all frames to 0..255. Returns ``[F, N, 3]`` uint8."""
    F, N, D = feats.shape
    X = feats.reshape(F * N, D).astype(np.float64)
    X = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    comps = vt[:3]
    # fix the SVD sign ambiguity so exports are reproducible
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    Y = X @ comps.T
    if Y.shape[1] < 3:
        Y = np.pad(Y, ((0, 0), (0, 3 - Y.shape[1])))
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    img = np.round(255.0 * (Y - lo) / span)
    return img.reshape(F, N, 3).astype(np.uint8)


def pca_grid(feats: np.ndarray, grid: tuple[int, int], patch: int) -> np.ndarray:
    """Frames side by side, each token upscaled to a patch; ``[gh*patch, F*gw*patch, 3]``."""
    gh, gw = grid
    F = feats.shape[0]
    tiles = pca_rgb(feats).reshape(F, gh, gw, 3)
    tiles = tiles.repeat(patch, axis=1).repeat(patch, axis=2)
    return np.concatenate(list(tiles), axis=1)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM export needs an [H, W, 3] image, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not a binary 8-bit PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def export_clip_features(ck, layer: int, clip_seed: int, out: Path, t: float = 0.5) -> dict[str, float]:
    cfg: RunConfig = ck.config
    bcfg = ck.model.config
    if not 1 <= layer <= bcfg.depth:
        raise CommandError(f"tap layer {layer} outside 1..{bcfg.depth}")
    clip = make_clip(clip_seed, cfg.scene_config(), cfg.data.frames, cfg.data.context)
    x1 = ck.model.to_model(clip.stacked())[None]
    noise = np.random.default_rng([clip_seed, 0xFEA7]).standard_normal(x1.shape).astype(np.float32)
    state = interpolate(x1, noise, np.full(x1.shape[:2], t, dtype=np.float32))
    with nc.no_grad():
        _, tap = ck.model(state.x_t, clip.control_features()[None], state.t_vec, tap_layer=layer)
        projected = al.project(ck.bank, tap)
    experts = build_experts(cfg)
    expert_feats = [e.features(_modality(clip.stacked(), m, cfg.data.mask_channels))
                    for e, m in zip(experts, MODALITIES)]

    sets = {"hidden_tap": tap.data}
    sets.update({f"projected_{m}": p.data for m, p in zip(MODALITIES, projected)})
    sets.update({f"expert_{m}": f for m, f in zip(MODALITIES, expert_feats)})
    for name, arr in sets.items():
        export_features(out / f"{name}.m2t", arr, name=name)
        write_ppm(out / f"{name}.ppm", pca_grid(arr, bcfg.grid, bcfg.patch))

    ckas = {}
    for group in ("expert", "projected"):
        for i in range(3):
            for j in range(i + 1, 3):
                a, b = sets[f"{group}_{MODALITIES[i]}"], sets[f"{group}_{MODALITIES[j]}"]
                ckas[f"{group}_{MODALITIES[i]}~{MODALITIES[j]}"] = al.linear_cka(
                    al.flatten_tokens(nc.Tensor(a)), al.flatten_tokens(nc.Tensor(b))).item()
    lines = [f"{k} {v!r}" for k, v in ckas.items()]
    (out / "cka.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ckas


def _modality(frames: np.ndarray, modality: str, C: int) -> np.ndarray:
    return {"rgb": frames[:, 0:3], "depth": frames[:, 3:4], "mask": frames[:, 4:4 + C]}[modality]


def cmd_export_features(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    ckas = export_clip_features(ck, args.layer, args.clip, out, args.t)
    for k, v in ckas.items():
        print(f"CKA {k}: {v:.4f}")
    return 0


def cmd_export_clip(args) -> int:
    cfg = load_config(args.config)
    clip = make_clip(args.clip, cfg.scene_config(), args.frames or cfg.data.frames, cfg.data.context)
    path = export_clip(clip, args.out)
    print(f"wrote {len(clip)} frames to {path}")
    return 0


# --------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2repa", description="Tri-modal flow-matching video toy with "
                                "decoupled multi-expert representation alignment.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one variant and write checkpoint, loss CSV and summary")
    t.add_argument("--config", help="config file (defaults apply when omitted)")
    t.add_argument("--seed", type=int, help="run seed (overrides [train] seed)")
    t.add_argument("--variant", choices=VARIANTS, help="overrides [train] variant")
    t.add_argument("--steps", type=int, help="overrides [train] steps")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="roll out validation clips and write metrics.csv")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--frames", choices=("short", "long", "both"), default="short")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="all seven variants over several seeds")
    a.add_argument("--config")
    a.add_argument("--seeds", default="1,2,3", help='comma-separated, e.g. "1,2,3"')
    a.add_argument("--workers", type=int, help="process count (default: M2REPA_THREADS or cores)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-features", parents=[common], help="dump tap, projected and expert features with PCA images")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--layer", type=int, required=True, help="tap layer (1-based)")
    x.add_argument("--clip", type=int, required=True, help="clip seed")
    x.add_argument("--t", type=float, default=0.5, help="noise level of the probed frames")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)

    c = sub.add_parser("export-clip", parents=[common], help="write one synthetic clip as tensor files plus controls.txt")
    c.add_argument("--config")
    c.add_argument("--clip", type=int, required=True, help="clip seed")
    c.add_argument("--frames", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_export_clip)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: corrupt or unreadable checkpoint: {exc}", file=sys.stderr)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
    except (ConfigError, CommandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
