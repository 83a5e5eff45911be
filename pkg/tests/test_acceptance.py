"""The ten primary acceptance criteria, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import time

import numpy as np
import pytest

from m2repa import align as al
from m2repa import metrics as mt
from m2repa import numcore as nc
from m2repa.backbone import BackboneConfig, LatentSumModel, extend_from_rgb
from m2repa.checkpoint import load_checkpoint, save_checkpoint
from m2repa.cli import CHECKPOINT_NAME, main
from m2repa.config import RunConfig
from m2repa.flowmatch import euler_step, interpolate, rollout
from m2repa.numcore import Tensor
from m2repa.synthworld import SceneConfig, make_clip
from m2repa.trainer import OracleVelocity, run_loop

from pathlib import Path

from gradcheck_util import TinySetup
from oracles import brute_force_best_miou, cosine_alignment, hsic_cka, iou_matrix

FAST_CFG = Path(__file__).parent / "data" / "ablate_fast.cfg"


def cka64(X, Y):
    with nc.precision(np.float64):
        return al.linear_cka(Tensor(X), Tensor(Y)).item()


# ---------------------------------------------------------------- 1


def test_c1_gradient_correctness(acceptance):
    start = time.perf_counter()
    s = TinySetup(seed=0)
    rng = np.random.default_rng(0)
    worst = {}
    for term in ("fm", "align", "decouple", "cos2", "total"):
        with nc.precision(np.float64):
            loss = s.loss(term)
            params = [p for _, _, p in s.named()]
            grads = nc.grad(loss, params, allow_unused=True)
        w = 0.0
        for (owner, name, p), g in zip(s.named(), grads):
            # a missing gradient claims the loss ignores p; one coordinate confirms it numerically
            k = 1 if g is None else min(p.size, 3)
            coords = rng.choice(p.size, size=k, replace=False)
            w = max(w, s.check(term, owner, name, coords))
        worst[term] = w
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s"
    acceptance(1, ok, detail)


# ---------------------------------------------------------------- 2


def test_c2_cka_invariances(acceptance):
    rng = np.random.default_rng(2)
    rot = scale = oracle = 0.0
    self_min, self_max = 2.0, -1.0
    for _ in range(100):
        X = rng.normal(size=(32, 8))
        Y = rng.normal(size=(32, 12))
        Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        a, b = rng.uniform(0.1, 10, size=2)
        base = cka64(X, Y)
        rot = max(rot, abs(cka64(X @ Q, Y) - base))
        scale = max(scale, abs(cka64(a * X, b * Y) - base))
        oracle = max(oracle, abs(base - hsic_cka(X, Y)))
        c = cka64(X, X)
        self_min, self_max = min(self_min, c), max(self_max, c)
    ok = rot < 1e-5 and scale < 1e-5 and oracle < 1e-5 and 1 - 1e-6 <= self_min and self_max <= 1 + 1e-6
    acceptance(2, ok, f"orth {rot:.1e}, scale {scale:.1e}, HSIC {oracle:.1e}, "
                      f"self in [{self_min:.9f}, {self_max:.9f}]")


# ---------------------------------------------------------------- 3


def test_c3_alignment_anchors(acceptance):
    rng = np.random.default_rng(3)
    y = rng.normal(size=(4, 16, 6))
    with nc.precision(np.float64):
        identical = al.m2repa_loss([Tensor(y)], [y]).item()
        a = np.zeros((4, 16, 6))
        b = np.zeros((4, 16, 6))
        a[..., :3] = rng.normal(size=(4, 16, 3))
        b[..., 3:] = rng.normal(size=(4, 16, 3))
        orth = al.m2repa_loss([Tensor(a)], [b]).item()
        h = [rng.normal(size=(4, 16, 6)) for _ in range(3)]
        t = [rng.normal(size=(4, 16, 6)) for _ in range(3)]
        k_avg = abs(al.m2repa_loss([Tensor(v) for v in h], t).item() - cosine_alignment(h, t))
    ok = abs(identical + 1) < 1e-6 and abs(orth) < 1e-6 and k_avg < 1e-6
    acceptance(3, ok, f"identical {identical:.7f}, orthogonal {orth:.1e}, K-average diff {k_avg:.1e}")


# ---------------------------------------------------------------- 4


def test_c4_decoupling_coefficient(acceptance):
    rng = np.random.default_rng(4)
    f = [rng.normal(size=(4, 16, 6)) for _ in range(3)]
    with nc.precision(np.float64):
        got = al.decouple_loss([Tensor(v) for v in f]).item()
    flat = [v.reshape(-1, 6) for v in f]
    pairs = hsic_cka(flat[0], flat[1]) + hsic_cka(flat[0], flat[2]) + hsic_cka(flat[1], flat[2])
    same = np.float32(rng.normal(size=(4, 16, 6)))
    ident = al.decouple_loss([Tensor(same)] * 3).item()
    ok = abs(got - pairs / 3) < 1e-12 and abs(ident - 1) <= 1e-5
    acceptance(4, ok, f"|L - sum/3| {abs(got - pairs / 3):.1e}, identical {ident:.7f}")


# ---------------------------------------------------------------- 5


def test_c5_zero_init_extension(acceptance):
    cfg = BackboneConfig(variant="latent-sum", embed_dim=16, depth=2, tap_layer=1, max_frames=4)
    rgb = LatentSumModel(cfg, tri_modal=False)
    tri = extend_from_rgb(rgb)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2, 3, tri.channels, 8, 8)).astype(np.float32)
        c = rng.normal(size=(2, 3, cfg.cond_dim)).astype(np.float32)
        t = rng.uniform(size=(2, 3)).astype(np.float32)
        v_tri, _ = tri(z, c, t)
        v_rgb, _ = rgb(z[:, :, :rgb.channels], c, t)
        worst = max(worst, float(np.abs(v_tri.data[:, :, :rgb.channels] - v_rgb.data).max()))
    acceptance(5, worst < 1e-6, f"max |v_tri - v_rgb| {worst:.1e} over 20 inputs")


# ---------------------------------------------------------------- 6


def test_c6_flow_and_sampling_oracles(acceptance):
    rng = np.random.default_rng(6)
    # every state the trainer builds is checked against the interpolant inside the loop
    rep = run_loop(RunConfig().with_values(train={"steps": 20}))
    mixing = rep.max_mixing_error
    x1 = rng.normal(size=(4, 7, 16, 16)).astype(np.float32)
    x0 = rng.normal(size=(4, 7, 16, 16)).astype(np.float32)
    state = interpolate(x1, x0, rng.uniform(size=4))
    mixing = max(mixing, state.mixing_error())
    euler = float(np.abs(euler_step(x0, x1 - x0, 1.0) - x1).max())

    clip = make_clip(60, SceneConfig(), 41)
    gt = clip.stacked()
    ctx = gt[:1].copy()
    out = rollout(OracleVelocity(gt), ctx, clip.control_features(), 40, steps_per_frame=8, window=8, seed=0)
    roll = float(np.abs(out - gt).max())
    ctx_ok = np.array_equal(out[:1], gt[:1]) and np.array_equal(ctx, gt[:1])
    ok = mixing <= 1e-6 and euler < 1e-6 and roll < 1e-5 and ctx_ok
    acceptance(6, ok, f"mixing {mixing:.1e}, Euler {euler:.1e}, 40-frame rollout {roll:.1e}, "
                      f"context bitwise {'unchanged' if ctx_ok else 'CHANGED'}")


# ---------------------------------------------------------------- 7


def test_c7_metric_oracles(acceptance):
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(500):
        M, N = rng.integers(1, 5, size=2)
        gt = rng.uniform(size=(M, 6, 6)) > rng.uniform(0.3, 0.8)
        pred = gt[rng.integers(0, M, size=N)] ^ (rng.uniform(size=(N, 6, 6)) < rng.uniform(0, 0.3))
        g = mt.greedy_miou(pred.astype(np.float32), gt.astype(np.float32)).overall
        keep_p, keep_g = pred.reshape(N, -1).any(1), gt.reshape(M, -1).any(1)
        best = brute_force_best_miou(iou_matrix(pred[keep_p], gt[keep_g]))
        violations += g > best + 1e-12
    masks = make_clip(7, SceneConfig(), 4).mask
    ident = mt.greedy_miou(masks, masks, context_count=1).overall
    d = rng.uniform(0.2, 1.0, size=(4, 16, 16))
    lin = mt.evaluate_depth(2.5 * d - 0.3, d)
    boundary = mt.depth_metrics(1.25 * d, d).delta1
    ok = violations == 0 and ident == 1.0 and lin.abs_rel < 1e-6 and lin.delta1 == 1 and boundary == 0
    acceptance(7, ok, f"{violations} violations / 500, identity {ident}, a*gt+b AbsRel {lin.abs_rel:.1e} "
                      f"delta1 {lin.delta1}, 1.25*gt delta1 {boundary}")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_c8_smoke_training(acceptance):
    cfg = RunConfig()  # m2repa-cka, seed 1, 500 steps, 16x16, T=8, batch 8
    assert (cfg.train.variant, cfg.train.seed, cfg.train.steps, cfg.data.frames) == ("m2repa-cka", 1, 500, 8)
    a = run_loop(cfg)
    b = run_loop(cfg)
    totals = np.array([h.total for h in a.history])
    ratio = totals[-10:].mean() / totals[5:16].mean()
    same = a.loss_csv() == b.loss_csv()
    ok = ratio <= 0.5 and a.wall_clock < 600 and same
    acceptance(8, ok, f"late/early ratio {ratio:.3f}, {a.wall_clock:.0f} s per run, "
                      f"CSV {'byte-identical' if same else 'DIFFERS'}")


# ---------------------------------------------------------------- 9


@pytest.mark.slow
def test_c9_directional_ablation(acceptance, tmp_path, capsys):
    code = main(["ablate", "--config", str(FAST_CFG), "--seeds", "1,2,3", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    rows = (tmp_path / "ablation.csv").read_text().splitlines() if code == 0 else []
    header = rows[0].split(",") if rows else []
    means = {}
    for r in rows[1:]:
        cells = r.split(",")
        means[cells[0]] = float(cells[header.index("proj_cka_mean")])
    lower = means.get("m2repa-cka", 1.0) < means.get("naive-multi", 0.0)
    ok = code == 0 and len(rows) == 8 and "proj_cka_mean" in header and lower
    with capsys.disabled():
        print("\n" + out)
    acceptance(9, ok, f"{len(rows) - 1 if rows else 0} variant rows; projected CKA m2repa-cka "
                      f"{means.get('m2repa-cka', float('nan')):.3f} vs naive-multi "
                      f"{means.get('naive-multi', float('nan')):.3f}")


# ---------------------------------------------------------------- 10


def test_c10_persistence(acceptance, tmp_path):
    cfg_file = tmp_path / "p.cfg"
    cfg_file.write_text("[train]\nsteps = 5\n[eval]\nn_clips = 2\nshort = 4\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(run)]) == 0
    ck_path = run / CHECKPOINT_NAME
    ck = load_checkpoint(ck_path)
    resaved = tmp_path / "again.m2rp"
    save_checkpoint(resaved, ck.config, ck.model, ck.bank, ck.optimizer)
    again = load_checkpoint(resaved)
    bitwise = all(np.array_equal(p.data, q.data) and p.data.dtype == q.data.dtype
                  for p, q in zip(ck.model.parameters() + ck.bank.parameters(),
                                  again.model.parameters() + again.bank.parameters()))
    bitwise &= resaved.read_bytes() == ck_path.read_bytes()

    main(["eval", "--checkpoint", str(ck_path), "--out", str(tmp_path / "e1")])
    main(["eval", "--checkpoint", str(resaved), "--out", str(tmp_path / "e2")])
    same_csv = (tmp_path / "e1" / "metrics.csv").read_bytes() == (tmp_path / "e2" / "metrics.csv").read_bytes()

    raw = bytearray(ck_path.read_bytes())
    raw[len(raw) // 2] ^= 0x10
    bad = tmp_path / "bad.m2rp"
    bad.write_bytes(bytes(raw))
    code = main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "e3")])
    ok = bitwise and same_csv and code != 0
    acceptance(10, ok, f"parameters bitwise {'equal' if bitwise else 'DIFFER'}, metric CSVs "
                       f"{'identical' if same_csv else 'DIFFER'}, corrupt exit code {code}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
