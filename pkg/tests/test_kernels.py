import os
import subprocess
import sys

import numpy as np
import pytest

from m2repa import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def rng(seed=0):
    return np.random.default_rng(seed)


@needs_numba
def test_conv3d_parity():
    x = rng(0).normal(size=(2, 3, 5, 6, 7)).astype(np.float32)
    w = rng(1).normal(size=(4, 3, 3, 3, 3)).astype(np.float32)
    a, b = K.conv3d_numpy(x, w), K.conv3d_numba(x, w)
    assert a.shape == (2, 4, 5, 6, 7)
    assert np.allclose(a, b, atol=1e-4)
    g = rng(2).normal(size=a.shape).astype(np.float32)
    assert np.allclose(K.conv3d_grad_weight_numpy(x, g), K.conv3d_grad_weight_numba(x, g), atol=1e-3)


def test_conv3d_matches_direct_sum():
    x = rng(3).normal(size=(1, 2, 3, 4, 4))
    w = rng(4).normal(size=(1, 2, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros((1, 1, 3, 4, 4))
    for t in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, 0, t, i, j] = np.sum(xp[0, :, t:t + 3, i:i + 3, j:j + 3] * w[0])
    assert np.allclose(K.conv3d_numpy(x, w), ref, atol=1e-10)


def test_conv3d_adjoint():
    # <conv(x, w), g> == <x, conv_grad_input(g, w)>
    x = rng(5).normal(size=(1, 2, 4, 5, 5))
    w = rng(6).normal(size=(3, 2, 3, 3, 3))
    g = rng(7).normal(size=(1, 3, 4, 5, 5))
    lhs = np.sum(K.conv3d_numpy(x, w) * g)
    rhs = np.sum(x * K.conv3d_numpy(g, K.flip_kernel(w)))
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert np.sum(K.conv3d_grad_weight_numpy(x, g) * w) == pytest.approx(lhs, rel=1e-10)


@needs_numba
def test_box_mean_and_iou_parity():
    img = rng(0).uniform(size=(12, 12))
    assert np.allclose(K.box_mean_numpy(img, 7), K.box_mean_numba(img, 7), atol=1e-12)
    pred = (rng(1).uniform(size=(3, 8, 8)) > 0.5).reshape(3, -1)
    gt = (rng(2).uniform(size=(4, 8, 8)) > 0.5).reshape(4, -1)
    assert np.allclose(K.iou_table_numpy(pred, gt), K.iou_table_numba(pred, gt), atol=1e-12)


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_rasterize_parity(seed):
    r = rng(seed)
    n = 4
    objs = np.column_stack([r.integers(0, 2, n), r.uniform(0, 16, n), r.uniform(0, 16, n),
                            r.uniform(1, 4, n), r.uniform(1, 4, n), r.uniform(0.2, 0.9, n)])
    oa, da = K.rasterize_numpy(objs, 16, 16, 1.0)
    ob, db = K.rasterize_numba(objs, 16, 16, 1.0)
    assert np.array_equal(oa, ob) and np.array_equal(da, db)


def run_backend(flag):
    env = dict(os.environ, M2REPA_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from m2repa import _kernels; print(_kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_env_flag_selects_backend():
    assert run_backend("0") == "numpy"
    assert run_backend("off") == "numpy"
    if K.HAVE_NUMBA:
        assert run_backend("1") == "numba"


def test_pipeline_identical_under_both_backends():
    code = ("import numpy as np; from m2repa.synthworld import make_clip, SceneConfig;"
            "from m2repa import metrics as mt;"
            "c = make_clip(3, SceneConfig(), 4).stacked();"
            "print(repr(float(c.sum())), mt.ssim(c[:, :3], c[::-1, :3]))")
    outs = set()
    for flag in ("0", "1"):
        env = dict(os.environ, M2REPA_NUMBA=flag)
        outs.add(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                                text=True, check=True).stdout)
    assert len(outs) == 1
