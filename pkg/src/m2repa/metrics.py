"""Frame metrics: PSNR and SSIM on RGB, aligned AbsRel / delta1 on depth, greedy mIoU on masks.

Everything here is a pure function of its inputs and works in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEPTH_EPS = 1e-6
DELTA1_THRESHOLD = 1.25
IOU_THRESHOLD = 0.5
BINARIZE_AT = 0.5
ORACLE_MAX_MASKS = 6


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: prediction {a.shape} and ground truth {b.shape} differ in shape")


def psnr(pred, gt, peak: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt, "psnr")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse))


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    k = SSIM_WINDOW
    mx = _kernels.box_mean(x, k)
    my = _kernels.box_mean(y, k)
    sxx = _kernels.box_mean(x * x, k) - mx * mx
    syy = _kernels.box_mean(y * y, k) - my * my
    sxy = _kernels.box_mean(x * y, k) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(pred, gt) -> float:
    """Mean local SSIM over a 7x7 uniform window (valid region), averaged over
    every leading plane, so ``[H, W]``, ``[C, H, W]`` and ``[T, C, H, W]`` all work."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt, "ssim")
    if pred.ndim < 2 or min(pred.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {pred.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    H, W = pred.shape[-2:]
    xs = pred.reshape(-1, H, W)
    ys = gt.reshape(-1, H, W)
    return float(np.mean([_ssim_plane(a, b) for a, b in zip(xs, ys)]))


@dataclass(frozen=True)
class ScaleShift:
    a: float
    b: float
    degenerate: bool = False

    def apply(self, pred) -> np.ndarray:
        return self.a * np.asarray(pred, dtype=np.float64) + self.b


def align_scale_shift(pred, gt) -> ScaleShift:
    """Least-squares (a, b) minimising sum((a*pred + b - gt)^2) over the whole video."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    _same_shape(p, g, "align_scale_shift")
    if p.size == 0:
        raise ValueError("cannot align empty depth videos")
    if np.any(g <= DEPTH_EPS):
        raise ValueError(f"ground-truth depth must exceed {DEPTH_EPS} on evaluated pixels")
    n = float(p.size)
    sp, sg = p.sum(), g.sum()
    spp, spg = (p * p).sum(), (p * g).sum()
    det = n * spp - sp * sp
    if det <= 1e-12 * max(1.0, n * spp):
        return ScaleShift(0.0, float(sg / n), degenerate=True)
    a = (n * spg - sp * sg) / det
    b = (spp * sg - sp * spg) / det
    return ScaleShift(float(a), float(b))


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    delta1: float
    a: float = 1.0
    b: float = 0.0
    degenerate: bool = False


def depth_metrics(aligned_pred, gt, a: float = 1.0, b: float = 0.0,
                  degenerate: bool = False) -> DepthEvalResult:
    """AbsRel and delta1 of an already aligned prediction.

    delta1 counts pixels with max(p/g, g/p) < 1.25 strictly. The test is done
    as ``p < 1.25 g and g < 1.25 p`` in the inputs' own precision, so
    ``pred = 1.25 * gt`` lands exactly on the boundary. Non-positive p fails.
    """
    p = np.asarray(aligned_pred)
    g = np.asarray(gt)
    _same_shape(p, g, "depth_metrics")
    if p.size == 0:
        raise ValueError("no pixels to evaluate")
    if np.any(g <= 0):
        raise ValueError("ground-truth depth must be positive everywhere evaluated")
    dt = np.result_type(p.dtype, g.dtype, np.float32)
    p, g = p.astype(dt), g.astype(dt)
    thr = dt.type(DELTA1_THRESHOLD)
    ok = (p > 0) & (p < thr * g) & (g < thr * p)
    p64, g64 = p.astype(np.float64), g.astype(np.float64)
    abs_rel = float(np.mean(np.abs(p64 - g64) / g64))
    return DepthEvalResult(abs_rel, float(ok.mean()), a, b, degenerate)


def evaluate_depth(pred, gt) -> DepthEvalResult:
    fit = align_scale_shift(pred, gt)
    return depth_metrics(fit.apply(pred), np.asarray(gt, dtype=np.float64), fit.a, fit.b, fit.degenerate)


# --------------------------------------------------------------------------- masks


def binarize(maps, threshold: float = BINARIZE_AT) -> np.ndarray:
    return np.asarray(maps) >= threshold


def _nonempty(masks: np.ndarray) -> np.ndarray:
    """Indices of masks with at least one pixel set."""
    return np.flatnonzero(masks.reshape(masks.shape[0], -1).any(axis=1))


def greedy_match_from_iou(table: np.ndarray, threshold: float = IOU_THRESHOLD) -> list[tuple[int, int, float]]:
    """Greedy matching on an IoU table ``[M gt, N pred]``.

    Ground truths are visited in ascending index; each takes the still
    unmatched prediction of highest IoU (lowest index on ties) and keeps it only
    if IoU > threshold. Returns (pred index, gt index, IoU) triples.
    """
    table = np.asarray(table, dtype=np.float64)
    M, N = table.shape
    taken = np.zeros(N, dtype=bool)
    matches = []
    for j in range(M):
        if taken.all():
            break
        row = np.where(taken, -np.inf, table[j])
        i = int(np.argmax(row))
        if row[i] > threshold:
            taken[i] = True
            matches.append((i, j, float(row[i])))
    return matches


def frame_score(matches) -> float:
    return float(np.mean([m[2] for m in matches])) if matches else 0.0


def _frame_tables(pred, gt):
    pred_b = binarize(pred)
    gt_b = binarize(gt)
    if pred_b.shape[1:] != gt_b.shape[1:]:
        raise ValueError(f"mask maps differ in size: prediction {pred_b.shape[1:]}, ground truth {gt_b.shape[1:]}")
    pi, gi = _nonempty(pred_b), _nonempty(gt_b)
    P = pred_b.reshape(pred_b.shape[0], -1)[pi]
    G = gt_b.reshape(gt_b.shape[0], -1)[gi]
    return _kernels.iou_table(P, G), pi, gi


@dataclass
class MaskEvalResult:
    frame_mious: list[float]
    overall: float
    matches: list[list[tuple[int, int, float]]] = field(default_factory=list)
    matched_fraction: float = 0.0
    context_count: int = 0


def greedy_miou(pred_masks, gt_masks, threshold: float = IOU_THRESHOLD, context_count: int = 0) -> MaskEvalResult:
    """Greedy-matching mIoU.

    ``[N, H, W]`` / ``[M, H, W]`` inputs are one frame; ``[T, N, H, W]`` /
    ``[T, M, H, W]`` are a video, whose first ``context_count`` frames are
    skipped. Maps are binarised at 0.5, empty masks are ignored, and a pair
    is accepted when its IoU exceeds ``threshold``.
    Match indices refer to the original channel order.
    """
    pred = np.asarray(pred_masks)
    gt = np.asarray(gt_masks)
    if pred.ndim == 3 and gt.ndim == 3:
        pred, gt = pred[None], gt[None]
        context_count = 0
    if pred.ndim != 4 or gt.ndim != 4 or pred.shape[0] != gt.shape[0]:
        raise ValueError(f"mask shapes do not line up: prediction {np.shape(pred_masks)}, ground truth {np.shape(gt_masks)}")
    if not 0 <= context_count < pred.shape[0]:
        raise ValueError(f"context count {context_count} leaves no frames to score")
    scores, all_matches = [], []
    matched = total_gt = 0
    for f in range(context_count, pred.shape[0]):
        table, pi, gi = _frame_tables(pred[f], gt[f])
        local = greedy_match_from_iou(table, threshold)
        ms = [(int(pi[i]), int(gi[j]), v) for i, j, v in local]
        scores.append(frame_score(ms))
        all_matches.append(ms)
        matched += len(ms)
        total_gt += len(gi)
    overall = float(np.mean(scores))
    frac = matched / total_gt if total_gt else 0.0
    return MaskEvalResult(scores, overall, all_matches, frac, context_count)


def _matchings(M: int, N: int, allowed: np.ndarray):
    """Every one-to-one partial matching restricted to allowed pairs, as (gt, pred) lists."""
    def rec(j, used):
        if j == M:
            yield []
            return
        yield from rec(j + 1, used)
        for i in range(N):
            if not used & (1 << i) and allowed[j, i]:
                for rest in rec(j + 1, used | (1 << i)):
                    yield [(j, i)] + rest
    yield from rec(0, 0)


def optimal_matching_from_iou(table: np.ndarray, objective: str = "miou",
                              threshold: float = IOU_THRESHOLD) -> tuple[float, list[tuple[int, int, float]]]:
    """Exhaustive search over one-to-one matchings whose pairs all pass IoU > threshold.

    ``objective="miou"`` maximises the frame score (mean matched IoU, 0 for no
    pairs); ``"sum"`` maximises the matched-IoU sum. Returns the frame score of
    the best matching and the matching itself.
    """
    table = np.asarray(table, dtype=np.float64)
    M, N = table.shape
    if M > ORACLE_MAX_MASKS or N > ORACLE_MAX_MASKS:
        raise ValueError(f"oracle supports at most {ORACLE_MAX_MASKS} masks per side, got {M}x{N}")
    if objective not in ("miou", "sum"):
        raise ValueError(f"unknown objective {objective!r}")
    best_key, best = (-1.0, -1.0), []
    for m in _matchings(M, N, table > threshold):
        vals = [table[j, i] for j, i in m]
        s = float(np.sum(vals)) if vals else 0.0
        score = s / len(vals) if vals else 0.0
        key = (score, s) if objective == "miou" else (s, score)
        if key > best_key:
            best_key, best = key, [(i, j, float(table[j, i])) for j, i in m]
    return frame_score(best), best


def optimal_miou_oracle(pred_masks, gt_masks, objective: str = "miou",
                        threshold: float = IOU_THRESHOLD) -> float:
    """Best achievable frame mIoU for one frame; a test oracle for the greedy matcher."""
    pred = np.asarray(pred_masks)
    gt = np.asarray(gt_masks)
    if pred.ndim != 3 or gt.ndim != 3:
        raise ValueError("oracle works on single frames of shape [N, H, W]")
    table, _, _ = _frame_tables(pred, gt)
    return optimal_matching_from_iou(table, objective, threshold)[0]


def metric_row(pred_video: np.ndarray, gt_video: np.ndarray, context_count: int,
               mask_channels: int) -> dict[str, float]:
    """All frame metrics for one stacked ``[T, 3+1+C, H, W]`` video pair, context excluded."""
    if pred_video.shape != gt_video.shape:
        raise ValueError(f"video shapes differ: {pred_video.shape} vs {gt_video.shape}")
    p = np.asarray(pred_video[context_count:], dtype=np.float64)
    g = np.asarray(gt_video[context_count:], dtype=np.float64)
    depth = evaluate_depth(p[:, 3], g[:, 3])
    masks = greedy_miou(pred_video[:, 4:4 + mask_channels], gt_video[:, 4:4 + mask_channels],
                        context_count=context_count)
    return {
        "psnr": psnr(np.clip(p[:, :3], 0, 1), g[:, :3]),
        "ssim": ssim(np.clip(p[:, :3], 0, 1), g[:, :3]),
        "abs_rel": depth.abs_rel,
        "delta1": depth.delta1,
        "miou": masks.overall,
        "matched_fraction": masks.matched_fraction,
    }
