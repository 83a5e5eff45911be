"""Decoupling projectors and the alignment / decoupling objectives.

Feature tensors are ``[B*T, N, D]``. Targets from frozen experts are always
treated as constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .layers import MLP, Module
from .numcore import Tensor

log = logging.getLogger(__name__)

LAMBDA_ALIGN = 0.5
LAMBDA_DECOUPLE = 0.05


class ProjectorBank(Module):
    """One MLP per expert mapping trunk features (width d) to that expert's width."""

    def __init__(self, d: int, target_dims: Sequence[int], depth: int = 3, seed: int = 0):
        if depth < 1:
            raise ValueError(f"projector depth must be at least 1, got {depth}")
        rng = np.random.default_rng([seed, 0x9A0])
        self.projectors = [MLP([d] * depth + [int(D)], rng) for D in target_dims]
        self._d = d
        self._dims = tuple(int(D) for D in target_dims)

    @property
    def width(self) -> int:
        return self._d

    @property
    def target_dims(self) -> tuple[int, ...]:
        return self._dims

    def __len__(self) -> int:
        return len(self.projectors)


def project(bank: ProjectorBank, h_t: Tensor, which: Sequence[int] | None = None) -> list[Tensor]:
    if h_t.shape[-1] != bank.width:
        raise ValueError(f"hidden width {h_t.shape[-1]} does not match projector input {bank.width}")
    idx = range(len(bank)) if which is None else which
    return [bank.projectors[k](h_t) for k in idx]


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


def token_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity per token along the last axis; zero-norm tokens give 0."""
    return nc.sum(nc.l2_normalize(a) * nc.l2_normalize(b), axis=-1)


def m2repa_loss(projected: Sequence[Tensor], targets: Sequence) -> Tensor:
    """Negative token-wise cosine similarity averaged over tokens, samples and experts."""
    if len(projected) != len(targets):
        raise ValueError(f"{len(projected)} projected features but {len(targets)} targets")
    if not projected:
        raise ValueError("alignment needs at least one expert")
    terms = []
    for k, (h, y) in enumerate(zip(projected, targets)):
        y = _const(y)
        if h.shape != y.shape:
            raise ValueError(f"expert {k}: projected {h.shape} vs target {y.shape}")
        terms.append(nc.mean(token_cosine(y, h)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (-1.0 / len(terms))


def _centered_is_zero(x: np.ndarray) -> bool:
    xc = x - x.mean(axis=0, keepdims=True)
    scale = max(1.0, float(np.abs(x).max()))
    return float(np.abs(xc).max()) <= 1e-6 * scale


def linear_cka(X: Tensor, Y: Tensor) -> Tensor:
    """Linear CKA between row-aligned samples X [n, p1] and Y [n, p2].

    Columns are centred, then ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F).
    If either centred matrix is zero the result is a constant 0.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    Y = Y if isinstance(Y, Tensor) else Tensor(Y)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError(f"CKA takes 2-D inputs, got {X.shape} and {Y.shape}")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"CKA inputs need the same number of rows, got {X.shape[0]} and {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least 2 samples")
    if _centered_is_zero(X.data) or _centered_is_zero(Y.data):
        log.warning("linear_cka: centred features are all zero; returning 0")
        return Tensor(np.zeros(()))
    Xc = X - nc.mean(X, axis=0, keepdims=True)
    Yc = Y - nc.mean(Y, axis=0, keepdims=True)
    cross = nc.matmul(nc.transpose(Yc), Xc)
    gx = nc.matmul(nc.transpose(Xc), Xc)
    gy = nc.matmul(nc.transpose(Yc), Yc)
    num = nc.sum(cross * cross)
    den = nc.sqrt(nc.sum(gx * gx)) * nc.sqrt(nc.sum(gy * gy))
    return num / den


def flatten_tokens(x: Tensor, rows: np.ndarray | None = None) -> Tensor:
    flat = nc.reshape(x, (-1, x.shape[-1]))
    return flat if rows is None else nc.take(flat, rows, axis=0)


def sample_rows(n: int, max_rows: int, rng: np.random.Generator | None = None) -> np.ndarray | None:
    """Row subset used for CKA when n exceeds the cap; None keeps every row."""
    if max_rows <= 0 or n <= max_rows:
        return None
    if rng is None:
        return np.linspace(0, n - 1, max_rows).round().astype(np.int64)
    return np.sort(rng.choice(n, size=max_rows, replace=False))


def decouple_loss(projected: Sequence[Tensor], max_rows: int = 1024,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Mean pairwise linear CKA among the projected features (tokens as samples)."""
    K = len(projected)
    if K < 2:
        raise ValueError(f"decoupling needs at least 2 feature sets, got {K}")
    n = int(np.prod(projected[0].shape[:-1]))
    rows = sample_rows(n, max_rows, rng)
    flat = [flatten_tokens(h, rows) for h in projected]
    total = None
    for i in range(K):
        for j in range(i + 1, K):
            c = linear_cka(flat[i], flat[j])
            total = c if total is None else total + c
    return total * (2.0 / (K * (K - 1)))


def _pool_matrix(d_from: int, d_to: int) -> np.ndarray:
    P = np.zeros((d_from, d_to))
    for g, idx in enumerate(np.array_split(np.arange(d_from), d_to)):
        P[idx, g] = 1.0 / len(idx)
    return P


def cos2_decouple_loss(projected: Sequence[Tensor]) -> Tensor:
    """Pair-averaged squared token-wise cosine similarity between projected features.

    With K = 3 the pair average is the 1/3 coefficient over the three pairs.
    Features of unequal width are compared after mean-pooling the wider one's
    channels down to the narrower width.
    """
    K = len(projected)
    if K < 2:
        raise ValueError(f"cos^2 decoupling needs at least 2 feature sets, got {K}")
    total = None
    for i in range(K):
        for j in range(i + 1, K):
            a, b = projected[i], projected[j]
            if a.shape[:-1] != b.shape[:-1]:
                raise ValueError(f"feature sets {i} and {j} are not token-aligned: {a.shape} vs {b.shape}")
            da, db = a.shape[-1], b.shape[-1]
            if da > db:
                a = nc.matmul(a, Tensor(_pool_matrix(da, db)))
            elif db > da:
                b = nc.matmul(b, Tensor(_pool_matrix(db, da)))
            c = token_cosine(a, b)
            term = nc.mean(c * c)
            total = term if total is None else total + term
    return total * (2.0 / (K * (K - 1)))


@dataclass
class LossBreakdown:
    fm: float
    align: float
    decouple: float
    total: float
    lambda_align: float = LAMBDA_ALIGN
    lambda_decouple: float = LAMBDA_DECOUPLE
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def recomputed_total(self) -> float:
        return self.fm + self.lambda_align * self.align + self.lambda_decouple * self.decouple


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(fm, align, decouple, lambda_align: float = LAMBDA_ALIGN,
               lambda_decouple: float = LAMBDA_DECOUPLE) -> LossBreakdown:
    """Weighted sum of the three terms. Tensor inputs keep the sum differentiable."""
    if lambda_align < 0 or lambda_decouple < 0:
        raise ValueError(f"loss weights must be non-negative, got {lambda_align}, {lambda_decouple}")
    # the scalar sum is done in float64 so that large weights do not lose the
    # decomposition identity to float32 cancellation
    total = _as_term(fm)
    if lambda_align:
        total = total + _as_term(align) * _as_term(lambda_align)
    if lambda_decouple:
        total = total + _as_term(decouple) * _as_term(lambda_decouple)
    return LossBreakdown(
        fm=_value(fm), align=_value(align), decouple=_value(decouple),
        total=total.item(), lambda_align=float(lambda_align),
        lambda_decouple=float(lambda_decouple), tensor=total,
    )


def _as_term(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == np.float64 else nc.cast(x, np.float64)
    with nc.precision(np.float64):
        return Tensor(x)
