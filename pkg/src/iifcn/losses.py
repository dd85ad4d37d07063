"""Class-balancing weight filter, weighted cross-entropy and the Jaccard surrogate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, abs_, channel_slice, log, log10
from .errors import InvalidArgumentError, InvalidInputError, ShapeError

PROB_FLOOR = 1e-12
DEFAULT_K = 1.1


@dataclass(frozen=True)
class WeightFilter:
    weights: np.ndarray
    p: float
    clamped: bool


def reweight_filter(mask, eps: float = 1e-4) -> WeightFilter:
    """Per-pixel loss weights from a {0, 255} mask.

    Background pixels get the object fraction ``p``, object pixels get
    ``1 - p``, and both are divided by ``2 p (1 - p)`` so the weights sum
    to the pixel count.
    """
    s = np.asarray(mask)
    if s.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {s.shape}")
    bad = ~np.isin(s, (0, 255))
    if bad.any():
        raise InvalidInputError(f"mask must contain only 0 and 255, found {s[bad].flat[0]!r}")
    h, w = s.shape
    n = s.astype(np.float64).sum() / 255.0
    p = n / (w * h)
    clamped = not (eps <= p <= 1.0 - eps)
    p = min(max(p, eps), 1.0 - eps)
    f = np.where(s == 0, p, 1.0 - p)
    f = f / (2.0 * p * (1.0 - p))
    return WeightFilter(f, float(p), clamped)


def _batched(x: np.ndarray, ndim: int) -> np.ndarray:
    return x[None] if x.ndim == ndim else x


def _as_binary(target) -> np.ndarray:
    t = np.asarray(target)
    if t.dtype != bool and t.max(initial=0) > 1:
        t = t >= 128
    return t.astype(bool)


def weighted_entropy_loss(prob: Tensor, target, weights=None) -> Tensor:
    """Mean over pixels (and batch) of ``-f * log prob[true class]``.

    ``prob`` is 2×h×w or N×2×h×w; ``target`` is h×w or N×h×w, binary
    ({0,1}, bool, or {0,255}); ``weights`` defaults to ones.
    """
    if prob.data.ndim == 3:
        prob = prob.reshape(1, *prob.shape)
    t = _batched(_as_binary(target), 2)
    N, C, h, w = prob.shape
    if C != 2 or t.shape != (N, h, w):
        raise ShapeError(f"prob {prob.shape} and target {t.shape} disagree")
    f = np.ones((N, h, w)) if weights is None else _batched(np.asarray(weights, dtype=np.float64), 2)
    if f.shape != (N, h, w):
        raise ShapeError(f"weights {f.shape} do not match target {t.shape}")
    dt = prob.dtype
    t1 = t[:, None].astype(dt)
    p_true = channel_slice(prob, 1, 2) * t1 + channel_slice(prob, 0, 1) * (1.0 - t1)
    nll = -log(p_true, floor=PROB_FLOOR)
    return (nll * f[:, None].astype(dt)).mean()


def harden(a) -> np.ndarray:
    """Probabilities >= 0.5 map to 1, below 0.5 to 0 (0.5 itself goes to 1)."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    return (a >= 0.5).astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)


def jaccard_upper_bound(k: float = DEFAULT_K) -> float:
    return float(np.log10(1.0 / (k - 1.0) + 1.0 - 1.0 / k))


def jaccard_loss(A, B, k: float = DEFAULT_K, mode: str = "soft") -> Tensor:
    """Log-ratio Jaccard surrogate, averaged over the batch.

    With S = sum(A) + sum(B) and D = sum|A - B| per image the loss is
    ``log10(S / (k S - D) + 1 - 1/k)``, or 0 when either operand is empty.
    ``mode="literal"`` hardens ``A`` first and carries no gradient;
    ``mode="soft"`` uses ``A`` directly and is differentiable.
    """
    if k <= 1:
        raise InvalidArgumentError(f"k must be > 1, got {k}")
    if mode not in ("soft", "literal"):
        raise InvalidArgumentError(f"mode must be 'soft' or 'literal', got {mode!r}")
    if mode == "literal" or not isinstance(A, Tensor):
        a_np = harden(A) if mode == "literal" else np.asarray(A, dtype=np.float64)
        A = Tensor(a_np)
    b = _as_binary(B).astype(A.dtype)
    if A.data.ndim == 2:
        A = A.reshape(1, *A.shape)
        b = b[None]
    if A.shape != b.shape:
        raise ShapeError(f"A {A.shape} and B {b.shape} disagree")
    axes = (1, 2)
    sum_a = A.sum(axes)
    sum_b = b.sum(axis=axes)
    valid = (sum_a.data != 0) & (sum_b != 0)
    # empty images get a finite dummy S so nothing downstream is NaN
    S = sum_a + (sum_b + (~valid).astype(A.dtype))
    D = abs_(A - b).sum(axes)
    J = log10(S / (S * k - D) + (1.0 - 1.0 / k))
    return (J * valid.astype(A.dtype)).mean()


class LossBreakdown(NamedTuple):
    total: Tensor
    entropy: Tensor
    jaccard: Tensor


def combined_loss(prob: Tensor, target, k: float = DEFAULT_K, mode: str = "soft",
                  weights=None, jaccard_weight: float = 1.0) -> LossBreakdown:
    """Weighted entropy plus the Jaccard surrogate on the object channel.

    ``target`` is a {0, 255} (or {0, 1}) mask; when ``weights`` is None the
    class-balancing filter is derived from it per image.
    """
    t = _batched(_as_binary(target), 2)
    if weights is None:
        weights = np.stack([reweight_filter(ti.astype(np.uint8) * 255).weights for ti in t])
    if prob.data.ndim == 3:
        prob = prob.reshape(1, *prob.shape)
    ent = weighted_entropy_loss(prob, t, weights)
    obj = channel_slice(prob, 1, 2)
    obj = obj.reshape(obj.shape[0], *obj.shape[2:])
    jac = jaccard_loss(obj, t, k=k, mode=mode)
    return LossBreakdown(ent + jac * jaccard_weight, ent, jac)
