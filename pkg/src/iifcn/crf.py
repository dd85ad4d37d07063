"""Fully connected two-label CRF with exact mean-field message passing.

Pairwise potentials are a Potts model weighted by a spatial Gaussian
(smoothness) kernel plus a position-and-colour (appearance) kernel. All
N² pixel pairs are summed exactly, so images are first capped to
``max_side`` pixels per side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError, ShapeError
from .imaging import resize_bilinear, resize_nearest

PROB_FLOOR = 1e-12
# messages run into the thousands, so without a floor the marginals saturate
MARGINAL_FLOOR = 1e-12
# pair matrices up to this many entries are built once and reused
_CACHE_ENTRIES = 16_000_000
_CHUNK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class CrfParams:
    w_smooth: float = 3.0
    theta_gamma: float = 3.0
    w_appearance: float = 10.0
    theta_alpha: float = 60.0
    theta_beta: float = 20.0
    iterations: int = 10
    max_side: int = 128

    def __post_init__(self):
        for name in ("theta_gamma", "theta_alpha", "theta_beta"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be > 0")
        if self.w_smooth < 0 or self.w_appearance < 0:
            raise InvalidArgumentError("kernel weights must be >= 0")
        if self.iterations < 1 or self.max_side < 1:
            raise InvalidArgumentError("iterations and max_side must be >= 1")


def unary_from_prob(prob) -> np.ndarray:
    return -np.log(np.maximum(np.asarray(prob, dtype=np.float64), PROB_FLOOR))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return _floor(e / e.sum(axis=0, keepdims=True))


def _floor(q: np.ndarray) -> np.ndarray:
    q = np.clip(q, MARGINAL_FLOOR, 1.0 - MARGINAL_FLOOR)
    return q / q.sum(axis=0, keepdims=True)


class _PairKernel:
    """K(i, j) for i != j over flattened pixels, applied as a matrix product."""

    def __init__(self, image: np.ndarray, params: CrfParams, scale: float):
        C, h, w = image.shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pos = np.stack([rr.ravel(), cc.ravel()], axis=1) / scale
        col = image.reshape(C, -1).T.astype(np.float64)
        self.p = params
        self.fs = pos / params.theta_gamma
        self.fa = np.concatenate([pos / params.theta_alpha, col / params.theta_beta], axis=1)
        self.n = h * w
        self._full = None
        self._rowsum = None
        if self.n * self.n <= _CACHE_ENTRIES:
            self._full = np.concatenate([self._rows(lo, hi) for lo, hi in self._chunks()])

    def _chunks(self):
        step = max(1, _CHUNK_ENTRIES // self.n)
        for lo in range(0, self.n, step):
            yield lo, min(lo + step, self.n)

    def _rows(self, lo: int, hi: int) -> np.ndarray:
        def gauss(f, weight):
            d = cdist(f[lo:hi], f, "sqeuclidean")
            d *= -0.5
            np.exp(d, out=d)
            d *= weight
            return d
        k = np.zeros((hi - lo, self.n))
        if self.p.w_smooth:
            k += gauss(self.fs, self.p.w_smooth)
        if self.p.w_appearance:
            k += gauss(self.fa, self.p.w_appearance)
        idx = np.arange(lo, hi)
        k[idx - lo, idx] = 0.0
        return k

    def apply(self, q: np.ndarray) -> np.ndarray:
        """m = K q for q of shape N×2 whose rows sum to one."""
        if self._full is None:
            return np.concatenate([self._rows(lo, hi) @ q for lo, hi in self._chunks()])
        if self._rowsum is None:
            self._rowsum = self._full.sum(axis=1)
        # one product suffices: K q0 = K 1 - K q1
        m1 = self._full @ q[:, 1]
        return np.stack([self._rowsum - m1, m1], axis=1)


def _cap(h: int, w: int, max_side: int) -> tuple[int, int]:
    s = max(h, w)
    if s <= max_side:
        return h, w
    f = max_side / s
    return max(1, round(h * f)), max(1, round(w * f))


def mean_field(image, unary, params: CrfParams = CrfParams(), return_history: bool = False):
    """Iterate synchronous mean-field updates and return 2×h×w marginals.

    ``image`` is 3×h×w in intensity units (0-255). With ``return_history``
    the per-iteration count of argmax label changes is returned as well.
    """
    img = np.asarray(image, dtype=np.float64)
    U = np.asarray(unary, dtype=np.float64)
    if img.ndim != 3 or U.ndim != 3 or U.shape[0] != 2 or img.shape[1:] != U.shape[1:]:
        raise ShapeError(f"need 3×h×w image and 2×h×w unary, got {img.shape} and {U.shape}")
    _, h, w = U.shape
    hs, ws = _cap(h, w, params.max_side)
    scale = 1.0
    if (hs, ws) != (h, w):
        scale = hs / h
        img = resize_bilinear(img.transpose(1, 2, 0), hs, ws).transpose(2, 0, 1)
        U = resize_bilinear(U.transpose(1, 2, 0), hs, ws).transpose(2, 0, 1)
    kernel = _PairKernel(img, params, scale)
    u = U.reshape(2, -1)
    q = _softmax(-u)
    labels = q.argmax(axis=0)
    history = []
    for _ in range(params.iterations):
        m = kernel.apply(q.T).T
        # Potts: label l pays for the mass its neighbours put on the other label
        q = _softmax(-u - m[::-1])
        new = q.argmax(axis=0)
        history.append(int(np.count_nonzero(new != labels)))
        labels = new
    q = q.reshape(2, hs, ws)
    if (hs, ws) != (h, w):
        q = resize_nearest(q.transpose(1, 2, 0), h, w).transpose(2, 0, 1)
    return (q, history) if return_history else q


def mean_field_reference(image, unary, params: CrfParams = CrfParams()) -> np.ndarray:
    """Quadruple-loop mean field, for cross-checking on tiny inputs only."""
    img = np.asarray(image, dtype=np.float64)
    U = np.asarray(unary, dtype=np.float64)
    _, h, w = U.shape
    q = np.empty_like(U)
    for i in range(h):
        for j in range(w):
            e = np.exp(-(U[:, i, j] - U[:, i, j].min()))
            q[:, i, j] = e / e.sum()
    q = _floor(q)
    for _ in range(params.iterations):
        new = np.empty_like(q)
        for i in range(h):
            for j in range(w):
                m = np.zeros(2)
                for a in range(h):
                    for b in range(w):
                        if a == i and b == j:
                            continue
                        d2 = (i - a) ** 2 + (j - b) ** 2
                        c2 = float(((img[:, i, j] - img[:, a, b]) ** 2).sum())
                        k = params.w_smooth * np.exp(-d2 / (2 * params.theta_gamma ** 2))
                        k += params.w_appearance * np.exp(
                            -d2 / (2 * params.theta_alpha ** 2) - c2 / (2 * params.theta_beta ** 2))
                        m += k * q[:, a, b]
                energy = U[:, i, j] + np.array([m[1], m[0]])
                e = np.exp(-(energy - energy.min()))
                new[:, i, j] = e / e.sum()
        new = _floor(new)
        q = new
    return q


def refine(image, prob, params: CrfParams = CrfParams()) -> np.ndarray:
    """CRF-refined binary {0, 1} mask at the resolution of ``prob``.

    ``prob`` is 2×h×w; ``image`` is 3×h×w. The resolution cap, unary
    construction and upsampling all happen inside ``mean_field``.
    """
    q = mean_field(image, unary_from_prob(prob), params)
    return (q[1] > q[0]).astype(np.uint8)
