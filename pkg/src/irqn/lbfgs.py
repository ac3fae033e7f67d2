"""Curvature pairs, the limited-memory buffer and the two-loop recursion.

``explicit_H`` / ``explicit_B`` build the dense inverse-Hessian and Hessian
approximations from a buffer. They cost O(n^2 m) memory and time and exist
to check the two-loop recursion and the spectral envelope on small problems.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .schedules import EigenConstants

EXPLICIT_MAX_DIM = 64


class DegeneratePairError(ValueError):
    pass


class CurvatureError(ValueError):
    """``s^T y <= 0``: the oracle is not monotone or the samples were mismatched."""


class BufferOrderError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CurvaturePair:
    s: np.ndarray
    y: np.ndarray
    index: int
    sy: float
    yy: float

    @classmethod
    def from_vectors(cls, s, y, index: int) -> "CurvaturePair":
        s = np.array(s, dtype=np.float64)
        y = np.array(y, dtype=np.float64)
        s.setflags(write=False)
        y.setflags(write=False)
        return cls(s, y, int(index), float(s @ y), float(y @ y))


def make_pair(x_k, x_prev, g_k, g_prev, tau: float, mu_k: float, delta: float,
              i: int) -> CurvaturePair:
    """Pair ``s = x_k - x_prev``, ``y = g_k - g_prev + tau mu_k^delta s``.

    ``g_k`` and ``g_prev`` must be gradients of the same sample function.
    """
    s = np.asarray(x_k, dtype=np.float64) - np.asarray(x_prev, dtype=np.float64)
    if not np.any(s):
        raise DegeneratePairError(f"pair {i}: x_k equals x_prev")
    y = (np.asarray(g_k, dtype=np.float64) - np.asarray(g_prev, dtype=np.float64)
         + (tau * mu_k ** delta) * s)
    p = CurvaturePair.from_vectors(s, y, i)
    if not p.sy > 0:
        raise CurvatureError(f"pair {i}: s^T y = {p.sy} <= 0")
    return p


class PairBuffer:
    """FIFO store of at most ``m`` pairs with consecutive indices."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = int(capacity)
        self.pairs: deque[CurvaturePair] = deque()

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def newest(self) -> CurvaturePair:
        return self.pairs[-1]

    def push(self, p: CurvaturePair) -> "PairBuffer":
        if self.pairs and p.index != self.pairs[-1].index + 1:
            raise BufferOrderError(
                f"pair index {p.index} does not follow newest index {self.pairs[-1].index}")
        self.pairs.append(p)
        if len(self.pairs) > self.capacity:
            self.pairs.popleft()
        return self

    def indices(self) -> list[int]:
        return [p.index for p in self.pairs]

    def stored_floats(self) -> int:
        return sum(p.s.size + p.y.size for p in self.pairs)


def push_pair(buf: PairBuffer, p: CurvaturePair) -> PairBuffer:
    return buf.push(p)


def two_loop(buf: PairBuffer, q0) -> np.ndarray:
    """Return ``H q0`` for the buffer's limited-memory matrix in O(m n)."""
    if len(buf) == 0:
        raise ValueError("two-loop recursion needs at least one pair")
    q = np.array(q0, dtype=np.float64)
    pairs = list(buf.pairs)
    alphas = []
    for p in reversed(pairs):
        a = (p.s @ q) / p.sy
        alphas.append(a)
        q -= a * p.y
    newest = pairs[-1]
    r = (newest.sy / newest.yy) * q
    for p, a in zip(pairs, reversed(alphas)):
        r += (a - (p.y @ r) / p.sy) * p.s
    return r


def _check_explicit(buf: PairBuffer) -> int:
    if len(buf) == 0:
        raise ValueError("explicit construction needs at least one pair")
    n = buf.newest.s.size
    if n > EXPLICIT_MAX_DIM:
        raise ValueError(f"explicit matrices are limited to n <= {EXPLICIT_MAX_DIM}")
    return n


def explicit_H(buf: PairBuffer) -> np.ndarray:
    n = _check_explicit(buf)
    newest = buf.newest
    H = (newest.sy / newest.yy) * np.eye(n)
    I = np.eye(n)
    for p in buf.pairs:
        V = I - np.outer(p.y, p.s) / p.sy
        H = V.T @ H @ V + np.outer(p.s, p.s) / p.sy
    return 0.5 * (H + H.T)


def explicit_B(buf: PairBuffer) -> np.ndarray:
    n = _check_explicit(buf)
    newest = buf.newest
    B = (newest.yy / newest.sy) * np.eye(n)
    for p in buf.pairs:
        Bs = B @ p.s
        sBs = float(p.s @ Bs)
        assert sBs > 0, "s^T B s must be positive for SPD B"
        B = B - np.outer(Bs, Bs) / sBs + np.outer(p.y, p.y) / p.sy
    return 0.5 * (B + B.T)


@dataclass
class SpectralReport:
    eig_min: float
    eig_max: float
    lower_bound: float
    log_upper_bound: float
    passed: bool
    lower_ok: bool
    upper_ok: bool

    def __str__(self):
        return (f"eig in [{self.eig_min:.6g}, {self.eig_max:.6g}], "
                f"lower {self.lower_bound:.6g} ({'ok' if self.lower_ok else 'VIOLATED'}), "
                f"log upper {self.log_upper_bound:.6g} "
                f"({'ok' if self.upper_ok else 'VIOLATED'})")


def spectral_check(H, mu_k: float, ec: EigenConstants, rtol: float = 1e-10) -> SpectralReport:
    """Check ``lambda_min I <= H <= lambda mu_k^alpha I``; the upper side in log space."""
    H = np.asarray(H, dtype=np.float64)
    if not np.allclose(H, H.T, rtol=1e-12, atol=1e-14 * np.abs(H).max()):
        raise ValueError("spectral_check needs a symmetric matrix")
    w = np.linalg.eigvalsh(H)
    lo, hi = float(w[0]), float(w[-1])
    log_ub = ec.log_upper(mu_k)
    lower_ok = lo >= ec.lambda_min * (1 - rtol)
    upper_ok = hi > 0 and math.log(hi) <= log_ub + rtol
    return SpectralReport(lo, hi, ec.lambda_min, log_ub, lower_ok and upper_ok,
                          lower_ok, upper_ok)


def sum_product_eig_bound(S: float, P: float, n: int) -> float:
    """Lower bound ``(n-1)! P / S^(n-1)`` on the smallest of ``n`` positive numbers
    with sum at most ``S`` and product at least ``P``."""
    if not (S > 0 and P > 0):
        raise ValueError("S and P must be positive")
    return math.exp(math.lgamma(n) + math.log(P) - (n - 1) * math.log(S))
