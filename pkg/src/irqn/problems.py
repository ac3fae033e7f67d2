"""Stochastic first-order oracles.

Two families of finite-sum problems are provided, both with the
generalized-linear structure ``F(x, i) = phi_i(a_i^T x)``:

* logistic regression on sparse examples, ``phi(z) = ln(1 + exp(-v z))``;
* least squares, ``phi(z) = (z - b)^2 / 2``, including rank-deficient
  instances with a known optimal value and solution set.

A sample ``xi`` is a dataset index (or a mini-batch of indices whose
gradients are averaged).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

LOSS_LOGISTIC = 0
LOSS_SQUARED = 1


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SparseExample:
    """One labeled example: 0-based ``(index, value)`` features, label in {-1, +1}."""

    features: tuple[tuple[int, float], ...]
    label: int

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label!r}")
        prev = -1
        for idx, _ in self.features:
            if idx <= prev:
                raise ValueError("feature indices must be strictly increasing")
            prev = idx

    @property
    def indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.features], dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.features], dtype=np.float64)

    def squared_norm(self) -> float:
        return float(sum(v * v for _, v in self.features))


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled sparse examples stored row-wise (CSR)."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    labels: np.ndarray
    dimension: int
    lipschitz_bound: float
    variance_bound: float | None = None

    def __post_init__(self):
        n_rows = len(self.indptr) - 1
        if n_rows < 1:
            raise ValueError("dataset must contain at least one example")
        if len(self.labels) != n_rows:
            raise ValueError("label count does not match row count")
        if len(self.indices) and int(self.indices.max()) >= self.dimension:
            raise DimensionError("feature index exceeds dimension")
        for name in ("indptr", "indices", "data", "labels"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @classmethod
    def from_examples(cls, examples: Sequence[SparseExample], dimension=None,
                      variance_bound=None) -> "Dataset":
        if not examples:
            raise ValueError("dataset must contain at least one example")
        indptr = np.zeros(len(examples) + 1, dtype=np.int64)
        idx, val = [], []
        for r, ex in enumerate(examples):
            indptr[r + 1] = indptr[r] + len(ex.features)
            idx.extend(i for i, _ in ex.features)
            val.extend(v for _, v in ex.features)
        indices = np.array(idx, dtype=np.int64)
        data = np.array(val, dtype=np.float64)
        if dimension is None:
            dimension = int(indices.max()) + 1 if len(indices) else 1
        labels = np.array([ex.label for ex in examples], dtype=np.float64)
        L = _row_norm_bound(indptr, data) / 4.0
        return cls(indptr, indices, data, labels, int(dimension), L, variance_bound)

    @classmethod
    def from_dense(cls, X, labels, variance_bound=None) -> "Dataset":
        m = sp.csr_matrix(np.asarray(X, dtype=np.float64))
        m.eliminate_zeros()
        return cls.from_csr(m, labels, variance_bound=variance_bound)

    @classmethod
    def from_csr(cls, m, labels, dimension=None, variance_bound=None) -> "Dataset":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sort_indices()
        labels = np.asarray(labels, dtype=np.float64)
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        indptr = m.indptr.astype(np.int64)
        data = m.data.astype(np.float64)
        dim = m.shape[1] if dimension is None else int(dimension)
        L = _row_norm_bound(indptr, data) / 4.0
        return cls(indptr, m.indices.astype(np.int64), data, labels, dim, L,
                   variance_bound)

    @property
    def n_samples(self) -> int:
        return len(self.indptr) - 1

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def example(self, i: int) -> SparseExample:
        idx, val = self.row(i)
        feats = tuple((int(a), float(b)) for a, b in zip(idx, val))
        return SparseExample(feats, int(self.labels[i]))

    @property
    def examples(self) -> list[SparseExample]:
        return [self.example(i) for i in range(self.n_samples)]

    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr),
                             shape=(self.n_samples, self.dimension))

    def take(self, rows) -> "Dataset":
        """Dataset restricted to ``rows`` (in the given order); L is recomputed."""
        rows = np.asarray(rows, dtype=np.int64)
        m = self.csr()[rows]
        return Dataset.from_csr(m, self.labels[rows], dimension=self.dimension)


def _row_norm_bound(indptr, data) -> float:
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(len(counts)), counts)
    sq = np.bincount(rows, weights=data * data, minlength=len(counts))
    return float(sq.max()) if len(sq) else 0.0


def _check_dim(x, n):
    if np.ndim(x) != 1 or len(x) != n:
        raise DimensionError(f"expected a vector of length {n}, got shape {np.shape(x)}")


def _margin(x, ex: SparseExample) -> float:
    z = 0.0
    for i, v in ex.features:
        if i >= len(x):
            raise DimensionError(f"feature index {i} out of range for dimension {len(x)}")
        z += v * x[i]
    return z * ex.label


def _softplus_neg(t: float) -> float:
    """ln(1 + exp(-t)) without overflow."""
    return max(0.0, -t) + math.log1p(math.exp(-abs(t)))


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def logistic_value(x, ex: SparseExample) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("x must be a vector")
    return _softplus_neg(_margin(x, ex))


def logistic_grad(x, ex: SparseExample) -> np.ndarray:
    """Gradient ``-v u sigma(-v u^T x)``; nonzero only on the support of ``u``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("x must be a vector")
    c = -ex.label * _sigmoid(-_margin(x, ex))
    g = np.zeros_like(x)
    for i, v in ex.features:
        g[i] = c * v
    return g


def full_objective(x, ds: Dataset) -> float:
    """Mean logistic loss over the dataset."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, ds.dimension)
    t = ds.labels * (ds.csr() @ x)
    return float(np.mean(np.maximum(0.0, -t) + np.log1p(np.exp(-np.abs(t)))))


def lipschitz_estimate(ds: Dataset) -> float:
    """Per-sample curvature bound ``max_i ||u_i||^2 / 4``."""
    return _row_norm_bound(ds.indptr, ds.data) / 4.0


def regularized_grad(g, x, x0, mu: float) -> np.ndarray:
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    g, x, x0 = (np.asarray(v, dtype=np.float64) for v in (g, x, x0))
    if not (g.shape == x.shape == x0.shape):
        raise DimensionError("g, x and x0 must share a shape")
    return g + mu * (x - x0)


@dataclass(frozen=True, eq=False)
class SyntheticLsq:
    """Least squares ``(1/2N) sum (a_i^T x - b_i)^2`` with known optimum.

    The solution set is ``x_ls + null(A)``; distances are measured with the
    row-space projector ``A^+ A``.
    """

    A: np.ndarray
    b: np.ndarray
    known_fstar: float = field(init=False)
    x_ls: np.ndarray = field(init=False)
    row_projector: np.ndarray = field(init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64).ravel()
        if A.shape[0] == 0:
            raise ValueError("least-squares problem needs at least one row")
        if A.shape[0] != len(b):
            raise DimensionError("A and b row counts differ")
        pinv = np.linalg.pinv(A)
        x_ls = pinv @ b
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "x_ls", _frozen(x_ls))
        object.__setattr__(self, "row_projector", _frozen(pinv @ A))
        r = A @ x_ls - b
        object.__setattr__(self, "known_fstar", float(r @ r) / (2 * len(b)))

    @property
    def rows(self):
        return list(zip(self.A, self.b))

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    @property
    def dimension(self) -> int:
        return self.A.shape[1]

    def lipschitz_bound(self) -> float:
        """Per-row bound ``max_i ||a_i||^2`` (dominates the averaged Hessian norm)."""
        return float(np.max(np.sum(self.A * self.A, axis=1)))

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x - self.row_projector @ (x - self.x_ls)

    def dist(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(np.linalg.norm(self.row_projector @ (x - self.x_ls)))

    def regularized_minimizer(self, mu: float, x0) -> np.ndarray:
        """Minimizer of ``f + (mu/2)||x - x0||^2`` from the normal equations."""
        N, n = self.A.shape
        M = self.A.T @ self.A / N + mu * np.eye(n)
        return np.linalg.solve(M, self.A.T @ self.b / N + mu * np.asarray(x0, float))


def lsq_value_grad(x, p: SyntheticLsq) -> tuple[float, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, p.dimension)
    r = p.A @ x - p.b
    N = len(p.b)
    return float(r @ r) / (2 * N), p.A.T @ r / N


def make_rank_deficient_lsq(n=2, rank=1, n_rows=1, seed=0, scale=1.0) -> SyntheticLsq:
    """Random consistent least-squares problem whose Hessian has the given rank."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n, rank)))
    coef = rng.standard_normal((n_rows, rank))
    A = scale * coef @ basis.T
    b = A @ rng.standard_normal(n)
    return SyntheticLsq(A, b)


def sample_index(rng: np.random.Generator, N: int) -> int:
    if N < 1:
        raise ValueError("cannot sample from an empty index set")
    return int(rng.integers(N))


class SampleStream:
    """Deterministic stream of uniform sample indices.

    Indices are drawn from a PCG64 generator in fixed-size blocks so the
    compiled and pure-Python backends consume the exact same sequence.
    """

    def __init__(self, seed, N: int, block: int = 65536):
        if N < 1:
            raise ValueError("cannot sample from an empty index set")
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.rng = np.random.Generator(np.random.PCG64(ss))
        self.N = int(N)
        self.block = int(block)
        self.buf = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.consumed = 0

    def refill(self):
        self.buf = self.rng.integers(0, self.N, size=self.block, dtype=np.int64)
        self.pos = 0

    def draw(self, count: int = 1) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        for j in range(count):
            if self.pos >= len(self.buf):
                self.refill()
            out[j] = self.buf[self.pos]
            self.pos += 1
        self.consumed += count
        return out


class GlmOracle:
    """Finite-sum oracle ``f(x) = (1/N) sum_i phi_i(a_i^T x)`` over CSR rows.

    ``grad(x, sample)`` averages per-example gradients over ``sample``, which
    may be a single index or an array of indices.
    """

    loss: int = -1

    def __init__(self, indptr, indices, data, targets, dim, lipschitz):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.targets = np.ascontiguousarray(targets, dtype=np.float64)
        self.dim = int(dim)
        self.lipschitz = float(lipschitz)
        self._csr = sp.csr_matrix((self.data, self.indices, self.indptr),
                                  shape=(len(self.indptr) - 1, self.dim))
        for a in (self.indptr, self.indices, self.data, self.targets):
            a.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return len(self.indptr) - 1

    def _phi(self, z, t):
        raise NotImplementedError

    def _dphi(self, z, t):
        raise NotImplementedError

    def _rows(self, sample):
        return np.atleast_1d(np.asarray(sample, dtype=np.int64))

    def grad(self, x, sample) -> np.ndarray:
        _check_dim(x, self.dim)
        g = np.zeros(self.dim)
        rows = self._rows(sample)
        for r in rows:
            lo, hi = self.indptr[r], self.indptr[r + 1]
            idx, val = self.indices[lo:hi], self.data[lo:hi]
            c = self._dphi(float(val @ x[idx]), self.targets[r])
            np.add.at(g, idx, c * val)
        if len(rows) > 1:
            g /= len(rows)
        return g

    def value(self, x, sample) -> float:
        _check_dim(x, self.dim)
        rows = self._rows(sample)
        tot = 0.0
        for r in rows:
            lo, hi = self.indptr[r], self.indptr[r + 1]
            tot += self._phi(float(self.data[lo:hi] @ x[self.indices[lo:hi]]),
                             self.targets[r])
        return tot / len(rows)

    def margins(self, x) -> np.ndarray:
        return self._csr @ x

    def full_value(self, x) -> float:
        _check_dim(x, self.dim)
        return float(np.mean(self._phi(self.margins(x), self.targets)))

    def full_grad(self, x) -> np.ndarray:
        _check_dim(x, self.dim)
        c = self._dphi(self.margins(x), self.targets)
        return self._csr.T @ c / self.n_samples

    def scalar_grad(self, x, i: int) -> float:
        """Derivative ``phi_i'(a_i^T x)``: the gradient is this times row ``i``."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return float(self._dphi(float(self.data[lo:hi] @ x[self.indices[lo:hi]]),
                                self.targets[i]))


class LogisticOracle(GlmOracle):
    loss = LOSS_LOGISTIC

    def __init__(self, ds: Dataset):
        super().__init__(ds.indptr, ds.indices, ds.data, ds.labels, ds.dimension,
                         ds.lipschitz_bound)
        self.dataset = ds

    @staticmethod
    def _phi(z, v):
        t = v * z
        return np.maximum(0.0, -t) + np.log1p(np.exp(-np.abs(t)))

    @staticmethod
    def _dphi(z, v):
        # -v * sigma(-v z), evaluated without overflow
        t = v * z
        e = np.exp(-np.abs(t))
        s = np.where(t >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        return -v * s


class LeastSquaresOracle(GlmOracle):
    loss = LOSS_SQUARED

    def __init__(self, p: SyntheticLsq):
        m = sp.csr_matrix(p.A)
        super().__init__(m.indptr, m.indices, m.data, p.b, p.dimension,
                         p.lipschitz_bound())
        self.problem = p
        self.known_fstar = p.known_fstar

    @staticmethod
    def _phi(z, b):
        return 0.5 * (z - b) ** 2

    @staticmethod
    def _dphi(z, b):
        return z - b


def estimate_gradient_variance(oracle, x, draws=1000, seed=0) -> float:
    """Empirical ``nu``: root of the mean of ``||grad F(x, xi) - grad f(x)||^2``."""
    rng = np.random.default_rng(seed)
    full = oracle.full_grad(x)
    acc = 0.0
    for _ in range(draws):
        d = oracle.grad(x, sample_index(rng, oracle.n_samples)) - full
        acc += float(d @ d)
    return math.sqrt(acc / draws)


def make_synthetic_logistic(N=2000, n=50, density=0.2, noise=0.1, seed=0,
                            binary=True) -> Dataset:
    """Sparse logistic data labeled by a random hyperplane with flipped labels.

    A ``noise`` fraction of labels is flipped, so the data is not separable
    and the loss has a finite minimizer.
    """
    rng = np.random.default_rng(seed)
    mask = rng.random((N, n)) < density
    # every example keeps at least one active feature
    empty = ~mask.any(axis=1)
    mask[empty, rng.integers(0, n, size=int(empty.sum()))] = True
    X = mask.astype(np.float64) if binary else mask * rng.standard_normal((N, n))
    w = rng.standard_normal(n)
    z = X @ w
    z -= np.median(z)
    labels = np.where(z >= 0, 1.0, -1.0)
    flip = rng.random(N) < noise
    labels[flip] *= -1
    return Dataset.from_dense(X, labels)


def as_oracle(problem):
    if isinstance(problem, GlmOracle):
        return problem
    if isinstance(problem, Dataset):
        return LogisticOracle(problem)
    if isinstance(problem, SyntheticLsq):
        return LeastSquaresOracle(problem)
    raise TypeError(f"cannot build an oracle from {type(problem).__name__}")
