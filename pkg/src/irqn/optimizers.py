"""Iteration drivers.

Step functions update an :class:`OptimizerState` in place and return it with
an :class:`IterationRecord`; they work with any oracle exposing
``grad(x, sample)``, ``full_grad(x)``, ``full_value(x)``, ``n_samples`` and
``dim``. :func:`run` drives whole runs and, for generalized-linear oracles,
hands the inner loop to the compiled backend when it is available.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import backend as _backend
from .lbfgs import PairBuffer, CurvaturePair, make_pair, two_loop
from .problems import GlmOracle, SampleStream
from .schedules import SchedulePlan, regularization, stepsize

R_MAX = 16
LBFGS_FAMILY = ("irs-lbfgs", "ir-lbfgs", "ir-sgd", "sgd", "rs-lbfgs")
ALGORITHMS = LBFGS_FAMILY + ("saga", "iag")
ALGO_CODES = {name: i for i, name in enumerate(ALGORITHMS)}


@dataclass
class IterationRecord:
    k: int
    gamma: float
    mu: float
    f: float = math.nan
    f_reg: float = math.nan
    dir_norm: float = math.nan
    resampled: int = 0
    stalled: bool = False


@dataclass
class OptimizerState:
    k: int
    x: np.ndarray
    x0: np.ndarray
    buffer: PairBuffer
    stream: SampleStream | None = None
    batch: int = 1
    x_prev: np.ndarray | None = None
    g_prev: np.ndarray | None = None
    prev_sample: np.ndarray | None = None
    converged: bool = False
    accepted_pairs: int = 0

    @classmethod
    def initial(cls, x0, m: int = 1, stream=None, batch: int = 1) -> "OptimizerState":
        anchor = np.array(x0, dtype=np.float64)
        anchor.setflags(write=False)
        return cls(k=0, x=anchor.copy(), x0=anchor, buffer=PairBuffer(max(1, m)),
                   stream=stream, batch=batch)


def _draw(state: OptimizerState) -> np.ndarray:
    if state.stream is None:
        raise ValueError("stochastic step needs a sample stream")
    return state.stream.draw(state.batch)


def _stochastic_direction(state, oracle, mu, regularize=True):
    """Sample xi_k and form ``grad F(x_k, xi_k) + mu_k (x_k - x0)``.

    A zero vector triggers up to ``R_MAX`` fresh draws.
    """
    resampled = 0
    while True:
        sample = _draw(state)
        g = oracle.grad(state.x, sample)
        q0 = g + mu * (state.x - state.x0) if regularize else g.copy()
        if np.any(q0) or resampled == R_MAX:
            return sample, g, q0, resampled
        resampled += 1


def irs_lbfgs_step(state: OptimizerState, oracle, plan: SchedulePlan):
    """One pass of the stochastic iteratively regularized L-BFGS loop body."""
    k = state.k
    gamma, mu = stepsize(k, plan), regularization(k, plan)
    if k % 2 == 1:
        # both gradients of the pair use the previous sample xi_{k-1}
        g_here = oracle.grad(state.x, state.prev_sample)
        pair = make_pair(state.x, state.x_prev, g_here, state.g_prev, plan.tau, mu,
                         plan.delta, (k + 1) // 2)
        state.buffer.push(pair)
    sample, g, q0, resampled = _stochastic_direction(state, oracle, mu)
    stalled = not np.any(q0)
    d = q0 if k < 2 * plan.m - 1 else two_loop(state.buffer, q0)
    state.x_prev, state.g_prev, state.prev_sample = state.x, g, sample
    state.x = state.x - gamma * d
    state.k = k + 1
    return state, IterationRecord(k, gamma, mu, dir_norm=float(np.linalg.norm(d)),
                                  resampled=resampled, stalled=stalled)


def ir_lbfgs_step(state: OptimizerState, oracle, plan: SchedulePlan):
    """Deterministic counterpart: full gradients everywhere, no sampling."""
    k = state.k
    gamma, mu = stepsize(k, plan), regularization(k, plan)
    g = oracle.full_grad(state.x)
    if k % 2 == 1:
        pair = make_pair(state.x, state.x_prev, g, state.g_prev, plan.tau, mu,
                         plan.delta, (k + 1) // 2)
        state.buffer.push(pair)
    q0 = g + mu * (state.x - state.x0)
    if not np.any(q0):
        state.converged = True
        return state, IterationRecord(k, gamma, mu, dir_norm=0.0)
    d = q0 if k < 2 * plan.m - 1 else two_loop(state.buffer, q0)
    state.x_prev, state.g_prev = state.x, g
    state.x = state.x - gamma * d
    state.k = k + 1
    return state, IterationRecord(k, gamma, mu, dir_norm=float(np.linalg.norm(d)))


def ir_sgd_step(state: OptimizerState, oracle, plan: SchedulePlan, regularize=True,
                stochastic=True):
    """``x - gamma_k (grad F(x, xi_k) + mu_k (x - x0))``; ``regularize=False`` is plain SA."""
    k = state.k
    gamma = stepsize(k, plan)
    mu = regularization(k, plan) if regularize else 0.0
    if stochastic:
        sample, g, q0, resampled = _stochastic_direction(state, oracle, mu, regularize)
        state.prev_sample = sample
    else:
        g = oracle.full_grad(state.x)
        q0 = g + mu * (state.x - state.x0)
        resampled = 0
        if not np.any(q0):
            state.converged = True
            return state, IterationRecord(k, gamma, mu, dir_norm=0.0)
    state.x_prev, state.g_prev = state.x, g
    state.x = state.x - gamma * q0
    state.k = k + 1
    return state, IterationRecord(k, gamma, mu, dir_norm=float(np.linalg.norm(q0)),
                                  resampled=resampled, stalled=not np.any(q0))


@dataclass(frozen=True)
class RsPlan:
    """Fixed-regularization stochastic L-BFGS on ``f + (eta/2)||x||^2``.

    ``gamma_k = gamma0/(k+1)``; ``eta`` is multiplied by ``rho`` every
    ``epoch_len`` iterations.
    """

    gamma0: float
    eta0: float
    rho: float = 1.0
    epoch_len: int = 400
    m: int = 2

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")

    def gamma(self, k: int) -> float:
        return self.gamma0 / (k + 1)

    def eta(self, k: int) -> float:
        return self.eta0 * self.rho ** (k // self.epoch_len)


def _curvature_ok(s, y) -> bool:
    sy = float(s @ y)
    return sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y))


def rs_lbfgs_step(state: OptimizerState, oracle, plan: RsPlan):
    k = state.k
    gamma, eta = plan.gamma(k), plan.eta(k)
    resampled = 0
    while True:
        sample = _draw(state)
        g = oracle.grad(state.x, sample) + eta * state.x
        if np.any(g) or resampled == R_MAX:
            break
        resampled += 1
    d = two_loop(state.buffer, g) if len(state.buffer) else g
    x_new = state.x - gamma * d
    s = x_new - state.x
    if np.any(s):
        y = oracle.grad(x_new, sample) + eta * x_new - g
        if _curvature_ok(s, y):
            state.accepted_pairs += 1
            state.buffer.push(CurvaturePair.from_vectors(s, y, state.accepted_pairs))
    state.x_prev, state.prev_sample = state.x, sample
    state.x = x_new
    state.k = k + 1
    return state, IterationRecord(k, gamma, eta, dir_norm=float(np.linalg.norm(d)),
                                  resampled=resampled, stalled=not np.any(g))


# --- incremental baselines -------------------------------------------------

@dataclass
class TableState:
    """Iterate plus a table of stored per-example gradients.

    For generalized-linear oracles with ``scalar=True`` one scalar per
    example is kept (the gradient is that scalar times the feature row).
    """

    k: int
    x: np.ndarray
    table: np.ndarray
    total: np.ndarray
    scalar: bool
    eta: float = 0.0
    stream: SampleStream | None = None
    x_avg: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.total / len(self.table)

    @property
    def stored_floats(self) -> int:
        return int(self.table.size)


def _row_grad(oracle, x, j, scalar):
    if scalar:
        return oracle.scalar_grad(x, j)
    return oracle.grad(x, j)


def _scatter(oracle, total, j, coef):
    lo, hi = oracle.indptr[j], oracle.indptr[j + 1]
    total[oracle.indices[lo:hi]] += coef * oracle.data[lo:hi]


def table_init(oracle, x0, *, scalar=None, mode="exact", scale=0.0, eta=0.0,
               stream=None, seed=0, average=False) -> TableState:
    """Gradient table at ``x0``; ``mode`` is exact, zero or perturbed (noise ``scale``)."""
    if oracle.n_samples < 1:
        raise ValueError("empty gradient table")
    x = np.array(x0, dtype=np.float64)
    if scalar is None:
        scalar = isinstance(oracle, GlmOracle)
    N = oracle.n_samples
    if scalar:
        table = np.array([oracle.scalar_grad(x, j) for j in range(N)])
    else:
        table = np.array([oracle.grad(x, j) for j in range(N)])
    if mode == "zero":
        table[...] = 0.0
    elif mode == "perturbed":
        table = table + scale * np.random.default_rng(seed).standard_normal(table.shape)
    elif mode != "exact":
        raise ValueError(f"unknown table init mode {mode!r}")
    if scalar:
        total = oracle._csr.T @ table
    else:
        total = table.sum(axis=0)
    return TableState(0, x, table, np.asarray(total, dtype=np.float64), scalar, eta,
                      stream, x.copy() if average else None)


def saga_step(state: TableState, oracle, gamma: float, j: int | None = None) -> TableState:
    N = len(state.table)
    if N == 0:
        raise ValueError("empty gradient table")
    if j is None:
        j = int(state.stream.draw(1)[0])
    mean = state.total / N
    new = _row_grad(oracle, state.x, j, state.scalar)
    old = state.table[j]
    if state.scalar:
        lo, hi = oracle.indptr[j], oracle.indptr[j + 1]
        idx, val = oracle.indices[lo:hi], oracle.data[lo:hi]
        d = mean.copy()
        d[idx] += (new - old) * val
        d += state.eta * state.x
        state.total[idx] += (new - old) * val
        state.table[j] = new
    else:
        d = new - old + mean + state.eta * state.x
        state.total += new - old
        state.table[j] = new
    state.x = state.x - gamma * d
    state.k += 1
    if state.x_avg is not None:
        state.x_avg += (state.x - state.x_avg) / (state.k + 1)
    return state


def iag_step(state: TableState, oracle, gamma: float, sweep: str = "cyclic") -> TableState:
    N = len(state.table)
    if N == 0:
        raise ValueError("empty gradient table")
    if sweep == "cyclic":
        j = state.k % N
    elif sweep == "random":
        j = int(state.stream.draw(1)[0])
    else:
        raise ValueError(f"unknown sweep {sweep!r}")
    new = _row_grad(oracle, state.x, j, state.scalar)
    if state.scalar:
        _scatter(oracle, state.total, j, new - state.table[j])
    else:
        state.total += new - state.table[j]
    state.table[j] = new
    d = state.total / N + state.eta * state.x
    state.x = state.x - gamma * d
    state.k += 1
    return state


# --- whole runs ------------------------------------------------------------

@dataclass
class RunConfig:
    """Algorithm selection and its parameters (flat, serializable)."""

    algorithm: str = "irs-lbfgs"
    max_iters: int = 10000
    log_stride: int = 100
    batch: int = 1
    m: int = 2
    # iteratively regularized methods
    gamma0: float = 1.0
    mu0: float = 1.0
    a: float = 2 / 3
    b: float = 1 / 3
    delta: float = 0.01
    tau: float = 1.0
    epsilon: float | None = None
    stochastic: bool = True
    # fixed-regularization baselines
    eta: float = 0.1
    rho: float = 1.0
    epoch_len: int = 400
    step: float = 0.1
    sweep: str = "random"
    table_init: str = "exact"
    table_scale: float = 0.0
    average: bool = False
    shared_stream: bool = False
    backend: str = "auto"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.max_iters < 0 or self.log_stride < 1 or self.batch < 1:
            raise ValueError("max_iters >= 0, log_stride >= 1 and batch >= 1 required")

    def plan(self, n: int) -> SchedulePlan:
        return SchedulePlan(gamma0=self.gamma0, mu0=self.mu0, a=self.a, b=self.b,
                            delta=self.delta, tau=self.tau, m=self.m, n=n,
                            epsilon=self.epsilon)

    def rs_plan(self) -> RsPlan:
        return RsPlan(self.gamma0, self.eta, self.rho, self.epoch_len, self.m)

    def as_flat(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_flat(cls, d: dict) -> "RunConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if isinstance(v, str):
                v = _parse_scalar(v, f.type)
            kw[f.name] = v
        return cls(**kw)


def _parse_scalar(v: str, typ):
    t = str(typ)
    if v in ("None", ""):
        return None
    if "bool" in t:
        return v.strip().lower() in ("1", "true", "yes", "on")
    if t.startswith("int"):
        return int(v)
    if "float" in t:
        return float(v)
    return v


def stream_for(config: RunConfig, seed: int, N: int) -> SampleStream:
    """Per-run sample stream keyed by (seed, algorithm) unless streams are shared."""
    key = () if config.shared_stream else (ALGO_CODES[config.algorithm],)
    return SampleStream(np.random.SeedSequence(seed, spawn_key=key), N)


class PyRunner:
    """Pure-Python driver for the L-BFGS family (the fallback backend)."""

    def __init__(self, config: RunConfig, oracle, x0, stream):
        self.config = config
        self.oracle = oracle
        self.algorithm = config.algorithm
        m = config.m if self.algorithm in ("irs-lbfgs", "ir-lbfgs", "rs-lbfgs") else 1
        self.state = OptimizerState.initial(x0, m, stream, config.batch)
        self.plan = config.plan(oracle.dim)
        self.rs = config.rs_plan() if self.algorithm == "rs-lbfgs" else None

    @property
    def x(self):
        return self.state.x

    @property
    def k(self):
        return self.state.k

    @property
    def converged(self):
        return self.state.converged

    def step(self) -> IterationRecord:
        a, s, o = self.algorithm, self.state, self.oracle
        if a == "irs-lbfgs":
            return irs_lbfgs_step(s, o, self.plan)[1]
        if a == "ir-lbfgs":
            return ir_lbfgs_step(s, o, self.plan)[1]
        if a == "ir-sgd":
            return ir_sgd_step(s, o, self.plan, True, self.config.stochastic)[1]
        if a == "sgd":
            return ir_sgd_step(s, o, self.plan, False, self.config.stochastic)[1]
        if a == "rs-lbfgs":
            return rs_lbfgs_step(s, o, self.rs)[1]
        raise ValueError(a)

    def advance(self, count: int, trace=None):
        """Run ``count`` steps; returns (first direction norm, resamples, stalls).

        ``trace`` may hold ``f`` and ``dist2`` arrays that receive ``f(x_k)``
        and ``||x_k - x0||^2`` before each step.
        """
        first, resampled, stalls = math.nan, 0, 0
        for j in range(count):
            if self.state.converged:
                break
            if trace is not None:
                t = trace["pos"]
                trace["f"][t] = self.oracle.full_value(self.state.x)
                diff = self.state.x - self.state.x0
                trace["dist2"][t] = diff @ diff
                trace["pos"] = t + 1
            rec = self.step()
            if j == 0:
                first = rec.dir_norm
            resampled += rec.resampled
            stalls += rec.stalled
        return first, resampled, stalls


def make_runner(config: RunConfig, oracle, x0, stream):
    """Compiled runner for generalized-linear oracles when available, else Python."""
    want = config.backend
    if want not in ("auto", "python", "compiled"):
        raise ValueError(f"unknown backend {want!r}")
    usable = _backend.COMPILED and isinstance(oracle, GlmOracle)
    if want == "compiled" and not usable:
        raise RuntimeError("compiled backend unavailable for this oracle")
    if want != "python" and usable:
        return _backend.compiled_runner(config, oracle, x0, stream)
    return PyRunner(config, oracle, x0, stream)


def _log_schedule(config: RunConfig, k: int):
    if config.algorithm == "rs-lbfgs":
        rs = config.rs_plan()
        return rs.gamma(k), rs.eta(k)
    if config.algorithm in ("saga", "iag"):
        return config.step, config.eta
    plan = config.plan(1)
    mu = regularization(k, plan) if config.algorithm != "sgd" else 0.0
    return stepsize(k, plan), mu


def _reg_value(config, f, x, x0, mu):
    if config.algorithm in ("rs-lbfgs", "saga", "iag"):
        return f + 0.5 * mu * float(x @ x)
    d = x - x0
    return f + 0.5 * mu * float(d @ d)


def run(config: RunConfig, oracle, seed: int, x0=None, meta: dict | None = None):
    """Execute ``config.max_iters`` steps, logging every ``log_stride`` iterations.

    Returns a :class:`~irqn.dataio.RunRecord`. On a step error the records
    gathered so far are kept and the error is attached as ``record.error``.
    """
    from .dataio import RunRecord

    x0 = np.zeros(oracle.dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    stream = stream_for(config, seed, oracle.n_samples)
    snapshot = dict(config.as_flat())
    snapshot.update(meta or {})
    rr = RunRecord(config=snapshot, seed=seed, algorithm=config.algorithm, records=[])
    t0 = time.perf_counter()
    K = config.max_iters
    log_ks = sorted(set(range(0, K + 1, config.log_stride)) | {K})
    try:
        if config.algorithm in ("saga", "iag"):
            _run_table(config, oracle, x0, stream, log_ks, rr)
        else:
            runner = make_runner(config, oracle, x0, stream)
            rr.config["backend_used"] = type(runner).__name__
            for idx, k in enumerate(log_ks):
                if runner.k != k:
                    break  # converged early
                gamma, mu = _log_schedule(config, k)
                f = oracle.full_value(runner.x)
                rec = IterationRecord(k, gamma, mu, f, _reg_value(config, f, runner.x, x0, mu))
                rr.records.append(rec)
                if k == K:
                    break
                first, res, stalls = runner.advance(log_ks[idx + 1] - k)
                rec.dir_norm, rec.resampled, rec.stalled = first, res, bool(stalls)
                if runner.converged and runner.k != log_ks[idx + 1]:
                    kk = runner.k
                    gamma, mu = _log_schedule(config, kk)
                    f = oracle.full_value(runner.x)
                    rr.records.append(IterationRecord(kk, gamma, mu, f,
                                                      _reg_value(config, f, runner.x, x0, mu)))
                    rr.converged = True
                    break
            rr.final_x = np.array(runner.x)
    except Exception as exc:  # partial records are preserved
        rr.error = f"{type(exc).__name__}: {exc}"
    rr.wall_time_seconds = time.perf_counter() - t0
    return rr


def table_for(config: RunConfig, oracle, x0, stream) -> TableState:
    """Initial table state of a SAGA or IAG run."""
    # SAGA exploits the linear-model structure; IAG keeps full gradient rows
    scalar = config.algorithm == "saga" and isinstance(oracle, GlmOracle)
    return table_init(oracle, x0, scalar=scalar, mode=config.table_init,
                      scale=config.table_scale, eta=config.eta, stream=stream,
                      average=config.average)


def _run_table(config, oracle, x0, stream, log_ks, rr):
    st = table_for(config, oracle, x0, stream)
    rr.config["backend_used"] = "python"
    K = log_ks[-1]
    for idx, k in enumerate(log_ks):
        xk = st.x_avg if st.x_avg is not None else st.x
        f = oracle.full_value(xk)
        rr.records.append(IterationRecord(k, config.step, config.eta, f,
                                          f + 0.5 * config.eta * float(xk @ xk)))
        if k == K:
            break
        for _ in range(log_ks[idx + 1] - k):
            if config.algorithm == "saga":
                saga_step(st, oracle, config.step)
            else:
                iag_step(st, oracle, config.step, config.sweep)
    rr.final_x = np.array(st.x_avg if st.x_avg is not None else st.x)


def trace_run(config: RunConfig, oracle, seed: int, iters: int, x0=None):
    """Per-iteration ``f(x_k)``, ``||x_k - x0||^2``, ``gamma_k``, ``mu_k`` for k <= iters.

    Entries after an early convergence repeat the final iterate.
    """
    x0 = np.zeros(oracle.dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    stream = stream_for(config, seed, oracle.n_samples)
    runner = make_runner(config, oracle, x0, stream)
    tr = {"f": np.empty(iters + 1), "dist2": np.empty(iters + 1), "pos": 0}
    runner.advance(iters, trace=tr)
    pos = tr["pos"]
    f_last = oracle.full_value(runner.x)
    d = runner.x - x0
    tr["f"][pos:] = f_last
    tr["dist2"][pos:] = d @ d
    ks = np.arange(iters + 1)
    sched = [_log_schedule(config, int(k)) for k in ks] if iters <= 1000 else None
    if sched is None:
        from .schedules import regularization_array, stepsize_array
        plan = config.plan(oracle.dim)
        gam, mu = stepsize_array(ks, plan), regularization_array(ks, plan)
    else:
        gam = np.array([s[0] for s in sched])
        mu = np.array([s[1] for s in sched])
    return {"f": tr["f"], "dist2": tr["dist2"], "gamma": gam, "mu": mu,
            "x": np.array(runner.x), "k_reached": runner.k}
