"""Exit criteria, one test each. Every test prints a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from irqn.cli import cmd_rate_fit, fit_rate
from irqn.dataio import write_run_csv
from irqn.lbfgs import CurvaturePair, PairBuffer, explicit_H, spectral_check, two_loop
from irqn.optimizers import (PyRunner, RunConfig, iag_step, run, saga_step, stream_for,
                             table_for, trace_run)
from irqn.problems import (LeastSquaresOracle, LogisticOracle, SyntheticLsq,
                           make_rank_deficient_lsq, make_synthetic_logistic)
from irqn.schedules import (SchedulePlan, stochastic_rate_plan, compute_rate_constants,
                            deterministic_convergence_preset, deterministic_rate_plan,
                            eigen_constants_for, regularization, as_convergence_preset,
                            stepsize_condition_index, validate_as_convergence,
                            validate_deterministic, validate_mean_convergence)

pytestmark = pytest.mark.acceptance


def config_from_plan(plan: SchedulePlan, algorithm, **kw):
    return RunConfig(algorithm=algorithm, m=plan.m, gamma0=plan.gamma0, mu0=plan.mu0,
                     a=plan.a, b=plan.b, delta=plan.delta, tau=plan.tau,
                     epsilon=plan.epsilon, **kw)


def regularized_gap_recursion(tr, fstar, lam_min, dist0):
    """``v_{k+1} - [(1 - lam gamma mu) v_k + (lam d^2/2) mu^2 gamma]`` for each k."""
    mu, g = tr["mu"], tr["gamma"]
    v = tr["f"] + 0.5 * mu * tr["dist2"] - fstar
    rhs = (1 - lam_min * mu[:-1] * g[:-1]) * v[:-1] + 0.5 * lam_min * dist0 ** 2 * mu[:-1] ** 2 * g[:-1]
    return v[1:] - rhs, v


def flat_problem():
    """Rank-1 problem in R^2 with solution set {(2, t)}; dist from the origin is 2."""
    return SyntheticLsq(np.array([[1.0, 0.0]]), np.array([2.0]))


def newton_logistic(oracle, eta=0.0, iters=40):
    """Independent dense Newton solve of the (optionally ridge-regularized) logistic loss."""
    X = oracle._csr.toarray()
    y = np.asarray(oracle.targets)
    N, n = X.shape
    x = np.zeros(n)
    for _ in range(iters):
        z = y * (X @ x)
        s = 0.5 * (1 - np.tanh(0.5 * z))  # 1/(1+e^z)
        g = -(X.T @ (y * s)) / N + eta * x
        H = X.T @ (X * (s * (1 - s))[:, None]) / N + eta * np.eye(n)
        x = x - np.linalg.solve(H, g)
    return x, oracle.full_value(x) + 0.5 * eta * float(x @ x)


# --- 1 ---------------------------------------------------------------------

def test_two_loop_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(500):
        n, m = int(rng.integers(1, 21)), int(rng.integers(1, 6))
        G = rng.standard_normal((n, int(rng.integers(1, n + 1))))
        Q = G @ G.T + 10 ** rng.uniform(-3, 0) * np.eye(n)
        buf = PairBuffer(m)
        for i in range(1, m + 1):
            s = rng.standard_normal(n)
            buf.push(CurvaturePair.from_vectors(s, Q @ s, i))
        q = rng.standard_normal(n)
        ref = explicit_H(buf) @ q
        worst = max(worst, np.linalg.norm(two_loop(buf, q) - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - t0
    criterion(1, "two-loop equals explicit H q", worst <= 1e-10 and elapsed < 10,
              f"max rel dev {worst:.2e}, {elapsed:.2f}s")


# --- 2 ---------------------------------------------------------------------

def test_pair_and_spectral_bounds(criterion):
    t0 = time.perf_counter()
    p = make_rank_deficient_lsq(n=3, rank=2, n_rows=30, seed=5)
    oracle = LeastSquaresOracle(p)
    L = p.lipschitz_bound()
    plan = as_convergence_preset(L, 3, 2)
    assert validate_as_convergence(plan, L).passed
    ec = eigen_constants_for(plan, L)
    cfg = config_from_plan(plan, "irs-lbfgs", backend="python")
    x0 = np.array([1.0, -2.0, 0.5])
    runner = PyRunner(cfg, oracle, x0, stream_for(cfg, 3, oracle.n_samples))
    n_pairs = n_spectral = 0
    curvature_ok = secant_ok = spectral_ok = True
    for _ in range(2000):
        k = runner.k
        runner.step()
        if k % 2 == 0:
            continue
        mu = regularization(k, plan)
        buf = runner.state.buffer
        pair = buf.newest
        assert pair.index == (k + 1) // 2
        n_pairs += 1
        curvature_ok &= pair.sy >= plan.tau * mu ** plan.delta * float(pair.s @ pair.s) * (1 - 1e-12)
        H = explicit_H(buf)
        secant_ok &= np.linalg.norm(H @ pair.y - pair.s) <= 1e-8 * np.linalg.norm(pair.s)
        if k >= 2 * plan.m - 1:
            n_spectral += 1
            spectral_ok &= spectral_check(0.5 * (H + H.T), mu, ec).passed
    elapsed = time.perf_counter() - t0
    criterion(2, "curvature, secant and spectral bounds",
              curvature_ok and secant_ok and spectral_ok and elapsed < 30,
              f"{n_pairs} pairs, {n_spectral} spectral checks, {elapsed:.2f}s")


# --- 3 ---------------------------------------------------------------------

def test_deterministic_recursion(criterion):
    t0 = time.perf_counter()
    p = flat_problem()
    oracle = LeastSquaresOracle(p)
    x0 = np.zeros(2)
    dist0 = p.dist(x0)
    assert dist0 == 2.0
    L = p.lipschitz_bound()
    plan = deterministic_convergence_preset(2, 2, gamma0=0.19, mu0=1.0, tau=100.0)
    assert validate_deterministic(plan, L).passed
    iters = 100_000
    k413 = stepsize_condition_index(plan, L, iters)
    assert k413 is not None
    K = max(2 * plan.m - 1, k413)
    ec = eigen_constants_for(plan, L)
    tr = trace_run(config_from_plan(plan, "ir-lbfgs", stochastic=False), oracle, 0, iters, x0)
    assert tr["k_reached"] == iters
    excess, _ = regularized_gap_recursion(tr, p.known_fstar, ec.lambda_min, dist0)
    worst = float(excess[K:].max())
    elapsed = time.perf_counter() - t0
    criterion(3, "deterministic recursion from empirical K",
              worst <= 1e-9 and elapsed < 5,
              f"K={K}, max excess {worst:.2e}, {elapsed:.2f}s")


# --- 4 ---------------------------------------------------------------------

def test_deterministic_rate_bound(criterion, tmp_path):
    t0 = time.perf_counter()
    p = flat_problem()
    oracle = LeastSquaresOracle(p)
    x0 = np.zeros(2)
    L, n, m, eps = p.lipschitz_bound(), 2, 2, 0.1
    delta = 0.5 * eps / (2 * (n + m) * (1 - eps))
    plan = deterministic_rate_plan(eps, delta, n, m, L, tau=1.0, mu0=100.0)
    assert validate_deterministic(plan, L, "rate").passed
    iters = 1_000_000
    cfg = config_from_plan(plan, "ir-lbfgs", stochastic=False)
    tr = trace_run(cfg, oracle, 0, iters, x0)
    assert tr["k_reached"] == iters
    ec = eigen_constants_for(plan, L)
    # The stepsize condition never holds this early, so K is the first index
    # from which the recursion itself holds, floored at 2m-1.
    assert stepsize_condition_index(plan, L, iters) is None
    excess, v = regularized_gap_recursion(tr, p.known_fstar, ec.lambda_min, 2.0)
    bad = np.flatnonzero(excess > 1e-9)
    K = max(2 * m - 1, int(bad[-1]) + 1 if len(bad) else 0)
    assert np.all(1 - ec.lambda_min * tr["gamma"][K:] * tr["mu"][K:] >= 0)
    rc = compute_rate_constants(plan, L, 2.0, K, v[K] + p.known_fstar, p.known_fstar)
    ks = np.arange(iters + 1)
    gap = tr["f"] - p.known_fstar
    bound = rc.gamma_bound / (ks + 1.0) ** (1 - eps)
    bound_ok = bool(np.all(gap[K:] <= bound[K:]))

    rr = run(config_from_plan(plan, "ir-lbfgs", stochastic=False, max_iters=iters,
                              log_stride=10_000), oracle, 0, x0)
    write_run_csv(rr, tmp_path / "det.csv")
    fit = cmd_rate_fit([tmp_path / "det.csv"], p.known_fstar, k_min=100_000, out=None)
    elapsed = time.perf_counter() - t0
    criterion(4, "deterministic rate bound and tail slope",
              bound_ok and fit.slope <= -0.8 and elapsed < 60,
              f"K={K}, Gamma={rc.gamma_bound:.4g}, slope {fit.slope:.3f}, {elapsed:.2f}s")


# --- 5 ---------------------------------------------------------------------

def test_stochastic_rate(criterion):
    t0 = time.perf_counter()
    oracle = LogisticOracle(make_synthetic_logistic(2000, 50, seed=0))
    n, m = 50, 2
    # reference run: 10^6 SAGA steps on the unregularized loss
    ref_cfg = RunConfig(algorithm="saga", max_iters=1_000_000, log_stride=1_000_000,
                        eta=0.0, step=1 / (3 * oracle.lipschitz), table_init="zero")
    fstar = run(ref_cfg, oracle, 0).records[-1].f
    _, f_newton = newton_logistic(oracle)
    assert fstar == pytest.approx(f_newton, abs=1e-10)

    plan = stochastic_rate_plan(0.1, 0.001, n, m, gamma0=1.0, mu0=0.1)
    assert validate_mean_convergence(plan, oracle.lipschitz).passed
    cfg = config_from_plan(plan, "irs-lbfgs", max_iters=100_000, log_stride=1000)
    runs = [run(cfg, oracle, s) for s in range(1, 21)]
    assert all(r.error is None for r in runs)
    ks = np.array(runs[0].ks, dtype=float)
    mean_f = np.mean([r.column("f") for r in runs], axis=0)
    gap = mean_f - fstar
    tail = ks >= 1000
    violations = float(np.mean(np.diff(gap[tail]) > 0))
    fit = fit_rate(ks, mean_f, fstar, k_min=10_000)
    elapsed = time.perf_counter() - t0
    criterion(5, "stochastic mean gap decreases with tail slope <= -0.15",
              violations <= 0.05 and fit.slope <= -0.15 and elapsed < 600,
              f"violations {violations:.1%}, slope {fit.slope:.3f}, {elapsed:.1f}s")


# --- 6 ---------------------------------------------------------------------

def test_regularization_parity(criterion):
    t0 = time.perf_counter()
    plan = SchedulePlan(gamma0=1.0, mu0=1.0, a=2 / 3, b=1 / 3, delta=0.1, tau=1.0, m=2, n=3)
    ok = True
    prev = regularization(0, plan)
    for k in range(1, 1_000_001):
        cur = regularization(k, plan)
        ok &= (cur == prev) if k % 2 else (cur < prev)
        prev = cur
    elapsed = time.perf_counter() - t0
    criterion(6, "mu frozen at odd k, decreasing at even k", ok and elapsed < 1,
              f"{elapsed:.2f}s")


# --- 7 ---------------------------------------------------------------------

def test_validator_fidelity(criterion):
    n, m, L = 3, 2, 1.0
    nm = n + m
    checks = []
    checks.append(validate_as_convergence(as_convergence_preset(L, n, m), L).passed)
    checks.append(validate_deterministic(deterministic_convergence_preset(n, m), L).passed)

    def base(**kw):
        d = dict(gamma0=1.0, mu0=1.0, a=5 / 6, b=1 / 6, delta=1 / nm, tau=1.0, m=m, n=n)
        d.update(kw)
        return SchedulePlan(**d)

    def fails_with(rep, name):
        return (not rep.passed) and name in rep.violations

    checks.append(fails_with(validate_as_convergence(base(a=0.5, b=0.5), L),
                             "a/b > 1+2*delta*(n+m)"))
    checks.append(fails_with(validate_as_convergence(base(a=0.4, b=0.1), L),
                             "a-delta*b*(m+n) > 0.5"))
    a1 = stochastic_rate_plan(0.3, 0.05, n, m, 1.0, 1.0)
    checks.append(validate_mean_convergence(a1, L).passed)
    a0 = base(a=2 / 3 + 2 * 0.05 * nm / 3, b=1 / 3, delta=0.05)
    checks.append(fails_with(validate_mean_convergence(a0, L), "a+b < 1"))
    rate = SchedulePlan(gamma0=10.0, mu0=1.0, a=0.1, b=0.9, delta=0.01, tau=1.0, m=m, n=n,
                        epsilon=0.1)
    checks.append(validate_deterministic(rate, L, "rate").passed)
    low = SchedulePlan(gamma0=9.9, mu0=1.0, a=0.1, b=0.9, delta=0.01, tau=1.0, m=m, n=n,
                       epsilon=0.1)
    checks.append(fails_with(validate_deterministic(low, L, "rate"),
                             "gamma0*mu0 >= (n+m)(L+tau*mu0^delta)"))
    criterion(7, "validator presets pass and perturbations name the violation", all(checks),
              f"{sum(checks)}/{len(checks)} checks")


# --- 8 ---------------------------------------------------------------------

def test_baselines_and_memory(criterion):
    t0 = time.perf_counter()
    N, n, eta = 500, 20, 0.1
    oracle = LogisticOracle(make_synthetic_logistic(N, n, seed=3))
    _, F_star = newton_logistic(oracle, eta)
    Lt = oracle.lipschitz + eta
    x0 = np.zeros(n)
    gap0 = oracle.full_value(x0) - F_star
    details, ok = [], True
    for algo, step, sweep in (("saga", 1 / (3 * Lt), "random"), ("iag", 1 / (10 * Lt), "cyclic")):
        cfg = RunConfig(algorithm=algo, max_iters=50 * N, log_stride=N, eta=eta, step=step,
                        sweep=sweep)
        rr = run(cfg, oracle, 1, x0)
        final = abs(rr.records[-1].f_reg - F_star)
        reduction = gap0 / max(final, 1e-300)
        ok &= rr.error is None and reduction >= 1e3
        details.append(f"{algo} x{min(reduction, 1e16):.1e}")

    saga = table_for(RunConfig(algorithm="saga", eta=eta), oracle, x0,
                     stream_for(RunConfig(algorithm="saga"), 0, N))
    iag = table_for(RunConfig(algorithm="iag", eta=eta), oracle, x0, None)
    for _ in range(3 * N):
        saga_step(saga, oracle, 1 / (3 * Lt))
        iag_step(iag, oracle, 1 / (10 * Lt), "cyclic")
    mem_ok = saga.stored_floats == N and iag.stored_floats == N * n

    m = 3
    cfg = RunConfig(algorithm="irs-lbfgs", m=m, gamma0=0.5, mu0=0.5, delta=0.001,
                    backend="python")
    runner = PyRunner(cfg, oracle, x0, stream_for(cfg, 0, N))
    runner.advance(500)
    mem_ok &= runner.state.buffer.stored_floats() == 2 * m * n
    elapsed = time.perf_counter() - t0
    details.append(f"memory saga={saga.stored_floats} iag={iag.stored_floats} "
                   f"irs-lbfgs={runner.state.buffer.stored_floats()}")
    criterion(8, "SAGA/IAG reach 1e3 gap reduction; memory footprints", ok and mem_ok,
              ", ".join(details) + f", {elapsed:.1f}s")


# --- 9 ---------------------------------------------------------------------

def test_irs_lbfgs_beats_fixed_regularization(criterion):
    t0 = time.perf_counter()
    oracle = LogisticOracle(make_synthetic_logistic(10_000, 500, density=0.02, seed=11))
    n, m, mu0 = 500, 2, 1.0
    wins = []
    for gamma0 in (10.0, 0.5, 0.1):
        plan = stochastic_rate_plan(0.1, 1e-4, n, m, gamma0, mu0)
        irs = config_from_plan(plan, "irs-lbfgs", max_iters=10_000, log_stride=1000)
        rs = RunConfig(algorithm="rs-lbfgs", m=m, gamma0=gamma0, eta=mu0, rho=1.0,
                       max_iters=10_000, log_stride=1000)
        f_irs = np.mean([run(irs, oracle, s).records[-1].f for s in range(1, 6)])
        f_rs = np.mean([run(rs, oracle, s).records[-1].f for s in range(1, 6)])
        wins.append(f_irs <= f_rs)
    elapsed = time.perf_counter() - t0
    criterion(9, "IRS-LBFGS final objective <= RS-LBFGS (rho=1) in 2 of 3 stepsizes",
              sum(wins) >= 2, f"wins {sum(wins)}/3, {elapsed:.1f}s")
