"""Stepsize and regularization sequences, eigenvalue constants, validators.

The sequences are

    gamma_k = gamma0 / (k + 1)^a
    mu_k    = mu0 * 2^b / (k + kappa)^b,   kappa = 2 (k even), 1 (k odd)

so ``mu`` is frozen on odd iterations and strictly decreases on even ones.
Validators never raise; they return a :class:`ValidationReport` listing
each inequality with the values that were compared.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np


@dataclass(frozen=True)
class SchedulePlan:
    gamma0: float
    mu0: float
    a: float
    b: float
    delta: float
    tau: float
    m: int
    n: int
    epsilon: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulePlan":
        kw = {}
        for f in fields(cls):
            if f.name not in d or d[f.name] in (None, "", "None"):
                continue
            kw[f.name] = int(d[f.name]) if f.name in ("m", "n") else float(d[f.name])
        return cls(**kw)

    @property
    def nm(self) -> int:
        return self.n + self.m

    @property
    def alpha(self) -> float:
        return -self.delta * self.nm


@dataclass(frozen=True)
class EigenConstants:
    """Spectral envelope ``lambda_min I <= H_k <= lambda * mu_k^alpha I``."""

    lambda_min: float
    lambda_log: float
    alpha: float

    @property
    def lam(self) -> float:
        """``lambda`` in linear scale; raises OverflowError when unrepresentable."""
        return math.exp(self.lambda_log)

    def log_upper(self, mu_k: float) -> float:
        return self.lambda_log + self.alpha * math.log(mu_k)


def stepsize(k: int, plan: SchedulePlan) -> float:
    return plan.gamma0 / (k + 1) ** plan.a


def regularization(k: int, plan: SchedulePlan) -> float:
    kappa = 2 if k % 2 == 0 else 1
    return plan.mu0 * 2.0 ** plan.b / (k + kappa) ** plan.b


def regularization_mod_form(k: int, plan: SchedulePlan) -> float:
    """Same sequence written as ``mu0 2^b / (k + 1 + mod(k + 1, 2))^b``."""
    return plan.mu0 * 2.0 ** plan.b / (k + 1 + (k + 1) % 2) ** plan.b


def stepsize_array(ks, plan: SchedulePlan) -> np.ndarray:
    """Vectorized ``stepsize``; numpy's pow may differ from the scalar form by an ulp."""
    ks = np.asarray(ks, dtype=np.float64)
    return plan.gamma0 / np.power(ks + 1.0, plan.a)


def regularization_array(ks, plan: SchedulePlan, mod_form=False) -> np.ndarray:
    """Vectorized ``regularization``; equal denominators give equal entries, so the
    parity pattern is exact here too."""
    ks = np.asarray(ks, dtype=np.int64)
    if mod_form:
        den = ks + 1 + (ks + 1) % 2
    else:
        den = ks + np.where(ks % 2 == 0, 2, 1)
    return plan.mu0 * 2.0 ** plan.b / np.power(den.astype(np.float64), plan.b)


class ParameterError(ValueError):
    pass


def stochastic_rate_exponents(epsilon: float, delta: float, n: int, m: int) -> tuple[float, float]:
    """Exponents ``(a, b)`` of the stochastic method for a target ``epsilon``."""
    if not 0 < epsilon < 1 / 3:
        raise ParameterError(f"epsilon < 1/3 and epsilon > 0 required, got epsilon={epsilon}")
    upper = 1.5 * epsilon / (n + m)
    if not 0 < delta < upper:
        raise ParameterError(
            f"delta < 1.5*epsilon/(n+m) and delta > 0 required, got delta={delta}, "
            f"1.5*epsilon/(n+m)={upper}")
    a = 2.0 / 3.0 - epsilon + 2.0 * delta * (n + m) / 3.0
    return a, 1.0 / 3.0


def stochastic_rate_plan(epsilon, delta, n, m, gamma0, mu0, tau=1.0) -> SchedulePlan:
    a, b = stochastic_rate_exponents(epsilon, delta, n, m)
    return SchedulePlan(gamma0=gamma0, mu0=mu0, a=a, b=b, delta=delta, tau=tau,
                        m=m, n=n, epsilon=epsilon)


def eigen_constants(L, tau, mu0, delta, n, m) -> EigenConstants:
    for name, v in (("L", L), ("tau", tau), ("mu0", mu0), ("delta", delta),
                    ("n", n), ("m", m)):
        if not v > 0:
            raise ParameterError(f"{name} must be positive, got {v}")
    c = (m + n) * (L + tau * mu0 ** delta)
    lam_log = (n + m - 1) * math.log(c) - math.lgamma(n) - (n + m) * math.log(tau)
    return EigenConstants(lambda_min=1.0 / c, lambda_log=lam_log, alpha=-delta * (n + m))


def eigen_constants_for(plan: SchedulePlan, L: float) -> EigenConstants:
    return eigen_constants(L, plan.tau, plan.mu0, plan.delta, plan.n, plan.m)


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    ok: bool

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        return f"[{status}] {self.name}: lhs={self.lhs:.10g} rhs={self.rhs:.10g}"


@dataclass
class ValidationReport:
    regime: str
    checks: list[Check] = field(default_factory=list)
    rho: float | None = None

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def violations(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    def add(self, name, lhs, op, rhs):
        ok = {"<": lhs < rhs, "<=": lhs <= rhs, ">": lhs > rhs, ">=": lhs >= rhs,
              "==": abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))}[op]
        self.checks.append(Check(name, float(lhs), float(rhs), bool(ok)))

    def lines(self) -> list[str]:
        out = [str(c) for c in self.checks]
        if self.rho is not None:
            out.append(f"rho = {self.rho:.10g}")
        out.append(f"{self.regime}: {'PASS' if self.passed else 'FAIL'}")
        return out


def _positivity(rep: ValidationReport, plan: SchedulePlan):
    for name in ("gamma0", "mu0", "a", "b", "delta", "tau"):
        rep.add(f"{name} > 0", getattr(plan, name), ">", 0.0)
    rep.add("delta <= 1", plan.delta, "<=", 1.0)


def validate_as_convergence(plan: SchedulePlan, L: float) -> ValidationReport:
    """Feasibility for almost-sure convergence of the stochastic scheme."""
    rep = ValidationReport("as-convergence")
    _positivity(rep, plan)
    a, b, dnm = plan.a, plan.b, plan.delta * plan.nm
    rep.add("a/b > 1+2*delta*(n+m)", a / b, ">", 1 + 2 * dnm)
    rep.add("a+b <= 1", a + b, "<=", 1.0)
    rep.add("a+2b > 1", a + 2 * b, ">", 1.0)
    rep.add("a-delta*b*(m+n) > 0.5", a - dnm * b, ">", 0.5)
    rep.add("gamma0*mu0 <= L*(m+n)", plan.gamma0 * plan.mu0, "<=", L * plan.nm)
    return rep


def mean_convergence_rho(plan: SchedulePlan) -> float:
    return (plan.mu0 * 2.0 ** plan.b) ** (2 + 2 * plan.delta * plan.nm) / plan.gamma0


def validate_mean_convergence(plan: SchedulePlan, L: float) -> ValidationReport:
    """Feasibility for convergence in mean; on success also reports ``rho``."""
    rep = ValidationReport("mean-convergence")
    _positivity(rep, plan)
    a, b, dnm = plan.a, plan.b, plan.delta * plan.nm
    rep.add("a/b > 1+2*delta*(m+n)", a / b, ">", 1 + 2 * dnm)
    rep.add("a+b < 1", a + b, "<", 1.0)
    rep.add("a/b <= 2*(1+delta*(m+n))", a / b, "<=", 2 * (1 + dnm))
    rep.add("gamma0*mu0 <= L*(m+n)", plan.gamma0 * plan.mu0, "<=", L * plan.nm)
    if plan.epsilon is not None:
        rep.add("epsilon < 1/3", plan.epsilon, "<", 1 / 3)
        rep.add("delta < 1.5*epsilon/(n+m)", plan.delta, "<", 1.5 * plan.epsilon / plan.nm)
    if rep.passed:
        rep.rho = mean_convergence_rho(plan)
    return rep


def validate_deterministic(plan: SchedulePlan, L: float, mode: str = "convergence") -> ValidationReport:
    """Feasibility for the full-gradient scheme (``mode`` is convergence or rate)."""
    rep = ValidationReport(f"deterministic-{mode}")
    _positivity(rep, plan)
    a, b, nm = plan.a, plan.b, plan.nm
    if mode == "convergence":
        rep.add("a/b > 2*delta*(n+m)", a / b, ">", 2 * plan.delta * nm)
        rep.add("a+b <= 1", a + b, "<=", 1.0)
        rep.add("a+2b > 1", a + 2 * b, ">", 1.0)
    elif mode == "rate":
        eps = plan.epsilon if plan.epsilon is not None else a
        rep.add("0 < epsilon", eps, ">", 0.0)
        rep.add("epsilon < 1", eps, "<", 1.0)
        rep.add("a == epsilon", a, "==", eps)
        rep.add("b == 1-epsilon", b, "==", 1.0 - eps)
        if eps < 1:
            rep.add("delta < epsilon/(2(n+m)(1-epsilon))", plan.delta, "<",
                    eps / (2 * nm * (1 - eps)))
        rep.add("gamma0*mu0 >= (n+m)(L+tau*mu0^delta)", plan.gamma0 * plan.mu0, ">=",
                nm * (L + plan.tau * plan.mu0 ** plan.delta))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return rep


def deterministic_rate_plan(epsilon, delta, n, m, L, tau=1.0, mu0=1.0) -> SchedulePlan:
    """Rate-regime plan with ``gamma0 * mu0 = (n+m)(L + tau mu0^delta)`` exactly."""
    target = (n + m) * (L + tau * mu0 ** delta)
    gamma0 = target / mu0
    while gamma0 * mu0 < target:  # undo rounding in the division
        gamma0 = math.nextafter(gamma0, math.inf)
    return SchedulePlan(gamma0=gamma0, mu0=mu0, a=epsilon, b=1.0 - epsilon, delta=delta,
                        tau=tau, m=m, n=n, epsilon=epsilon)


def as_convergence_preset(L: float, n: int, m: int, tau=1.0) -> SchedulePlan:
    """a = 5/6, b = 1/6, delta = 1/(m+n), gamma0 = mu0 = sqrt(L)."""
    g = math.sqrt(L)
    return SchedulePlan(gamma0=g, mu0=g, a=5 / 6, b=1 / 6, delta=1.0 / (m + n), tau=tau,
                        m=m, n=n)


def deterministic_convergence_preset(n: int, m: int, gamma0=1.0, mu0=1.0, tau=1.0) -> SchedulePlan:
    """a = 4/5, b = 1/5, delta = 1/(m+n)."""
    return SchedulePlan(gamma0=gamma0, mu0=mu0, a=0.8, b=0.2, delta=1.0 / (m + n), tau=tau,
                        m=m, n=n)


def log_stepsize_condition_margin(ks, plan: SchedulePlan, L: float) -> np.ndarray:
    """``log(rhs) - log(gamma_k mu_k^(2 alpha))`` for the recursive error bound.

    Nonnegative entries mark iterations where
    ``gamma_k mu_k^(2 alpha) <= lambda_min / (lambda^2 (L + mu0))`` holds.
    """
    ec = eigen_constants_for(plan, L)
    ks = np.asarray(ks)
    lhs = (np.log(stepsize_array(ks, plan))
           + 2 * ec.alpha * np.log(regularization_array(ks, plan)))
    rhs = math.log(ec.lambda_min) - 2 * ec.lambda_log - math.log(L + plan.mu0)
    return rhs - lhs


def stepsize_condition_index(plan: SchedulePlan, L: float, k_max: int) -> int | None:
    """First ``K <= k_max`` from which the stepsize condition holds through ``k_max``.

    Returns None when it fails at ``k_max``.
    """
    margin = log_stepsize_condition_margin(np.arange(k_max + 1), plan, L)
    bad = np.flatnonzero(margin < 0)
    if len(bad) == 0:
        return 0
    if bad[-1] == k_max:
        return None
    return int(bad[-1] + 1)


@dataclass(frozen=True)
class RateConstants:
    gamma_bound: float
    theta_estimate: float | None
    theta_is_estimate: bool = True


class UndefinedRateConstant(ValueError):
    pass


def compute_rate_constants(plan: SchedulePlan, L: float, dist0: float, K: int,
                           fK_reg: float, fstar: float, *, f_next_reg=None,
                           nu: float = 0.0, beta: float = 0.5) -> RateConstants:
    """Constants of the deterministic and stochastic rate bounds.

    ``fK_reg`` is ``f_K(x_K)``. ``f_next_reg`` is an estimate of
    ``E[f_{K+1}(x_{K+1})]`` (a Monte Carlo mean for stochastic runs); when
    supplied, the ``theta`` diagnostic is returned as well.
    """
    ec = eigen_constants_for(plan, L)
    c1 = ec.lambda_min * plan.gamma0 * plan.mu0
    if c1 <= plan.b:
        raise UndefinedRateConstant(
            f"lambda_min*gamma0*mu0 = {c1} must exceed b = {plan.b}")
    eps = 1.0 - plan.b if plan.epsilon is None else plan.epsilon
    first = (K + 1) ** (1 - eps) * (fK_reg - fstar)
    second = (ec.lambda_min * plan.gamma0 * plan.mu0 ** 2 * dist0 ** 2
              / (4 ** plan.a * (c1 - plan.b)))
    gamma_bound = max(first, second)

    theta = None
    if f_next_reg is not None:
        gk, mk = stepsize(K, plan), regularization(K, plan)
        t1 = (f_next_reg - fstar) / (gk * mk ** (2 * ec.alpha - 1))
        rho = mean_convergence_rho(plan)
        # the lambda^2 term is assembled in log space; it overflows for large n+m
        if nu > 0:
            log_t = math.log(L + plan.mu0) + 2 * ec.lambda_log + 2 * math.log(nu)
            noise = math.exp(log_t) if log_t < 700 else math.inf
        else:
            noise = 0.0
        t2 = (rho * ec.lambda_min * dist0 ** 2 + noise) / (2 * ec.lambda_min * (1 - beta))
        theta = max(t1, t2)
    return RateConstants(gamma_bound, theta)
