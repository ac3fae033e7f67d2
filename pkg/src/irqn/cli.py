"""Command-line front end: validate, run, rate-fit, plot, bench.

Configs are flat ``key=value`` files; command-line flags override file
values. Every resolved setting is written into the run metadata.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import backend
from .dataio import RunRecord, read_libsvm, read_meta, read_run_csv, run_label, subset, \
    write_run_csv
from .optimizers import ALGORITHMS, IterationRecord, RunConfig, run
from .problems import LeastSquaresOracle, LogisticOracle, make_rank_deficient_lsq, \
    make_synthetic_logistic
from .schedules import ParameterError, SchedulePlan, stochastic_rate_exponents, \
    deterministic_convergence_preset, deterministic_rate_plan, as_convergence_preset, \
    validate_as_convergence, validate_deterministic, validate_mean_convergence

REGIMES = ("as", "mean", "stochastic-rate", "det-convergence", "det-rate")
PRESETS = ("as-convergence", "det-convergence", "det-rate")


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: str | None = None
    synthetic: str = "logistic"
    samples: int = 2000
    dim: int | None = None
    subset: int | None = None
    data_seed: int = 0
    seeds: tuple = (1,)
    out: str = "runs"
    fstar: str | None = None
    lipschitz: float | None = None
    regime: str = "mean"
    preset: str | None = None
    label: str | None = None

    _extra = ("dataset", "synthetic", "samples", "dim", "subset", "data_seed", "seeds",
              "out", "fstar", "lipschitz", "regime", "preset", "label")

    def snapshot(self) -> dict:
        d = self.run.as_flat()
        for k in self._extra:
            v = getattr(self, k)
            d[k] = ",".join(str(s) for s in v) if k == "seeds" else v
        return d


def _int_or_none(v):
    return None if v in (None, "", "None") else int(v)


def _float_or_none(v):
    return None if v in (None, "", "None") else float(v)


def parse_seeds(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return tuple(seeds)


def load_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = val.strip()
    return out


_FLAG_TO_KEY = {"algo": "algorithm", "iters": "max_iters", "shared_stream": "shared_stream"}


def build_config(args) -> ExperimentConfig:
    flat = load_config_file(args.config) if getattr(args, "config", None) else {}
    for name, val in vars(args).items():
        if val is None or name in ("config", "command", "func"):
            continue
        flat[_FLAG_TO_KEY.get(name, name)] = val
    rc_keys = {f.name for f in fields(RunConfig)}
    rc = RunConfig.from_flat({k: (str(v) if not isinstance(v, str) else v)
                              for k, v in flat.items() if k in rc_keys})
    ec = ExperimentConfig(run=rc)
    conv = {"samples": int, "dim": _int_or_none, "subset": _int_or_none, "data_seed": int,
            "lipschitz": _float_or_none, "seeds": parse_seeds}
    for k in ExperimentConfig._extra:
        if k in flat:
            v = flat[k]
            setattr(ec, k, conv[k](v) if k in conv else (None if v == "None" else v))
    if ec.regime not in REGIMES:
        raise ValueError(f"unknown regime {ec.regime!r}")
    return ec


def load_problem(ec: ExperimentConfig):
    """Oracle for the configured dataset file or synthetic problem."""
    if ec.dataset:
        ds = read_libsvm(ec.dataset, dimension=ec.dim)
        if ec.subset:
            ds = subset(ds, ec.subset, ec.data_seed)
        return LogisticOracle(ds)
    if ec.synthetic == "logistic":
        ds = make_synthetic_logistic(ec.samples, ec.dim or 50, seed=ec.data_seed)
        if ec.subset:
            ds = subset(ds, ec.subset, ec.data_seed)
        return LogisticOracle(ds)
    if ec.synthetic == "lsq":
        n = ec.dim or 2
        return LeastSquaresOracle(make_rank_deficient_lsq(n=n, rank=max(1, n - 1),
                                                          n_rows=ec.samples,
                                                          seed=ec.data_seed))
    raise ValueError(f"unknown synthetic problem {ec.synthetic!r}")


# --- validate --------------------------------------------------------------

def _plan_for_validation(ec: ExperimentConfig, n: int, L: float):
    rc = ec.run
    if ec.preset == "as-convergence":
        return as_convergence_preset(L, n, rc.m, rc.tau), "as"
    if ec.preset == "det-convergence":
        return deterministic_convergence_preset(n, rc.m, rc.gamma0, rc.mu0, rc.tau), \
            "det-convergence"
    if ec.preset == "det-rate":
        eps = rc.epsilon if rc.epsilon is not None else 0.1
        plan = SchedulePlan(gamma0=rc.gamma0, mu0=rc.mu0, a=eps, b=1 - eps, delta=rc.delta,
                            tau=rc.tau, m=rc.m, n=n, epsilon=eps)
        return plan, "det-rate"
    if ec.preset is not None:
        raise ValueError(f"unknown preset {ec.preset!r}")
    if ec.regime == "stochastic-rate":
        if rc.epsilon is None:
            raise ValueError("regime stochastic-rate needs --epsilon")
        a, b = stochastic_rate_exponents(rc.epsilon, rc.delta, n, rc.m)
        return SchedulePlan(gamma0=rc.gamma0, mu0=rc.mu0, a=a, b=b, delta=rc.delta,
                            tau=rc.tau, m=rc.m, n=n, epsilon=rc.epsilon), "mean"
    return rc.plan(n), ec.regime


def validate_plan(plan: SchedulePlan, L: float, regime: str):
    if regime == "as":
        return validate_as_convergence(plan, L)
    if regime == "mean":
        return validate_mean_convergence(plan, L)
    if regime == "det-convergence":
        return validate_deterministic(plan, L, "convergence")
    if regime == "det-rate":
        return validate_deterministic(plan, L, "rate")
    raise ValueError(f"unknown regime {regime!r}")


def _problem_size(ec: ExperimentConfig):
    if ec.lipschitz is not None and ec.dim is not None:
        return ec.dim, ec.lipschitz
    o = load_problem(ec)
    return o.dim, ec.lipschitz if ec.lipschitz is not None else o.lipschitz


def cmd_validate(ec: ExperimentConfig, out=sys.stdout) -> int:
    n, L = _problem_size(ec)
    try:
        plan, regime = _plan_for_validation(ec, n, L)
    except ParameterError as exc:
        print(f"FAIL {exc}", file=out)
        return 1
    rep = validate_plan(plan, L, regime)
    print(f"regime {rep.regime}: n={plan.n} m={plan.m} L={L:.6g} a={plan.a:.6g} "
          f"b={plan.b:.6g} delta={plan.delta:.6g} gamma0={plan.gamma0:.6g} "
          f"mu0={plan.mu0:.6g} tau={plan.tau:.6g}", file=out)
    for line in rep.lines():
        print(line, file=out)
    if not rep.passed:
        print("violated: " + "; ".join(rep.violations), file=out)
    return 0 if rep.passed else 1


# --- run -------------------------------------------------------------------

def average_runs(runs: list[RunRecord]) -> RunRecord:
    """Mean of f, f_reg and dir_norm over runs at the k values all runs share.

    Runs are ordered by seed first, so the result does not depend on the
    order they were supplied in.
    """
    if not runs:
        raise ValueError("no runs to average")
    runs = sorted(runs, key=lambda r: r.seed)
    common = set(runs[0].ks.tolist())
    for r in runs[1:]:
        common &= set(r.ks.tolist())
    ks = sorted(common)
    recs = []
    for k in ks:
        rows = [next(x for x in r.records if x.k == k) for r in runs]
        mean = lambda name: math.fsum(getattr(x, name) for x in rows) / len(rows)
        recs.append(IterationRecord(k, rows[0].gamma, rows[0].mu, mean("f"), mean("f_reg"),
                                    mean("dir_norm")))
    cfg = dict(runs[0].config)
    cfg["averaged_seeds"] = ",".join(str(r.seed) for r in runs)
    return RunRecord(config=cfg, seed=runs[0].seed, algorithm=runs[0].algorithm,
                     records=recs,
                     wall_time_seconds=sum(r.wall_time_seconds for r in runs))


def reference_fstar(oracle, rc: RunConfig, iters: int, seed: int = 0) -> float:
    """Smallest logged objective of a long run of the configured method."""
    ref = RunConfig(**{**rc.as_flat(), "max_iters": iters,
                       "log_stride": max(1, iters // 1000)})
    rr = run(ref, oracle, seed)
    return float(min(r.f for r in rr.records))


def resolve_fstar(ec: ExperimentConfig, oracle):
    """Returns (f*, description) or (None, None)."""
    if ec.fstar in (None, "", "None"):
        known = getattr(oracle, "known_fstar", None)
        return (known, "known") if known is not None else (None, None)
    if ec.fstar == "known":
        return oracle.known_fstar, "known"
    if ec.fstar == "reference":
        iters = 10 * ec.run.max_iters
        return reference_fstar(oracle, ec.run, iters), f"reference run ({iters} iterations)"
    if ec.fstar == "estimate":
        return None, "estimate"
    return float(ec.fstar), "given"


def cmd_run(ec: ExperimentConfig, out=sys.stdout) -> int:
    oracle = load_problem(ec)
    rc = ec.run
    if rc.algorithm not in ("saga", "iag", "rs-lbfgs", "sgd"):
        rep = validate_plan(rc.plan(oracle.dim), oracle.lipschitz,
                            ec.regime if ec.regime != "stochastic-rate" else "mean")
        if not rep.passed:
            print("warning: plan fails " + rep.regime + ": " + "; ".join(rep.violations),
                  file=out)
    outdir = Path(ec.out)
    outdir.mkdir(parents=True, exist_ok=True)
    snap = ec.snapshot()
    snap.update(dimension=oracle.dim, n_samples=oracle.n_samples,
                lipschitz_bound=oracle.lipschitz, backend_available=backend.name())
    stem = ec.label or rc.algorithm
    runs, status = [], 0
    for seed in ec.seeds:
        rr = run(rc, oracle, seed, meta=snap)
        write_run_csv(rr, outdir / f"{stem}_seed{seed}.csv")
        if rr.error:
            print(f"seed {seed}: {rr.error}", file=out)
            status = 1
        runs.append(rr)
    avg = average_runs(runs)
    fstar, how = resolve_fstar(ec, oracle)
    if how == "estimate":
        fstar = min(min(r.f for r in rr.records) for rr in runs)
    if fstar is not None:
        avg.config["fstar"] = fstar
        avg.config["fstar_source"] = how
    write_run_csv(avg, outdir / f"{stem}_avg.csv")
    last = avg.records[-1]
    msg = f"{stem}: seeds={len(runs)} k={last.k} mean f={last.f:.10g}"
    if fstar is not None:
        msg += f" mean gap={last.f - fstar:.6g} (f* {how})"
    print(msg, file=out)
    return status


# --- rate-fit --------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    intercept: float
    fstar: float
    fstar_estimated: bool
    margin: float
    n_points: int

    def __str__(self):
        tag = f" (ESTIMATED f*, margin {self.margin:.3g})" if self.fstar_estimated else ""
        return (f"slope {self.slope:.6f} intercept {self.intercept:.6f} "
                f"points {self.n_points} f* {self.fstar:.12g}{tag}")


class RateFitError(ValueError):
    pass


def fit_rate(ks, fs, fstar, k_min: int = 1, margin_frac: float = 0.01,
             min_points: int = 10) -> RateFit:
    """Least-squares slope of ``log(f_k - f*)`` against ``log k`` for ``k >= k_min``.

    ``fstar="estimate"`` uses the smallest observed value minus
    ``margin_frac`` times the observed range over the fitted points.
    """
    ks = np.asarray(ks, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    sel = (ks >= max(k_min, 1)) & np.isfinite(fs)
    ks, fs = ks[sel], fs[sel]
    if len(ks) < min_points:
        raise RateFitError(f"need at least {min_points} points with k >= {k_min}, got {len(ks)}")
    estimated = isinstance(fstar, str)
    margin = 0.0
    if estimated:
        if fstar != "estimate":
            raise RateFitError(f"fstar must be a number or 'estimate', got {fstar!r}")
        span = float(fs.max() - fs.min())
        margin = margin_frac * span if span > 0 else 1e-12
        fstar = float(fs.min()) - margin
    gaps = fs - fstar
    if np.any(gaps <= 0):
        raise RateFitError("nonpositive gap: f* is above an observed value")
    slope, intercept = np.polyfit(np.log(ks), np.log(gaps), 1)
    return RateFit(float(slope), float(intercept), float(fstar), estimated, margin, len(ks))


def _mean_curve(paths):
    runs = [read_run_csv(p) for p in paths]
    if len(runs) == 1:
        return runs[0].ks, runs[0].column("f")
    avg = average_runs(runs)
    return avg.ks, avg.column("f")


def cmd_rate_fit(paths, fstar, k_min=1, margin_frac=0.01, out=sys.stdout) -> RateFit:
    ks, fs = _mean_curve(paths)
    if isinstance(fstar, str) and fstar != "estimate":
        fstar = float(fstar)
    if isinstance(fstar, str):
        # estimate from every supplied run, not only the mean curve
        lows = [float(np.nanmin(read_run_csv(p).column("f"))) for p in paths]
        sel = ks >= max(k_min, 1)
        span = float(fs[sel].max() - min(lows)) if sel.any() else 0.0
        margin = margin_frac * span if span > 0 else 1e-12
        fit = fit_rate(ks, fs, min(lows) - margin, k_min)
        fit = RateFit(fit.slope, fit.intercept, fit.fstar, True, margin, fit.n_points)
    else:
        fit = fit_rate(ks, fs, fstar, k_min)
    print(str(fit), file=out)
    return fit


# --- plot ------------------------------------------------------------------

def cmd_plot(paths, out_path, fstar=None, title=None) -> Path:
    """Static SVG of objective (or gap) against k, one curve per CSV."""
    if not paths:
        raise ValueError("no CSV files to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = []
    for p in paths:
        rr = read_run_csv(p)
        y = rr.column("f")
        if fstar is not None:
            y = y - fstar
        curves.append((run_label(rr), rr.ks, y))
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = ["-", "--", "-.", ":"]
    for i, (label, ks, y) in enumerate(curves):
        ax.plot(ks, y, styles[i % len(styles)], label=label)
    if all(np.all(y[np.isfinite(y)] > 0) for _, _, y in curves):
        ax.set_yscale("log")
    else:
        warnings.warn("nonpositive values present; using a linear y axis")
    ax.set_xlabel("k")
    ax.set_ylabel("f - f*" if fstar is not None else "f")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return out_path


# --- bench -----------------------------------------------------------------

def bench(n_samples=2000, dim=50, iters=20000, m=5, algorithm="irs-lbfgs", seed=0,
          py_iters=None):
    """Time the compiled and Python backends on the same synthetic problem.

    Returns a dict of per-iteration times and the largest iterate difference
    over the common prefix of ``py_iters`` steps.
    """
    from .optimizers import make_runner, stream_for

    oracle = LogisticOracle(make_synthetic_logistic(n_samples, dim, seed=seed))
    rc = RunConfig(algorithm=algorithm, m=m, gamma0=0.5, mu0=0.5, delta=0.01)
    py_iters = py_iters or min(iters, 2000)
    res = {"backend": backend.name(), "iters": iters, "py_iters": py_iters}
    x0 = np.zeros(oracle.dim)

    def timed(kind, count):
        cfg = RunConfig(**{**rc.as_flat(), "backend": kind})
        r = make_runner(cfg, oracle, x0, stream_for(cfg, seed, oracle.n_samples))
        t0 = time.perf_counter()
        r.advance(count)
        return (time.perf_counter() - t0) / count, np.array(r.x)

    res["python_s_per_iter"], x_py = timed("python", py_iters)
    if backend.COMPILED:
        _, x_c = timed("compiled", py_iters)
        res["max_abs_diff"] = float(np.max(np.abs(x_py - x_c)))
        res["compiled_s_per_iter"], _ = timed("compiled", iters)
        res["speedup"] = res["python_s_per_iter"] / res["compiled_s_per_iter"]
    return res


# --- entry point -----------------------------------------------------------

def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _add_experiment_flags(p):
    p.add_argument("--config")
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--dataset")
    p.add_argument("--synthetic", choices=("logistic", "lsq"))
    p.add_argument("--samples", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--subset", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma0", type=float)
    p.add_argument("--mu0", type=float)
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--log-stride", type=int)
    p.add_argument("--seeds")
    p.add_argument("--out")
    p.add_argument("--fstar")
    p.add_argument("--shared-stream", type=_bool)
    p.add_argument("--backend", choices=("auto", "python", "compiled"))
    p.add_argument("--lipschitz", type=float)
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--label")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irqn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _add_experiment_flags(sub.add_parser("validate", help="check a parameter plan"))
    _add_experiment_flags(sub.add_parser("run", help="run seeds and write CSV records"))
    p = sub.add_parser("rate-fit", help="fit the log-log slope of the gap")
    p.add_argument("csv", nargs="+")
    p.add_argument("--fstar", required=True)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--margin", type=float, default=0.01,
                   help="estimate margin as a fraction of the observed range")
    p = sub.add_parser("plot", help="write an SVG of objective curves")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--fstar", type=float)
    p.add_argument("--title")
    p = sub.add_parser("bench", help="compare compiled and Python backends")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--dim", type=int, default=50)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--algo", choices=("irs-lbfgs", "ir-lbfgs", "ir-sgd", "sgd", "rs-lbfgs"),
                   default="irs-lbfgs")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(build_config(args))
        if args.command == "run":
            return cmd_run(build_config(args))
        if args.command == "rate-fit":
            cmd_rate_fit(args.csv, args.fstar, args.k_min, args.margin)
            return 0
        if args.command == "plot":
            print(cmd_plot(args.csv, args.out, args.fstar, args.title))
            return 0
        if args.command == "bench":
            res = bench(args.samples, args.dim, args.iters, args.m, args.algo)
            for k, v in res.items():
                print(f"{k} = {v}")
            return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
