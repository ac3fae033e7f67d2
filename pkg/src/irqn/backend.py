"""Selects the compiled inner loop when the extension is importable.

Set ``IRQN_FORCE_PYTHON=1`` to ignore the extension even if it is built.
"""

from __future__ import annotations

import os

try:
    if os.environ.get("IRQN_FORCE_PYTHON") == "1":
        raise ImportError("compiled backend disabled by IRQN_FORCE_PYTHON")
    from . import _kernels
    COMPILED = True
except ImportError:
    _kernels = None
    COMPILED = False


class CompiledRunner:
    """Adapter giving the extension runner the same surface as the Python one."""

    def __init__(self, config, oracle, x0, stream):
        kw = dict(m=config.m, batch=config.batch, stochastic=config.stochastic,
                  gamma0=config.gamma0, mu0=config.mu0, a=config.a, b=config.b,
                  delta=config.delta, tau=config.tau, eta0=config.eta, rho=config.rho,
                  epoch_len=config.epoch_len)
        self._r = _kernels.LbfgsRunner(config.algorithm, oracle, x0, stream, **kw)

    @property
    def x(self):
        return self._r.x_array

    @property
    def k(self):
        return self._r.k

    @property
    def converged(self):
        return self._r.converged

    def pairs(self):
        return self._r.pairs()

    def advance(self, count, trace=None):
        return self._r.advance(count, trace)


def compiled_runner(config, oracle, x0, stream) -> CompiledRunner:
    if not COMPILED:
        raise RuntimeError("compiled backend is not available")
    return CompiledRunner(config, oracle, x0, stream)


def name() -> str:
    return "compiled" if COMPILED else "python"
