# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled inner loop for the L-BFGS family on generalized-linear oracles.

Mirrors the step functions in ``irqn.optimizers`` operation for operation;
sample indices come from the same :class:`SampleStream` buffer.
"""

from libc.math cimport pow, exp, fabs, log1p, sqrt
import numpy as np

from irqn.lbfgs import CurvatureError, DegeneratePairError

DEF R_MAX = 16

cdef enum:
    M_IRS = 0
    M_IR = 1
    M_IRSGD = 2
    M_SGD = 3
    M_RS = 4

METHODS = {"irs-lbfgs": M_IRS, "ir-lbfgs": M_IR, "ir-sgd": M_IRSGD, "sgd": M_SGD,
           "rs-lbfgs": M_RS}


cdef inline double dphi(int loss, double z, double t):
    cdef double u, e
    if loss == 0:
        u = t * z
        e = exp(-fabs(u))
        if u >= 0:
            return -t * (e / (1.0 + e))
        return -t * (1.0 / (1.0 + e))
    return z - t


cdef inline double phi(int loss, double z, double t):
    cdef double u
    if loss == 0:
        u = t * z
        return (-u if u < 0 else 0.0) + log1p(exp(-fabs(u)))
    return 0.5 * (z - t) * (z - t)


cdef class LbfgsRunner:
    cdef const long long[::1] indptr
    cdef const long long[::1] indices
    cdef const double[::1] data
    cdef const double[::1] targets
    cdef int loss, N, n, method, m, batch, stochastic
    cdef double gamma0, mu0, a, b, delta, tau, eta0, rho
    cdef long long epoch_len
    cdef public long long k
    cdef public bint converged
    cdef int count, head
    cdef long long accepted
    cdef object _x, _x0
    cdef double[::1] x, x0, xprev, g, gprev, q, d, xnew, gnew, s, alphas
    cdef double[:, ::1] S, Y
    cdef double[::1] SY, YY
    cdef long long[::1] rows, prev_rows
    cdef object stream
    cdef const long long[::1] sbuf
    cdef long long spos, drawn

    def __init__(self, method, oracle, x0, stream, *, m=2, batch=1, stochastic=True,
                 gamma0=1.0, mu0=1.0, a=2.0 / 3.0, b=1.0 / 3.0, delta=0.01, tau=1.0,
                 eta0=0.1, rho=1.0, epoch_len=400):
        self.method = METHODS[method]
        self.indptr = oracle.indptr
        self.indices = oracle.indices
        self.data = oracle.data
        self.targets = oracle.targets
        self.loss = oracle.loss
        self.N = oracle.n_samples
        self.n = oracle.dim
        self.m = max(1, m)
        self.batch = batch
        self.stochastic = 1 if stochastic else 0
        self.gamma0, self.mu0, self.a, self.b = gamma0, mu0, a, b
        self.delta, self.tau = delta, tau
        self.eta0, self.rho, self.epoch_len = eta0, rho, epoch_len
        self.k = 0
        self.converged = False
        self.count = 0
        self.head = 0
        self.accepted = 0
        n = self.n
        self._x0 = np.array(x0, dtype=np.float64)
        self._x = self._x0.copy()
        self.x0 = self._x0
        self.x = self._x
        self.xprev = np.zeros(n)
        self.g = np.zeros(n)
        self.gprev = np.zeros(n)
        self.q = np.zeros(n)
        self.d = np.zeros(n)
        self.xnew = np.zeros(n)
        self.gnew = np.zeros(n)
        self.s = np.zeros(n)
        self.alphas = np.zeros(self.m)
        self.S = np.zeros((self.m, n))
        self.Y = np.zeros((self.m, n))
        self.SY = np.zeros(self.m)
        self.YY = np.zeros(self.m)
        self.rows = np.zeros(batch, dtype=np.int64)
        self.prev_rows = np.zeros(batch, dtype=np.int64)
        self.stream = stream

    @property
    def x_array(self):
        return self._x

    def pairs(self):
        """Stored (s, y) pairs, oldest first."""
        out = []
        for j in range(self.count):
            slot = (self.head + j) % self.m
            out.append((np.array(self.S[slot]), np.array(self.Y[slot])))
        return out

    # --- sampling -------------------------------------------------------
    cdef void _draw(self) except *:
        cdef int j
        for j in range(self.batch):
            if self.spos >= self.sbuf.shape[0]:
                self.stream.pos = self.spos
                self.stream.refill()
                self.sbuf = self.stream.buf
                self.spos = 0
            self.rows[j] = self.sbuf[self.spos]
            self.spos += 1
        self.drawn += self.batch

    # --- oracle ---------------------------------------------------------
    cdef void _grad(self, double[::1] x, long long[::1] rows, double[::1] out):
        cdef int j, B = rows.shape[0], i
        cdef long long r, p, lo, hi
        cdef double z, c
        for i in range(self.n):
            out[i] = 0.0
        for j in range(B):
            r = rows[j]
            lo = self.indptr[r]
            hi = self.indptr[r + 1]
            z = 0.0
            for p in range(lo, hi):
                z += self.data[p] * x[self.indices[p]]
            c = dphi(self.loss, z, self.targets[r])
            for p in range(lo, hi):
                out[self.indices[p]] += c * self.data[p]
        if B > 1:
            for i in range(self.n):
                out[i] /= B

    cdef void _full_grad(self, double[::1] x, double[::1] out):
        cdef long long r, p
        cdef int i
        cdef double z, c
        for i in range(self.n):
            out[i] = 0.0
        for r in range(self.N):
            z = 0.0
            for p in range(self.indptr[r], self.indptr[r + 1]):
                z += self.data[p] * x[self.indices[p]]
            c = dphi(self.loss, z, self.targets[r])
            for p in range(self.indptr[r], self.indptr[r + 1]):
                out[self.indices[p]] += c * self.data[p]
        for i in range(self.n):
            out[i] /= self.N

    cdef double _full_value(self, double[::1] x):
        cdef long long r, p
        cdef double z, tot = 0.0
        for r in range(self.N):
            z = 0.0
            for p in range(self.indptr[r], self.indptr[r + 1]):
                z += self.data[p] * x[self.indices[p]]
            tot += phi(self.loss, z, self.targets[r])
        return tot / self.N

    def full_value(self, x):
        return self._full_value(np.ascontiguousarray(x, dtype=np.float64))

    # --- limited-memory matrix ------------------------------------------
    cdef void _push(self, double[::1] s, double[::1] y, double sy, double yy):
        cdef int slot, i
        if self.count < self.m:
            slot = (self.head + self.count) % self.m
            self.count += 1
        else:
            slot = self.head
            self.head = (self.head + 1) % self.m
        for i in range(self.n):
            self.S[slot, i] = s[i]
            self.Y[slot, i] = y[i]
        self.SY[slot] = sy
        self.YY[slot] = yy

    cdef void _two_loop(self, double[::1] q0, double[::1] out):
        cdef int j, slot, i, n = self.n
        cdef double al, be, dot, scale
        for i in range(n):
            out[i] = q0[i]
        for j in range(self.count - 1, -1, -1):
            slot = (self.head + j) % self.m
            dot = 0.0
            for i in range(n):
                dot += self.S[slot, i] * out[i]
            al = dot / self.SY[slot]
            self.alphas[j] = al
            for i in range(n):
                out[i] -= al * self.Y[slot, i]
        slot = (self.head + self.count - 1) % self.m
        scale = self.SY[slot] / self.YY[slot]
        for i in range(n):
            out[i] *= scale
        for j in range(self.count):
            slot = (self.head + j) % self.m
            dot = 0.0
            for i in range(n):
                dot += self.Y[slot, i] * out[i]
            be = dot / self.SY[slot]
            for i in range(n):
                out[i] += (self.alphas[j] - be) * self.S[slot, i]

    # --- steps ----------------------------------------------------------
    cdef double _mu(self, long long k):
        cdef double kappa = 2.0 if k % 2 == 0 else 1.0
        return self.mu0 * pow(2.0, self.b) / pow(<double>k + kappa, self.b)

    cdef int _parity_pair(self, double mu) except -1:
        cdef int i, n = self.n
        cdef double c, sy = 0.0, yy = 0.0
        cdef bint nz = False
        for i in range(n):
            self.s[i] = self.x[i] - self.xprev[i]
            if self.s[i] != 0.0:
                nz = True
        pair_index = (self.k + 1) // 2
        if not nz:
            raise DegeneratePairError(f"pair {pair_index}: x_k equals x_prev")
        c = self.tau * pow(mu, self.delta)
        for i in range(n):
            self.gnew[i] = (self.gnew[i] - self.gprev[i]) + c * self.s[i]
            sy += self.s[i] * self.gnew[i]
            yy += self.gnew[i] * self.gnew[i]
        if not sy > 0:
            raise CurvatureError(f"pair {pair_index}: s^T y = {sy} <= 0")
        self._push(self.s, self.gnew, sy, yy)
        return 0

    cdef bint _regularized(self, double mu):
        """q = g + mu (x - x0); returns whether q is nonzero."""
        cdef int i
        cdef bint nz = False
        for i in range(self.n):
            self.q[i] = self.g[i] + mu * (self.x[i] - self.x0[i])
            if self.q[i] != 0.0:
                nz = True
        return nz

    cdef double _step_ir(self, int *resampled, bint *stalled) except -1.0:
        cdef long long k = self.k
        cdef double gamma = self.gamma0 / pow(<double>(k + 1), self.a)
        cdef double mu = self._mu(k) if self.method != M_SGD else 0.0
        cdef bint pairs = self.method == M_IRS or self.method == M_IR
        cdef bint stoch = self.method == M_IRS or (self.stochastic and self.method != M_IR)
        cdef bint nz
        cdef int i, r = 0
        cdef double nrm = 0.0
        if pairs and k % 2 == 1:
            if stoch:
                self._grad(self.x, self.prev_rows, self.gnew)
            else:
                self._full_grad(self.x, self.gnew)
            self._parity_pair(mu)
        if stoch:
            while True:
                self._draw()
                self._grad(self.x, self.rows, self.g)
                nz = self._regularized(mu)
                if nz or r == R_MAX:
                    break
                r += 1
        else:
            self._full_grad(self.x, self.g)
            nz = self._regularized(mu)
            if not nz:
                self.converged = True
                return 0.0
        resampled[0] = r
        stalled[0] = not nz
        if pairs and k >= 2 * self.m - 1:
            self._two_loop(self.q, self.d)
        else:
            for i in range(self.n):
                self.d[i] = self.q[i]
        for i in range(self.n):
            self.xprev[i] = self.x[i]
            self.gprev[i] = self.g[i]
            self.x[i] = self.x[i] - gamma * self.d[i]
            nrm += self.d[i] * self.d[i]
        for i in range(self.batch):
            self.prev_rows[i] = self.rows[i]
        self.k = k + 1
        return sqrt(nrm)

    cdef double _step_rs(self, int *resampled, bint *stalled) except -1.0:
        cdef long long k = self.k
        cdef double gamma = self.gamma0 / (k + 1)
        cdef double eta = self.eta0 * pow(self.rho, <double>(k // self.epoch_len))
        cdef int i, r = 0
        cdef bint nz, snz = False
        cdef double nrm = 0.0, sy = 0.0, yy = 0.0, ss = 0.0
        while True:
            self._draw()
            self._grad(self.x, self.rows, self.g)
            nz = False
            for i in range(self.n):
                self.g[i] = self.g[i] + eta * self.x[i]
                if self.g[i] != 0.0:
                    nz = True
            if nz or r == R_MAX:
                break
            r += 1
        resampled[0] = r
        stalled[0] = not nz
        if self.count > 0:
            self._two_loop(self.g, self.d)
        else:
            for i in range(self.n):
                self.d[i] = self.g[i]
        for i in range(self.n):
            self.xnew[i] = self.x[i] - gamma * self.d[i]
            self.s[i] = self.xnew[i] - self.x[i]
            if self.s[i] != 0.0:
                snz = True
            nrm += self.d[i] * self.d[i]
        if snz:
            self._grad(self.xnew, self.rows, self.gnew)
            for i in range(self.n):
                self.gnew[i] = (self.gnew[i] + eta * self.xnew[i]) - self.g[i]
                sy += self.s[i] * self.gnew[i]
                yy += self.gnew[i] * self.gnew[i]
                ss += self.s[i] * self.s[i]
            if sy > 1e-10 * sqrt(ss) * sqrt(yy):
                self.accepted += 1
                self._push(self.s, self.gnew, sy, yy)
        for i in range(self.n):
            self.xprev[i] = self.x[i]
            self.x[i] = self.xnew[i]
        for i in range(self.batch):
            self.prev_rows[i] = self.rows[i]
        self.k = k + 1
        return sqrt(nrm)

    def advance(self, long long count, trace=None):
        """Run ``count`` steps; returns (first direction norm, resamples, stalls)."""
        cdef long long j, t = 0
        cdef int r = 0
        cdef bint st = False
        cdef double dn, first = float("nan"), acc, diff
        cdef long long resampled = 0, stalls = 0
        cdef double[::1] tf, td
        cdef int i
        cdef bint tracing = trace is not None
        if tracing:
            tf = trace["f"]
            td = trace["dist2"]
            t = trace["pos"]
        self.sbuf = self.stream.buf
        self.spos = self.stream.pos
        self.drawn = 0
        try:
            for j in range(count):
                if self.converged:
                    break
                if tracing:
                    tf[t] = self._full_value(self.x)
                    acc = 0.0
                    for i in range(self.n):
                        diff = self.x[i] - self.x0[i]
                        acc += diff * diff
                    td[t] = acc
                    t += 1
                if self.method == M_RS:
                    dn = self._step_rs(&r, &st)
                else:
                    dn = self._step_ir(&r, &st)
                if j == 0:
                    first = dn
                resampled += r
                stalls += st
        finally:
            self.stream.pos = self.spos
            self.stream.consumed += self.drawn
            if tracing:
                trace["pos"] = t
        return first, resampled, stalls
