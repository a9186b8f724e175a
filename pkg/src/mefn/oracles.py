"""Closed-form ground truth: Dirichlet quantities and the piecewise-exponential
maximum entropy risk-neutral density fitted from call prices."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

EULER_GAMMA = 0.57721566490153286061

# Bernoulli-number coefficients B_2k / (2k) of the digamma asymptotic series
_PSI_ASYMPTOTIC = (
    1.0 / 12,
    -1.0 / 120,
    1.0 / 252,
    -1.0 / 240,
    1.0 / 132,
    -691.0 / 32760,
    1.0 / 12,
)


class OracleError(ValueError):
    pass


def digamma(x):
    """psi(x) for x > 0: recurrence up to x >= 10, then the asymptotic series."""
    x = float(x)
    if not x > 0:
        raise OracleError(f"digamma needs x > 0, got {x}")
    shift = 0.0
    while x < 10.0:
        shift -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    p = inv2
    for c in _PSI_ASYMPTOTIC:
        series += c * p
        p *= inv2
    return shift + math.log(x) - 0.5 / x - series


def log_gamma(x):
    if not x > 0:
        raise OracleError(f"log_gamma needs x > 0, got {x}")
    return math.lgamma(x)


# ---------------------------------------------------------------------------
# Dirichlet on S = {s in R^{d-1}: s > 0, sum(s) < 1}


@dataclass(frozen=True)
class DirichletParams:
    alpha: tuple

    def __init__(self, alpha):
        a = tuple(float(v) for v in np.asarray(alpha, dtype=float).reshape(-1))
        if len(a) < 2 or any(not v > 0 for v in a):
            raise OracleError("Dirichlet needs d >= 2 positive concentrations")
        object.__setattr__(self, "alpha", a)

    @property
    def d(self):
        return len(self.alpha)

    @property
    def alpha0(self):
        return sum(self.alpha)

    def log_beta(self):
        return sum(log_gamma(a) for a in self.alpha) - log_gamma(self.alpha0)

    def mean(self):
        return np.array(self.alpha[:-1]) / self.alpha0


def _as_params(p):
    return p if isinstance(p, DirichletParams) else DirichletParams(p)


def dirichlet_log_pdf(params, s):
    params = _as_params(params)
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    s2 = s[None, :] if single else s
    if s2.shape[1] != params.d - 1:
        raise OracleError("point dimension must be d - 1")
    last = 1.0 - np.sum(s2, axis=1)
    if np.any(s2 <= 0) or np.any(last <= 0):
        raise OracleError("point outside the open simplex region")
    full = np.column_stack([s2, last])
    out = -params.log_beta() + np.log(full) @ (np.array(params.alpha) - 1.0)
    return float(out[0]) if single else out


def dirichlet_entropy(params):
    params = _as_params(params)
    a0 = params.alpha0
    return (
        params.log_beta()
        + (a0 - params.d) * digamma(a0)
        - sum((a - 1.0) * digamma(a) for a in params.alpha)
    )


def dirichlet_kl(p, q):
    p, q = _as_params(p), _as_params(q)
    if p.d != q.d:
        raise OracleError("dimension mismatch")
    psi0 = digamma(p.alpha0)
    return q.log_beta() - p.log_beta() + sum(
        (ap - aq) * (digamma(ap) - psi0) for ap, aq in zip(p.alpha, q.alpha)
    )


def log_gamma_variates(shape, size, rng):
    """log of Gamma(shape, 1) draws by Marsaglia-Tsang; shape < 1 uses the
    Gamma(shape + 1) * U^(1/shape) boost, kept in log space to avoid underflow."""
    shape = float(shape)
    if not shape > 0:
        raise OracleError("gamma shape must be positive")
    a = shape + 1.0 if shape < 1.0 else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    pending = np.arange(size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        v = (1.0 + c * x) ** 3
        u = rng.random(pending.size)
        ok = v > 0
        logv = np.log(np.where(ok, v, 1.0))
        ok &= np.log(u) < 0.5 * x * x + d - d * v + d * logv
        out[pending[ok]] = math.log(d) + logv[ok]
        pending = pending[~ok]
    if shape < 1.0:
        out += np.log(rng.random(size)) / shape
    return out


def dirichlet_sample(params, rng, size=None):
    """Draw points of S (first d-1 coordinates of a normalized Gamma vector)."""
    params = _as_params(params)
    n = 1 if size is None else int(size)
    logs = np.column_stack([log_gamma_variates(a, n, rng) for a in params.alpha])
    full = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
    s = full[:, :-1]
    return s[0] if size is None else s


# ---------------------------------------------------------------------------
# piecewise-exponential (Gibbs) risk-neutral density
#
# log p(z) = eta_0 z + sum_i eta_i (z - K_i)_+ - log Z on z >= 0.  Writing
# K_0 = 0 the statistics are (z - K_i)_+ for i = 0..m and on the segment
# [K_j, K_{j+1}] the log density is affine with slope sum_{i<=j} eta_i.

_SERIES_TERMS = 30


def _mu_series(beta):
    """int_0^1 t^k e^(beta t) dt, k = 0, 1, 2, by power series (|beta| < 1)."""
    out = [0.0, 0.0, 0.0]
    term = 1.0
    for j in range(_SERIES_TERMS):
        for k in range(3):
            out[k] += term / (j + k + 1)
        term *= beta / (j + 1)
    return out


def _segment(f_left, slope, length):
    """Scaled local moments of e^(f_left + slope x) on [0, length].

    Returns (log_w, n0, n1, n2) with int_0^length x^k e^(...) dx = exp(log_w) * n_k.
    """
    if math.isinf(length):
        if slope >= 0:
            return math.inf, 1.0, 0.0, 0.0
        r = -1.0 / slope
        return f_left + math.log(r), 1.0, r, 2.0 * r * r
    if length <= 0:
        return -math.inf, 0.0, 0.0, 0.0
    beta = slope * length
    log_w = f_left + math.log(length)
    if abs(beta) < 1.0:
        m0, m1, m2 = _mu_series(beta)
    elif beta < 0:
        e = math.exp(beta)
        m0 = -math.expm1(beta) / -beta
        m1 = (e * (beta - 1.0) + 1.0) / beta**2
        m2 = (e * (beta * beta - 2.0 * beta + 2.0) - 2.0) / beta**3
    else:
        e = math.exp(-beta)
        m0 = -math.expm1(-beta) / beta
        m1 = (beta - 1.0 + e) / beta**2
        m2 = (beta * beta - 2.0 * beta + 2.0 - 2.0 * e) / beta**3
        log_w += beta
    return log_w, m0, m1 * length, m2 * length * length


class _Segments:
    """Per-segment integrals for a given eta; the workhorse of the Gibbs model."""

    def __init__(self, eta, knots):
        self.eta = np.asarray(eta, dtype=float)
        self.knots = knots
        self.slopes = np.cumsum(self.eta)
        # log density (unnormalized) at each knot
        f = [0.0]
        for j in range(1, knots.size):
            f.append(f[-1] + self.slopes[j - 1] * (knots[j] - knots[j - 1]))
        self.f_left = np.array(f)
        self.integrable = self.slopes[-1] < 0
        if not self.integrable:
            self.log_Z = math.inf
            return
        segs = []
        for j in range(knots.size):
            right = knots[j + 1] if j + 1 < knots.size else math.inf
            segs.append(_segment(self.f_left[j], self.slopes[j], right - knots[j]))
        self.log_w = np.array([s[0] for s in segs])
        self.n = np.array([s[1:] for s in segs])
        self.log_Z = float(logsumexp(self.log_w + np.log(np.maximum(self.n[:, 0], 1e-320))))
        self.weights = np.exp(self.log_w - self.log_Z)
        self.probs = self.weights * self.n[:, 0]

    def moments(self):
        """E[T_i] and E[T_i T_k] for T_i = (z - K_i)_+, i = 0..m."""
        K = self.knots
        m1 = K.size
        mean = np.zeros(m1)
        second = np.zeros((m1, m1))
        for j in range(m1):
            w = self.weights[j]
            n0, n1, n2 = self.n[j]
            off = K[j] - K[: j + 1]  # distance of the segment start above each active knot
            mean[: j + 1] += w * (off * n0 + n1)
            second[: j + 1, : j + 1] += w * (
                np.outer(off, off) * n0 + (off[:, None] + off[None, :]) * n1 + n2
            )
        return mean, second


@dataclass
class GibbsOptionModel:
    """Fitted density p(z) proportional to exp(eta_0 z + sum eta_i (z - K_i)_+) on z >= 0."""

    eta: np.ndarray
    strikes: np.ndarray
    discount: float
    log_Z: float = 0.0
    spot: float = float("nan")
    iterations: int = 0
    mismatch: float = 0.0

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        self.strikes = np.asarray(self.strikes, dtype=float)
        if self.eta.size != self.strikes.size + 1:
            raise OracleError("eta needs one entry per strike plus the spot term")
        self._seg = _Segments(self.eta, self.knots)
        if not self._seg.integrable:
            raise OracleError("tail slope must be negative for an integrable density")
        self.log_Z = self._seg.log_Z

    @property
    def knots(self):
        return np.concatenate([[0.0], self.strikes])

    def _locate(self, s):
        return np.searchsorted(self.knots, s, side="right") - 1

    def log_pdf(self, s):
        s = np.asarray(s, dtype=float)
        j = np.clip(self._locate(s), 0, self.knots.size - 1)
        seg = self._seg
        val = seg.f_left[j] + seg.slopes[j] * (s - self.knots[j]) - self.log_Z
        return np.where(s >= 0, val, -np.inf)

    def pdf(self, s):
        return np.exp(self.log_pdf(s))

    def _partial(self, j, length):
        """Normalized mass of segment j on [K_j, K_j + length]."""
        lw, n0, _, _ = _segment(self._seg.f_left[j], self._seg.slopes[j], length)
        return math.exp(lw - self.log_Z) * n0 if n0 > 0 else 0.0

    def cdf(self, s):
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        probs = self._seg.probs
        cum = np.concatenate([[0.0], np.cumsum(probs)])
        out = np.empty(s_arr.shape)
        for idx, x in enumerate(s_arr):
            if x <= 0:
                out[idx] = 0.0
                continue
            j = int(self._locate(x))
            out[idx] = min(cum[j] + self._partial(j, x - self.knots[j]), 1.0)
        return out if np.ndim(s) else float(out[0])

    def quantile(self, p):
        p_arr = np.atleast_1d(np.asarray(p, dtype=float))
        probs = self._seg.probs
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        j = np.minimum(np.searchsorted(cum, p_arr, side="right"), probs.size - 1)
        start = np.concatenate([[0.0], cum[:-1]])[j]
        frac = np.clip((p_arr - start) / probs[j], 0.0, 1.0)
        out = np.empty(p_arr.shape)
        knots = self.knots
        for idx, (jj, u) in enumerate(zip(j, frac)):
            b = self._seg.slopes[jj]
            if jj + 1 < knots.size:
                length = knots[jj + 1] - knots[jj]
                bl = b * length
                if abs(bl) < 1e-8:
                    x = u * length
                elif bl < 0:
                    x = math.log1p(u * math.expm1(bl)) / b
                else:
                    x = length + math.log(u + (1.0 - u) * math.exp(-bl)) / b
            else:
                x = math.log1p(-u) / b if u < 1.0 else math.inf
            out[idx] = knots[jj] + x
        return out if np.ndim(p) else float(out[0])

    def sample(self, rng, size=None):
        n = 1 if size is None else int(size)
        draws = self.quantile(rng.random(n))
        return float(draws[0]) if size is None else draws

    def expected_payoff(self, K):
        """E[(S - K)_+] in closed form."""
        K = float(K)
        seg = self._seg
        knots = self.knots
        if K <= 0:
            mean, _ = seg.moments()
            return mean[0] - K
        total = 0.0
        j0 = int(self._locate(K))
        right = knots[j0 + 1] if j0 + 1 < knots.size else math.inf
        f_K = seg.f_left[j0] + seg.slopes[j0] * (K - knots[j0])
        lw, n0, n1, _ = _segment(f_K, seg.slopes[j0], right - K)
        if n0 > 0:
            total += math.exp(lw - self.log_Z) * n1
        for j in range(j0 + 1, knots.size):
            w = seg.weights[j]
            n0, n1, _ = seg.n[j]
            total += w * ((knots[j] - K) * n0 + n1)
        return total

    def price(self, K):
        if np.ndim(K):
            return np.array([self.discount * self.expected_payoff(k) for k in np.ravel(K)])
        return self.discount * self.expected_payoff(K)

    def mean(self):
        return float(self._seg.moments()[0][0])

    def entropy(self):
        mean, _ = self._seg.moments()
        return float(self.log_Z - self.eta @ mean)

    def to_dict(self):
        return {
            "eta": [float(v) for v in self.eta],
            "strikes": [float(v) for v in self.strikes],
            "discount": float(self.discount),
            "spot": float(self.spot),
            "log_Z": float(self.log_Z),
            "iterations": int(self.iterations),
            "mismatch": float(self.mismatch),
        }

    def to_text(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["eta"], d["strikes"], d["discount"], spot=d.get("spot", float("nan")),
                   iterations=d.get("iterations", 0), mismatch=d.get("mismatch", 0.0))


def gibbs_pdf(model, s):
    return model.pdf(s)


def gibbs_cdf(model, s):
    return model.cdf(s)


def gibbs_sample(model, rng, size=None):
    return model.sample(rng, size)


def gibbs_price(model, K):
    return model.price(K)


def gibbs_option_fit(chain, tol=1e-10, max_iter=200):
    """Maximum entropy density on [0, inf) matching the spot and all call prices.

    Minimizes the convex dual log Z(eta) - eta . t by Newton's method with
    backtracking, where t = (S0, c_1, ..., c_m) / D.  ``tol`` bounds the
    price-unit mismatch max|D E[T] - (S0, c)|.
    """
    strikes = np.asarray(chain.strikes, dtype=float)
    knots = np.concatenate([[0.0], strikes])
    D = float(chain.discount)
    target = np.concatenate([[chain.spot], chain.prices]) / D
    eta = np.zeros(knots.size)
    eta[0] = -D / chain.spot

    def dual(seg):
        return seg.log_Z - seg.eta @ target

    seg = _Segments(eta, knots)
    mismatch = math.inf
    for it in range(max_iter + 1):
        mean, second = seg.moments()
        grad = mean - target
        mismatch = float(np.max(np.abs(grad))) * D
        if mismatch <= tol:
            model = GibbsOptionModel(seg.eta, strikes, D, spot=chain.spot, iterations=it,
                                     mismatch=mismatch)
            return model
        if it == max_iter:
            break
        hess = second - np.outer(mean, mean)
        hess += 1e-14 * np.trace(hess) * np.eye(knots.size)
        step = np.linalg.solve(hess, -grad)
        phi = dual(seg)
        slope = float(grad @ step)
        t = 1.0
        gnorm = float(np.max(np.abs(grad)))
        for _ in range(60):
            trial = _Segments(seg.eta + t * step, knots)
            if trial.integrable:
                if dual(trial) <= phi + 1e-4 * t * slope:
                    break
                tmean, _ = trial.moments()
                if np.max(np.abs(tmean - target)) < gnorm and dual(trial) <= phi + 1e-12 * abs(phi):
                    break
            t *= 0.5
        else:
            raise OracleError(f"line search failed at iteration {it}; mismatch {mismatch:.3e}")
        seg = trial
    raise OracleError(f"Gibbs fit did not converge in {max_iter} iterations; mismatch {mismatch:.3e}")
