"""Moment functions T with analytic output-space Jacobians."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .oracles import digamma

LOG_FLOOR = np.log(1e-300)


class ConstraintError(ValueError):
    pass


class ConstraintSet:
    """Vector statistic T: output space -> R^m, evaluated row-wise on (n, dim) batches.

    ``domain`` is ``("simplex", d)`` or ``("positive", 1)``; ``names`` labels the m rows.
    """

    def __init__(self, m, domain, names=None):
        self.m = m
        self.domain = domain
        self.names = list(names) if names is not None else [f"T{i + 1}" for i in range(m)]

    @property
    def out_dim(self):
        kind, d = self.domain
        return d - 1 if kind == "simplex" else d

    def evaluate(self, s):
        raise NotImplementedError

    def output_gradient(self, s):
        """(n, m, dim) Jacobian of T at each row of s."""
        raise NotImplementedError

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if s.ndim == 1:
            return self.evaluate(s[None, :])[0]
        return self.evaluate(s)


class DirichletConstraints(ConstraintSet):
    """T_k(s) = log s_k - kappa_k, with s_d = 1 - sum(s)."""

    def __init__(self, kappa):
        kappa = np.asarray(kappa, dtype=float)
        if kappa.ndim != 1 or kappa.size < 2:
            raise ConstraintError("need d >= 2 log-moment targets")
        self.kappa = kappa
        d = kappa.size
        super().__init__(d, ("simplex", d), [f"log_s{k + 1}" for k in range(d)])

    def _full(self, s):
        s = np.asarray(s, dtype=float)
        last = 1.0 - np.sum(s, axis=1)
        if np.any(s <= 0) or np.any(last <= 0):
            raise ConstraintError("point outside the open simplex region")
        return np.column_stack([s, last])

    def evaluate(self, s):
        full = self._full(s)
        return np.maximum(np.log(full), LOG_FLOOR) - self.kappa

    def output_gradient(self, s):
        full = self._full(s)
        n, k = full.shape[0], full.shape[1] - 1
        jac = np.zeros((n, k + 1, k))
        idx = np.arange(k)
        jac[:, idx, idx] = 1.0 / full[:, :k]
        jac[:, k, :] = -1.0 / full[:, k:k + 1]
        return jac


def kappa_from_alpha(alpha):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ConstraintError("alpha must be positive")
    a0 = float(np.sum(alpha))
    return np.array([digamma(a) - digamma(a0) for a in alpha])


def dirichlet_constraints(kappa):
    return DirichletConstraints(kappa)


@dataclass
class OptionChain:
    spot: float
    discount: float
    strikes: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        self.strikes = np.asarray(self.strikes, dtype=float).reshape(-1)
        self.prices = np.asarray(self.prices, dtype=float).reshape(-1)
        if self.strikes.shape != self.prices.shape:
            raise ConstraintError("strikes and prices differ in length")
        if self.spot <= 0 or not 0 < self.discount <= 1:
            raise ConstraintError("need spot > 0 and discount in (0, 1]")
        if np.any(self.strikes <= 0) or np.any(np.diff(self.strikes) <= 0):
            raise ConstraintError("strikes must be positive and strictly increasing")
        if np.any(self.prices <= 0) or np.any(np.diff(self.prices) >= 0):
            raise ConstraintError("call prices must be positive and strictly decreasing in strike")
        if np.any(self.prices >= self.spot):
            raise ConstraintError("call price must be below the spot")

    @property
    def m(self):
        return self.strikes.size

    def subset(self, idx):
        idx = np.sort(np.asarray(idx, dtype=int))
        return OptionChain(self.spot, self.discount, self.strikes[idx], self.prices[idx])

    @classmethod
    def from_csv(cls, path):
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text):
        meta, rows = {}, []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line and "," not in line:
                key, val = line.split("=", 1)
                meta[key.strip()] = float(val)
            else:
                rows.append(line)
        if "spot" not in meta:
            raise ConstraintError("option chain is missing 'spot=<value>'")
        reader = csv.DictReader(io.StringIO("\n".join(rows)))
        if reader.fieldnames is None or {"strike", "price"} - set(reader.fieldnames):
            raise ConstraintError("option chain needs a 'strike,price' header")
        try:
            data = [(float(r["strike"]), float(r["price"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ConstraintError(f"bad option chain row: {exc}") from None
        strikes = [k for k, _ in data]
        prices = [p for _, p in data]
        return cls(meta["spot"], meta.get("discount", 1.0), strikes, prices)

    def to_text(self):
        lines = [f"spot={float(self.spot)!r}", f"discount={float(self.discount)!r}", "strike,price"]
        lines += [f"{float(k)!r},{float(p)!r}" for k, p in zip(self.strikes, self.prices)]
        return "\n".join(lines) + "\n"


class OptionConstraints(ConstraintSet):
    """T_i(s) = D (s - K_i)_+ - c_i for each strike, and T_{m+1}(s) = D s - S0."""

    def __init__(self, chain):
        self.chain = chain
        names = [f"call_{k:g}" for k in chain.strikes] + ["spot"]
        super().__init__(chain.m + 1, ("positive", 1), names)

    def evaluate(self, s):
        x = np.asarray(s, dtype=float)[:, 0]
        c = self.chain
        pay = c.discount * np.maximum(x[:, None] - c.strikes[None, :], 0.0) - c.prices[None, :]
        return np.column_stack([pay, c.discount * x - c.spot])

    def output_gradient(self, s):
        x = np.asarray(s, dtype=float)[:, 0]
        c = self.chain
        # the kink s == K gets the left derivative 0
        rows = c.discount * (x[:, None] > c.strikes[None, :]).astype(float)
        jac = np.column_stack([rows, np.full(x.size, c.discount)])
        return jac[:, :, None]


def option_constraints(chain):
    return OptionConstraints(chain)
