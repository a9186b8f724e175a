"""Two-level augmented Lagrangian training loop for maximum entropy flows."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from .flow import ParamGradient
from .objectives import (
    LagrangianState,
    aug_lagrangian_grad,
    aug_lagrangian_value,
    draw_batch,
    entropy_estimate,
    moment_residual,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# optimizers over the flat parameter vector


@dataclass
class Adadelta:
    rho: float = 0.95
    eps: float = 1e-6
    name = "adadelta"

    def init(self, size):
        return {"g2": np.zeros(size), "dx2": np.zeros(size)}

    def step(self, acc, g):
        acc["g2"] = self.rho * acc["g2"] + (1.0 - self.rho) * g * g
        dx = -np.sqrt(acc["dx2"] + self.eps) / np.sqrt(acc["g2"] + self.eps) * g
        acc["dx2"] = self.rho * acc["dx2"] + (1.0 - self.rho) * dx * dx
        return dx


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    name = "adam"

    def init(self, size):
        return {"m": np.zeros(size), "v": np.zeros(size), "t": 0}

    def step(self, acc, g):
        acc["t"] += 1
        t = acc["t"]
        acc["m"] = self.beta1 * acc["m"] + (1.0 - self.beta1) * g
        acc["v"] = self.beta2 * acc["v"] + (1.0 - self.beta2) * g * g
        m_hat = acc["m"] / (1.0 - self.beta1**t)
        v_hat = acc["v"] / (1.0 - self.beta2**t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(options):
    if isinstance(options, (Adadelta, Adam)):
        return options
    options = dict(options or {})
    kind = options.pop("name", "adadelta").lower()
    if kind == "adadelta":
        return Adadelta(**options)
    if kind == "adam":
        return Adam(**options)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    k_max: int = 10
    i_max: int = 3000
    n: int = 300
    n_tilde: int = 1000
    beta: float = 4.0
    gamma: float = 0.25
    c0: float = 1.0
    lambda0: object = 0.0
    optimizer: object = field(default_factory=Adadelta)
    entropy_enabled: bool = True
    seed: int = 0
    residual_batches: int = 20
    residual_batch_size: int = 100
    residual_statistic: str = "norm"

    def __post_init__(self):
        self.optimizer = make_optimizer(self.optimizer)
        if self.k_max < 1 or self.i_max < 0 or self.n < 2 or self.n_tilde < 1:
            raise ValueError("iteration counts and batch sizes must be positive")
        if self.n % 2:
            raise ValueError("gradient batch size n must be even")
        if not self.beta > 1:
            raise ValueError("beta must exceed 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if self.residual_statistic not in ("norm", "debiased"):
            raise ValueError("residual_statistic must be 'norm' or 'debiased'")
        if self.residual_batches < 2 or self.residual_batch_size < 1:
            raise ValueError("need at least two residual batches")


@dataclass
class TrainState:
    stack: object
    lagrangian: LagrangianState
    optimizer: object
    accumulators: dict
    rng: np.random.Generator
    outer_iter: int = 0
    inner_iter: int = 0
    residual_history: list = field(default_factory=list)


@dataclass
class TrainReport:
    entropy: list = field(default_factory=list)
    residual_norm: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    inner_outer: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    cs: list = field(default_factory=list)
    p_values: list = field(default_factory=list)
    c_updated: list = field(default_factory=list)
    constraint_names: list = field(default_factory=list)
    stack: object = None

    def trace_csv(self):
        """Per-inner-iteration rows; lambda and c are those in force during the step."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        m = len(self.constraint_names)
        writer.writerow(["outer", "inner", "entropy", "residual_norm", "loss", "c"]
                        + [f"lambda_{j + 1}" for j in range(m)])
        for t, (k, i) in enumerate(self.inner_outer):
            lam = self.lambdas[k]
            writer.writerow([k, i, repr(self.entropy[t]), repr(self.residual_norm[t]),
                             repr(self.loss[t]), repr(self.cs[k])] + [repr(float(v)) for v in lam])
        return buf.getvalue()

    def outer_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        m = len(self.constraint_names)
        writer.writerow(["outer", "c", "p_value", "c_updated"] + [f"lambda_{j + 1}" for j in range(m)])
        for k in range(len(self.p_values)):
            writer.writerow([k, repr(self.cs[k + 1]), repr(self.p_values[k]), int(self.c_updated[k])]
                            + [repr(float(v)) for v in self.lambdas[k + 1]])
        return buf.getvalue()


def sgd_step(state, gradient):
    g = gradient.flat() if isinstance(gradient, ParamGradient) else np.asarray(gradient, dtype=float)
    delta = state.optimizer.step(state.accumulators, g)
    state.stack.set_flat(state.stack.get_flat() + delta)
    state.inner_iter += 1
    return state


def lambda_update(state, residual_batch_mean):
    lag = state.lagrangian
    r = np.asarray(residual_batch_mean, dtype=float)
    if r.shape != lag.lam.shape:
        raise ValueError("residual and multiplier dimensions differ")
    state.lagrangian = LagrangianState(lag.lam + lag.c * r, lag.c)
    return state


def welch_p_value(new, old, gamma):
    """One-sided p-value for H1: E[new] > gamma E[old] (Welch t-test)."""
    new = np.asarray(new, dtype=float)
    old = gamma * np.asarray(old, dtype=float)
    n1, n2 = new.size, old.size
    if n1 < 2 or n2 < 2:
        raise ValueError("each residual sample needs at least two values")
    diff = new.mean() - old.mean()
    a = new.var(ddof=1) / n1
    b = old.var(ddof=1) / n2
    if a + b == 0:
        if diff == 0:
            return 0.5
        return 0.0 if diff > 0 else 1.0
    t = diff / np.sqrt(a + b)
    df = (a + b) ** 2 / (a * a / (n1 - 1) + b * b / (n2 - 1))
    return float(stdtr(df, -t))


def c_update(state, residuals_new, residuals_old, rng, beta, gamma):
    """Escalate c by beta with probability 1 - p; returns (state, p, updated)."""
    p = welch_p_value(residuals_new, residuals_old, gamma)
    updated = bool(rng.random() < 1.0 - p)
    if updated:
        lag = state.lagrangian
        state.lagrangian = LagrangianState(lag.lam, lag.c * beta)
    return state, p, updated


def residual_samples(stack, constraint_set, rng, batches, size, statistic="norm"):
    """One residual summary per independent batch.

    ``"norm"`` gives |R_hat|; ``"debiased"`` gives the U-statistic
    sum_{i != j} T_i.T_j / (n (n - 1)), an unbiased estimate of |R|^2.
    """
    out = np.empty(batches)
    for j in range(batches):
        batch = draw_batch(stack, constraint_set, max(size, 2), rng)
        if statistic == "norm":
            out[j] = np.linalg.norm(moment_residual(batch))
        else:
            T = batch.constraint_values
            n = T.shape[0]
            tot = T.sum(axis=0)
            out[j] = (tot @ tot - np.sum(T * T)) / (n * (n - 1))
    return out


def train(config, stack0, constraint_set, progress=None):
    if stack0.out_dim != constraint_set.out_dim:
        raise ValueError("flow output dimension does not match the constraint domain")
    rng = np.random.default_rng(config.seed)
    stack = stack0.copy()
    m = constraint_set.m
    lam0 = np.broadcast_to(np.asarray(config.lambda0, dtype=float), (m,)).copy()
    opt = config.optimizer
    state = TrainState(stack, LagrangianState(lam0, config.c0), opt, opt.init(stack.n_params), rng)
    report = TrainReport(constraint_names=list(constraint_set.names))
    report.lambdas.append(lam0.copy())
    report.cs.append(config.c0)

    old = residual_samples(stack, constraint_set, rng, config.residual_batches, config.residual_batch_size, config.residual_statistic)
    gamma = config.gamma if config.residual_statistic == "norm" else config.gamma**2
    state.residual_history.append(old)
    for k in range(config.k_max):
        state.outer_iter = k
        lag = state.lagrangian
        for i in range(config.i_max):
            batch = draw_batch(state.stack, constraint_set, config.n, rng)
            H = entropy_estimate(batch)
            R = moment_residual(batch)
            loss = aug_lagrangian_value(H if config.entropy_enabled else 0.0, R, lag)
            grad = aug_lagrangian_grad(state.stack, constraint_set, lag, batch,
                                       entropy=config.entropy_enabled).flat()
            report.inner_outer.append((k, i))
            report.entropy.append(H)
            report.residual_norm.append(float(np.linalg.norm(R)))
            report.loss.append(loss)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                report.stack = state.stack
                raise TrainingError(f"non-finite loss or gradient at outer {k}, inner {i}", report)
            sgd_step(state, grad)
            if progress is not None:
                progress(k, i, H, report.residual_norm[-1])
        big = draw_batch(state.stack, constraint_set, config.n_tilde, rng)
        lambda_update(state, moment_residual(big))
        new = residual_samples(state.stack, constraint_set, rng, config.residual_batches,
                               config.residual_batch_size, config.residual_statistic)
        state, p, updated = c_update(state, new, old, rng, config.beta, gamma)
        state.residual_history.append(new)
        old = new
        report.lambdas.append(state.lagrangian.lam.copy())
        report.cs.append(state.lagrangian.c)
        report.p_values.append(p)
        report.c_updated.append(updated)
        log.info("outer %d: c=%g p=%.3g |R|=%.4g", k, state.lagrangian.c, p, float(np.mean(new)))
    report.stack = state.stack
    return report
