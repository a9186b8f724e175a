"""Monte Carlo estimators of entropy, moment residuals and the augmented
Lagrangian, plus its split-batch stochastic gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import base_log_density


class ObjectiveError(ValueError):
    pass


@dataclass
class SampleBatch:
    base_points: np.ndarray
    transformed: np.ndarray
    log_densities: np.ndarray
    constraint_values: np.ndarray
    log_dets: np.ndarray = None
    cache: object = None

    def __post_init__(self):
        n = self.base_points.shape[0]
        if any(a.shape[0] != n for a in (self.transformed, self.log_densities, self.constraint_values)):
            raise ObjectiveError("batch fields disagree on sample count")

    @property
    def n(self):
        return self.base_points.shape[0]


@dataclass
class LagrangianState:
    lam: np.ndarray
    c: float

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.c = float(self.c)
        if self.c < 0:
            raise ObjectiveError("penalty must be non-negative")


def evaluate_batch(stack, constraint_set, base_points):
    z_out, log_dets, cache = stack.forward(base_points)
    return SampleBatch(
        base_points=base_points,
        transformed=z_out,
        log_densities=base_log_density(base_points) - log_dets,
        constraint_values=constraint_set.evaluate(z_out),
        log_dets=log_dets,
        cache=cache,
    )


def draw_batch(stack, constraint_set, n, rng):
    if n < 2:
        raise ObjectiveError("batch size must be at least 2")
    return evaluate_batch(stack, constraint_set, rng.standard_normal((n, stack.dim)))


def entropy_estimate(batch):
    return float(-np.mean(batch.log_densities))


def entropy_standard_error(batch):
    return float(np.std(batch.log_densities, ddof=1) / np.sqrt(batch.n))


def moment_residual(batch):
    return np.mean(batch.constraint_values, axis=0)


def aug_lagrangian_value(H, R, state):
    R = np.asarray(R, dtype=float)
    if R.shape != state.lam.shape:
        raise ObjectiveError("residual and multiplier dimensions differ")
    return float(-H + state.lam @ R + 0.5 * state.c * (R @ R))


def aug_lagrangian_grad(stack, constraint_set, state, batch, entropy=True):
    """Stochastic gradient of -H + lam.R + c/2 |R|^2.

    The penalty term pairs dT from the first half of the batch with T from
    the second half, so the product of the two independent halves is unbiased.
    """
    n = batch.n
    if n % 2:
        raise ObjectiveError("gradient batch size must be even")
    half = n // 2
    cache = batch.cache
    if cache is None:
        cache = stack.forward(batch.base_points)[2]
    R_second = np.mean(batch.constraint_values[half:], axis=0)
    weights = np.tile(state.lam / n, (n, 1))
    weights[:half] += state.c * (2.0 / n) * R_second
    jac = constraint_set.output_gradient(batch.transformed)
    cot_out = np.einsum("nm,nmd->nd", weights, jac)
    cot_ld = -1.0 / n if entropy else 0.0
    return stack.pullback(cache, cot_out, cot_ld)
