import numpy as np
import pytest
from scipy.integrate import quad

from conftest import central_diff, rel_err
from mefn.constraints import ConstraintSet, DirichletConstraints, OptionChain, OptionConstraints, kappa_from_alpha
from mefn.flow import FlowStack, IdentityMap, PositiveAffineMap, SimplexMap
from mefn.objectives import (
    LagrangianState,
    ObjectiveError,
    aug_lagrangian_grad,
    aug_lagrangian_value,
    draw_batch,
    entropy_estimate,
    entropy_standard_error,
    evaluate_batch,
    moment_residual,
)


class ShiftedMoments(ConstraintSet):
    """T(s) = (s - a, s^2 - b) on R^d, summed over coordinates."""

    def __init__(self, dim, a, b):
        self.a, self.b = a, b
        super().__init__(2, ("real", dim))

    def evaluate(self, s):
        return np.column_stack([s.sum(axis=1) - self.a, (s * s).sum(axis=1) - self.b])

    def output_gradient(self, s):
        return np.stack([np.ones_like(s), 2 * s], axis=1)


def _problem(kind, rng, dim=2, layers=3):
    if kind == "simplex":
        stack = FlowStack.planar(dim, layers, rng, SimplexMap(), scale=0.5)
        cs = DirichletConstraints(kappa_from_alpha(np.arange(1, dim + 2)))
    elif kind == "positive":
        stack = FlowStack.planar(1, layers, rng, PositiveAffineMap(0.3, 4.0), scale=0.5)
        chain = OptionChain(50.0, 0.95, [40.0, 50.0, 60.0], [12.0, 5.0, 1.5])
        cs = OptionConstraints(chain)
    else:
        stack = FlowStack.planar(dim, layers, rng, IdentityMap(), scale=0.5)
        cs = ShiftedMoments(dim, 0.3, 2.5)
    return stack, cs


def test_draw_batch_shapes(rng):
    stack, cs = _problem("simplex", rng)
    b = draw_batch(stack, cs, 300, rng)
    assert b.base_points.shape == (300, 2)
    assert b.transformed.shape == (300, 2)
    assert b.log_densities.shape == (300,)
    assert b.constraint_values.shape == (300, 3)
    with pytest.raises(ObjectiveError):
        draw_batch(stack, cs, 1, rng)


def test_identity_flow_entropy(rng):
    stack = FlowStack(3, [], IdentityMap())
    b = draw_batch(stack, ShiftedMoments(3, 0, 3), 20000, rng)
    H = entropy_estimate(b)
    exact = 1.5 * np.log(2 * np.pi * np.e)
    assert abs(H - exact) < 4 * entropy_standard_error(b)


def test_estimates_are_permutation_invariant(rng):
    stack, cs = _problem("simplex", rng)
    z = rng.standard_normal((50, 2))
    b1 = evaluate_batch(stack, cs, z)
    b2 = evaluate_batch(stack, cs, z[rng.permutation(50)])
    assert entropy_estimate(b1) == pytest.approx(entropy_estimate(b2), abs=1e-14)
    np.testing.assert_allclose(moment_residual(b1), moment_residual(b2), atol=1e-14)


def test_aug_lagrangian_value_examples():
    st = LagrangianState([1.0, -2.0], 4.0)
    assert aug_lagrangian_value(1.5, [0.5, 0.25], st) == pytest.approx(-1.5 + 0.0 + 2.0 * 0.3125)
    assert aug_lagrangian_value(0.0, [0.0, 0.0], st) == 0.0
    with pytest.raises(ObjectiveError):
        aug_lagrangian_value(0.0, [0.0], st)
    with pytest.raises(ObjectiveError):
        LagrangianState([0.0], -1.0)


def _frozen_objective(stack, cs, state, z, entropy=True):
    """-H + lam.R + c R_first.R_second with R_second held fixed at the base parameters."""
    half = z.shape[0] // 2
    R2 = np.mean(cs.evaluate(stack.forward(z)[0])[half:], axis=0)
    trial = stack.copy()

    def f(theta):
        trial.set_flat(theta)
        b = evaluate_batch(trial, cs, z)
        T = b.constraint_values
        val = state.lam @ T.mean(axis=0) + state.c * T[:half].mean(axis=0) @ R2
        if entropy:
            val += np.mean(b.log_densities)
        return val

    return f


@pytest.mark.parametrize("kind", ["identity", "simplex", "positive"])
@pytest.mark.parametrize("entropy", [True, False])
def test_gradient_matches_frozen_batch_fd(kind, entropy, rng):
    stack, cs = _problem(kind, rng)
    state = LagrangianState(rng.normal(size=cs.m), 2.5)
    z = rng.standard_normal((40, stack.dim))
    g = aug_lagrangian_grad(stack, cs, state, evaluate_batch(stack, cs, z), entropy=entropy).flat()
    fd = central_diff(_frozen_objective(stack, cs, state, z, entropy), stack.get_flat())
    assert rel_err(g, fd, floor=1e-6) < 1e-5


def test_gradient_without_penalty_is_exact_batch_gradient(rng):
    stack, cs = _problem("simplex", rng)
    state = LagrangianState(rng.normal(size=cs.m), 0.0)
    z = rng.standard_normal((30, 2))
    g = aug_lagrangian_grad(stack, cs, state, evaluate_batch(stack, cs, z)).flat()
    trial = stack.copy()

    def L(theta):
        trial.set_flat(theta)
        b = evaluate_batch(trial, cs, z)
        return aug_lagrangian_value(entropy_estimate(b), moment_residual(b), state)

    assert rel_err(g, central_diff(L, stack.get_flat()), floor=1e-6) < 1e-5


def test_odd_batch_rejected(rng):
    stack, cs = _problem("identity", rng)
    b = draw_batch(stack, cs, 11, rng)
    with pytest.raises(ObjectiveError):
        aug_lagrangian_grad(stack, cs, LagrangianState(np.zeros(2), 1.0), b)


def test_gradient_is_unbiased_against_quadrature(rng):
    """Mean of 10^4 split-batch gradients matches the gradient of L evaluated by quadrature (d = 1)."""
    stack, cs = _problem("identity", rng, dim=1, layers=2)
    state = LagrangianState(np.array([0.4, -0.3]), 1.5)
    trial = stack.copy()

    def L(theta):
        trial.set_flat(theta)

        def expect(fn):
            def integrand(z):
                zz = np.array([[z]])
                out, ld, _ = trial.forward(zz)
                return fn(zz, out, ld) * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

            return quad(integrand, -14, 14, epsabs=1e-13, epsrel=1e-13, limit=400)[0]

        neg_h = expect(lambda zz, out, ld: float(-0.5 * zz[0, 0] ** 2 - 0.5 * np.log(2 * np.pi) - ld[0]))
        R = np.array([expect(lambda zz, out, ld, j=j: float(cs.evaluate(out)[0, j])) for j in range(cs.m)])
        return aug_lagrangian_value(-neg_h, R, state)

    target = central_diff(L, stack.get_flat(), h=1e-5)
    reps = 10_000
    gs = np.array([aug_lagrangian_grad(stack, cs, state, draw_batch(stack, cs, 20, rng)).flat()
                   for _ in range(reps)])
    mean, se = gs.mean(axis=0), gs.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(mean - target) < 4 * se)


def test_base_points_and_gaussian_entropy_examples(rng):
    stack = FlowStack(2, [], IdentityMap())
    b = draw_batch(stack, ShiftedMoments(2, 0, 2), 100_000, rng)
    assert np.all(np.abs(b.base_points.mean(axis=0)) < 4 / np.sqrt(1e5))
    assert entropy_estimate(b) == pytest.approx(np.log(2 * np.pi * np.e), abs=0.02)
