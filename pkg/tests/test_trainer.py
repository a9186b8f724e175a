import math

import numpy as np
import pytest
from scipy.integrate import quad

from mefn.constraints import ConstraintSet, DirichletConstraints, kappa_from_alpha
from mefn.flow import FlowStack, SimplexMap
from mefn.objectives import LagrangianState, aug_lagrangian_grad, draw_batch, evaluate_batch, moment_residual
from mefn.trainer import (
    Adadelta,
    Adam,
    TrainConfig,
    TrainingError,
    TrainState,
    c_update,
    lambda_update,
    make_optimizer,
    sgd_step,
    train,
    welch_p_value,
)


def _state(theta, opt, lam=(0.0,), c=1.0, seed=0):
    class Holder:
        def __init__(self, v):
            self.v = np.array(v, dtype=float)

        def get_flat(self):
            return self.v.copy()

        def set_flat(self, v):
            self.v = np.array(v, dtype=float)

    return TrainState(Holder(theta), LagrangianState(lam, c), opt, opt.init(len(theta)), np.random.default_rng(seed))


@pytest.mark.parametrize("opt", [Adadelta(), Adam()])
def test_zero_gradient_leaves_parameters(opt):
    st = sgd_step(_state([1.0, -2.0], opt), np.zeros(2))
    np.testing.assert_array_equal(st.stack.v, [1.0, -2.0])
    assert st.inner_iter == 1


def test_first_steps():
    st = sgd_step(_state([0.0], Adam()), np.array([1.0]))
    assert st.stack.v[0] == pytest.approx(-0.001, rel=1e-7)
    st = sgd_step(_state([0.0], Adadelta()), np.array([1.0]))
    assert st.stack.v[0] == pytest.approx(-math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6), rel=1e-12)
    assert st.stack.v[0] == pytest.approx(-4.4721e-3, abs=1e-7)


def test_make_optimizer():
    assert isinstance(make_optimizer({"name": "adam", "lr": 0.01}), Adam)
    assert make_optimizer(None).rho == 0.95
    with pytest.raises(ValueError):
        make_optimizer({"name": "sgd"})


def test_lambda_update_examples():
    st = lambda_update(_state([0.0], Adam(), lam=[0.0], c=1.0), [0.5])
    np.testing.assert_allclose(st.lagrangian.lam, [0.5])
    st = lambda_update(_state([0.0], Adam(), lam=[1.0, -1.0], c=4.0), [0.25, 0.25])
    np.testing.assert_allclose(st.lagrangian.lam, [2.0, 0.0])
    st = lambda_update(st, [0.0, 0.0])
    np.testing.assert_allclose(st.lagrangian.lam, [2.0, 0.0])
    with pytest.raises(ValueError):
        lambda_update(st, [0.0])


def _t_upper_tail(t, df):
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    pdf = lambda x: math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))
    return quad(pdf, t, math.inf, epsabs=1e-14, epsrel=1e-12)[0]


def test_welch_matches_quadrature(rng):
    new = rng.standard_normal(20) + 1.0
    old = rng.standard_normal(20)
    a, b = new.var(ddof=1) / 20, old.var(ddof=1) / 20
    t = (new.mean() - old.mean()) / math.sqrt(a + b)
    df = (a + b) ** 2 / (a * a / 19 + b * b / 19)
    assert welch_p_value(new, old, 1.0) == pytest.approx(_t_upper_tail(t, df), abs=1e-10)
    # gamma scales the old sample
    old2 = rng.uniform(1, 2, 15)
    g = 0.25
    a, b = new.var(ddof=1) / 20, (g * old2).var(ddof=1) / 15
    t = (new.mean() - g * old2.mean()) / math.sqrt(a + b)
    df = (a + b) ** 2 / (a * a / 19 + b * b / 14)
    assert welch_p_value(new, old2, g) == pytest.approx(_t_upper_tail(t, df), abs=1e-10)


def test_welch_limits_and_conventions(rng):
    big = 10 + 1e-3 * rng.standard_normal(20)
    small = 1 + 1e-3 * rng.standard_normal(20)
    assert welch_p_value(big, small, 0.25) < 1e-12
    assert welch_p_value(1e-3 * np.abs(rng.standard_normal(20)), small, 0.25) > 1 - 1e-12
    assert welch_p_value([1.0, 1.0], [4.0, 4.0], 0.25) == 0.5
    assert welch_p_value([2.0, 2.0], [4.0, 4.0], 0.25) == 0.0
    with pytest.raises(ValueError):
        welch_p_value([1.0], [1.0, 2.0], 0.5)


def test_c_update_escalation(rng):
    big = 10 + 1e-3 * rng.standard_normal(20)
    small = 1 + 1e-3 * rng.standard_normal(20)
    st = _state([0.0], Adam(), c=2.0)
    st, p, up = c_update(st, big, small, rng, 4.0, 0.25)
    assert up and st.lagrangian.c == 8.0
    st, p, up = c_update(st, 1e-4 * small, small, rng, 4.0, 0.25)
    assert not up and st.lagrangian.c == 8.0


def test_c_update_rate_is_one_minus_p(rng):
    new = rng.normal(1.0, 1.0, 20)
    old = rng.normal(3.6, 1.0, 20)
    p = welch_p_value(new, old, 0.25)
    assert 0.1 < p < 0.9
    hits = 0
    for _ in range(4000):
        st = _state([0.0], Adam(), c=1.0)
        hits += c_update(st, new, old, rng, 4.0, 0.25)[2]
    assert abs(hits / 4000 - (1 - p)) < 4 * math.sqrt(p * (1 - p) / 4000)


class Zero(ConstraintSet):
    def __init__(self):
        super().__init__(2, ("simplex", 3))

    def evaluate(self, s):
        return np.zeros((s.shape[0], 2))

    def output_gradient(self, s):
        return np.zeros((s.shape[0], 2, s.shape[1]))


def test_zero_constraints_give_pure_entropy_gradient(rng):
    stack = FlowStack.planar(2, 3, rng, SimplexMap(), scale=0.5)
    batch = draw_batch(stack, Zero(), 40, rng)
    g = aug_lagrangian_grad(stack, Zero(), LagrangianState([3.0, -1.0], 10.0), batch).flat()
    ref = stack.pullback(batch.cache, np.zeros_like(batch.transformed), -1.0 / 40).flat()
    np.testing.assert_array_equal(g, ref)


def _dirichlet_problem(seed=3):
    stack = FlowStack.planar(2, 4, np.random.default_rng(seed), SimplexMap())
    return stack, DirichletConstraints(kappa_from_alpha([1, 2, 3]))


def test_no_inner_iterations():
    stack, cs = _dirichlet_problem()
    cfg = TrainConfig(k_max=1, i_max=0, n_tilde=500, seed=7)
    rep = train(cfg, stack, cs)
    np.testing.assert_array_equal(rep.stack.get_flat(), stack.get_flat())
    # replay the rng: residual samples first, then the multiplier batch
    rng = np.random.default_rng(7)
    for _ in range(cfg.residual_batches):
        draw_batch(stack, cs, cfg.residual_batch_size, rng)
    R = moment_residual(draw_batch(stack, cs, 500, rng))
    np.testing.assert_allclose(rep.lambdas[1], cfg.c0 * R)
    assert len(rep.entropy) == 0 and len(rep.cs) == 2


def test_short_run_report_and_monotone_c():
    stack, cs = _dirichlet_problem()
    cfg = TrainConfig(k_max=4, i_max=150, n=100, n_tilde=300, seed=1)
    rep = train(cfg, stack, cs)
    assert len(rep.entropy) == len(rep.residual_norm) == len(rep.loss) == 600
    assert len(rep.cs) == 5 and len(rep.p_values) == 4 and len(rep.lambdas) == 5
    assert np.all(np.diff(rep.cs) >= 0)
    assert rep.residual_norm[-1] < rep.residual_norm[0]
    lines = rep.trace_csv().splitlines()
    assert lines[0] == "outer,inner,entropy,residual_norm,loss,c,lambda_1,lambda_2,lambda_3"
    assert len(lines) == 601
    assert rep.outer_csv().count("\n") == 5


def test_training_is_deterministic():
    stack, cs = _dirichlet_problem()
    cfg = TrainConfig(k_max=2, i_max=50, n=60, n_tilde=200, seed=11)
    a, b = train(cfg, stack, cs), train(cfg, stack, cs)
    assert a.trace_csv() == b.trace_csv()
    np.testing.assert_array_equal(a.stack.get_flat(), b.stack.get_flat())
    c = train(TrainConfig(k_max=2, i_max=50, n=60, n_tilde=200, seed=12), stack, cs)
    assert c.trace_csv() != a.trace_csv()


def test_entropy_disabled_run_changes_objective():
    stack, cs = _dirichlet_problem()
    cfg = TrainConfig(k_max=1, i_max=20, n=60, n_tilde=200, seed=2, entropy_enabled=False)
    rep = train(cfg, stack, cs)
    # with the entropy term off the loss is the pure constraint part
    assert rep.loss[0] == pytest.approx(0.5 * rep.residual_norm[0] ** 2, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts_with_indices():
    stack, cs = _dirichlet_problem()
    cfg = TrainConfig(k_max=2, i_max=5, n=20, n_tilde=50, seed=0, lambda0=np.inf)
    with pytest.raises(TrainingError, match="outer 0, inner 0") as info:
        train(cfg, stack, cs)
    assert info.value.report is not None


@pytest.mark.parametrize("kw", [dict(beta=1.0), dict(gamma=1.0), dict(c0=0.0), dict(k_max=0), dict(n=31),
                                dict(residual_statistic="mean")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_dimension_mismatch():
    stack = FlowStack.planar(3, 1, np.random.default_rng(0), SimplexMap())
    with pytest.raises(ValueError):
        train(TrainConfig(k_max=1, i_max=1), stack, DirichletConstraints(kappa_from_alpha([1, 2, 3])))
