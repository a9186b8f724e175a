"""Maximum entropy distributions fitted as normalizing flows of a Gaussian."""

from .constraints import (
    ConstraintSet,
    DirichletConstraints,
    OptionChain,
    OptionConstraints,
    dirichlet_constraints,
    kappa_from_alpha,
    option_constraints,
)
from .flow import (
    FlowStack,
    IdentityMap,
    ParamGradient,
    PlanarLayer,
    PositiveAffineMap,
    RadialLayer,
    SimplexMap,
    log_density,
    stack_forward,
    stack_pullback,
)
from .objectives import (
    LagrangianState,
    SampleBatch,
    aug_lagrangian_grad,
    aug_lagrangian_value,
    draw_batch,
    entropy_estimate,
    moment_residual,
)
from .oracles import DirichletParams, GibbsOptionModel, dirichlet_entropy, gibbs_option_fit
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"
