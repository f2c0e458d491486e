"""Proximal estimation of the conditional log odds ratio under confounded
outcome-dependent sampling."""

from .bridge import BridgeFit, eval_h, eval_q, h_moment, q_moment, solve_h, solve_q
from .data import (
    EstimateResult,
    MomentWeights,
    SelectedSample,
    SolverOptions,
    Violation,
    find_violations,
    validate,
)
from .errors import *  # noqa: F401,F403
from .estimators import (
    EffectModSpec,
    PolytomousSample,
    StackedFit,
    ThetaComponents,
    effect_mod_fit,
    estimate_pdr,
    estimate_pipw,
    estimate_por,
    joint_fit,
    polynomial_basis,
    polytomous_fit,
)
from .families import (
    InverseLogisticTreatment,
    LinearBasis,
    LogLinearOutcome,
    SaturatedBinary,
    ZeroBridge,
)
from .kernel import FoldEstimate, KernelConfig, crossfit_beta, fit_fold_bridges
from .simulation import (
    DgpSpec,
    DiscreteLaw,
    MonteCarloReport,
    discrete_oracle,
    generate,
    run_monte_carlo,
    true_bridge_params_continuous,
)

__version__ = "0.1.0"
