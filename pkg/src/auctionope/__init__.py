"""Off-policy evaluation of continuous payment policies in simulated auctions."""

from .core import (
    EPS_Q,
    METRICS,
    BinningScheme,
    LiftResult,
    LoggedDataset,
    LoggedRecord,
    Metric,
    RewardVector,
    Side,
    compute_lift,
    lift_with_ci,
    make_binning,
    mape,
    read_dataset,
    write_dataset,
)
from .errors import OpeError
from .estimators import (
    ContinuousOpeInput,
    DiscreteOpeInput,
    EstimateReport,
    continuous_estimate,
    continuous_estimate_gradient,
    continuous_variant_estimate,
    dm,
    dr,
    evaluate_all,
    importance_weights,
    ipw,
    sndr,
    snipw,
)
from .learn import (
    EstimatorConfig,
    OptPalConfig,
    TuneConfig,
    counterfactual_test,
    train_optpal,
    tune_continuous,
)
from .sim import (
    AuctionConfig,
    ConstantPolicy,
    LinearPolicy,
    ModelPolicy,
    generate_log,
    run_ab_test,
    true_policy_value,
)

__version__ = "0.1.0"
