"""Battery energy arbitrage with terminal state-of-charge guarantees.

Threshold (k-search) charge/discharge policies under price uncertainty, exact
SoC distribution propagation with probability redistribution, terminal-band
chance constraints and stopping times, and conformalized quantile regression
for the terminal SoC.
"""

__version__ = "0.1.0"

from .market_data import (
    DayPrices,
    DatasetSplit,
    PriceBounds,
    PriceDistribution,
    PriceSeries,
    compute_bounds,
    fit_distribution,
    load_price_csv,
    slice_days,
    split_dataset,
)
from .thresholds import (
    BatteryParams,
    PolicyState,
    ThresholdSchedule,
    Trajectory,
    competitive_check,
    competitive_ratio,
    feasibility_aware_thresholds,
    feasible_charge_count,
    feasible_discharge_count,
    offline_opt,
    reduce_k,
    run_policy,
    static_charge_thresholds,
    static_discharge_thresholds,
    step_policy,
    timedep_thresholds,
)
from .reachability import (
    ActionProbs,
    KappaPolicy,
    SocDistribution,
    StoppingResult,
    TargetBand,
    action_probabilities,
    brute_force_distribution,
    count_feasible_trajectories,
    kappa_prepolicy,
    mix_over_kappa,
    propagate,
    stopping_time,
    terminal_band_probability,
)
from .conformal import (
    ConformalModel,
    PredictionInterval,
    conformal_quantile,
    evaluate_coverage,
    fit_conformal,
    nonconformity_scores,
    pinball_loss,
    predict_interval,
    train_quantile_model,
)
