"""Delay-SDE-net: delay-aware neural SDE forecasting with separated aleatoric
and epistemic uncertainty, plus simulator, OOD generators, baselines and
evaluation harness."""
from .baselines import VarModel, fit_exp_variance, fit_var, sde_net_baseline, var_predict
from .evaluation import (
    ComparisonReport,
    ConvergenceReport,
    rmse,
    rocauc,
    run_comparison,
    run_convergence_study,
    run_nstep_eval,
)
from .model import (
    DelaySdeNet,
    PredictionBundle,
    SupervisedWindowSet,
    TrainConfig,
    build_windows,
    fit_delay_sde_net,
    predict,
    theoretical_bound,
    tune_sigma_e,
)
from .ood import SboConfig, amplified_diffusion_paths, gaussian_offset, inject_ood_intervals, soft_brownian_offset
from .sdde import (
    PathSet,
    SddeSpec,
    TimeGrid,
    aggregate_increments,
    benchmark_sdde_spec,
    linearize_initial,
    make_time_grid,
    project,
    sample_brownian,
    simulate_paths,
)
from .shallow_net import Activation, SgdConfig, TwoLayerNet, activation_constant, forward, gradient, path_norm, sgd_step

__version__ = "0.1.0"
