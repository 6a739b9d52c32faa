"""
Strong convergence of a fitted delay network
============================================

Fit a network on fine-resolution paths (dt = 0.01), then roll it forward on
held-out paths at coarser steps, always along the same Brownian path.  The
growth of the terminal error with the step size gives an empirical
convergence rate.  This is a small version of the study; the shipped
``configs/desk_convergence.cfg`` runs it at 200 paths over ten seeds.
"""

import numpy as np

from delay_sde import SgdConfig, TrainConfig, benchmark_sdde_spec, run_convergence_study
from delay_sde.evaluation import ConvergenceConfig
from delay_sde.sdde import aggregate_increments, make_time_grid, sample_brownian

# coarse increments are sums of the fine ones, so every resolution sees one path
fine = sample_brownian(make_time_grid(0, 5, 0.01), 2, seed=3)
coarse = aggregate_increments(fine, 100)
print("W(5) fine:", fine.increments.sum(axis=0), " coarse:", coarse.increments.sum(axis=0))

cfg = ConvergenceConfig(
    n_paths=60,
    n_train=40,
    train=TrainConfig(width=16, drift=SgdConfig(0.01, 0.9, 5e-5, 600, 1024),
                      aleatoric=SgdConfig(0.05, 0.9, 5e-5, 300, 1024)),
    seeds=(0, 1),
)
report, _ = run_convergence_study(benchmark_sdde_spec(), cfg=cfg)
print(report.summary())
print("errors increase along the coarse steps:", report.is_increasing())
