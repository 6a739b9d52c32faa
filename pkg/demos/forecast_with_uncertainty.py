"""
Forecasting a delayed system with separated uncertainty
=======================================================

Simulate a few years of the two-dimensional test system, fit a network
with four daily lags and forecast a week ahead.  The forecast carries an
aleatoric spread (learned noise level) and an epistemic spread (how far the
input window sits from the training data).
"""

import numpy as np

from delay_sde import SgdConfig, TrainConfig, benchmark_sdde_spec, build_windows, fit_delay_sde_net, predict
from delay_sde.evaluation import CompareConfig, ood_training_windows, sbo_configs_of
from delay_sde.sdde import benchmark_initial_path, make_time_grid, simulate_paths

spec = benchmark_sdde_spec()
grid = make_time_grid(4, 365, 1)
paths = simulate_paths(spec, benchmark_initial_path, grid, 12, seed=1)
train, test = paths.subset(range(10)), paths.subset(range(10, 12))

# one window per day: the newest four states and the next state as target
windows = build_windows(train, 4, 1)
print("training windows:", len(windows))

cfg = TrainConfig(
    width=16,
    drift=SgdConfig(0.025, 0.9, 8e-3, 800, 512),
    aleatoric=SgdConfig(0.001, 0.9, 5e-5, 500, 512),
    epistemic=SgdConfig(0.2, 0.9, 5e-5, 300, "full"),
)
# synthetic out-of-distribution windows teach the classifier where the data ends
ood = ood_training_windows(windows, "sbo", 7, sbo_configs_of(CompareConfig()))
model = fit_delay_sde_net(windows, cfg, build_windows(test, 4, 1), ood)
print(f"tuned epistemic scale sigma_e = {model.sigma_e:.3f}")

# forecast a week from day 200 of a held-out year
history = test.values[0, grid.L + 197 : grid.L + 201]
bundle = predict(model, history, 200.0, 7)
lo, hi = bundle.ci(0.95)
truth = test.values[0, grid.L + 201 : grid.L + 208]
print(" day   truth    mean   std_a   std_e        95% interval")
for i in range(7):
    print(f"{bundle.times[i]:4.0f} {truth[i, 0]:7.3f} {bundle.mean[i, 0]:7.3f} {bundle.aleatoric_std[i, 0]:7.3f}"
          f" {bundle.epistemic_std:7.3f}   [{lo[i, 0]:6.3f}, {hi[i, 0]:6.3f}]")

# a window far outside the training range raises the epistemic part
far = history + 10.0
print("epistemic probability, typical window:", round(float(bundle.epistemic_prob), 3))
print("epistemic probability, shifted window:", round(float(predict(model, far, 200.0, 1).epistemic_prob), 3))
