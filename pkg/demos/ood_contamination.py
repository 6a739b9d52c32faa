"""
Detecting contaminated test segments
====================================

Paths simulated with a 2.5 times larger diffusion are written into fixed
day ranges of the held-out years.  A classifier trained on soft Brownian
offset windows should score those days higher than the clean ones.
"""

import numpy as np

from delay_sde import SgdConfig, TrainConfig, benchmark_sdde_spec, build_windows, fit_delay_sde_net, rocauc
from delay_sde.evaluation import CompareConfig, ood_training_windows, sbo_configs_of
from delay_sde.ood import BENCHMARK_OOD_INTERVALS, amplified_diffusion_paths, inject_ood_intervals, window_labels
from delay_sde.sdde import benchmark_initial_path, make_time_grid, simulate_paths

spec = benchmark_sdde_spec()
grid = make_time_grid(4, 365, 1)
train = simulate_paths(spec, benchmark_initial_path, grid, 10, seed=2)
test = simulate_paths(spec, benchmark_initial_path, grid, 3, seed=3)
noisy = amplified_diffusion_paths(spec, 2.5, benchmark_initial_path, grid, 10, seed=4)

# only the intervals of the first three test years apply here
intervals = [iv for iv in BENCHMARK_OOD_INTERVALS if iv[0] <= 3]
contaminated = inject_ood_intervals(test, noisy, intervals, train.values, seed=5)
print(f"replaced points: {contaminated.mask.sum()}  ({100 * contaminated.contamination:.1f}% of the test points)")

windows = build_windows(train, 4, 1)
cfg = TrainConfig(width=16, drift=SgdConfig(0.025, 0.9, 8e-3, 600, 512),
                  aleatoric=SgdConfig(0.001, 0.9, 5e-5, 300, 512), epistemic=SgdConfig(0.2, 0.9, 5e-5, 400, "full"))
model = fit_delay_sde_net(windows, cfg, ood_windows=ood_training_windows(windows, "sbo", 6, sbo_configs_of(CompareConfig())))

ws = build_windows(contaminated.paths, 4, 1)
scores = model.epistemic_prob(ws.times, ws.windows)
labels = window_labels(contaminated, 4, 1)
print(f"mean score clean {scores[~labels].mean():.3f}, contaminated {scores[labels].mean():.3f}")
print(f"ROCAUC {rocauc(scores, labels):.3f}")
