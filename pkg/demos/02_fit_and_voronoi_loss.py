"""Fit an over-specified sigmoid MoE and measure it with Voronoi losses.

The ground truth has 2 linear experts in d=2; we fit 3 atoms, so one truth atom
must be shared by two fitted atoms.  The Voronoi cells show which fitted atoms
approximate which true atom.  The regression gap shrinks quickly; the
parameter losses shrink more slowly because the two atoms sharing a cell can
trade expert parameters against each other (a flat direction of the objective).
"""
import numpy as np

from sigmoe.estimation import FitConfig, SynthesisConfig, fit, synthesize_dataset
from sigmoe.experiments import ExperimentConfig, make_ground_truth
from sigmoe.voronoi import assign_cells, compute_loss

truth = make_ground_truth(ExperimentConfig(d=2, n_star=2, seed=5), "linear")
cfg = FitConfig(restarts=2, max_iters=800, polish_iters=800, seed=1)

for n in (500, 5000, 50000):
    data = synthesize_dataset(SynthesisConfig(truth.d, n, truth, noise_var=0.01, seed=n))
    est = fit(data, cfg, truth=truth).estimate
    cells = assign_cells(est, truth)
    l1 = compute_loss("l1", est, truth).value
    l3 = compute_loss("l3", est, truth).value
    gap = np.mean((est(data.X) - truth(data.X)) ** 2)
    print(f"n={n:6d}  cells={list(cells.cell_of)}  gap={gap:.2e}  L1={l1:.4f}  L3={l3:.4f}")
