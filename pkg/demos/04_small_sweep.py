"""A miniature convergence-rate sweep, written to ./demo_sweep/.

Uses a tiny custom configuration so it finishes in about a minute; the
scenario presets (fig1a ... fig2b) use the same machinery at full size.
"""
from sigmoe.estimation import FitConfig
from sigmoe.experiments import CurveSpec, ExperimentConfig, run_sweep
from sigmoe.report import emit_outputs

cfg = ExperimentConfig(
    d=2, n_star=2, n_grid=(200, 632, 2000, 6325), trials=3,
    curves=(CurveSpec("linear", "sigmoid"),),
    fit=FitConfig(restarts=1, max_iters=600, polish_iters=600),
    projection_n=20_000, projection_iters=1500,
)
result = run_sweep(cfg, progress=print)
for label, s in result.slopes.items():
    print(f"{label}: loss ~ n^{s.slope:.2f} (+- {s.stderr:.2f})")
print(emit_outputs(result, "demo_sweep"))
