"""Sample-size sweeps: synthesize, fit, score with Voronoi losses, fit log-log slopes.

A sweep runs one or more *curves*.  A curve fixes the expert family and the
fitted gating; every curve of a scenario shares the same ground-truth draw
(per expert family) and the same per-(n, trial) data seeds.

Loss reference per curve (``reference="auto"``):

* sparse regime: the ground truth itself, whose over-specified atoms are
  exactly representable by the over-specified fit;
* dense regime, fitted gating equal to the truth's and softmax: the ground
  truth;
* otherwise (sigmoid fit in the dense regime, or a fit whose gating differs
  from the truth's): the population least squares projection of the truth
  onto N-atom measures of the fitted kind, approximated by a noiseless fit
  on a large reference sample.  This is the limit the estimator converges
  to when the truth is not representable.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .estimation import FitConfig, FitError, SynthesisConfig, fit, synthesize_dataset
from .model import ContractError, ExpertSpec, GatingKind, MixingMeasure, ScoreKind
from .streams import generator
from .voronoi import assign_cells, compute_loss, loss_minimax_r

log = logging.getLogger(__name__)

DEFAULT_GRID = (100, 316, 1000, 3162, 10000, 31623, 100000)
FAILURE_LIMIT = 0.2


class SweepError(RuntimeError):
    pass


EXPERTS = {
    "relu": lambda d: ExpertSpec.ridge(d, "relu"),
    "gelu": lambda d: ExpertSpec.ridge(d, "gelu"),
    "linear": ExpertSpec.linear,
    "poly2": lambda d: ExpertSpec.polynomial(d, 2),
}


@dataclass(frozen=True)
class CurveSpec:
    expert: str
    fit_gating: str

    @property
    def label(self):
        return f"{self.fit_gating}-{self.expert}"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "custom"
    truth_gating: str = "sigmoid"
    curves: tuple = (CurveSpec("relu", "sigmoid"),)
    score: str = "full"
    regime: str = "dense"
    d: int = 8
    n_star: int = 8
    n_grid: tuple = DEFAULT_GRID
    trials: int = 20
    noise_var: float = 0.01
    seed: int = 2024
    fit: FitConfig = field(default_factory=FitConfig)
    reference: str = "auto"  # auto | truth | projection
    projection_n: int = 200_000
    projection_iters: int = 6000
    sparse_atoms: tuple = (6, 7)  # zero-based indices zeroed in the sparse regime

    def __post_init__(self):
        if self.regime not in ("sparse", "dense"):
            raise ContractError("regime must be 'sparse' or 'dense'")
        if self.reference not in ("auto", "truth", "projection"):
            raise ContractError("reference must be auto, truth or projection")
        GatingKind(self.truth_gating)
        ScoreKind(self.score)
        curves = tuple(c if isinstance(c, CurveSpec) else CurveSpec(**c) for c in self.curves)
        for c in curves:
            if c.expert not in EXPERTS:
                raise ContractError(f"unknown expert {c.expert!r}")
            GatingKind(c.fit_gating)
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if isinstance(self.fit, dict):
            object.__setattr__(self, "fit", FitConfig.from_dict(self.fit))

    def to_dict(self):
        return {
            "scenario": self.scenario, "truth_gating": self.truth_gating,
            "curves": [{"expert": c.expert, "fit_gating": c.fit_gating} for c in self.curves],
            "score": self.score, "regime": self.regime, "d": self.d, "n_star": self.n_star,
            "n_grid": list(self.n_grid), "trials": self.trials, "noise_var": self.noise_var,
            "seed": self.seed, "fit": self.fit.to_dict(), "reference": self.reference,
            "projection_n": self.projection_n, "projection_iters": self.projection_iters,
            "sparse_atoms": list(self.sparse_atoms),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "curves" in data:
            data["curves"] = tuple(CurveSpec(**c) for c in data["curves"])
        for key in ("n_grid", "sparse_atoms"):
            if key in data:
                data[key] = tuple(data[key])
        if "fit" in data:
            data["fit"] = FitConfig.from_dict(data["fit"])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})

    def loss_kind(self, curve=None):
        """Headline loss: L1/L4 in the sparse regime, L3/L5 otherwise."""
        full = ScoreKind(self.score) is ScoreKind.FULL
        if self.regime == "sparse":
            return "l1" if full else "l4"
        return "l3" if full else "l5"


# Reduced budget that fits a single desktop core: a four-point grid over 1.5
# decades, three trials, one restart, and a smaller projection sample.
DESK_BUDGET = {"n_grid": (1000, 3162, 10000, 31623), "trials": 3, "projection_n": 50_000,
               "projection_iters": 3000, "fit": {"restarts": 1}}


def desk_config(name, **overrides):
    """Scenario preset with ``DESK_BUDGET`` applied."""
    base = scenario_config(name)
    kw = {k: v for k, v in DESK_BUDGET.items() if k != "fit"}
    kw["fit"] = replace(base.fit, **DESK_BUDGET["fit"])
    kw.update(overrides)
    return replace(base, **kw)


def scenario_config(name, **overrides):
    """Preset configurations for the four simulation scenarios."""
    name = name.lower()
    presets = {
        "fig1a": dict(truth_gating="softmax", regime="dense",
                      curves=(CurveSpec("relu", "sigmoid"), CurveSpec("relu", "softmax"))),
        "fig1b": dict(truth_gating="softmax", regime="dense",
                      curves=(CurveSpec("linear", "sigmoid"), CurveSpec("linear", "softmax"))),
        "fig2a": dict(truth_gating="sigmoid", regime="sparse",
                      curves=(CurveSpec("relu", "sigmoid"), CurveSpec("linear", "sigmoid")),
                      fit=FitConfig(duplicate_atoms=(6, 7))),
        "fig2b": dict(truth_gating="sigmoid", regime="dense",
                      curves=(CurveSpec("relu", "sigmoid"), CurveSpec("linear", "sigmoid"))),
        "custom": {},
    }
    if name not in presets:
        raise ContractError(f"unknown scenario {name!r}")
    kw = dict(presets[name], scenario=name)
    kw.update(overrides)
    return ExperimentConfig(**kw)


# ---------------------------------------------------------------------------
# ground truth

def make_ground_truth(cfg, expert="relu", gating=None):
    """N* atoms with entries ~ N(0, 1/d); sparse regime zeroes the gating of two atoms.

    The draws depend only on (seed, d, N*, score), so every expert family and
    gating share the same gating parameters; expert parameters are shared
    between families with equal q.  A is symmetrised since only its
    symmetric part is identifiable.
    """
    d, k = cfg.d, cfg.n_star
    rng = generator(cfg.seed, "truth", d, k)
    sd = math.sqrt(1.0 / d)
    A = rng.normal(0.0, sd, (k, d, d))
    A = 0.5 * (A + A.transpose(0, 2, 1))
    b = rng.normal(0.0, sd, (k, d))
    c = rng.normal(0.0, sd, k)
    spec = EXPERTS[expert](d)
    eta = rng.normal(0.0, sd, (k, spec.q))
    if cfg.regime == "sparse":
        idx = list(cfg.sparse_atoms)
        A[idx] = 0.0
        b[idx] = 0.0
        c[idx] = 0.0
    score = ScoreKind(cfg.score)
    if score is ScoreKind.PARTIAL:
        b = np.zeros((k, 0))
    return MixingMeasure(A, b, c, eta, spec, score, GatingKind(gating or cfg.truth_gating))


# ---------------------------------------------------------------------------
# slopes

@dataclass(frozen=True)
class SlopeEstimate:
    slope: float
    intercept: float
    stderr: float
    n_points: int

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "stderr": self.stderr,
                "n_points": self.n_points}


def fit_slope(points):
    """OLS of log(loss) on log(n).  Non-positive losses are dropped with a warning."""
    pts = [(float(n), float(v)) for n, v in points]
    good = [(n, v) for n, v in pts if v > 0 and math.isfinite(v)]
    if len(good) < len(pts):
        warnings.warn(f"dropped {len(pts) - len(good)} non-positive loss point(s) from slope fit")
    if len(good) < 2:
        raise ContractError("need at least two positive points to fit a slope")
    x = np.log([n for n, _ in good])
    y = np.log([v for _, v in good])
    k = len(x)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise ContractError("all sample sizes are equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    if k > 2:
        resid = y - (intercept + slope * x)
        stderr = float(math.sqrt(np.sum(resid ** 2) / (k - 2) / sxx))
    else:
        stderr = float("nan")
    return SlopeEstimate(slope, intercept, stderr, k)


# ---------------------------------------------------------------------------
# sweep

@dataclass(frozen=True)
class Record:
    scenario: str
    gating: str
    expert: str
    n: int
    trial: int
    loss_kind: str
    loss: float
    objective: float
    seconds: float | None = None


@dataclass
class CurveSummary:
    label: str
    loss_kind: str
    ns: list
    means: list
    stds: list
    failures: list
    slope: SlopeEstimate | None

    def to_dict(self):
        return {"label": self.label, "loss_kind": self.loss_kind, "n": self.ns,
                "mean": self.means, "std": self.stds, "failures": self.failures,
                "slope": self.slope.to_dict() if self.slope else None}


@dataclass
class SweepResult:
    config: ExperimentConfig
    records: list
    summaries: dict = field(default_factory=dict)  # (curve label, loss kind) -> CurveSummary

    @property
    def slopes(self):
        """Headline slope per curve label."""
        out = {}
        for c in self.config.curves:
            s = self.summaries.get((c.label, self.config.loss_kind(c)))
            out[c.label] = s.slope if s else None
        return out


def _use_projection(cfg, curve):
    if cfg.reference != "auto":
        return cfg.reference == "projection"
    if cfg.regime == "sparse":
        return curve.fit_gating != cfg.truth_gating
    return curve.fit_gating == "sigmoid" or curve.fit_gating != cfg.truth_gating


def _fit_cfg_for(cfg, curve, trial, n):
    return replace(cfg.fit, gating=curve.fit_gating,
                   seed=int(generator(cfg.seed, "trial", n, trial).integers(2 ** 63)))


def projection_reference(cfg, curve, truth):
    """Noiseless large-sample fit approximating the population projection."""
    data = synthesize_dataset(SynthesisConfig(cfg.d, cfg.projection_n, truth, 0.0,
                                              seed=_data_seed(cfg, -1, -1)))
    fcfg = replace(cfg.fit, gating=curve.fit_gating, restarts=1,
                   polish_iters=cfg.projection_iters, grad_tol=1e-12,
                   seed=int(generator(cfg.seed, "trial", 0, 10 ** 6).integers(2 ** 63)))
    return fit(data, fcfg, truth=truth).estimate


def _data_seed(cfg, n, trial):
    return int(generator(cfg.seed, "data", n + 1, trial + 1).integers(2 ** 63))


def _losses(cfg, est, ref):
    kind = cfg.loss_kind()
    assignment = assign_cells(est, ref)
    out = {kind: compute_loss(kind, est, ref, assignment=assignment).value}
    if cfg.regime == "sparse":
        theory = assignment.with_over_cells(cfg.sparse_atoms)
        out[kind + "_theory"] = compute_loss(kind, est, ref, assignment=theory).value
        dense_kind = "l3" if kind == "l1" else "l5"
        out[dense_kind] = compute_loss(dense_kind, est, ref, assignment=assignment).value
    else:
        sparse_kind = "l1" if kind == "l3" else "l4"
        out[sparse_kind] = compute_loss(sparse_kind, est, ref, assignment=assignment).value
    if est.expert.is_polynomial:
        out["l2r"] = loss_minimax_r(est, ref, assignment, r=1.0).value
    return out


def _run_task(args):
    cfg, curve, n, trial, ref, timing = args
    truth = make_ground_truth(cfg, curve.expert)
    t0 = time.perf_counter()
    data = synthesize_dataset(SynthesisConfig(cfg.d, n, truth, cfg.noise_var, seed=_data_seed(cfg, n, trial)))
    try:
        res = fit(data, _fit_cfg_for(cfg, curve, trial, n), truth=truth)
    except FitError as exc:
        log.warning("fit failed for %s n=%d trial=%d: %s", curve.label, n, trial, exc)
        return [(curve, n, trial, cfg.loss_kind(), math.nan, math.nan, None)]
    seconds = time.perf_counter() - t0 if timing else None
    return [(curve, n, trial, kind, val, res.final_objective, seconds)
            for kind, val in _losses(cfg, res.estimate, ref).items()]


def run_sweep(cfg, jobs=1, timing=False, references=None, progress=None):
    """Run every (curve, n, trial) fit and aggregate.

    ``references`` optionally maps curve labels to precomputed loss
    references; ``progress`` is called with a message after each task.
    """
    refs = dict(references or {})
    for curve in cfg.curves:
        if curve.label not in refs:
            truth = make_ground_truth(cfg, curve.expert)
            refs[curve.label] = projection_reference(cfg, curve, truth) if _use_projection(cfg, curve) else truth
    tasks = [(cfg, curve, n, trial, refs[curve.label], timing)
             for curve in cfg.curves for n in cfg.n_grid for trial in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_task, tasks))
    else:
        outputs = []
        for i, task in enumerate(tasks):
            outputs.append(_run_task(task))
            if progress:
                progress(f"{i + 1}/{len(tasks)} {task[1].label} n={task[2]} trial={task[3]}")
    records = [
        Record(cfg.scenario, curve.fit_gating, curve.expert, n, trial, kind, float(val),
               float(obj), sec)
        for out in outputs for (curve, n, trial, kind, val, obj, sec) in out
    ]
    result = SweepResult(cfg, records, aggregate(records, cfg.n_grid))
    result.references = refs
    return result


def aggregate(records, n_grid=None):
    """Per (curve, loss kind): mean/std per n, failure counts and slope."""
    groups = {}
    for r in records:
        groups.setdefault((f"{r.gating}-{r.expert}", r.loss_kind), []).append(r)
    summaries = {}
    for key, recs in groups.items():
        ns = sorted({r.n for r in recs}) if n_grid is None else [n for n in n_grid if any(r.n == n for r in recs)]
        means, stds, fails = [], [], []
        for n in ns:
            vals = np.array([r.loss for r in recs if r.n == n])
            bad = int(np.sum(~np.isfinite(vals)))
            if vals.size and bad / vals.size > FAILURE_LIMIT:
                raise SweepError(f"{key[0]}: {bad}/{vals.size} fits failed at n={n}")
            ok = vals[np.isfinite(vals)]
            means.append(float(ok.mean()))
            stds.append(float(ok.std(ddof=1)) if ok.size > 1 else 0.0)
            fails.append(bad)
        slope = None
        positive = [(n, m) for n, m in zip(ns, means) if m > 0]
        if len(positive) >= 2:
            slope = fit_slope(positive)
        summaries[key] = CurveSummary(key[0], key[1], ns, means, stds, fails, slope)
    return summaries


# ---------------------------------------------------------------------------
# published slopes and acceptance windows

REPORTED_SLOPES = {
    "fig1a": {"sigmoid-relu": -0.51, "softmax-relu": -0.24},
    "fig1b": {"sigmoid-linear": -0.46, "softmax-linear": -0.07},
    "fig2a": {"sigmoid-relu": -0.54, "sigmoid-linear": -0.07},
    "fig2b": {"sigmoid-relu": -0.53, "sigmoid-linear": -0.44},
}

SLOPE_WINDOWS = {
    "fig1a": {"sigmoid-relu": (-0.66, -0.36), "softmax-relu": (-0.39, -0.09)},
    "fig1b": {"sigmoid-linear": (-0.61, -0.31), "softmax-linear": (-0.22, 0.08)},
    "fig2a": {"sigmoid-relu": (-0.69, -0.39), "sigmoid-linear": (-0.22, 0.08)},
    "fig2b": {"sigmoid-relu": (-0.68, -0.38), "sigmoid-linear": (-0.59, -0.29)},
}

# (faster curve, slower curve, required gap) orderings
SLOPE_ORDERINGS = {
    "fig1a": [("sigmoid-relu", "softmax-relu", 0.15)],
}


def check_slopes(scenario, slopes):
    """Violations of the scenario's slope windows; ``slopes`` maps curve label -> slope."""
    problems = []
    for label, (lo, hi) in SLOPE_WINDOWS.get(scenario, {}).items():
        s = slopes.get(label)
        if s is None or not math.isfinite(s):
            problems.append(f"{label}: slope unavailable")
        elif not lo <= s <= hi:
            problems.append(f"{label}: slope {s:.3f} outside [{lo}, {hi}]")
    for fast, slow, gap in SLOPE_ORDERINGS.get(scenario, []):
        a, b = slopes.get(fast), slopes.get(slow)
        if a is not None and b is not None and not a < b - gap:
            problems.append(f"{fast} slope {a:.3f} is not below {slow} slope {b:.3f} minus {gap}")
    return problems
