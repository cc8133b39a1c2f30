"""Synthetic regression data and the least squares estimator.

The estimator minimises the sum of squared residuals over mixing measures
with N atoms inside a coordinate box.  The optimiser is full-batch Adam on
the mean squared residual, followed by an L-BFGS-B polish that honours the
box natively.  Restarts are warm-started from perturbed copies of the
ground truth, the usual setup of convergence-rate simulations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from functools import cached_property

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, softmax

from .model import ContractError, GatingKind, MixingMeasure, ScoreKind
from .streams import generator

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """All restarts of a fit failed."""


@dataclass(frozen=True)
class ParamBounds:
    box_radius: float = 10.0

    def __post_init__(self):
        if not self.box_radius > 0:
            raise ContractError("box radius must be positive")

    def clamp(self, theta):
        return np.clip(theta, -self.box_radius, self.box_radius)


@dataclass(frozen=True, eq=False)
class SynthesisConfig:
    d: int
    n: int
    ground_truth: MixingMeasure
    noise_var: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.noise_var < 0:
            raise ContractError("noise variance must be nonnegative")
        if self.ground_truth.d != self.d:
            raise ContractError("ground truth dimension does not match d")
        if self.n < 1:
            raise ContractError("n must be positive")

    def to_dict(self):
        return {"d": self.d, "n": self.n, "noise_var": self.noise_var, "seed": self.seed,
                "input_law": "uniform[-1,1]^d", "ground_truth": self.ground_truth.to_dict()}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["d"]), int(data["n"]), MixingMeasure.from_dict(data["ground_truth"]),
                   float(data["noise_var"]), int(data["seed"]))


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    config: SynthesisConfig | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        Y = np.array(self.Y, dtype=float).reshape(-1)
        if len(X) != len(Y):
            raise ContractError(f"{len(X)} inputs but {len(Y)} responses")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return len(self.Y)

    @property
    def d(self):
        return self.X.shape[1]

    @cached_property
    def quad(self):
        """Outer products x x' flattened to (n, d*d); shared by all fits."""
        return np.einsum("nu,nv->nuv", self.X, self.X).reshape(self.n, -1)


def synthesize_dataset(cfg):
    rng = generator(cfg.seed, "data")
    X = rng.uniform(-1.0, 1.0, size=(cfg.n, cfg.d))
    eps = rng.normal(0.0, math.sqrt(cfg.noise_var), size=cfg.n)
    Y = cfg.ground_truth(X) + eps
    return Dataset(X, Y, cfg)


# ---------------------------------------------------------------------------
# objective and gradient

def _check_pair(G, data):
    if G.d != data.d:
        raise ContractError(f"measure has d={G.d}, data has d={data.d}")


def lse_objective(G, data):
    """Sum of squared residuals."""
    _check_pair(G, data)
    r = data.Y - G(data.X)
    return float(r @ r)


def _value_and_grad(G, data):
    """Objective and gradient as stacked arrays (gA, gb, gc, geta)."""
    X, Y, Q = data.X, data.Y, data.quad
    k, d = G.n_atoms, G.d
    s = Q @ G.A.reshape(k, d * d).T + G.c
    if G.score is ScoreKind.FULL:
        s += X @ G.b.T
    if not np.all(np.isfinite(s)):
        return math.inf, None
    E, dz, dlam = G.expert.evaluate_with_grad(X, G.eta)
    if G.gating is GatingKind.SIGMOID:
        g = expit(s)
        f = np.sum(g * E, axis=1)
        dfds = g * (1.0 - g) * E
    else:
        g = softmax(s, axis=1)
        f = np.sum(g * E, axis=1)
        dfds = g * (E - f[:, None])
    r = Y - f
    obj = float(r @ r)
    w = -2.0 * r
    dS = w[:, None] * dfds
    gA = (Q.T @ dS).T.reshape(k, d, d)
    gb = (X.T @ dS).T if G.score is ScoreKind.FULL else np.zeros((k, 0))
    gc = dS.sum(axis=0)
    dE = w[:, None] * g
    dZ = dE * dz
    geta = np.empty((k, G.expert.q))
    geta[:, :d] = (X.T @ dZ).T
    geta[:, d] = dZ.sum(axis=0)
    if dlam is not None:
        geta[:, d + 1] = (dE * dlam).sum(axis=0)
    return obj, (gA, gb, gc, geta)


def _flatten_grad(parts):
    gA, gb, gc, geta = parts
    k = gc.size
    return np.concatenate([gA.reshape(k, -1), gb, gc[:, None], geta], axis=1).ravel()


def lse_gradient(G, data):
    """Gradient of the sum of squares, ordered like ``G.flatten()``."""
    _check_pair(G, data)
    obj, parts = _value_and_grad(G, data)
    if parts is None:
        raise ContractError("non-finite affinity score")
    return _flatten_grad(parts)


# ---------------------------------------------------------------------------
# initialisation

def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def init_perturbed(truth, N, scale, rng, bounds=None, gating=None, pool=None):
    """Perturbed copies of the truth atoms, padded with perturbed duplicates.

    The first N* atoms are the truth atoms plus N(0, scale^2) noise; the
    remaining N - N* atoms copy randomly chosen truth atoms with independent
    noise; ``pool`` restricts which truth atoms may be duplicated.
    A-perturbations are symmetrised since only the symmetric part of A enters
    the score.
    """
    k = truth.n_atoms
    if N < k:
        raise ContractError(f"N={N} is smaller than the {k} truth atoms")
    pool = np.arange(k) if pool is None else np.asarray(pool, dtype=int)
    src = np.concatenate([np.arange(k), pool[rng.integers(0, pool.size, size=N - k)]]) if N > k else np.arange(k)
    theta = truth.flatten().reshape(k, -1)[src]
    if scale > 0:
        noise = rng.normal(0.0, scale, size=theta.shape)
        d = truth.d
        nA = noise[:, : d * d].reshape(N, d, d)
        noise[:, : d * d] = _sym(nA).reshape(N, -1)
        theta = theta + noise
    if bounds is not None:
        theta = bounds.clamp(theta)
    G = MixingMeasure(A=np.zeros((N, truth.d, truth.d)), b=np.zeros((N, truth.b.shape[1])),
                      c=np.zeros(N), eta=np.zeros((N, truth.expert.q)), expert=truth.expert,
                      score=truth.score, gating=gating or truth.gating)
    return G.with_flat(theta.ravel())


# ---------------------------------------------------------------------------
# fitting

@dataclass(frozen=True)
class FitConfig:
    n_fit_experts: int | None = None  # default: N* + 1
    restarts: int = 5
    max_iters: int = 1000
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_tol: float = 1e-8
    polish_iters: int = 2000
    init_perturb_scale: float = 0.05
    box_radius: float = 10.0
    gating: str | None = None  # fitted gating; default: the truth's
    allow_exact: bool = False  # permit N = N*
    duplicate_atoms: tuple | None = None  # truth atoms eligible for duplication
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.max_iters < 0 or self.polish_iters < 0:
            raise ContractError("restarts must be positive and iteration budgets nonnegative")
        if not (self.step_size > 0 and self.grad_tol > 0 and self.init_perturb_scale >= 0):
            raise ContractError("step size and tolerances must be positive")
        if self.gating is not None:
            GatingKind(self.gating)
        if self.duplicate_atoms is not None:
            object.__setattr__(self, "duplicate_atoms", tuple(int(i) for i in self.duplicate_atoms))

    @property
    def bounds(self):
        return ParamBounds(self.box_radius)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True, eq=False)
class FitResult:
    estimate: MixingMeasure
    final_objective: float
    grad_norm: float
    iterations: int
    restart_index: int
    restart_log: list = field(default_factory=list)

    def to_dict(self):
        return {
            "objective": self.final_objective,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "restart_index": self.restart_index,
            "restarts": self.restart_log,
            "estimate": self.estimate.to_dict(),
        }


def _resolve_n(cfg, truth):
    N = cfg.n_fit_experts if cfg.n_fit_experts is not None else truth.n_atoms + 1
    if N < truth.n_atoms or (N == truth.n_atoms and not cfg.allow_exact):
        raise ContractError(
            f"n_fit_experts={N} must exceed the {truth.n_atoms} truth atoms "
            "(set allow_exact for N = N*)"
        )
    return N


def _optimise(G0, data, cfg):
    """One restart: Adam on the mean squared residual, then L-BFGS-B."""
    n = data.n
    bounds = cfg.bounds
    theta = G0.flatten()
    G = G0
    f0, parts = _value_and_grad(G, data)
    if parts is None or not math.isfinite(f0):
        raise FloatingPointError("non-finite objective at initialisation")
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    best = (f0, theta.copy())
    it = 0
    grad = _flatten_grad(parts) / n
    gnorm = float(np.linalg.norm(grad))
    while it < cfg.max_iters and gnorm > cfg.grad_tol:
        it += 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
        mhat = m / (1 - cfg.beta1 ** it)
        vhat = v / (1 - cfg.beta2 ** it)
        theta = bounds.clamp(theta - cfg.step_size * mhat / (np.sqrt(vhat) + cfg.eps))
        G = G.with_flat(theta)
        f, parts = _value_and_grad(G, data)
        if parts is None or not math.isfinite(f):
            raise FloatingPointError(f"non-finite objective at Adam iteration {it}")
        if f < best[0]:
            best = (f, theta.copy())
        grad = _flatten_grad(parts) / n
        gnorm = float(np.linalg.norm(grad))
    theta = best[1]
    if cfg.polish_iters > 0:
        def fun(t):
            val, p = _value_and_grad(G0.with_flat(t), data)
            if p is None or not math.isfinite(val):
                raise FloatingPointError("non-finite objective during polish")
            return val / n, _flatten_grad(p) / n

        box = [(-cfg.box_radius, cfg.box_radius)] * theta.size
        res = minimize(fun, theta, jac=True, method="L-BFGS-B", bounds=box,
                       options={"maxiter": cfg.polish_iters, "gtol": cfg.grad_tol,
                                "ftol": 1e-15, "maxcor": 20})
        if res.fun * n <= best[0]:
            theta = res.x
        it += int(res.nit)
    G = G0.with_flat(theta)
    f, parts = _value_and_grad(G, data)
    pg = _projected_grad(theta, _flatten_grad(parts) / n, cfg.box_radius)
    return G, f0, f, float(np.linalg.norm(pg)), it


def _projected_grad(theta, grad, B):
    pg = grad.copy()
    pg[(theta >= B) & (grad < 0)] = 0.0
    pg[(theta <= -B) & (grad > 0)] = 0.0
    return pg


def fit(data, cfg, truth=None):
    """Least squares fit with restarts; returns the lowest-objective restart.

    ``truth`` defaults to the ground truth recorded in ``data.config``; it is
    only used to warm-start the restarts.
    """
    truth = truth if truth is not None else (data.config.ground_truth if data.config else None)
    if truth is None:
        raise ContractError("fit needs a reference measure to initialise from")
    _check_pair(truth, data)
    N = _resolve_n(cfg, truth)
    gating = GatingKind(cfg.gating) if cfg.gating else truth.gating
    best = None
    restart_log = []
    for r in range(cfg.restarts):
        rng = generator(cfg.seed, "restart", r)
        G0 = init_perturbed(truth, N, cfg.init_perturb_scale, rng, cfg.bounds, gating,
                            cfg.duplicate_atoms)
        try:
            G, f0, f, gnorm, it = _optimise(G0, data, cfg)
        except FloatingPointError as exc:
            log.warning("restart %d aborted: %s", r, exc)
            restart_log.append({"restart": r, "failed": str(exc)})
            continue
        restart_log.append({"restart": r, "initial_objective": f0, "final_objective": f,
                            "grad_norm": gnorm, "iterations": it})
        if best is None or f < best.final_objective:
            best = FitResult(G, f, gnorm, it, r)
    if best is None:
        raise FitError(f"all {cfg.restarts} restarts failed")
    return FitResult(best.estimate, best.final_objective, best.grad_norm, best.iterations,
                     best.restart_index, restart_log)
