"""Numerical identifiability probes for F(x; A, b, c, eta) = sigmoid(s(x)) E(x, eta).

A family of derivative functions of F is sampled at m input points and the
smallest singular value of the column-normalised m x K matrix decides
between linear independence and degeneracy.

Conventions:

* A enters the score only through its symmetric part, so the gating
  coordinates are the monomials x_u x_v for u <= v (the d(d+1)/2 distinct
  directions), then x_u for b, then 1 for c.
* Derivatives of the expert that vanish identically (e.g. every second
  derivative of a linear expert) carry no term and are left out of the
  family.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .model import Atom, ContractError, ExpertSpec, ScoreKind

DEFAULT_THRESHOLD = 1e-6
FD_STEP = 1e-4
KINK_MARGIN = 1e-3


class ProbeMode(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"
    PARTIAL_STRONG = "partial-strong"
    PARTIAL_WEAK = "partial-weak"

    @property
    def score(self):
        return ScoreKind.PARTIAL if self.value.startswith("partial") else ScoreKind.FULL

    @property
    def second_order(self):
        return self.value.endswith("strong")


class Verdict(str, enum.Enum):
    INDEPENDENT = "Independent"
    DEGENERATE = "Degenerate"


@dataclass(frozen=True, eq=False)
class DerivativeFamilySpec:
    mode: ProbeMode
    expert: ExpertSpec
    params: tuple  # distinct Atom instances
    sample_points: np.ndarray  # (m, d)
    fd_step: float = FD_STEP

    def __post_init__(self):
        object.__setattr__(self, "mode", ProbeMode(self.mode))
        object.__setattr__(self, "params", tuple(self.params))
        pts = np.array(self.sample_points, dtype=float, ndmin=2)
        if pts.shape[1] != self.expert.d or not np.all(np.isfinite(pts)):
            raise ContractError("sample points must be finite d-vectors")
        object.__setattr__(self, "sample_points", pts)

    @property
    def score(self):
        return self.mode.score


@dataclass(frozen=True)
class ProbeReport:
    mode: str
    expert: str
    score: str
    family_size: int
    min_singular_value: float
    verdict: Verdict
    threshold: float
    families: dict = field(default_factory=dict)  # name -> {"size", "min_singular_value"}

    def to_dict(self):
        return {"mode": self.mode, "expert": self.expert, "score": self.score,
                "family_size": self.family_size, "min_singular_value": self.min_singular_value,
                "verdict": self.verdict.value, "threshold": self.threshold,
                "families": self.families}


# ---------------------------------------------------------------------------
# pieces of F

def gating_monomials(X, score):
    """(m, p) columns d s / d(gating coordinate): x_u x_v (u<=v), x_u, 1."""
    d = X.shape[1]
    iu, iv = np.triu_indices(d)
    cols = [X[:, iu] * X[:, iv]]
    if ScoreKind(score) is ScoreKind.FULL:
        cols.append(X)
    cols.append(np.ones((len(X), 1)))
    return np.concatenate(cols, axis=1)


def _scores(X, atom, score):
    s = np.einsum("nu,uv,nv->n", X, atom.A, X) + atom.c
    if ScoreKind(score) is ScoreKind.FULL:
        s = s + X @ atom.b
    return s


def expert_jacobian(X, eta, spec):
    """dE/deta at each row of X, shape (m, q)."""
    E, dz, dlam = spec.evaluate_with_grad(X, eta[None, :])
    cols = [dz * X, dz]
    if dlam is not None:
        cols.append(dlam)
    return np.concatenate(cols, axis=1)


def _second_nonzero(spec):
    """Mask of expert second derivatives that do not vanish identically."""
    q, d = spec.q, spec.d
    mask = np.zeros((q, q), dtype=bool)
    if spec.family == "polynomial" and spec.degree >= 2:
        mask[: d + 1, : d + 1] = True
    elif spec.family == "activation" and spec.activation == "gelu":
        mask[: d + 1, : d + 1] = True
    elif spec.family == "two_layer":
        if spec.activation == "gelu":
            mask[: d + 1, : d + 1] = True
        mask[: d + 1, d + 1] = mask[d + 1, : d + 1] = True
    return mask


def expert_hessian(X, eta, spec, step=FD_STEP):
    """d2E/deta2 at each row of X, shape (m, q, q).

    Closed form for linear/polynomial experts, central differences of the
    analytic gradient otherwise.
    """
    m, d, q = len(X), spec.d, spec.q
    if spec.is_polynomial:
        p = spec.degree if spec.family == "polynomial" else 1
        z = X @ eta[:d] + eta[d]
        xe = np.concatenate([X, np.ones((m, 1))], axis=1)
        coef = p * (p - 1) * z ** (p - 2) if p >= 2 else np.zeros(m)
        return coef[:, None, None] * xe[:, :, None] * xe[:, None, :]
    H = np.empty((m, q, q))
    for k in range(q):
        e = np.zeros(q)
        e[k] = step
        H[:, :, k] = (expert_jacobian(X, eta + e, spec) - expert_jacobian(X, eta - e, spec)) / (2 * step)
    return 0.5 * (H + np.swapaxes(H, 1, 2))


# ---------------------------------------------------------------------------
# derivative families

def _order1_columns(X, atom, spec, score):
    """First derivatives of F w.r.t. (A_sym, b, c, eta) at a general atom."""
    s = _scores(X, atom, score)
    sig = expit(s)
    dsig = sig * (1 - sig)
    E = spec.evaluate(X, atom.eta[None, :])[:, 0]
    M = gating_monomials(X, score)
    J = expert_jacobian(X, atom.eta, spec)
    return np.concatenate([dsig[:, None] * M * E[:, None], sig[:, None] * J], axis=1)


def _order12_columns_at_zero(X, atom, spec, score):
    """Derivatives of orders 1 and 2 w.r.t. (A_sym, b, eta) at A = 0, b = 0."""
    sig = expit(atom.c)
    dsig = sig * (1 - sig)
    d2sig = dsig * (1 - 2 * sig)
    E = spec.evaluate(X, atom.eta[None, :])[:, 0]
    M = gating_monomials(X, score)[:, :-1]  # no c derivative in this family
    J = expert_jacobian(X, atom.eta, spec)
    p, q = M.shape[1], J.shape[1]
    cols = [dsig * M * E[:, None], sig * J]
    for k, l in itertools.combinations_with_replacement(range(p), 2):
        cols.append((d2sig * M[:, k] * M[:, l] * E)[:, None])
    cols.append(dsig * (M[:, :, None] * J[:, None, :]).reshape(len(X), p * q))
    mask = _second_nonzero(spec)
    if mask.any():
        H = expert_hessian(X, atom.eta, spec)
        for k, l in itertools.combinations_with_replacement(range(q), 2):
            if mask[k, l]:
                cols.append(sig * H[:, k, l][:, None])
    return np.concatenate(cols, axis=1)


def family_sizes(mode, spec, n_atoms):
    """Column counts per family for ``n_atoms`` atoms."""
    mode = ProbeMode(mode)
    d, q = spec.d, spec.q
    nA = d * (d + 1) // 2
    nb = d if mode.score is ScoreKind.FULL else 0
    sizes = {"order1": n_atoms * (nA + nb + 1 + q)}
    if mode.second_order:
        p = nA + nb
        n_eta2 = int(np.triu(_second_nonzero(spec)).sum())
        sizes["order2_at_zero"] = n_atoms * (p + q + p * (p + 1) // 2 + p * q + n_eta2)
    return sizes


def family_blocks(spec):
    """Derivative family matrices keyed by family name."""
    params = spec.params
    for a, b in itertools.combinations(range(len(params)), 2):
        pa, pb = params[a], params[b]
        if (np.array_equal(pa.A, pb.A) and np.array_equal(pa.b, pb.b) and pa.c == pb.c
                and np.array_equal(pa.eta, pb.eta)):
            raise ContractError(f"atoms {a} and {b} coincide; the family needs distinct parameters")
    X = spec.sample_points
    blocks = {}
    if spec.mode.second_order:
        blocks["order2_at_zero"] = np.concatenate(
            [_order12_columns_at_zero(X, atom, spec.expert, spec.score) for atom in params], axis=1)
    blocks["order1"] = np.concatenate(
        [_order1_columns(X, atom, spec.expert, spec.score) for atom in params], axis=1)
    return blocks


def eval_F_derivatives(spec):
    """m x K matrix of all family columns (second-order family first, if any)."""
    return np.concatenate(list(family_blocks(spec).values()), axis=1)


def min_singular(matrix):
    """Smallest singular value after scaling every column to unit norm."""
    M = np.asarray(matrix, dtype=float)
    m, K = M.shape
    if m < K:
        raise ContractError(f"need at least as many rows as columns, got {m} x {K}")
    norms = np.linalg.norm(M, axis=0)
    if np.any(norms == 0):
        return 0.0
    return float(np.linalg.svd(M / norms, compute_uv=False)[-1])


# ---------------------------------------------------------------------------
# PDE identities for linear experts

def F_hessian(x, atom, spec, score=ScoreKind.FULL):
    """Hessian of F at a single x over (vec A, b, c, eta), A entries treated as free."""
    x = np.asarray(x, dtype=float)
    X = x[None, :]
    d, q = spec.d, spec.q
    s = _scores(X, atom, score)[0]
    sig = expit(s)
    d1 = sig * (1 - sig)
    d2 = d1 * (1 - 2 * sig)
    parts = [np.outer(x, x).ravel()]
    if ScoreKind(score) is ScoreKind.FULL:
        parts.append(x)
    parts.append(np.ones(1))
    ds = np.concatenate(parts)
    E = spec.evaluate(X, atom.eta[None, :])[0, 0]
    J = expert_jacobian(X, atom.eta, spec)[0]
    He = expert_hessian(X, atom.eta, spec)[0]
    g = ds.size
    H = np.empty((g + q, g + q))
    H[:g, :g] = d2 * E * np.outer(ds, ds)
    H[:g, g:] = d1 * np.outer(ds, J)
    H[g:, :g] = H[:g, g:].T
    H[g:, g:] = sig * He
    return H


def _pde_residuals(H, d):
    iA = lambda u, v: u * d + v  # noqa: E731
    ib = lambda u: d * d + u  # noqa: E731
    ic = d * d + d
    ialpha = lambda u: d * d + d + 1 + u  # noqa: E731
    ibeta = d * d + 2 * d + 1
    r1 = r2 = r3 = 0.0
    for u in range(d):
        for v in range(d):
            r1 = max(r1, abs(H[iA(u, v), ic] - H[ib(u), ib(v)]))
            r2 = max(r2, abs(H[iA(u, v), ibeta] - H[ib(u), ialpha(v)]))
        r3 = max(r3, abs(H[ib(u), ibeta] - H[ic, ialpha(u)]))
    return r1, r2, r3


def check_pde_identities(x, atom, spec):
    """Max residuals of the three second-order identities linking A, b, c and (alpha, beta).

    d2F/dA_uv dc = d2F/db_u db_v,  d2F/dA_uv dbeta = d2F/db_u dalpha_v,
    d2F/db_u dbeta = d2F/dc dalpha_u.
    """
    if not (spec.family == "linear" or (spec.family == "polynomial" and spec.degree == 1)):
        raise ContractError("the identities are checked for linear experts only")
    if atom.b.size != spec.d:
        raise ContractError("the identities need the fully quadratic score")
    return _pde_residuals(F_hessian(x, atom, spec, ScoreKind.FULL), spec.d)


def pde_residuals_any(x, atom, spec):
    """Same residuals for any ridge-type expert (no family restriction)."""
    return _pde_residuals(F_hessian(x, atom, spec, ScoreKind.FULL), spec.d)


# ---------------------------------------------------------------------------
# random probes

def random_atom(rng, spec, score, scale=1.0):
    d, q = spec.d, spec.q
    A = rng.normal(0, scale, (d, d))
    A = 0.5 * (A + A.T)
    b = rng.normal(0, scale, d) if ScoreKind(score) is ScoreKind.FULL else np.zeros(0)
    eta = rng.normal(0, scale, q)
    if spec.family in ("activation", "two_layer"):
        # alpha != 0 and lambda != 0, kept away from zero
        eta[:d] += np.sign(eta[:d]) * 0.1
        if spec.family == "two_layer":
            eta[d + 1] = np.sign(eta[d + 1]) * (0.5 + abs(eta[d + 1]))
        # the kink hyperplane must cut the cube, otherwise the unit is affine
        # (or identically zero) on the whole input domain
        reach = np.abs(eta[:d]).sum()
        if abs(eta[d]) >= 0.5 * reach:
            eta[d] = rng.uniform(-0.5, 0.5) * reach
    if spec.is_polynomial:
        eta[d] = np.sign(eta[d]) * (0.25 + abs(eta[d]))  # beta != 0
    return Atom(A, b, rng.normal(0, scale), eta)


def sample_points(rng, m, atoms, spec):
    """m points from Uniform([-1,1]^d), resampling near ReLU kinks."""
    d = spec.d
    out = np.empty((0, d))
    kinky = spec.family in ("activation", "two_layer") and spec.activation == "relu"
    while len(out) < m:
        X = rng.uniform(-1, 1, size=(2 * m, d))
        if kinky:
            ok = np.ones(len(X), dtype=bool)
            for atom in atoms:
                ok &= np.abs(X @ atom.eta[:d] + atom.eta[d]) > KINK_MARGIN
            X = X[ok]
        out = np.concatenate([out, X])
    return out[:m]


def probe(mode, expert, n_atoms, rng, threshold=DEFAULT_THRESHOLD, oversample=8):
    """Draw distinct random atoms and test each derivative family for independence."""
    mode = ProbeMode(mode)
    if n_atoms < 1:
        raise ContractError("need at least one atom")
    atoms = tuple(random_atom(rng, expert, mode.score) for _ in range(n_atoms))
    sizes = family_sizes(mode, expert, n_atoms)
    m = oversample * max(sizes.values())
    pts = sample_points(rng, m, atoms, expert)
    spec = DerivativeFamilySpec(mode, expert, atoms, pts)
    families = {}
    for name, block in family_blocks(spec).items():
        families[name] = {"size": block.shape[1], "min_singular_value": min_singular(block)}
    smin = min(f["min_singular_value"] for f in families.values())
    verdict = Verdict.INDEPENDENT if smin > threshold else Verdict.DEGENERATE
    return ProbeReport(mode.value, expert.name, mode.score.value, sum(sizes.values()), smin,
                       verdict, threshold, families)
