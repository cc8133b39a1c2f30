"""Independent reference implementations used by the test-suite.

Everything here is written with plain loops straight from the definitions,
so it shares no code path with the vectorised library.
"""
import itertools
import math

import numpy as np

from sigmoe.estimation import Dataset, lse_objective
from sigmoe.model import ExpertSpec, MixingMeasure

EXPERT_MATRIX = {
    "linear": lambda d: ExpertSpec.linear(d),
    "poly2": lambda d: ExpertSpec.polynomial(d, 2),
    "relu": lambda d: ExpertSpec.two_layer(d, "relu"),
    "gelu": lambda d: ExpertSpec.two_layer(d, "gelu"),
    "relu-ridge": lambda d: ExpertSpec.ridge(d, "relu"),
    "gelu-ridge": lambda d: ExpertSpec.ridge(d, "gelu"),
}


def random_measure(rng, k, d, expert, gating="sigmoid", score="full", scale=1.0):
    A = rng.normal(0, scale, size=(k, d, d))
    b = rng.normal(0, scale, size=(k, d)) if score == "full" else np.zeros((k, 0))
    return MixingMeasure(A, b, rng.normal(0, scale, size=k), rng.normal(0, scale, size=(k, expert.q)),
                         expert, score, gating)


def kink_free_points(rng, G, n, margin=1e-3):
    """Uniform points kept away from every atom's ReLU kink."""
    d = G.d
    pts = []
    while len(pts) < n:
        x = rng.uniform(-1, 1, size=d)
        if G.expert.activation == "relu":
            z = G.eta[:, :d] @ x + G.eta[:, d]
            if np.min(np.abs(z)) <= margin:
                continue
        pts.append(x)
    return np.array(pts)


def random_gradcheck_instance(rng, expert_name, gating, score):
    d = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    n = int(rng.integers(5, 51))
    G = random_measure(rng, k, d, EXPERT_MATRIX[expert_name](d), gating, score, scale=0.7)
    X = kink_free_points(rng, G, n)
    Y = rng.normal(size=n)
    return G, Dataset(X, Y)


def fd_gradient(G, data, h=1e-5):
    theta = G.flatten()
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (lse_objective(G.with_flat(theta + e), data) - lse_objective(G.with_flat(theta - e), data)) / (2 * h)
    return g


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# -- Voronoi ---------------------------------------------------------------------

def _norm(v):
    return math.sqrt(sum(float(t) ** 2 for t in np.ravel(v)))


def theta_of(G, i):
    return list(np.ravel(G.A[i])) + list(G.b[i]) + list(G.eta[i])


def exhaustive_cells(fitted, reference):
    """Nearest reference atom by brute force; strict '<' keeps the lowest index on ties."""
    cell_of = []
    for i in range(fitted.n_atoms):
        best, best_j = math.inf, None
        ti = theta_of(fitted, i)
        for j in range(reference.n_atoms):
            tj = theta_of(reference, j)
            dist = math.sqrt(sum((u - v) ** 2 for u, v in zip(ti, tj)))
            if dist < best:
                best, best_j = dist, j
        cell_of.append(best_j)
    return cell_of


def _sig(t):
    return 1.0 / (1.0 + math.exp(-t))


def oracle_loss(kind, fitted, reference, r=1.0):
    cell_of = exhaustive_cells(fitted, reference)
    d = reference.d
    total = 0.0
    for j in range(reference.n_atoms):
        members = [i for i, c in enumerate(cell_of) if c == j]
        if not members:
            continue
        over = len(members) >= 2
        for i in members:
            dA = _norm(fitted.A[i] - reference.A[j])
            db = _norm(fitted.b[i] - reference.b[j]) if fitted.b.size else 0.0
            dc = abs(fitted.c[i] - reference.c[j])
            de = _norm(fitted.eta[i] - reference.eta[j])
            if kind in ("l3", "l5"):
                total += dA + db + dc + de
            elif kind in ("l1", "l4"):
                total += dA ** 2 + db ** 2 + de ** 2 if over else dA + db + dc + de
            elif kind == "l2r":
                dal = _norm(fitted.eta[i][:d] - reference.eta[j][:d])
                dbe = abs(fitted.eta[i][d] - reference.eta[j][d])
                total += dA ** r + db ** r + dal ** r + dbe ** r + (0.0 if over else dc ** r)
        if over and kind in ("l1", "l4", "l2r"):
            total += abs(sum(_sig(fitted.c[i]) for i in members) - _sig(reference.c[j]))
    return total


# -- identifiability -----------------------------------------------------------------

def gram_min_singular(M):
    """Smallest singular value of the column-normalised matrix via the Gram eigenvalues."""
    Mn = M / np.linalg.norm(M, axis=0)
    lam = np.linalg.eigvalsh(Mn.T @ Mn)
    return math.sqrt(max(lam[0], 0.0))


def multi_indices(n_vars, max_order):
    """Count of multi-indices gamma over n_vars variables with 1 <= |gamma| <= max_order."""
    return sum(1 for g in itertools.product(range(max_order + 1), repeat=n_vars) if 1 <= sum(g) <= max_order)
