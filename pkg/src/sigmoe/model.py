"""Gating functions, quadratic affinity scores, expert families and MoE regression.

A mixing measure is stored as stacked parameter arrays so that evaluation over
a batch of inputs is a handful of matrix products:

    A   : (k, d, d)  gating quadratic term
    b   : (k, d)     gating linear term, (k, 0) for the partially quadratic score
    c   : (k,)       gating bias
    eta : (k, q)     expert parameters

Single-point helpers (``affinity_score``, ``gate_weights``, ``expert_eval``,
``regression_eval``) accept a d-vector; the ``*_batch`` variants take an
(n, d) matrix.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, erf, softmax

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ContractError(ValueError):
    """Raised when inputs violate a dimension or domain contract."""


class ScoreKind(str, enum.Enum):
    FULL = "full"  # x'Ax + b'x + c
    PARTIAL = "partial"  # x'Ax + c


class GatingKind(str, enum.Enum):
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


# ---------------------------------------------------------------------------
# activations

def relu(z):
    return np.maximum(z, 0.0)


def relu_prime(z):
    # subgradient 0 at the kink
    return (z > 0).astype(float)


def gelu(z):
    """Exact GELU, z * Phi(z)."""
    return 0.5 * z * (1.0 + erf(z / SQRT2))


def gelu_prime(z):
    return 0.5 * (1.0 + erf(z / SQRT2)) + z * INV_SQRT_2PI * np.exp(-0.5 * z * z)


def gelu_second(z):
    return INV_SQRT_2PI * np.exp(-0.5 * z * z) * (2.0 - z * z)


_ACTIVATIONS = {
    "relu": (relu, relu_prime, lambda z: np.zeros_like(z)),
    "gelu": (gelu, gelu_prime, gelu_second),
    "identity": (lambda z: z, np.ones_like, np.zeros_like),
}


# ---------------------------------------------------------------------------
# experts

@dataclass(frozen=True)
class ExpertSpec:
    """Expert family descriptor.

    Families:

    * ``linear``      E = a'x + b,                 eta = (a, b),       q = d + 1
    * ``polynomial``  E = (a'x + b)^p,             eta = (a, b),       q = d + 1
    * ``activation``  E = phi(a'x + b),            eta = (a, b),       q = d + 1
    * ``two_layer``   E = lam * phi(a'x + b),      eta = (a, b, lam),  q = d + 2

    ``activation`` is the single-neuron expert without output scale used for
    the ReLU/linear simulation scenarios.
    """

    family: str
    d: int
    degree: int = 1
    activation: str = "identity"

    def __post_init__(self):
        if self.family not in ("linear", "polynomial", "activation", "two_layer"):
            raise ContractError(f"unknown expert family {self.family!r}")
        if self.d < 1:
            raise ContractError("input dimension must be positive")
        if self.family == "polynomial" and self.degree < 1:
            raise ContractError("polynomial degree must be a positive integer")
        if self.family in ("activation", "two_layer") and self.activation not in ("relu", "gelu"):
            raise ContractError(f"unsupported activation {self.activation!r}")

    @classmethod
    def linear(cls, d):
        return cls("linear", d)

    @classmethod
    def polynomial(cls, d, p):
        return cls("polynomial", d, degree=p)

    @classmethod
    def ridge(cls, d, activation="relu"):
        return cls("activation", d, activation=activation)

    @classmethod
    def two_layer(cls, d, activation="relu"):
        return cls("two_layer", d, activation=activation)

    @property
    def q(self):
        return self.d + 2 if self.family == "two_layer" else self.d + 1

    @property
    def is_polynomial(self):
        """True for experts of the form (a'x + b)^p, including linear."""
        return self.family in ("linear", "polynomial")

    @property
    def name(self):
        if self.family == "polynomial":
            return f"poly{self.degree}"
        if self.family in ("activation", "two_layer"):
            return self.activation if self.family == "activation" else f"two_layer_{self.activation}"
        return self.family

    def to_dict(self):
        return {"family": self.family, "d": self.d, "degree": self.degree,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, data):
        return cls(data["family"], int(data["d"]), int(data.get("degree", 1)),
                   data.get("activation", "identity"))

    # -- evaluation over batches --------------------------------------------

    def _phi(self):
        if self.family == "linear":
            return _ACTIVATIONS["identity"]
        if self.family == "polynomial":
            p = self.degree
            return (lambda z: z ** p,
                    lambda z: p * z ** (p - 1),
                    lambda z: p * (p - 1) * z ** (p - 2) if p >= 2 else np.zeros_like(z))
        return _ACTIVATIONS[self.activation]

    def pre_activation(self, X, eta):
        """(n, d) inputs, (k, q) params -> (n, k) values of a'x + b."""
        return X @ eta[:, : self.d].T + eta[:, self.d]

    def evaluate(self, X, eta):
        """Expert outputs, shape (n, k)."""
        phi = self._phi()[0]
        out = phi(self.pre_activation(X, eta))
        if self.family == "two_layer":
            out = out * eta[:, self.d + 1]
        return out

    def evaluate_with_grad(self, X, eta):
        """Expert outputs (n, k) plus the pieces of dE/deta.

        Returns ``(E, dz, dlam)`` where dE/da = dz * x, dE/db = dz and, for
        two-layer experts, dE/dlam = dlam (otherwise ``dlam`` is None).
        """
        phi, dphi, _ = self._phi()
        z = self.pre_activation(X, eta)
        h = phi(z)
        dz = dphi(z)
        if self.family == "two_layer":
            lam = eta[:, self.d + 1]
            return h * lam, dz * lam, h
        return h, dz, None


def expert_eval(x, eta, spec):
    x, eta = _check_expert_args(x, eta, spec)
    return float(spec.evaluate(x[None, :], eta[None, :])[0, 0])


def expert_grad(x, eta, spec):
    """Analytic dE/deta at a single input, ordered as eta."""
    x, eta = _check_expert_args(x, eta, spec)
    _, dz, dlam = spec.evaluate_with_grad(x[None, :], eta[None, :])
    g = np.empty(spec.q)
    g[: spec.d] = dz[0, 0] * x
    g[spec.d] = dz[0, 0]
    if dlam is not None:
        g[spec.d + 1] = dlam[0, 0]
    return g


def _check_expert_args(x, eta, spec):
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if x.shape != (spec.d,):
        raise ContractError(f"x has shape {x.shape}, expected ({spec.d},)")
    if eta.shape != (spec.q,):
        raise ContractError(f"eta has shape {eta.shape}, expected ({spec.q},)")
    return x, eta


# ---------------------------------------------------------------------------
# atoms and mixing measures

@dataclass(frozen=True)
class Atom:
    A: np.ndarray
    b: np.ndarray
    c: float
    eta: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        eta = np.array(self.eta, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ContractError(f"A must be square, got shape {A.shape}")
        if b.size not in (0, A.shape[0]):
            raise ContractError(f"b has length {b.size}, expected 0 or {A.shape[0]}")
        for name, arr in (("A", A), ("b", b), ("eta", eta)):
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"non-finite entries in {name}")
            arr.flags.writeable = False
        if not np.isfinite(self.c):
            raise ContractError("non-finite c")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "eta", eta)

    @property
    def d(self):
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class MixingMeasure:
    """Finite set of atoms (A, b, c, eta) with shared expert/score/gating kinds."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    eta: np.ndarray
    expert: ExpertSpec
    score: ScoreKind = ScoreKind.FULL
    gating: GatingKind = GatingKind.SIGMOID
    _flat_sizes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        score = ScoreKind(self.score)
        gating = GatingKind(self.gating)
        d, q = self.expert.d, self.expert.q
        A = np.array(self.A, dtype=float)
        c = np.array(self.c, dtype=float).reshape(-1)
        k = c.size
        if k < 1:
            raise ContractError("a mixing measure needs at least one atom")
        A = A.reshape(k, d, d)
        db = d if score is ScoreKind.FULL else 0
        b = np.array(self.b, dtype=float)
        if b.size == 0:
            b = np.zeros((k, 0))
        if score is ScoreKind.PARTIAL and b.size:
            raise ContractError("partially quadratic atoms carry no b term")
        b = b.reshape(k, db)
        eta = np.array(self.eta, dtype=float).reshape(k, q)
        for name, arr in (("A", A), ("b", b), ("c", c), ("eta", eta)):
            if not np.all(np.isfinite(arr)):
                bad = int(np.argwhere(~np.isfinite(arr.reshape(k, -1)))[0, 0])
                raise ContractError(f"non-finite {name} in atom {bad}")
            arr.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "gating", gating)
        object.__setattr__(self, "_flat_sizes", (d * d, db, 1, q))

    # -- construction -------------------------------------------------------

    @classmethod
    def from_atoms(cls, atoms, expert, score=ScoreKind.FULL, gating=GatingKind.SIGMOID):
        atoms = list(atoms)
        if not atoms:
            raise ContractError("a mixing measure needs at least one atom")
        score = ScoreKind(score)
        for i, atom in enumerate(atoms):
            if atom.d != expert.d or atom.eta.size != expert.q:
                raise ContractError(f"atom {i} dimensions do not match the expert spec")
            if (atom.b.size == 0) != (score is ScoreKind.PARTIAL):
                raise ContractError(f"atom {i} b term inconsistent with score kind {score.value}")
        return cls(
            A=np.stack([a.A for a in atoms]),
            b=np.stack([a.b for a in atoms]),
            c=np.array([a.c for a in atoms]),
            eta=np.stack([a.eta for a in atoms]),
            expert=expert, score=score, gating=gating,
        )

    def replace(self, **changes):
        kw = dict(A=self.A, b=self.b, c=self.c, eta=self.eta, expert=self.expert,
                  score=self.score, gating=self.gating)
        kw.update(changes)
        return MixingMeasure(**kw)

    # -- views ----------------------------------------------------------------

    @property
    def n_atoms(self):
        return self.c.size

    def __len__(self):
        return self.n_atoms

    @property
    def d(self):
        return self.expert.d

    @property
    def atoms(self):
        return [Atom(self.A[i], self.b[i], self.c[i], self.eta[i]) for i in range(self.n_atoms)]

    def atom(self, i):
        return Atom(self.A[i], self.b[i], self.c[i], self.eta[i])

    @property
    def atom_size(self):
        return sum(self._flat_sizes)

    def flatten(self):
        """Parameters ordered atom by atom as (vec(A), b, c, eta)."""
        k = self.n_atoms
        return np.concatenate(
            [self.A.reshape(k, -1), self.b, self.c[:, None], self.eta], axis=1
        ).ravel()

    def with_flat(self, theta):
        k = self.n_atoms
        rows = np.asarray(theta, dtype=float).reshape(k, self.atom_size)
        sa, sb, _, _ = self._flat_sizes
        d = self.d
        return self.replace(
            A=rows[:, :sa].reshape(k, d, d),
            b=rows[:, sa:sa + sb],
            c=rows[:, sa + sb],
            eta=rows[:, sa + sb + 1:],
        )

    def to_dict(self):
        out = {
            "expert": self.expert.to_dict(),
            "score": self.score.value,
            "gating": self.gating.value,
            "atoms": [
                {"A": self.A[i].tolist(), "b": self.b[i].tolist(),
                 "c": float(self.c[i]), "eta": self.eta[i].tolist()}
                for i in range(self.n_atoms)
            ],
        }
        return out

    @classmethod
    def from_dict(cls, data):
        expert = ExpertSpec.from_dict(data["expert"])
        atoms = [Atom(a["A"], a["b"], a["c"], a["eta"]) for a in data["atoms"]]
        return cls.from_atoms(atoms, expert, data.get("score", "full"), data.get("gating", "sigmoid"))

    def equals(self, other, atol=0.0):
        if (self.expert, self.score, self.gating, self.n_atoms) != (
            other.expert, other.score, other.gating, other.n_atoms
        ):
            return False
        return np.allclose(self.flatten(), other.flatten(), rtol=0.0, atol=atol)

    # -- batched evaluation ---------------------------------------------------

    def scores(self, X):
        """Affinity scores, shape (n, k)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ContractError(f"inputs have dimension {X.shape[1]}, expected {self.d}")
        k, d = self.n_atoms, self.d
        quad = np.einsum("nu,nv->nuv", X, X).reshape(len(X), d * d)
        # overflow surfaces as a non-finite score, which the gates report per atom
        with np.errstate(over="ignore", invalid="ignore"):
            s = quad @ self.A.reshape(k, d * d).T + self.c
            if self.score is ScoreKind.FULL:
                s = s + X @ self.b.T
        return s

    def gates(self, X):
        return _gates_from_scores(self.scores(X), self.gating)

    def experts(self, X):
        return self.expert.evaluate(np.atleast_2d(X), self.eta)

    def __call__(self, X):
        """Regression function f_G over the rows of X, shape (n,)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.sum(self.gates(X) * self.experts(X), axis=1)


def _gates_from_scores(s, gating):
    if not np.all(np.isfinite(s)):
        bad = np.argwhere(~np.isfinite(s))[0]
        raise ContractError(f"non-finite affinity score for atom {int(bad[-1])}")
    if GatingKind(gating) is GatingKind.SIGMOID:
        return expit(s)
    return softmax(s, axis=-1)


# ---------------------------------------------------------------------------
# single-point API

def affinity_score(x, atom, score=ScoreKind.FULL):
    x = np.asarray(x, dtype=float)
    if x.shape != (atom.d,):
        raise ContractError(f"x has shape {x.shape}, expected ({atom.d},)")
    s = x @ atom.A @ x + atom.c
    if ScoreKind(score) is ScoreKind.FULL:
        if atom.b.size != atom.d:
            raise ContractError("fully quadratic score needs a b term of length d")
        s += atom.b @ x
    return float(s)


def gate_weights(x, G):
    x = np.asarray(x, dtype=float)
    if x.shape != (G.d,):
        raise ContractError(f"x has shape {x.shape}, expected ({G.d},)")
    return G.gates(x[None, :])[0]


def regression_eval(G, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (G.d,):
        raise ContractError(f"x has shape {x.shape}, expected ({G.d},)")
    return float(G(x[None, :])[0])
