"""Softmax/sigmoid self-attention and their row-wise mixture-of-experts form.

Row i of either attention matrix is an MoE over the N tokens: expert j
outputs x_j W_V and is gated by the quadratic score x_i B x_j' with
B = W_Q W_K' / sqrt(d_k).  With X the concatenation [x_1, ..., x_N] and the
block selectors E_i (X E_i = x_i) the score is X M_ij X' for
M_ij = E_i B E_j' and the expert is X P_j for P_j = E_j W_V.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .model import ContractError, GatingKind

EXP_CLAMP = 500.0


@dataclass(frozen=True)
class AttentionWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def __post_init__(self):
        W_Q, W_K, W_V = (np.array(w, dtype=float, ndmin=2) for w in (self.W_Q, self.W_K, self.W_V))
        if W_Q.shape != W_K.shape:
            raise ContractError(f"W_Q {W_Q.shape} and W_K {W_K.shape} must share shape (d, d_k)")
        if W_V.shape[0] != W_Q.shape[0]:
            raise ContractError("W_V must have d rows")
        if W_Q.shape[1] == 0:
            raise ContractError("d_k must be positive")
        if W_V.shape[1] == 0:
            raise ContractError("d_v must be positive")
        for w in (W_Q, W_K, W_V):
            if not np.all(np.isfinite(w)):
                raise ContractError("attention weights must be finite")
            w.flags.writeable = False
        object.__setattr__(self, "W_Q", W_Q)
        object.__setattr__(self, "W_K", W_K)
        object.__setattr__(self, "W_V", W_V)

    @property
    def d(self):
        return self.W_Q.shape[0]

    @property
    def d_k(self):
        return self.W_Q.shape[1]

    @property
    def d_v(self):
        return self.W_V.shape[1]

    @property
    def B(self):
        """Bilinear score matrix W_Q W_K' / sqrt(d_k), shape (d, d)."""
        return self.W_Q @ self.W_K.T / np.sqrt(self.d_k)


@dataclass(frozen=True)
class MoeDecomposition:
    selectors: list  # E_i, each (N d, d)
    score_matrices: list  # M_ij, N x N nested list of (N d, N d)
    value_maps: list  # P_j, each (N d, d_v)


def _check(X, w):
    X = np.array(X, dtype=float, ndmin=2)
    if X.shape[0] < 1:
        raise ContractError("token sequence must contain at least one token")
    if X.shape[1] != w.d:
        raise ContractError(f"tokens have dimension {X.shape[1]}, weights expect {w.d}")
    if not np.all(np.isfinite(X)):
        raise ContractError("token sequence must be finite")
    return X


def attention_scores(X, w):
    X = _check(X, w)
    return (X @ w.W_Q) @ (X @ w.W_K).T / np.sqrt(w.d_k)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -EXP_CLAMP, EXP_CLAMP)))


def softmax_attn(X, w):
    """softmax(Q K' / sqrt(d_k)) V with the softmax taken row-wise."""
    X = _check(X, w)
    return softmax(attention_scores(X, w), axis=1) @ (X @ w.W_V)


def sigmoid_attn(X, w):
    """sigmoid(Q K' / sqrt(d_k)) V with the sigmoid taken element-wise."""
    X = _check(X, w)
    return _sigmoid(attention_scores(X, w)) @ (X @ w.W_V)


def selector(N, d, i):
    """E_i: the (N d, d) block matrix with an identity at block i."""
    E = np.zeros((N * d, d))
    E[i * d:(i + 1) * d] = np.eye(d)
    return E


def build_decomposition(X, w):
    X = _check(X, w)
    N, d = X.shape
    B = w.B
    E = [selector(N, d, i) for i in range(N)]
    M = [[E[i] @ B @ E[j].T for j in range(N)] for i in range(N)]
    P = [E[j] @ w.W_V for j in range(N)]
    flat = X.reshape(-1)
    for i in range(N):
        if not np.array_equal(flat @ E[i], X[i]):
            raise AssertionError(f"selector {i} does not reproduce token {i}")
    return MoeDecomposition(E, M, P)


def attn_row_as_moe(X, w, i, gating=GatingKind.SIGMOID):
    """Row i of the attention matrix evaluated as an MoE over tokens.

    Uses index arithmetic: X M_ij X' reduces to x_i B x_j' and X P_j to
    x_j W_V, so no N d x N d matrix is formed.
    """
    X = _check(X, w)
    N = X.shape[0]
    if not 0 <= i < N:
        raise ContractError(f"row index {i} out of range for {N} tokens")
    flat = X.reshape(-1)
    d = w.d
    B = w.B
    x_i = flat[i * d:(i + 1) * d]
    scores = np.array([x_i @ B @ flat[j * d:(j + 1) * d] for j in range(N)])
    experts = np.stack([flat[j * d:(j + 1) * d] @ w.W_V for j in range(N)])
    if GatingKind(gating) is GatingKind.SIGMOID:
        g = _sigmoid(scores)
    else:
        g = softmax(scores)
    return g @ experts


def random_instance(rng, max_n=5, max_d=4):
    """Random (X, weights) with N <= max_n and d, d_k, d_v <= max_d."""
    N = int(rng.integers(1, max_n + 1))
    d, d_k, d_v = (int(v) for v in rng.integers(1, max_d + 1, size=3))
    X = rng.normal(size=(N, d))
    w = AttentionWeights(rng.normal(size=(d, d_k)), rng.normal(size=(d, d_k)), rng.normal(size=(d, d_v)))
    return X, w


def equivalence_residual(trials, rng, max_n=5, max_d=4):
    """Max |MoE row - attention row| over random instances and both gatings."""
    worst = 0.0
    for _ in range(trials):
        X, w = random_instance(rng, max_n, max_d)
        direct = {GatingKind.SIGMOID: sigmoid_attn(X, w), GatingKind.SOFTMAX: softmax_attn(X, w)}
        for gating, out in direct.items():
            for i in range(X.shape[0]):
                diff = np.max(np.abs(attn_row_as_moe(X, w, i, gating) - out[i]))
                worst = max(worst, float(diff))
    return worst
