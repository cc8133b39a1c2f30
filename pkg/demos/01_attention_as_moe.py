"""A row of sigmoid self-attention is a sigmoid-gated mixture of linear experts.

We build a random token sequence, compute attention row i directly, and compare
it with the MoE evaluation whose atoms are read off the attention weights.
"""
import numpy as np

from sigmoe.attention import AttentionWeights, attn_row_as_moe, sigmoid_attn, softmax_attn
from sigmoe.model import GatingKind
from sigmoe.streams import generator

rng = generator(0, "misc")
N, d, d_k, d_v = 4, 3, 2, 3
X = rng.normal(size=(N, d))
w = AttentionWeights(rng.normal(size=(d, d_k)), rng.normal(size=(d, d_k)), rng.normal(size=(d, d_v)))

for gating, attn in ((GatingKind.SIGMOID, sigmoid_attn), (GatingKind.SOFTMAX, softmax_attn)):
    direct = attn(X, w)
    print(f"{gating.value} attention")
    for i in range(N):
        moe = attn_row_as_moe(X, w, i, gating)
        print(f"  row {i}: |direct - MoE| = {np.max(np.abs(direct[i] - moe)):.1e}")
