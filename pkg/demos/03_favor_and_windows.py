"""FAVOR approximation quality and windowed attention patterns."""

import numpy as np

from headdiv.attention import (
    Favor, HeadParams, SoftmaxWindow, head_forward, head_forward_favor, head_forward_softmax,
)

r = np.random.default_rng(5)
x = np.eye(3)  # Q, K and V are the weight matrices themselves
p = HeadParams(*(r.uniform(-1, 1, (3, 2)) for _ in range(3)))
exact = head_forward_softmax(x, p, None, 0.5).y

# %% error shrinks as the random feature count grows
for feats in (16, 64, 256, 1024, 4096):
    errs = [np.mean((head_forward_favor(x, p, Favor(feats, s), scale=0.5).y - exact) ** 2) for s in range(20)]
    print(f"r={feats:5d}: median MSE {np.median(errs):.2e}")

# %% the implicit attention matrix is row-stochastic when materialized
tr = head_forward_favor(x, p, Favor(64, 0), materialize_a=True, scale=0.5)
print("FAVOR row sums:", tr.a.sum(axis=-1))

# %% a window of one step left and none right
x = r.standard_normal((6, 3))
print(np.round(head_forward(x, p, SoftmaxWindow(1, 0), 0.5).a, 3))
