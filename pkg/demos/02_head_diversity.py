"""Diversity losses on hand-built heads, and a similarity heatmap."""

import numpy as np

from headdiv import HeadParams, LayerParams, SoftmaxFull, layer_diversity, layer_forward
from headdiv.analysis import heatmap_pixels
from headdiv.diversity import DiversityKind, diversity_loss, pairwise_correlation

# %% two single-row representations at an angle: d = 0.6*0.8 + 0.8*0.6
print("d([3,4], [4,3]) =", pairwise_correlation(np.array([[3.0, 4.0]]), np.array([[4.0, 3.0]])))

# %% orthogonal heads cost nothing
reps = [np.tile(np.eye(3)[i], (4, 1)) for i in range(3)]
print("orthogonal loss:", diversity_loss(reps)[0])

# %% three identical heads hit the ceiling 1 - 1/N
r = np.random.default_rng(0)
head = HeadParams(*(r.uniform(-1, 1, (4, 2)) for _ in range(3)))
layer = LayerParams([(head.copy(), SoftmaxFull()) for _ in range(3)], r.uniform(-1, 1, (6, 4)))
_, traces = layer_forward(r.standard_normal((5, 4)), layer)
for kind in DiversityKind:
    loss, _ = layer_diversity(traces, kind)
    print(f"cloned heads, kind {kind.value}: {loss:.6f}")

# %% perturb one head and look at the attention-probability similarity as pixels
layer.heads[2][0].w_query = r.uniform(-1, 1, (4, 2))
_, traces = layer_forward(r.standard_normal((5, 4)), layer)
_, sim = layer_diversity(traces, DiversityKind.ATTENTION)
print("similarity:\n", np.round(sim, 3))
print("pixels (0 = |d| of 1):\n", heatmap_pixels(sim))
