"""Cosine similarity of per-head query gradients as the query penalty grows."""

from headdiv import DiversityKind, SyntheticTaskSpec, TrainConfig, train

base = dict(steps=400, log_interval=400, task=SyntheticTaskSpec(num_train=500))

# %% one run per lambda, same seed
for lam in (0.0, 0.001, 1.0):
    run = train(TrainConfig(diversity_kind="Q", lam=lam, **base))
    print(f"lambda={lam:g}: query grad similarity {run.grad_similarity:.6f}, "
          f"query diversity loss {run.report.total(DiversityKind.QUERY):.4f}")
