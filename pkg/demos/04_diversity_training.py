"""Train with and without an attention-probability penalty, then compare."""

from headdiv import TrainConfig, train
from headdiv.training import with_overrides
from headdiv.analysis import compare_runs

# default size; the two runs take about a minute together
base = TrainConfig(log_interval=1000)

# %% baseline: every diversity kind is still measured at each log step
plain = train(base)
for row in plain.metrics:
    print(row.step, f"loss {row.task_loss:.4f}", {k.value: round(v, 4) for k, v in row.diversity.items()})

# %% same seed, with the penalty on attention probabilities
penalized = train(with_overrides(base, diversity_kind="A", lam=1.0))
print(compare_runs(penalized, plain).to_text())
