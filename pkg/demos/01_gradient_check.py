"""Analytic gradients of the full model against central finite differences."""

from headdiv.training import SyntheticTaskSpec, TrainConfig, generate_task, init_model, loss_and_grads
from headdiv.numkernel import fd_gradient, rel_error

# %% a model small enough to difference every parameter
cfg = TrainConfig(layers=2, heads=2, model_dim=8, head_dim=4,
                  task=SyntheticTaskSpec(seq_len=6, vocab=5, offsets=(-1, 2), num_train=8, num_eval=4))
params = init_model(cfg, 7)
tokens, labels = generate_task(cfg.task, 3, 3)

# %% one check per diversity kind, with the penalty switched on
for kind in ("A", "Q", "K", "V", "Y"):
    _, grads = loss_and_grads(params, tokens, labels, kind, 0.5)
    worst = 0.0
    for p, g in zip(params.trainable(), grads.arrays()):
        original = p.copy()

        def f(x, p=p):
            p[...] = x
            return loss_and_grads(params, tokens, labels, kind, 0.5)[0]

        fd = fd_gradient(f, original)
        p[...] = original
        worst = max(worst, rel_error(g, fd))
    print(f"kind {kind}: worst relative error {worst:.2e}")
