import numpy as np
import pytest

from headdiv.numkernel import fd_gradient, rel_error
from headdiv.training import SyntheticTaskSpec, TrainConfig, generate_task, init_model, loss_and_grads

FD_STEP = 1e-6
FD_RTOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> TrainConfig:
    """T=6, D=8, H=4, N=2, P=2 model used for gradient checks."""
    kw = dict(layers=2, heads=2, model_dim=8, head_dim=4,
              task=SyntheticTaskSpec(seq_len=6, vocab=5, offsets=(-1, 2), num_train=8, num_eval=4))
    kw.update(overrides)
    return TrainConfig(**kw)


def model_grad_errors(params, tokens, labels, kind=None, lam=0.0, scale_mode="paper"):
    """Relative error of every trainable array's analytic gradient vs central differences."""
    _, grads = loss_and_grads(params, tokens, labels, kind, lam, scale_mode)
    errors = []
    for p, g in zip(params.trainable(), grads.arrays()):
        original = p.copy()

        def f(x, p=p):
            p[...] = x
            return loss_and_grads(params, tokens, labels, kind, lam, scale_mode)[0]

        fd = fd_gradient(f, original, FD_STEP)
        p[...] = original
        errors.append(rel_error(g, fd))
    return errors


@pytest.fixture
def tiny_model():
    cfg = tiny_config()
    params = init_model(cfg, 7)
    tokens, labels = generate_task(cfg.task, 3, 3)
    return cfg, params, tokens, labels


# Acceptance verdicts, printed once at the end of the session.
ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
