from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from profe.data import gen_blobs
from profe.model import SplitModel, mlp_split_model
from profe.tensor import Tensor, no_grad

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def central_differences(f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Numerical gradient of the scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            up = f()
            arr[i] = orig - h
            down = f()
            arr[i] = orig
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_model_gradients(model: SplitModel, loss_fn: Callable[[SplitModel], Tensor], h: float = 1e-3) -> float:
    """Worst per-tensor relative error between backward() and finite differences.

    The analytic side runs in the model's own dtype; the oracle evaluates the
    same loss on a float64 copy.
    """
    loss_fn(model).backward()
    # parameters the loss never reaches keep grad None; the oracle must then see 0
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in model.parameters()]
    model.zero_grad()
    ref = model.astype(np.float64)

    def f():
        with no_grad():
            return loss_fn(ref).item()

    numeric = central_differences(f, [p.data for p in ref.parameters()], h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def check_input_gradients(loss_fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Same as :func:`check_model_gradients` but w.r.t. free input tensors."""
    ts = [Tensor(x, requires_grad=True) for x in inputs]
    loss_fn(*ts).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in ts]
    ref = [np.array(x, dtype=np.float64) for x in inputs]

    def f():
        with no_grad():
            return loss_fn(*[Tensor(r, dtype=np.float64) for r in ref]).item()

    numeric = central_differences(f, ref, h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def toy_model() -> SplitModel:
    return mlp_split_model(5, [6], 4, 3, seed=0, activation="tanh")


@pytest.fixture(scope="session")
def blobs():
    return gen_blobs(n_classes=4, per_class=60, dim=12, spread=0.08, seed=3)
