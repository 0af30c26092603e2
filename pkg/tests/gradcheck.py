""" Central finite-difference checks for DiffValue graphs. """
from typing import Callable, Dict, Sequence

import numpy as np

from model_access_layer import autodiff as ad
from model_access_layer.autodiff import DiffValue

STEP = 1e-5


def numeric_gradient(loss_fn: Callable[[], DiffValue], param: DiffValue, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        with ad.no_grad():
            flat[i] = original + step
            up = loss_fn().item()
            flat[i] = original - step
            down = loss_fn().item()
        flat[i] = original
        out[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_errors(loss_fn: Callable[[], DiffValue], params: Sequence[DiffValue]) -> Dict[str, float]:
    """Relative error between backward() and central differences, per parameter."""
    for p in params:
        p.zero_grad()
    ad.backward(loss_fn())
    analytic = {id(p): p.grad.copy() for p in params}
    errors = {}
    for k, p in enumerate(params):
        errors[p.name or f"param{k}"] = relative_error(analytic[id(p)], numeric_gradient(loss_fn, p))
        p.zero_grad()
    return errors


def assert_gradients_match(loss_fn: Callable[[], DiffValue], params: Sequence[DiffValue], tol: float = 1e-4) -> None:
    errors = gradient_errors(loss_fn, params)
    bad = {name: err for name, err in errors.items() if not err < tol}
    assert not bad, f"gradient mismatch (relative error >= {tol}): {bad}"
