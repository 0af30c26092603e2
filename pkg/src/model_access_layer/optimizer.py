""" Adam with bias correction over DiffValue parameters. """
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from model_access_layer.autodiff import DiffValue


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[DiffValue], state: AdamState) -> None:
    """
    One Adam update of every parameter in place, then clear their gradients.

    Moment buffers are keyed by the parameter's tape id, so the same parameter objects
    must be passed on every step.
    """
    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t

    for p in params:
        g = p.grad
        key = p.tape_id
        if key not in state.m:
            state.m[key] = np.zeros_like(p.values)
            state.v[key] = np.zeros_like(p.values)

        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        m_hat = m / bias1
        v_hat = v / bias2
        p.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.zero_grad()
