"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError


class AdamState:
    """Per-model Adam moments, keyed by parameter name.

    Moments are allocated lazily on first step so the state can be built
    before the parameter set is final.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    params: name -> Tensor, grads: name -> ndarray aligned with params.
    Raises NonFiniteError naming the parameter if its gradient is not finite.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(
                f"non-finite gradient for parameter {name!r}", name=name
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
