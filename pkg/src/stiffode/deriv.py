"""Exact Jacobians of the right-hand side.

The models implement hand-derived chain rules (see ``polynet``); these
functions are the stable entry points used by the steppers and the
sensitivity code. No finite differences are involved.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class JacobianPair:
    d_state: np.ndarray
    d_params: np.ndarray
    eval_point: np.ndarray


def jacobian_state(model, t, x):
    """df/dy at ``(t, x)``: ``(d, d)`` or ``(N, d, d)`` for a batch."""
    return model.jac_state(t, x)


def jacobian_params(model, t, x):
    """df/dtheta at ``(t, x)`` in the model's flatten order."""
    return model.jac_params(t, x)


def jacobian_pair(model, t, x):
    x = np.asarray(x, dtype=np.float64)
    return JacobianPair(jacobian_state(model, t, x), jacobian_params(model, t, x), x.copy())
