"""Sensitivities of one step with respect to parameters and input state.

For an implicit step the stage system ``G(Y; y_n, theta) = 0`` holds at the
converged stages, so

    dY/dtheta = -(dG/dY)^-1 dG/dtheta,      dY/dy_n = -(dG/dY)^-1 dG/dy_n

with ``dG/dtheta`` block i ``= -h sum_j a_ij df/dtheta(Y_j)`` and
``dG/dy_n`` block i ``= -I``. Both right-hand sides go through one
multi-column solve against the LU factors Newton already produced.
Nothing is unrolled through the Newton iterations.
"""
from dataclasses import dataclass

import numpy as np

from .errors import EmptyChain, NotConverged, SingularMatrix
from .linalg import LuFactors, lu_solve
from .steppers import _batch_inputs, _explicit_stages, get_tableau


@dataclass(frozen=True)
class StepGradients:
    d_params: np.ndarray     # dy_next/dtheta, (d, P) or (N, d, P)
    d_state_in: np.ndarray   # dy_next/dy_n,   (d, d) or (N, d, d)


def step_gradients(step, tab, model, y_n=None, t_n=None):
    tab = get_tableau(tab)
    if not np.all(step.converged):
        raise NotConverged("step gradients need a converged implicit step")
    single = not step.batched
    y_n = step.y_n if y_n is None else y_n
    t_n = step.t_n if t_n is None else t_n
    yb, tb, hb, _ = _batch_inputs(model, y_n, t_n, step.h)
    n, s, d = yb.shape[0], tab.s, model.state_dim
    p = model.n_params
    stages = np.asarray(step.stages).reshape(n, s, d)
    f_lu = step.stage_jacobian_lu
    if single:
        f_lu = LuFactors(f_lu.lu[None], f_lu.pivots[None], np.atleast_1d(f_lu.info))
    if not np.all(f_lu.ok):
        raise SingularMatrix("stage Jacobian factors are singular", indices=np.flatnonzero(~f_lu.ok))

    times = (tb[:, None] + tab.c[None, :] * hb[:, None]).reshape(-1)
    f_theta = model.jac_params(times, stages.reshape(n * s, d)).reshape(n, s, d, p)
    rhs = np.empty((n, s, d, p + d))
    # -dG/dtheta
    rhs[..., :p] = hb[:, None, None, None] * np.einsum("ij,njdp->nidp", tab.a, f_theta)
    # -dG/dy_n
    rhs[..., p:] = np.eye(d)[None, None]
    sol = lu_solve(f_lu, rhs.reshape(n, s * d, p + d)).reshape(n, s, d, p + d)

    if tab.stiffly_accurate:
        dy = sol[:, -1]
    else:
        jf = model.jac_state(times, stages.reshape(n * s, d)).reshape(n, s, d, d)
        direct = np.concatenate([f_theta, np.zeros((n, s, d, d))], axis=3)
        dk = direct + np.einsum("nsij,nsjq->nsiq", jf, sol)
        dy = hb[:, None, None] * np.einsum("s,nsiq->niq", tab.b, dk)
        dy[..., p:] += np.eye(d)[None]
    d_params, d_state = dy[..., :p], dy[..., p:]
    if single:
        return StepGradients(d_params[0], d_state[0])
    return StepGradients(d_params, d_state)


def explicit_step_with_gradients(tab, model, y_n, t_n, h):
    """Explicit step plus forward sensitivities through the stages."""
    tab = get_tableau(tab)
    yb, tb, hb, single = _batch_inputs(model, y_n, t_n, h)
    n, d, p = yb.shape[0], model.state_dim, model.n_params
    stage_states, k = _explicit_stages(tab, model, yb, tb, hb)
    dk = np.zeros((tab.s, n, d, p + d))
    for i in range(tab.s):
        dy_stage = np.zeros((n, d, p + d))
        dy_stage[..., p:] = np.eye(d)
        for j in range(i):
            if tab.a[i, j] != 0.0:
                dy_stage += (hb * tab.a[i, j])[:, None, None] * dk[j]
        t_i = tb + tab.c[i] * hb
        jf = model.jac_state(t_i, stage_states[:, i])
        dk[i] = np.einsum("nij,njq->niq", jf, dy_stage)
        dk[i][..., :p] += model.jac_params(t_i, stage_states[:, i])
    y = yb + hb[:, None] * np.einsum("j,njd->nd", tab.b, k)
    dy = np.zeros((n, d, p + d))
    dy[..., p:] = np.eye(d)
    for j in range(tab.s):
        dy += (hb * tab.b[j])[:, None, None] * dk[j]
    grads = StepGradients(dy[..., :p], dy[..., p:])
    if single:
        return y[0], StepGradients(grads.d_params[0], grads.d_state_in[0])
    return y, grads


def chain_interval(steps):
    """Compose consecutive substep sensitivities.

    ``steps`` holds StepGradients or ``(StepResult, StepGradients)`` pairs in
    time order. Returns d y_end / d theta and d y_end / d y_start.
    """
    grads = [s[1] if isinstance(s, tuple) else s for s in steps]
    if not grads:
        raise EmptyChain("chain_interval needs at least one step")
    total_p = grads[0].d_params
    total_s = grads[0].d_state_in
    for g in grads[1:]:
        total_p = g.d_state_in @ total_p + g.d_params
        total_s = g.d_state_in @ total_s
    return StepGradients(total_p, total_s)
