"""One-step integrators.

Backward Euler, the trapezoid rule and the Radau IIA methods are all
written as implicit Runge-Kutta tableaus, so a single stage-residual /
Newton / sensitivity path serves every implicit scheme. Forward Euler and
classical RK4 are explicit tableaus with a direct evaluation path.

Functions take one state ``(d,)`` or a batch ``(N, d)``; in batch mode
``h`` and ``t_n`` may be per-sample arrays.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, NewtonDiverged, NonFiniteEvaluation, SingularMatrix
from .linalg import DEFAULT_SINGULAR_TOL, LuFactors, lu_factor_batch, lu_solve

IMPLICIT_SCHEMES = ("backward_euler", "trapezoid", "radau3", "radau5")
EXPLICIT_SCHEMES = ("forward_euler", "rk4")
SCHEMES = IMPLICIT_SCHEMES + EXPLICIT_SCHEMES


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int

    def __post_init__(self):
        for arr in (self.a, self.b, self.c):
            arr.setflags(write=False)

    @property
    def s(self):
        return len(self.b)

    @property
    def is_implicit(self):
        return bool(np.any(np.triu(self.a) != 0.0))

    @property
    def stiffly_accurate(self):
        return bool(np.array_equal(self.a[-1], self.b))


def _tableau(name, a, b, c, order):
    return ButcherTableau(name, np.array(a, dtype=np.float64), np.array(b, dtype=np.float64),
                          np.array(c, dtype=np.float64), order)


def _radau5():
    r6 = np.sqrt(6.0)
    a = [
        [(88 - 7 * r6) / 360, (296 - 169 * r6) / 1800, (-2 + 3 * r6) / 225],
        [(296 + 169 * r6) / 1800, (88 + 7 * r6) / 360, (-2 - 3 * r6) / 225],
        [(16 - r6) / 36, (16 + r6) / 36, 1 / 9],
    ]
    c = [(4 - r6) / 10, (4 + r6) / 10, 1.0]
    return _tableau("radau5", a, a[2], c, 5)


TABLEAUS = {
    "backward_euler": _tableau("backward_euler", [[1.0]], [1.0], [1.0], 1),
    "trapezoid": _tableau("trapezoid", [[0.0, 0.0], [0.5, 0.5]], [0.5, 0.5], [0.0, 1.0], 2),
    "radau3": _tableau("radau3", [[5 / 12, -1 / 12], [3 / 4, 1 / 4]], [3 / 4, 1 / 4], [1 / 3, 1.0], 3),
    "radau5": _radau5(),
    "forward_euler": _tableau("forward_euler", [[0.0]], [1.0], [0.0], 1),
    "rk4": _tableau("rk4", [[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1, 0]],
                    [1 / 6, 1 / 3, 1 / 3, 1 / 6], [0, 0.5, 0.5, 1.0], 4),
}


def get_tableau(name):
    if isinstance(name, ButcherTableau):
        return name
    try:
        return TABLEAUS[name]
    except KeyError:
        raise InvalidConfig(f"unknown scheme {name!r}; expected one of {', '.join(SCHEMES)}") from None


@dataclass(frozen=True)
class NewtonOptions:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_iter: int = 25
    min_damping: float = 1.0 / 64
    predictor: str = "previous_state"
    simplified: bool = False
    singular_tol: float = DEFAULT_SINGULAR_TOL

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol >= 0 and self.max_iter >= 1):
            raise InvalidConfig("Newton tolerances must be positive and max_iter >= 1")
        if self.predictor not in ("previous_state", "explicit_euler"):
            raise InvalidConfig(f"unknown predictor {self.predictor!r}")


@dataclass
class StepResult:
    """Outcome of an implicit step (single or batched).

    ``stage_jacobian_lu`` factors dG/dY at the converged stages; the
    sensitivity solve reuses it. For samples that failed it holds the last
    Newton matrix.
    """

    y_next: np.ndarray
    stages: np.ndarray
    t_next: np.ndarray
    h: np.ndarray
    iterations: np.ndarray
    residual_norm: np.ndarray
    converged: np.ndarray
    stage_jacobian_lu: LuFactors
    y_n: np.ndarray
    t_n: np.ndarray
    scheme: str
    batched: bool

    def sample(self, i):
        """Slice one sample out of a batched result."""
        if not self.batched:
            return self
        return StepResult(self.y_next[i], self.stages[i], self.t_next[i], self.h[i], self.iterations[i],
                          self.residual_norm[i], self.converged[i],
                          LuFactors(self.stage_jacobian_lu.lu[i], self.stage_jacobian_lu.pivots[i],
                                    self.stage_jacobian_lu.info[i]),
                          self.y_n[i], self.t_n[i], self.scheme, False)


# ---------------------------------------------------------------------------
# helpers


def _batch_inputs(model, y_n, t_n, h):
    y = np.asarray(y_n, dtype=np.float64)
    single = y.ndim == 1
    yb = np.atleast_2d(y)
    if yb.ndim != 2 or yb.shape[1] != model.state_dim:
        raise DimensionMismatch(f"state shape {y.shape} does not match model dimension {model.state_dim}")
    n = yb.shape[0]
    hb = np.broadcast_to(np.asarray(h, dtype=np.float64), (n,)).copy()
    tb = np.broadcast_to(np.asarray(t_n, dtype=np.float64), (n,)).copy()
    if np.any(~(hb > 0)):
        raise InvalidConfig("step size must be positive")
    return yb, tb, hb, single


def _stage_rhs(tab, model, t, h, stages):
    """f at every stage: ``(N, s, d)``."""
    n, s, d = stages.shape
    times = (t[:, None] + tab.c[None, :] * h[:, None]).reshape(-1)
    f = model.rhs(times, stages.reshape(n * s, d)).reshape(n, s, d)
    return f


def _stage_jac(tab, model, t, h, stages):
    n, s, d = stages.shape
    times = (t[:, None] + tab.c[None, :] * h[:, None]).reshape(-1)
    return model.jac_state(times, stages.reshape(n * s, d)).reshape(n, s, d, d)


def _residual_batch(tab, model, y, t, h, stages):
    f = _stage_rhs(tab, model, t, h, stages)
    return stages - y[:, None, :] - h[:, None, None] * np.einsum("ij,njd->nid", tab.a, f)


def _jacobian_batch(tab, model, t, h, stages):
    n, s, d = stages.shape
    jf = _stage_jac(tab, model, t, h, stages)
    # block (i, j) = delta_ij I - h a_ij J_f(Y_j), laid out as (n, i, p, j, q)
    blocks = -h[:, None, None, None, None] * tab.a[None, :, None, :, None] * jf.transpose(0, 2, 1, 3)[:, None]
    blocks = blocks + np.eye(s)[None, :, None, :, None] * np.eye(d)[None, None, :, None, :]
    return blocks.reshape(n, s * d, s * d)


def _norm(g):
    return np.abs(g).reshape(g.shape[0], -1).max(axis=1)


# ---------------------------------------------------------------------------
# public stage-equation API


def residual(tab, model, y_n, t_n, h, stages):
    """Stacked stage residual ``G_i = Y_i - y_n - h sum_j a_ij f(t_n + c_j h, Y_j)``."""
    tab = get_tableau(tab)
    yb, tb, hb, single = _batch_inputs(model, y_n, t_n, h)
    st = np.asarray(stages, dtype=np.float64).reshape(yb.shape[0], tab.s, model.state_dim)
    g = _residual_batch(tab, model, yb, tb, hb, st)
    if not np.all(np.isfinite(g)):
        raise NonFiniteEvaluation("right-hand side produced non-finite values")
    g = g.reshape(yb.shape[0], -1)
    return g[0] if single else g


def residual_jacobian(tab, model, y_n, t_n, h, stages):
    """dG/dY as an ``(s d, s d)`` matrix (or a stack of them)."""
    tab = get_tableau(tab)
    yb, tb, hb, single = _batch_inputs(model, y_n, t_n, h)
    st = np.asarray(stages, dtype=np.float64).reshape(yb.shape[0], tab.s, model.state_dim)
    jm = _jacobian_batch(tab, model, tb, hb, st)
    if not np.all(np.isfinite(jm)):
        raise NonFiniteEvaluation("Jacobian has non-finite entries")
    return jm[0] if single else jm


def _predict(tab, model, y, t, h, opts):
    stages = np.repeat(y[:, None, :], tab.s, axis=1)
    if opts.predictor == "explicit_euler":
        f0 = model.rhs(t, y)
        stages = stages + (tab.c[None, :, None] * h[:, None, None]) * f0[:, None, :]
    return stages


def implicit_step(tab, model, y_n, t_n, h, opts=None, raise_on_failure=True):
    """Advance one step with an implicit tableau using damped Newton.

    Each Newton update solves ``(dG/dY) dY = -G`` with an LU factorization.
    Convergence: ``max|G| <= abs_tol + rel_tol * max|Y|``. A trial update is
    halved while the residual grows, down to ``min_damping``.

    In batch mode samples iterate independently; with
    ``raise_on_failure=False`` failures are reported in ``converged``
    instead of raising NewtonDiverged.
    """
    tab = get_tableau(tab)
    if not tab.is_implicit:
        raise InvalidConfig(f"{tab.name} is explicit; use explicit_step")
    opts = opts or NewtonOptions()
    yb, tb, hb, single = _batch_inputs(model, y_n, t_n, h)
    n, s, d = yb.shape[0], tab.s, model.state_dim
    m = s * d

    stages = _predict(tab, model, yb, tb, hb, opts)
    with np.errstate(all="ignore"):
        g = _residual_batch(tab, model, yb, tb, hb, stages)
    norm = _norm(g)
    norm[~np.isfinite(norm)] = np.inf
    iters = np.zeros(n, dtype=np.int64)
    failed = ~np.isfinite(norm)

    lu = np.zeros((n, m, m))
    piv = np.tile(np.arange(m), (n, 1))
    info = np.zeros(n, dtype=np.int64)

    def tolerance(idx):
        # scaled by the step solution (the last stage for every stiffly accurate tableau)
        return opts.abs_tol + opts.rel_tol * np.abs(stages[idx, -1]).max(axis=1)

    frozen = None
    for _ in range(opts.max_iter):
        active = np.flatnonzero(~failed & (norm > tolerance(np.arange(n))))
        if active.size == 0:
            break
        ya, ta, ha, sa = yb[active], tb[active], hb[active], stages[active]
        if opts.simplified and frozen is not None:
            fa = frozen.take(np.searchsorted(frozen_idx, active))
        else:
            with np.errstate(all="ignore"):
                jm = _jacobian_batch(tab, model, ta, ha, sa)
            finite = np.all(np.isfinite(jm.reshape(len(active), -1)), axis=1)
            jm[~finite] = np.eye(m)
            fa = lu_factor_batch(jm, opts.singular_tol)
            fa = LuFactors(fa.lu, fa.pivots, np.where(finite, fa.info, -1))
            lu[active], piv[active], info[active] = fa.lu, fa.pivots, fa.info
            if opts.simplified:
                frozen, frozen_idx = fa, active
        bad = ~fa.ok
        if bad.any():
            failed[active[bad]] = True
        with np.errstate(all="ignore"):
            delta = lu_solve(fa, -g[active].reshape(len(active), m)).reshape(len(active), s, d)

        lam = np.ones(len(active))
        pending = ~bad
        new_stages = sa.copy()
        new_g = g[active].copy()
        new_norm = norm[active].copy()
        while pending.any():
            p = np.flatnonzero(pending)
            trial = sa[p] + lam[p, None, None] * delta[p]
            with np.errstate(all="ignore"):
                gt = _residual_batch(tab, model, ya[p], ta[p], ha[p], trial)
            nt = _norm(gt)
            ok = np.isfinite(nt) & (nt <= norm[active[p]])
            acc = p[ok]
            new_stages[acc], new_g[acc], new_norm[acc] = trial[ok], gt[ok], nt[ok]
            pending[acc] = False
            rej = p[~ok]
            lam[rej] *= 0.5
            floor = rej[lam[rej] < opts.min_damping]
            if floor.size:
                failed[active[floor]] = True
                pending[floor] = False
        stages[active], g[active], norm[active] = new_stages, new_g, new_norm
        iters[active[~bad]] += 1

    tol = tolerance(np.arange(n))
    converged = ~failed & (norm <= tol)

    # The sensitivity solve needs dG/dY at the root itself. The last Newton
    # matrix was taken one iterate earlier, which costs up to ~1e-2 relative
    # gradient error on nonlinear fields, so converged samples are refactored.
    refresh = converged
    if refresh.any():
        r = np.flatnonzero(refresh)
        jm = _jacobian_batch(tab, model, tb[r], hb[r], stages[r])
        fr = lu_factor_batch(jm, opts.singular_tol)
        lu[r], piv[r], info[r] = fr.lu, fr.pivots, fr.info
        # One more Newton update with the fresh factors. The residual test
        # alone accepts the predictor when |h f| < abs_tol, and accepts
        # iterates with relative error ~eps*|1 - h*lambda| for small states.
        ok = fr.ok
        if ok.any():
            r, fr = r[ok], LuFactors(fr.lu[ok], fr.pivots[ok], fr.info[ok])
            with np.errstate(all="ignore"):
                delta = lu_solve(fr, -g[r].reshape(len(r), m)).reshape(len(r), s, d)
                trial = stages[r] + delta
                gt = _residual_batch(tab, model, yb[r], tb[r], hb[r], trial)
            nt = _norm(gt)
            keep = np.isfinite(nt) & np.all(np.isfinite(trial.reshape(len(r), -1)), axis=1)
            keep &= nt <= opts.abs_tol + opts.rel_tol * np.abs(trial[:, -1]).max(axis=1)
            k = r[keep]
            stages[k], norm[k] = trial[keep], nt[keep]
            iters[k] += 1
    factors = LuFactors(lu, piv, info)

    if tab.stiffly_accurate:
        y_next = stages[:, -1, :].copy()
    else:
        f = _stage_rhs(tab, model, tb, hb, stages)
        y_next = yb + hb[:, None] * np.einsum("j,njd->nd", tab.b, f)

    if raise_on_failure and not converged.all():
        bad = np.flatnonzero(~converged)
        singular = bad[info[bad] > 0]
        if singular.size and singular.size == bad.size:
            raise SingularMatrix(f"stage Jacobian singular for samples {singular.tolist()}", indices=singular)
        worst = float(np.max(norm[bad]))
        raise NewtonDiverged(f"Newton failed for {bad.size} sample(s); worst residual {worst:.3e}",
                             residual_norm=worst, indices=bad)

    result = StepResult(y_next, stages, tb + hb, hb, iters, norm, converged, factors, yb, tb, tab.name, True)
    return result.sample(0) if single else result


def explicit_step(scheme, model, y_n, t_n, h):
    """Forward Euler or classical RK4."""
    tab = get_tableau(scheme)
    if tab.is_implicit:
        raise InvalidConfig(f"{tab.name} is implicit; use implicit_step")
    yb, tb, hb, single = _batch_inputs(model, y_n, t_n, h)
    k = _explicit_stages(tab, model, yb, tb, hb)[1]
    y = yb + hb[:, None] * np.einsum("j,njd->nd", tab.b, k)
    if not np.all(np.isfinite(y)):
        raise NonFiniteEvaluation("explicit step produced non-finite values")
    return y[0] if single else y


def _explicit_stages(tab, model, y, t, h):
    n, d = y.shape
    stage_states = np.zeros((n, tab.s, d))
    k = np.zeros((n, tab.s, d))
    for i in range(tab.s):
        stage_states[:, i] = y + h[:, None] * np.einsum("j,njd->nd", tab.a[i, :i], k[:, :i])
        k[:, i] = model.rhs(t + tab.c[i] * h, stage_states[:, i])
    return stage_states, k


def step(scheme, model, y_n, t_n, h, opts=None):
    """Dispatch on scheme name; returns the next state only."""
    tab = get_tableau(scheme)
    if tab.is_implicit:
        return implicit_step(tab, model, y_n, t_n, h, opts).y_next
    return explicit_step(tab, model, y_n, t_n, h)


def integrate(scheme, model, y0, t_grid, substeps=1, opts=None):
    """Fixed-step integration over ``t_grid`` with ``substeps`` per interval."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    y = np.asarray(y0, dtype=np.float64)
    out = np.zeros((len(t_grid),) + y.shape)
    out[0] = y
    for k in range(len(t_grid) - 1):
        h = (t_grid[k + 1] - t_grid[k]) / substeps
        t = t_grid[k]
        for _ in range(substeps):
            y = step(scheme, model, y, t, h, opts)
            t = t + h
        out[k + 1] = y
    return out
