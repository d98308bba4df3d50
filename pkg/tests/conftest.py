import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stiffode.polynet import DirectModel, MonomialPolynomial, RhsModel
from stiffode.steppers import get_tableau

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def linear_model(lam, dim=1):
    """f(y) = lam * y as a degree-1 direct model."""
    polys = []
    for i in range(dim):
        key = tuple(1 if j == i else 0 for j in range(dim))
        polys.append(MonomialPolynomial(dim, {key: lam}))
    return RhsModel(DirectModel.from_polynomials(polys, degree=1))


def newton_oracle(tab, model, y_n, t_n, h, iters=40):
    """Undamped Newton on the stage equations with numpy's dense solver.

    Independent of the package's damped Newton and LU; used as the root
    finder inside finite-difference checks.
    """
    tab = get_tableau(tab)
    y_n = np.asarray(y_n, dtype=np.float64)
    s, d = tab.s, y_n.size
    ts = t_n + tab.c * h
    stages = np.tile(y_n, (s, 1))
    settled = 0
    for _ in range(iters):
        f = np.stack([model.rhs(ts[i], stages[i]) for i in range(s)])
        g = stages - y_n - h * tab.a @ f
        blocks = [model.jac_state(ts[j], stages[j]) for j in range(s)]
        jac = np.eye(s * d)
        for i in range(s):
            for j in range(s):
                jac[i * d:(i + 1) * d, j * d:(j + 1) * d] -= h * tab.a[i, j] * blocks[j]
        step = np.linalg.solve(jac, g.reshape(-1)).reshape(s, d)
        stages = stages - step
        # stop two sweeps after the update reaches roundoff
        if np.abs(step).max() <= 1e-14 * max(1.0, np.abs(stages).max()):
            settled += 1
            if settled == 2:
                break
    if tab.stiffly_accurate:
        return stages[-1]
    f = np.stack([model.rhs(ts[i], stages[i]) for i in range(s)])
    return y_n + h * tab.b @ f


def fd_params(fun, theta, eps=1e-6):
    """Central differences of a vector function of the parameter vector."""
    theta = np.asarray(theta, dtype=np.float64)
    cols = []
    for k in range(theta.size):
        step = eps * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += step
        tm[k] -= step
        cols.append((fun(tp) - fun(tm)) / (2 * step))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def mp_step(tab, keys, coeffs, y_n, h, start=None, dps=40, iters=6):
    """One implicit step in extended precision for a polynomial field.

    ``keys``/``coeffs`` give f_i(y) = sum_m coeffs[i, m] prod_l y_l**keys[m][l].
    Newton is started from ``start`` (a float64 solution of the stages) when
    given, so a few iterations reach full working precision.
    """
    import mpmath as mp

    tab = get_tableau(tab)
    with mp.workdps(dps):
        d, s = len(y_n), tab.s
        y = [mp.mpf(v) if not isinstance(v, mp.mpf) else v for v in y_n]
        c = [[mp.mpf(v) if not isinstance(v, mp.mpf) else v for v in row] for row in coeffs]
        hh = mp.mpf(h)
        a = [[mp.mpf(v) for v in row] for row in tab.a]

        def f(x):
            out = []
            for i in range(d):
                acc = mp.mpf(0)
                for m, key in enumerate(keys):
                    if c[i][m] != 0:
                        term = c[i][m]
                        for l, e in enumerate(key):
                            if e:
                                term *= x[l] ** e
                        acc += term
                out.append(acc)
            return out

        def jf(x):
            jac = [[mp.mpf(0)] * d for _ in range(d)]
            for i in range(d):
                for m, key in enumerate(keys):
                    if c[i][m] == 0:
                        continue
                    for l in range(d):
                        if key[l] == 0:
                            continue
                        term = c[i][m] * key[l]
                        for q, e in enumerate(key):
                            ee = e - 1 if q == l else e
                            if ee:
                                term *= x[q] ** ee
                        jac[i][l] += term
            return jac

        if start is None:
            z = [list(y) for _ in range(s)]
        else:
            z = [[mp.mpf(float(v)) for v in row] for row in np.asarray(start).reshape(s, d)]
        for _ in range(iters):
            fs = [f(z[j]) for j in range(s)]
            js = [jf(z[j]) for j in range(s)]
            g = mp.matrix(s * d, 1)
            jm = mp.matrix(s * d, s * d)
            for i in range(s):
                for p in range(d):
                    g[i * d + p] = z[i][p] - y[p] - hh * mp.fsum(a[i][j] * fs[j][p] for j in range(s))
                    for j in range(s):
                        for q in range(d):
                            jm[i * d + p, j * d + q] = (1 if (i == j and p == q) else 0) - hh * a[i][j] * js[j][p][q]
            dz = mp.lu_solve(jm, g)
            z = [[z[i][p] - dz[i * d + p] for p in range(d)] for i in range(s)]
        b = [mp.mpf(v) for v in tab.b]
        fs = [f(z[j]) for j in range(s)]
        return [y[p] + hh * mp.fsum(b[j] * fs[j][p] for j in range(s)) for p in range(d)]


def mp_step_refined(tab, keys, coeffs, y_n, h, start, dps=40, iters=3, matrix=None):
    """Like mp_step, but corrections are solved in float64.

    The residual is evaluated in extended precision and the Newton matrix is
    taken once from the float64 ``start``; each sweep then gains about as
    many digits as float64 carries (iterative refinement). Much cheaper than
    an mpmath dense solve for the larger systems.
    """
    import mpmath as mp

    tab = get_tableau(tab)
    start = np.asarray(start, dtype=np.float64)
    s, d = tab.s, len(y_n)
    start = start.reshape(s, d)
    if matrix is None:
        matrix = float_stage_matrix(tab, keys, coeffs, start, h)
    with mp.workdps(dps):
        y = [v if isinstance(v, mp.mpf) else mp.mpf(float(v)) for v in y_n]
        c = [[v if isinstance(v, mp.mpf) else mp.mpf(float(v)) for v in row] for row in coeffs]
        hh = mp.mpf(h)
        a = [[mp.mpf(v) for v in row] for row in tab.a]

        def f(x):
            mono = []
            for key in keys:
                term = mp.mpf(1)
                for l, e in enumerate(key):
                    if e:
                        term *= x[l] ** e
                mono.append(term)
            return [mp.fdot(c[i], mono) for i in range(d)]

        z = [[mp.mpf(float(v)) for v in row] for row in start]
        for _ in range(iters):
            fs = [f(z[j]) for j in range(s)]
            g = np.array([float(z[i][p] - y[p] - hh * mp.fsum(a[i][j] * fs[j][p] for j in range(s)))
                          for i in range(s) for p in range(d)])
            dz = np.linalg.solve(matrix, g)
            z = [[z[i][p] - mp.mpf(dz[i * d + p]) for p in range(d)] for i in range(s)]
        b = [mp.mpf(v) for v in tab.b]
        fs = [f(z[j]) for j in range(s)]
        return [y[p] + hh * mp.fsum(b[j] * fs[j][p] for j in range(s)) for p in range(d)]


def float_stage_matrix(tab, keys, coeffs, stages, h):
    """dG/dY of the stage equations in float64 for a polynomial field."""
    tab = get_tableau(tab)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    s, d = np.asarray(stages).shape
    exps = np.asarray(keys, dtype=np.int64)
    jm = np.eye(s * d)
    for j in range(s):
        x = np.asarray(stages[j], dtype=np.float64)
        jf = np.zeros((d, d))
        for l in range(d):
            e = exps.copy()
            factor = e[:, l].astype(np.float64)
            e[:, l] = np.maximum(e[:, l] - 1, 0)
            jf[:, l] = coeffs @ (factor * np.prod(x[None, :] ** e, axis=1))
        for i in range(s):
            jm[i * d:(i + 1) * d, j * d:(j + 1) * d] -= h * tab.a[i, j] * jf
    return jm


def mp_fd_params(tab, keys, coeffs, y_n, h, start=None, dps=40, rel_step=1e-15, coords=None, refined=False):
    """Central differences of the step solution w.r.t. every coefficient,
    evaluated in extended precision so cancellation does not bite."""
    import mpmath as mp

    coeffs = np.asarray(coeffs, dtype=np.float64)
    d, m = coeffs.shape
    coords = range(d * m) if coords is None else coords
    out = np.zeros((d, len(coords)))
    jm = float_stage_matrix(tab, keys, coeffs, np.asarray(start).reshape(-1, d), h) if refined else None
    with mp.workdps(dps):
        base = [[mp.mpf(float(v)) for v in row] for row in coeffs]
        for col, k in enumerate(coords):
            i, j = divmod(int(k), m)
            step = mp.mpf(rel_step) * max(1, abs(base[i][j]))
            plus = [row[:] for row in base]
            minus = [row[:] for row in base]
            plus[i][j] += step
            minus[i][j] -= step
            if refined:
                yp = mp_step_refined(tab, keys, plus, y_n, h, start, dps, matrix=jm)
                ym = mp_step_refined(tab, keys, minus, y_n, h, start, dps, matrix=jm)
            else:
                yp = mp_step(tab, keys, plus, y_n, h, start, dps)
                ym = mp_step(tab, keys, minus, y_n, h, start, dps)
            for p in range(d):
                out[p, col] = float((yp[p] - ym[p]) / (2 * step))
    return out
