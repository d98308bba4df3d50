import numpy as np
import pytest

from conftest import fd_params, linear_model, mp_fd_params, mp_step, newton_oracle
from stiffode.errors import EmptyChain, NewtonDiverged, NotConverged
from stiffode.ift_grad import StepGradients, chain_interval, explicit_step_with_gradients, step_gradients
from stiffode.polynet import DirectModel, PiNetModel, RhsModel
from stiffode.problems import make_problem
from stiffode.steppers import IMPLICIT_SCHEMES, NewtonOptions, explicit_step, get_tableau, implicit_step

# relative error of each entry, with a floor so exact zeros in the
# finite-difference Jacobian do not divide by zero
FLOOR = 1e-8
SCHEME_SEEDS = {name: 1000 + i for i, name in enumerate(IMPLICIT_SCHEMES)}


def rel_err(got, ref):
    scale = np.maximum(np.abs(ref), FLOOR * np.max(np.abs(ref)))
    return float(np.max(np.abs(got - ref) / scale))


def fd_step_params(name, model, y, t, h, eps=1e-6):
    return fd_params(lambda th: newton_oracle(name, model.with_params(th), y, t, h), model.params, eps)


def mp_fd(name, model, y, h, step):
    """Extended-precision central differences for a direct-model field."""
    return mp_fd_params(name, model.net.basis.keys, model.net.coeffs, y, h, start=step.stages)


def example2_direct():
    prob = make_problem("example2")
    return RhsModel(DirectModel.from_polynomials(prob.true_coeffs, degree=2))


def test_backward_euler_scalar_value():
    m = linear_model(-1.0)
    r = implicit_step("backward_euler", m, np.array([2.0]), 0.0, 1.0)
    g = step_gradients(r, "backward_euler", m)
    # parameters: [constant, linear]; d y1/d theta_lin = h y1 / (1 - h theta)
    assert g.d_params[0, 1] == pytest.approx(0.5, rel=1e-14)
    assert g.d_params[0, 0] == pytest.approx(0.5, rel=1e-14)
    fd = fd_step_params("backward_euler", m, np.array([2.0]), 0.0, 1.0, eps=1e-7)
    assert rel_err(g.d_params, fd) < 1e-7


def test_small_step_limit():
    m = example2_direct()
    r = implicit_step("radau5", m, np.array([20.0, 20.0]), 0.0, 1e-14)
    g = step_gradients(r, "radau5", m)
    np.testing.assert_allclose(g.d_state_in, np.eye(2), atol=1e-9)
    assert np.max(np.abs(g.d_params)) < 1e-10


@pytest.mark.parametrize("name", IMPLICIT_SCHEMES)
def test_example2_matches_finite_differences(name):
    m = example2_direct()
    y0 = np.array([20.0, 20.0])
    r = implicit_step(name, m, y0, 0.0, 1e-5)
    g = step_gradients(r, name, m)
    fd = mp_fd(name, m, y0, 1e-5, r)
    assert rel_err(g.d_params, fd) < 1e-5


@pytest.mark.parametrize("name", IMPLICIT_SCHEMES)
def test_randomized_cases(name):
    rng = np.random.default_rng(SCHEME_SEEDS[name])
    worst, checked, drawn = 0.0, 0, 0
    while checked < 50:
        drawn += 1
        assert drawn <= 100, "too many draws without a stage solution"
        d = int(rng.integers(1, 4))
        coeffs = rng.normal(size=(d, len(DirectModel(d, 2).basis)))
        m = RhsModel(DirectModel(d, 2, coeffs))
        y = rng.uniform(-1, 1, size=d)
        jnorm = np.linalg.norm(m.jac_state(0.0, y), 2)
        h = float(rng.uniform(0.05, 2.0)) / max(jnorm, 1e-3)
        h = min(h, 0.5)
        try:
            r = implicit_step(name, m, y, 0.0, h)
        except NewtonDiverged:
            continue  # random quadratic fields often have no real stage solution
        g = step_gradients(r, name, m)
        fd = mp_fd(name, m, y, h, r)
        worst = max(worst, rel_err(g.d_params, fd))
        checked += 1
    assert worst <= 1e-5


def test_state_sensitivity_linear_consistency(rng):
    a = rng.normal(size=(3, 3)) - 3 * np.eye(3)
    coeffs = np.zeros((3, 4))
    coeffs[:, 1:] = a
    m = RhsModel(DirectModel(3, 1, coeffs))
    h = 0.2
    r = implicit_step("backward_euler", m, rng.normal(size=3), 0.0, h)
    g = step_gradients(r, "backward_euler", m)
    np.testing.assert_allclose(g.d_state_in, np.linalg.inv(np.eye(3) - h * a), atol=1e-10)


def test_state_sensitivity_matches_fd(rng):
    m = example2_direct()
    y0 = np.array([1.5, 0.7])
    for name in IMPLICIT_SCHEMES:
        r = implicit_step(name, m, y0, 0.0, 1e-3)
        g = step_gradients(r, name, m)
        fd = np.stack([(newton_oracle(name, m, y0 + e, 0.0, 1e-3) - newton_oracle(name, m, y0 - e, 0.0, 1e-3)) / 2e-6
                       for e in 1e-6 * np.eye(2)], axis=1)
        assert rel_err(g.d_state_in, fd) < 1e-6


def test_pinet_parameters(rng):
    net = PiNetModel.initialized(2, 2, seed=3, scale=0.5)
    m = RhsModel(net)
    y0 = np.array([0.3, -0.4])
    r = implicit_step("radau3", m, y0, 0.0, 0.2)
    g = step_gradients(r, "radau3", m)
    fd = fd_step_params("radau3", m, y0, 0.0, 0.2)
    assert rel_err(g.d_params, fd) < 1e-5


def test_batched_matches_single(rng):
    m = example2_direct()
    ys = rng.uniform(0.2, 2.0, size=(4, 2))
    rb = implicit_step("radau5", m, ys, 0.0, 1e-3)
    gb = step_gradients(rb, "radau5", m)
    for i in range(4):
        gi = step_gradients(implicit_step("radau5", m, ys[i], 0.0, 1e-3), "radau5", m)
        np.testing.assert_allclose(gb.d_params[i], gi.d_params, rtol=1e-12, atol=1e-18)


def test_loose_newton_tolerance_changes_little():
    m = example2_direct()
    y0 = np.array([20.0, 20.0])
    tight = step_gradients(implicit_step("radau5", m, y0, 0.0, 1e-5), "radau5", m)
    loose_opts = NewtonOptions(abs_tol=1e-6)
    loose = step_gradients(implicit_step("radau5", m, y0, 0.0, 1e-5, loose_opts), "radau5", m)
    assert rel_err(loose.d_params, tight.d_params) <= 1e-4


def test_not_converged_rejected():
    m = RhsModel(DirectModel(1, 2, [[0.0, 0.0, 1.0]]))
    r = implicit_step("backward_euler", m, np.array([1.0]), 0.0, 1.0, raise_on_failure=False)
    with pytest.raises(NotConverged):
        step_gradients(r, "backward_euler", m)


def test_explicit_sensitivities(rng):
    m = example2_direct()
    y0 = np.array([1.2, 0.4])
    for name in ("forward_euler", "rk4"):
        y, g = explicit_step_with_gradients(name, m, y0, 0.0, 5e-5)
        np.testing.assert_array_equal(y, explicit_step(name, m, y0, 0.0, 5e-5))
        # explicit stages solve the same stage equations, so the extended-precision oracle applies
        fd = mp_fd_params(name, m.net.basis.keys, m.net.coeffs, y0, 5e-5)
        assert rel_err(g.d_params, fd) < 1e-6


def test_chain_identity_and_null():
    g = StepGradients(np.arange(6.0).reshape(2, 3), np.eye(2) * 2)
    out = chain_interval([g])
    assert np.array_equal(out.d_params, g.d_params) and np.array_equal(out.d_state_in, g.d_state_in)
    a = StepGradients(np.zeros((2, 3)), np.array([[1.0, 2.0], [0.0, 1.0]]))
    b = StepGradients(np.zeros((2, 3)), np.array([[3.0, 0.0], [1.0, 1.0]]))
    out = chain_interval([a, b])
    assert np.array_equal(out.d_params, np.zeros((2, 3)))
    np.testing.assert_array_equal(out.d_state_in, b.d_state_in @ a.d_state_in)
    with pytest.raises(EmptyChain):
        chain_interval([])


def test_chain_three_substeps_example1():
    import mpmath as mp

    m = RhsModel(DirectModel(1, 1, [[0.0, -10000.0]]))
    keys = m.net.basis.keys
    y0 = np.array([1000.0])
    h_total = 0.01 / 199
    k = 3
    steps = []
    y = y0
    for j in range(k):
        r = implicit_step("radau5", m, y, j * h_total / k, h_total / k)
        steps.append((r, step_gradients(r, "radau5", m)))
        y = r.y_next
    total = chain_interval(steps)

    def run(coeffs):
        y = [mp.mpf(1000)]
        for _ in range(k):
            y = mp_step("radau5", keys, coeffs, y, h_total / k, iters=3)
        return y[0]

    fd = np.zeros((1, 2))
    with mp.workdps(40):
        for p in range(2):
            step = mp.mpf("1e-15") * max(1, abs(m.params[p]))
            plus = [[mp.mpf(float(v)) for v in m.params]]
            minus = [[mp.mpf(float(v)) for v in m.params]]
            plus[0][p] += step
            minus[0][p] -= step
            fd[0, p] = float((run(plus) - run(minus)) / (2 * step))
    assert rel_err(total.d_params, fd) < 1e-5
