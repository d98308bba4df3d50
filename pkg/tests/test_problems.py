import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stiffode.errors import DimensionMismatch, InvalidBounds, InvalidStudy, UnknownProblem
from stiffode.polynet import MonomialPolynomial, eval_monomial
from stiffode.problems import (PROBLEMS, coeff_errors, convergence_study, generate_reference, generate_references,
                               latin_hypercube, load_hires_initial_conditions, make_problem, monotone_tail_slope,
                               read_error_table_csv, read_trajectory_csv, write_error_table_csv,
                               write_trajectory_csv)
from stiffode.trainer import TrainConfig, Trajectory


def _rel_close(a, b, rtol):
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all(np.abs(a - b) <= rtol * np.abs(b)))


@pytest.mark.parametrize("name", PROBLEMS)
def test_true_coeffs_match_handwritten_field(name, rng):
    prob = make_problem(name)
    scale = np.max(np.abs(prob.initial_conditions[0])) or 1.0
    pts = rng.uniform(-1.5, 1.5, size=(100, prob.dim)) * scale
    direct = prob.rhs_true(0.0, pts)
    from_table = np.stack([eval_monomial(p, pts) for p in prob.true_coeffs], axis=1)
    np.testing.assert_allclose(from_table, direct, rtol=1e-12, atol=1e-12 * np.abs(direct).max())


def test_example_definitions():
    e1 = make_problem("example1")
    assert e1.true_coeffs[0].terms == {(1,): -10000.0}
    assert e1.initial_conditions[0][0] == 1000.0 and e1.t_span == (0.0, 0.01)
    e2 = make_problem("example2")
    assert e2.t_span == (0.0, 1.0) and list(e2.initial_conditions[0]) == [20.0, 20.0]
    e3 = make_problem("example3")
    second = e3.true_coeffs[1].terms
    assert (second[(1, 0, 0)], second[(0, 1, 0)], second[(0, 0, 2)]) == (0.82, -24.0, 7.5)
    assert e3.t_span == (0.0, 5.0) and list(e3.initial_conditions[0]) == [15.0, 7.0, 10.0]


def test_hires_definition():
    h = make_problem("hires")
    assert h.dim == 8 and h.t_span == (0.0, 321.8122) and len(h.initial_conditions) == 20
    np.testing.assert_array_equal(h.initial_conditions[0], [0.412503, 0.906411, 0.412933, 0.213609,
                                                             0.064925, 0.293734, 0.739312, 0.043381])
    table = load_hires_initial_conditions()
    assert table.shape == (20, 8)
    assert np.all(h.ic_bounds[:, 0] <= table.min(axis=0)) and np.all(h.ic_bounds[:, 1] >= table.max(axis=0))
    # the stiff bilinear term appears with opposite signs across three equations
    assert h.true_coeffs[5].terms[(0, 0, 0, 0, 0, 1, 0, 1)] == -280.0
    assert h.true_coeffs[6].terms[(0, 0, 0, 0, 0, 1, 0, 1)] == 280.0
    assert h.true_coeffs[7].terms[(0, 0, 0, 0, 0, 1, 0, 1)] == -280.0


def test_unknown_problem():
    with pytest.raises(UnknownProblem):
        make_problem("vanderpol")


# ---------------------------------------------------------------------------
# reference data


def test_example1_reference_matches_exponential():
    traj = generate_reference(make_problem("example1"), 200)
    exact = 1000.0 * np.exp(-10000.0 * traj.times)
    assert abs(traj.states[-1, 0] - 1000.0 * math.exp(-100.0)) <= 1e-8 * 1000.0 * math.exp(-100.0)
    assert _rel_close(traj.states[:, 0], exact, 1e-8)


def test_two_points_gives_endpoints():
    prob = make_problem("example2")
    traj = generate_reference(prob, 2)
    np.testing.assert_array_equal(traj.times, [0.0, 1.0])
    np.testing.assert_array_equal(traj.states[0], [20.0, 20.0])
    with pytest.raises(InvalidStudy):
        generate_reference(prob, 1)


def test_example2_stable_under_doubling_points():
    prob = make_problem("example2")
    a = generate_reference(prob, 51)
    b = generate_reference(prob, 101)
    np.testing.assert_array_equal(a.times, b.times[::2])
    assert _rel_close(a.states[-1], b.states[-1], 1e-8)
    assert _rel_close(a.states, b.states[::2], 1e-8)


@pytest.mark.parametrize("name,n", [("example1", 50), ("example2", 40), ("example3", 40), ("hires", 12)])
def test_reference_insensitive_to_substep_halving(name, n):
    prob = make_problem(name)
    ic = [prob.initial_conditions[0]]
    base = generate_references(prob, n, ic)[0]
    finer = generate_references(prob, n, ic, start_substeps=256)[0]
    assert _rel_close(base.states, finer.states, 1e-9)


# ---------------------------------------------------------------------------
# Latin hypercube


def test_lhs_strata_are_permutations():
    bounds = load_hires_initial_conditions()
    bounds = np.stack([bounds.min(axis=0), bounds.max(axis=0)], axis=1)
    pts = latin_hypercube(20, bounds, seed=3)
    assert pts.shape == (20, 8)
    for j in range(8):
        u = (pts[:, j] - bounds[j, 0]) / (bounds[j, 1] - bounds[j, 0])
        strata = np.floor(u * 20).astype(int)
        assert sorted(strata + 1) == list(range(1, 21))


@settings(max_examples=40)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_lhs_property(n, d, seed):
    lo = np.arange(d, dtype=float)
    bounds = np.stack([lo, lo + 1.5], axis=1)
    pts = latin_hypercube(n, bounds, seed)
    assert np.all(pts >= bounds[:, 0]) and np.all(pts <= bounds[:, 1])
    strata = np.minimum(np.floor((pts - bounds[:, 0]) / 1.5 * n).astype(int), n - 1)
    for j in range(d):
        assert sorted(strata[:, j]) == list(range(n))
    np.testing.assert_array_equal(pts, latin_hypercube(n, bounds, seed))


def test_lhs_single_and_bad_bounds():
    pt = latin_hypercube(1, [[0.0, 1.0], [2.0, 3.0]], seed=0)
    assert pt.shape == (1, 2) and 0 <= pt[0, 0] <= 1 and 2 <= pt[0, 1] <= 3
    with pytest.raises(InvalidBounds):
        latin_hypercube(3, [[1.0, 1.0]], seed=0)
    with pytest.raises(InvalidBounds):
        latin_hypercube(3, [[2.0, 1.0]], seed=0)
    with pytest.raises(InvalidBounds):
        latin_hypercube(0, [[0.0, 1.0]], seed=0)


# ---------------------------------------------------------------------------
# coefficient errors


@pytest.mark.parametrize("name", PROBLEMS)
def test_truth_gives_zero_errors(name):
    prob = make_problem(name)
    table = coeff_errors(prob.true_coeffs, prob)
    assert all(r.error == 0.0 for r in table.rows)
    assert len(table.rows) == sum(len(p.terms) for p in prob.true_coeffs)


def test_example1_fractional_errors_by_scheme():
    prob = make_problem("example1")
    be = coeff_errors([MonomialPolynomial(1, {(1,): -10050.1721181})], prob)
    assert be.rows[0].error == pytest.approx(5.01721181e-3, rel=1e-9)
    r5 = coeff_errors([MonomialPolynomial(1, {(1,): -10000.0413085})], prob)
    assert r5.rows[0].error == pytest.approx(4.13085e-6, rel=1e-6)


def test_spurious_terms_and_order():
    prob = make_problem("example2")
    learned = [MonomialPolynomial(2, {(1, 0): -10000.0, (0, 2): 100.0, (0, 0): 3e-4, (1, 1): -2e-5}),
               MonomialPolynomial(2, {(1, 0): 1.0, (0, 1): -1.0, (0, 2): -1.0})]
    table = coeff_errors(learned, prob)
    assert [r.exponents for r in table.rows if r.output_index == 0] == [(0, 0), (1, 0), (1, 1), (0, 2)]
    assert table.max_spurious() == 3e-4 and table.max_true_error() == 0.0
    assert table.lookup(0, (1, 1)).error == 2e-5
    with pytest.raises(DimensionMismatch):
        coeff_errors(learned[:1], prob)
    with pytest.raises(DimensionMismatch):
        coeff_errors([MonomialPolynomial(3, {}), MonomialPolynomial(3, {})], prob)


def test_error_table_csv_round_trip(tmp_path):
    prob = make_problem("example3")
    learned = [MonomialPolynomial(3, {k: v * (1 + 1e-7 * (i + 1)) for k, v in p.terms.items()} | {(1, 1, 1): 0.1 / 3})
               for i, p in enumerate(prob.true_coeffs)]
    table = coeff_errors(learned, prob)
    path = tmp_path / "t.csv"
    write_error_table_csv(path, table)
    assert read_error_table_csv(path).rows == table.rows


def test_trajectory_csv_round_trip(tmp_path, rng):
    traj = Trajectory(np.linspace(0, 1, 7) / 3, rng.normal(size=(7, 3)) * 1e-7)
    write_trajectory_csv(tmp_path / "a.csv", traj)
    back = read_trajectory_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.times, traj.times)
    np.testing.assert_array_equal(back.states, traj.states)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "t,y1,y2,y3"


# ---------------------------------------------------------------------------
# convergence study


def test_tail_slope():
    ns = [10, 20, 40, 80]
    assert monotone_tail_slope(ns, [1.0, 0.25, 0.0625, 0.015625]) == pytest.approx(-2.0)
    # a non-monotone head is dropped
    assert monotone_tail_slope(ns, [0.01, 1.0, 0.5, 0.25]) == pytest.approx(-1.0)
    assert math.isnan(monotone_tail_slope([10], [1.0]))


def test_study_needs_two_n():
    with pytest.raises(InvalidStudy):
        convergence_study(make_problem("example1"), ["backward_euler"], [100], TrainConfig())
    with pytest.raises(InvalidStudy):
        convergence_study(make_problem("example1"), ["backward_euler"], [100, 100], TrainConfig())


@pytest.fixture(scope="module")
def example1_cache():
    return {}


def test_backward_euler_convergence(example1_cache):
    prob = make_problem("example1")
    res = convergence_study(prob, ["backward_euler"], [100, 200, 400, 1000], TrainConfig(epochs=300),
                            data_cache=example1_cache)
    errs = {c.n: c.max_error for c in res.cells}
    assert 5 <= errs[100] / errs[1000] <= 30
    assert res.slopes["backward_euler"] == pytest.approx(-1.0, abs=0.3)
    assert len(res.cells) == 4 and not any(c.diverged for c in res.cells)


def test_scheme_ordering_at_200(example1_cache):
    prob = make_problem("example1")
    schemes = ["backward_euler", "trapezoid", "radau3", "radau5"]
    res = convergence_study(prob, schemes, [100, 200], TrainConfig(epochs=500), data_cache=example1_cache)
    at200 = [next(c.max_error for c in res.cells if c.scheme == s and c.n == 200) for s in schemes]
    assert at200[0] > at200[1] > at200[2] > at200[3]
