"""Benchmark problems, reference data, initial-condition sampling and
coefficient-error tables."""
import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DimensionMismatch, InvalidBounds, InvalidStudy, NewtonDiverged, UnknownProblem
from .polynet import AnalyticField, MonomialPolynomial, RhsModel, graded_key
from .steppers import get_tableau
from .trainer import Trajectory

PROBLEMS = ("example1", "example2", "example3", "hires")

REFERENCE_RTOL = 1e-10
REFERENCE_ATOL = 1e-14
REFERENCE_MAX_NEWTON = 30
MAX_DOUBLINGS = 20


@dataclass
class ProblemSpec:
    name: str
    dim: int
    rhs_true: AnalyticField
    true_coeffs: list
    initial_conditions: list
    t_span: tuple
    suggested_degree: int
    ic_bounds: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def true_model(self):
        return RhsModel(known=self.rhs_true)

    def time_grid(self, n_points):
        return np.linspace(self.t_span[0], self.t_span[1], n_points)


def _poly(dim, terms):
    return MonomialPolynomial(dim, terms)


# handwritten fields; their monomial tables are checked against them in tests


def _ex1_f(t, y):
    return -10000.0 * y


def _ex1_j(t, y):
    return np.full((y.shape[0], 1, 1), -10000.0)


def _ex2_f(t, y):
    y1, y2 = y[:, 0], y[:, 1]
    return np.stack([-10000.0 * y1 + 100.0 * y2 ** 2, y1 - y2 - y2 ** 2], axis=1)


def _ex2_j(t, y):
    y2 = y[:, 1]
    j = np.zeros((y.shape[0], 2, 2))
    j[:, 0, 0] = -10000.0
    j[:, 0, 1] = 200.0 * y2
    j[:, 1, 0] = 1.0
    j[:, 1, 1] = -1.0 - 2.0 * y2
    return j


def _ex3_f(t, y):
    y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
    return np.stack([
        -500.0 * y1 + 3.8 * y2 ** 2 + 1.35 * y3,
        0.82 * y1 - 24.0 * y2 + 7.5 * y3 ** 2,
        -0.5 * y1 ** 2 + 1.85 * y2 - 6.5 * y3 ** 2,
    ], axis=1)


def _ex3_j(t, y):
    y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
    j = np.zeros((y.shape[0], 3, 3))
    j[:, 0, 0] = -500.0
    j[:, 0, 1] = 7.6 * y2
    j[:, 0, 2] = 1.35
    j[:, 1, 0] = 0.82
    j[:, 1, 1] = -24.0
    j[:, 1, 2] = 15.0 * y3
    j[:, 2, 0] = -y1
    j[:, 2, 1] = 1.85
    j[:, 2, 2] = -13.0 * y3
    return j


def _hires_f(t, y):
    y1, y2, y3, y4, y5, y6, y7, y8 = y.T
    r = 280.0 * y6 * y8
    return np.stack([
        -1.71 * y1 + 0.43 * y2 + 8.32 * y3 + 0.0007,
        1.71 * y1 - 8.75 * y2,
        -10.03 * y3 + 0.43 * y4 + 0.035 * y5,
        8.32 * y2 + 1.71 * y3 - 1.12 * y4,
        -1.745 * y5 + 0.43 * y6 + 0.43 * y7,
        -r + 0.69 * y4 + 1.71 * y5 - 0.43 * y6 + 0.69 * y7,
        r - 1.81 * y7,
        -r + 1.81 * y7,
    ], axis=1)


def _hires_j(t, y):
    y6, y8 = y[:, 5], y[:, 7]
    j = np.zeros((y.shape[0], 8, 8))
    lin = {
        (0, 0): -1.71, (0, 1): 0.43, (0, 2): 8.32,
        (1, 0): 1.71, (1, 1): -8.75,
        (2, 2): -10.03, (2, 3): 0.43, (2, 4): 0.035,
        (3, 1): 8.32, (3, 2): 1.71, (3, 3): -1.12,
        (4, 4): -1.745, (4, 5): 0.43, (4, 6): 0.43,
        (5, 3): 0.69, (5, 4): 1.71, (5, 5): -0.43, (5, 6): 0.69,
        (6, 6): -1.81,
        (7, 6): 1.81,
    }
    for (a, b), v in lin.items():
        j[:, a, b] = v
    for row, sign in ((5, -1.0), (6, 1.0), (7, -1.0)):
        j[:, row, 5] += sign * 280.0 * y8
        j[:, row, 7] += sign * 280.0 * y6
    return j


def _unit(dim, *powers):
    key = [0] * dim
    for var, p in powers:
        key[var] += p
    return tuple(key)


def _hires_coeffs():
    u = lambda *p: _unit(8, *p)  # noqa: E731
    y = lambda i: u((i - 1, 1))  # noqa: E731
    y6y8 = u((5, 1), (7, 1))
    return [
        _poly(8, {y(1): -1.71, y(2): 0.43, y(3): 8.32, u(): 0.0007}),
        _poly(8, {y(1): 1.71, y(2): -8.75}),
        _poly(8, {y(3): -10.03, y(4): 0.43, y(5): 0.035}),
        _poly(8, {y(2): 8.32, y(3): 1.71, y(4): -1.12}),
        _poly(8, {y(5): -1.745, y(6): 0.43, y(7): 0.43}),
        _poly(8, {y6y8: -280.0, y(4): 0.69, y(5): 1.71, y(6): -0.43, y(7): 0.69}),
        _poly(8, {y6y8: 280.0, y(7): -1.81}),
        _poly(8, {y6y8: -280.0, y(7): 1.81}),
    ]


def load_hires_initial_conditions():
    """The 20 HIRES initial conditions shipped with the package, ``(20, 8)``."""
    text = resources.files("stiffode").joinpath("data/hires_initial_conditions.csv").read_text()
    return read_ics_csv_text(text)


def read_ics_csv_text(text):
    rows = list(csv.reader(text.strip().splitlines()))
    header, body = rows[0], rows[1:]
    start = 1 if header[0].strip().lower() in ("run", "id", "index") else 0
    return np.array([[float(v) for v in r[start:]] for r in body if r])


def read_ics_csv(path):
    with open(path) as fh:
        return read_ics_csv_text(fh.read())


def make_problem(name):
    if name == "example1":
        return ProblemSpec("example1", 1, AnalyticField(1, _ex1_f, _ex1_j),
                           [_poly(1, {(1,): -10000.0})], [np.array([1000.0])], (0.0, 0.01), 1)
    if name == "example2":
        return ProblemSpec("example2", 2, AnalyticField(2, _ex2_f, _ex2_j),
                           [_poly(2, {(1, 0): -10000.0, (0, 2): 100.0}),
                            _poly(2, {(1, 0): 1.0, (0, 1): -1.0, (0, 2): -1.0})],
                           [np.array([20.0, 20.0])], (0.0, 1.0), 2)
    if name == "example3":
        return ProblemSpec("example3", 3, AnalyticField(3, _ex3_f, _ex3_j),
                           [_poly(3, {(1, 0, 0): -500.0, (0, 2, 0): 3.8, (0, 0, 1): 1.35}),
                            _poly(3, {(1, 0, 0): 0.82, (0, 1, 0): -24.0, (0, 0, 2): 7.5}),
                            _poly(3, {(2, 0, 0): -0.5, (0, 1, 0): 1.85, (0, 0, 2): -6.5})],
                           [np.array([15.0, 7.0, 10.0])], (0.0, 5.0), 2)
    if name == "hires":
        ics = load_hires_initial_conditions()
        bounds = np.stack([ics.min(axis=0), ics.max(axis=0)], axis=1)
        return ProblemSpec("hires", 8, AnalyticField(8, _hires_f, _hires_j), _hires_coeffs(),
                           [row.copy() for row in ics], (0.0, 321.8122), 2, ic_bounds=bounds)
    raise UnknownProblem(f"unknown problem {name!r}; expected one of {', '.join(PROBLEMS)}")


# ---------------------------------------------------------------------------
# reference data


def _radau5_step(field, y, t, h):
    """One Radau5 step for a batch, Newton iterated down to roundoff.

    The training stepper stops at a residual tolerance; over thousands of
    substeps that leftover error accumulates in small components, so the
    reference path keeps iterating until the per-component update stops
    shrinking.
    """
    tab = get_tableau("radau5")
    n, d = y.shape
    s = tab.s
    ts = t + tab.c * h
    z = np.zeros((n, s, d))          # stage increments Y_i - y
    eye = np.eye(s * d)
    prev = np.inf
    for it in range(REFERENCE_MAX_NEWTON):
        stages = y[:, None, :] + z
        f = np.stack([field(ts[i], stages[:, i]) for i in range(s)], axis=1)
        g = z - h * np.einsum("ij,njd->nid", tab.a, f)
        jf = np.stack([field.jacobian(ts[i], stages[:, i]) for i in range(s)], axis=1)
        jm = eye - h * np.einsum("ij,njab->niajb", tab.a, jf).reshape(n, s * d, s * d)
        try:
            dz = np.linalg.solve(jm, -g.reshape(n, s * d, 1)).reshape(n, s, d)
        except np.linalg.LinAlgError as exc:
            raise NewtonDiverged(f"singular stage matrix in reference step: {exc}")
        z = z + dz
        if not np.all(np.isfinite(z)):
            raise NewtonDiverged("non-finite reference stages")
        size = float(np.max(np.abs(dz) / (np.abs(y[:, None, :] + z) + 1e-300)))
        if size <= 1e-15 or (it >= 2 and size >= prev):
            return y + z[:, -1]
        prev = size
    if prev > 1e-10:
        raise NewtonDiverged(f"reference Newton did not converge (relative update {prev:.2e})", residual_norm=prev)
    return y + z[:, -1]


def _refine_interval(field, y, t0, t1, k):
    """Radau5 with ``k`` equal substeps from ``y`` (batch) over [t0, t1]."""
    h = (t1 - t0) / k
    for j in range(k):
        y = _radau5_step(field, y, t0 + j * h, h)
    return y


def _agree(a, b, rtol, atol):
    return bool(np.all(np.abs(a - b) <= rtol * np.abs(a) + atol))


def generate_references(problem, n_points, ics=None, rtol=REFERENCE_RTOL, atol=REFERENCE_ATOL, start_substeps=1):
    """Reference trajectories for several initial conditions at once.

    Each interval of the uniform grid is integrated with fixed-substep
    Radau5, doubling the substep count until two successive refinements
    agree componentwise within ``rtol`` (``atol`` floor). The finer of the
    two agreeing results is kept.

    The substep count may shrink again only while every component is large
    enough for the test to be purely relative. Once a component falls into
    the floor-dominated range the count is frozen, which keeps decaying
    solutions accurate in the relative sense.
    """
    if n_points < 2:
        raise InvalidStudy("n_points must be >= 2")
    ics = problem.initial_conditions if ics is None else ics
    y = np.array(ics, dtype=np.float64).reshape(-1, problem.dim)
    model = problem.rhs_true
    times = problem.time_grid(n_points)
    out = np.zeros((y.shape[0], n_points, problem.dim))
    out[:, 0] = y
    k = max(1, int(start_substeps))
    for i in range(n_points - 1):
        t0, t1 = times[i], times[i + 1]
        may_shrink = k > 1 and bool(np.all(np.abs(y) * rtol > atol))
        lo = k // 2 if may_shrink else k
        coarse = None
        for _ in range(MAX_DOUBLINGS):
            try:
                if coarse is None:
                    coarse = _refine_interval(model, y, t0, t1, lo)
                fine = _refine_interval(model, y, t0, t1, 2 * lo)
            except NewtonDiverged:
                coarse, lo = None, 2 * lo
                continue
            if _agree(fine, coarse, rtol, atol):
                break
            coarse, lo = fine, 2 * lo
        else:
            raise NewtonDiverged(f"reference refinement did not settle on interval {i}", interval=i)
        y = fine
        k = lo
        out[:, i + 1] = y
    return [Trajectory(times.copy(), traj) for traj in out]


def generate_reference(problem, n_points, ic=None):
    ic = problem.initial_conditions[0] if ic is None else ic
    return generate_references(problem, n_points, [ic])[0]


def latin_hypercube(n_samples, bounds, seed=0):
    """One sample per stratum and dimension; returns ``(n_samples, d)``."""
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise InvalidBounds("bounds must be a list of (lo, hi) pairs")
    if np.any(~(bounds[:, 0] < bounds[:, 1])):
        raise InvalidBounds("every dimension needs lo < hi")
    if n_samples < 1:
        raise InvalidBounds("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    d = bounds.shape[0]
    u = np.empty((n_samples, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n_samples) + rng.uniform(size=n_samples)) / n_samples
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


# ---------------------------------------------------------------------------
# trajectory files


def write_trajectory_csv(path, traj):
    d = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y{i + 1}" for i in range(d)])
        for t, row in zip(traj.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise DimensionMismatch(f"{path}: expected header t,y1,...")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r])
    return Trajectory(data[:, 0], data[:, 1:])


# ---------------------------------------------------------------------------
# coefficient errors


@dataclass(frozen=True)
class CoeffErrorRow:
    output_index: int
    exponents: tuple
    learned: float
    truth: float
    error: float

    @property
    def is_true_term(self):
        return self.truth != 0.0


@dataclass
class CoeffErrorTable:
    rows: list

    def true_rows(self):
        return [r for r in self.rows if r.is_true_term]

    def spurious_rows(self):
        return [r for r in self.rows if not r.is_true_term]

    def max_true_error(self):
        return max((r.error for r in self.true_rows()), default=0.0)

    def max_spurious(self):
        return max((r.error for r in self.spurious_rows()), default=0.0)

    def lookup(self, output_index, exponents):
        for r in self.rows:
            if r.output_index == output_index and r.exponents == tuple(exponents):
                return r
        return None


def coeff_errors(learned, problem):
    """Fractional error per true term; absolute learned value for spurious ones."""
    truth = problem.true_coeffs
    if len(learned) != len(truth) or any(p.state_dim != problem.dim for p in learned):
        raise DimensionMismatch("learned polynomials do not match the problem dimension")
    rows = []
    for i, (lp, tp) in enumerate(zip(learned, truth)):
        keys = {k for k, v in lp.terms.items() if abs(v) > 1e-300} | {k for k, v in tp.terms.items() if abs(v) > 1e-300}
        for key in sorted(keys, key=graded_key):
            lv = lp.terms.get(key, 0.0)
            tv = tp.terms.get(key, 0.0)
            err = abs(lv - tv) / abs(tv) if tv != 0.0 else abs(lv)
            rows.append(CoeffErrorRow(i, key, lv, tv, err))
    return CoeffErrorTable(rows)


def write_error_table_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["output_index", "exponent_tuple", "learned", "truth", "fractional_relative_error"])
        for r in table.rows:
            w.writerow([r.output_index, " ".join(str(e) for e in r.exponents), repr(r.learned), repr(r.truth),
                        repr(r.error)])


def read_error_table_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(CoeffErrorRow(int(rec["output_index"]), tuple(int(e) for e in rec["exponent_tuple"].split()),
                                      float(rec["learned"]), float(rec["truth"]),
                                      float(rec["fractional_relative_error"])))
    return CoeffErrorTable(rows)


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class StudyCell:
    scheme: str
    n: int
    errors: dict          # (output_index, exponents) -> fractional error of true terms
    max_error: float
    max_spurious: float
    diverged: bool
    learned: list = None


@dataclass
class StudyResult:
    cells: list
    slopes: dict


def monotone_tail_slope(ns, errors):
    """Least-squares slope of log(error) vs log(n) on the longest decreasing tail."""
    pairs = [(n, e) for n, e in sorted(zip(ns, errors)) if np.isfinite(e) and e > 0]
    if len(pairs) < 2:
        return float("nan")
    start = len(pairs) - 1
    while start > 0 and pairs[start - 1][1] > pairs[start][1]:
        start -= 1
    tail = pairs[start:]
    if len(tail) < 2:
        return float("nan")
    x = np.log([p[0] for p in tail])
    y = np.log([p[1] for p in tail])
    return float(np.polyfit(x, y, 1)[0])


def default_model(problem, architecture="direct", seed=0):
    from .polynet import DirectModel, PiNetModel

    if architecture == "direct":
        return RhsModel(DirectModel(problem.dim, problem.suggested_degree))
    return RhsModel(PiNetModel.initialized(problem.dim, problem.suggested_degree, seed=seed))


def convergence_study(problem, schemes, n_list, cfg, architecture="direct", data_cache=None):
    """Train once per (scheme, n) and fit error-vs-n slopes per scheme.

    The scheme-level slope uses the worst true-coefficient error per cell.
    """
    from .polynet import expand_to_monomials
    from .trainer import config_with, train

    n_list = sorted({int(n) for n in n_list})
    if len(n_list) < 2:
        raise InvalidStudy("a convergence study needs at least two distinct values of n")
    cells = []
    for scheme in schemes:
        for n in n_list:
            if data_cache is not None and n in data_cache:
                trajs = data_cache[n]
            else:
                trajs = generate_references(problem, n)
                if data_cache is not None:
                    data_cache[n] = trajs
            model0 = default_model(problem, architecture, cfg.seed)
            report, model = train(model0, trajs, config_with(cfg, scheme=scheme))
            learned = expand_to_monomials(model)
            table = coeff_errors(learned, problem)
            errs = {(r.output_index, r.exponents): r.error for r in table.true_rows()}
            max_err = table.max_true_error() if not report.diverged else float("inf")
            cells.append(StudyCell(scheme, n, errs, max_err, table.max_spurious(), report.diverged, learned))
    slopes = {}
    for scheme in schemes:
        sc = [c for c in cells if c.scheme == scheme]
        slopes[scheme] = monotone_tail_slope([c.n for c in sc], [c.max_error for c in sc])
    return StudyResult(cells, slopes)


def write_study_csv(path, result, problem):
    keys = [(i, k) for i, p in enumerate(problem.true_coeffs) for k, _ in p.sorted_terms()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "n", "diverged", "max_error", "max_spurious"]
                   + [f"err_out{i}_{'-'.join(str(e) for e in k)}" for i, k in keys])
        for c in result.cells:
            w.writerow([c.scheme, c.n, int(c.diverged), repr(c.max_error), repr(c.max_spurious)]
                       + [repr(c.errors.get(key, math.nan)) for key in keys])


def write_slopes_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "slope"])
        for scheme, slope in result.slopes.items():
            w.writerow([scheme, repr(slope)])


def dataset_manifest(problem, files, n_points, seed, ics):
    return {
        "problem": problem.name,
        "files": files,
        "n_points": n_points,
        "t_span": list(problem.t_span),
        "seed": seed,
        "initial_conditions": [[float(v) for v in ic] for ic in ics],
        "generation": {
            "method": "radau5 fixed substeps with step doubling",
            "rtol": REFERENCE_RTOL,
            "atol": REFERENCE_ATOL,
        },
    }


def dumps(doc):
    return json.dumps(doc, indent=2)
