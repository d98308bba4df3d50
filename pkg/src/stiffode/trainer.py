"""Discretize-then-optimize training.

Each pair of consecutive observations is an initial value problem. All of
them are advanced together through one (or a few) fixed steps of the chosen
scheme; the prediction error at the interval end gives the SSR loss and,
via step sensitivities, its exact gradient.

Samples are processed in fixed-size chunks whose partial sums are reduced
in chunk order, so the worker count never changes results.
"""
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import EmptyTrajectory, InvalidConfig, SingularMatrix
from .ift_grad import explicit_step_with_gradients, step_gradients
from .linalg import lu_factor, lu_solve
from .steppers import SCHEMES, NewtonOptions, StepResult, get_tableau, implicit_step

OPTIMIZERS = ("adam", "levenberg_marquardt")
FAILURE_POLICIES = ("fail_epoch", "skip_and_flag")


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        y = np.asarray(self.states, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if t.ndim != 1 or len(t) < 2:
            raise EmptyTrajectory("a trajectory needs at least two time points")
        if y.shape[0] != len(t):
            raise InvalidConfig(f"{len(t)} times but {y.shape[0]} states")
        if np.any(np.diff(t) <= 0):
            raise InvalidConfig("trajectory times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise InvalidConfig("trajectory states must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", y)

    @property
    def dim(self):
        return self.states.shape[1]


@dataclass(frozen=True)
class IvpSample:
    t_start: float
    t_end: float
    y_start: np.ndarray
    y_target: np.ndarray

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise InvalidConfig("t_end must exceed t_start")


@dataclass(frozen=True)
class SampleBatch:
    """Column-stacked samples (the form the solver consumes)."""

    t_start: np.ndarray
    t_end: np.ndarray
    y_start: np.ndarray
    y_target: np.ndarray

    def __len__(self):
        return len(self.t_start)

    def __getitem__(self, idx):
        return SampleBatch(self.t_start[idx], self.t_end[idx], self.y_start[idx], self.y_target[idx])

    @classmethod
    def from_samples(cls, samples):
        if isinstance(samples, SampleBatch):
            return samples
        samples = list(samples)
        if not samples:
            raise EmptyTrajectory("no training samples")
        return cls(np.array([s.t_start for s in samples], dtype=np.float64),
                   np.array([s.t_end for s in samples], dtype=np.float64),
                   np.array([s.y_start for s in samples], dtype=np.float64),
                   np.array([s.y_target for s in samples], dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "radau5"
    substeps_per_interval: int = 1
    optimizer: str = "levenberg_marquardt"
    learning_rate: float = 1e-3
    epochs: int = 500
    lm_lambda0: float = 1e-3
    seed: int = 0
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    parallel_workers: int = 1
    failure_policy: str = None
    component_scale: tuple = None
    chunk_size: int = 256
    early_stop_rtol: float = 1e-14
    early_stop_patience: int = 20
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidConfig(f"unknown scheme {self.scheme!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if int(self.epochs) < 1:
            raise InvalidConfig("epochs must be >= 1")
        if int(self.substeps_per_interval) < 1:
            raise InvalidConfig("substeps_per_interval must be >= 1")
        if self.parallel_workers < 1 or self.chunk_size < 1:
            raise InvalidConfig("parallel_workers and chunk_size must be >= 1")
        if self.failure_policy is not None and self.failure_policy not in FAILURE_POLICIES:
            raise InvalidConfig(f"unknown failure policy {self.failure_policy!r}")

    @property
    def policy(self):
        if self.failure_policy is not None:
            return self.failure_policy
        return "fail_epoch" if self.optimizer == "levenberg_marquardt" else "skip_and_flag"

    def to_dict(self):
        doc = asdict(self)
        doc["failure_policy"] = self.policy
        return doc


@dataclass
class LossResult:
    ssr: float
    residuals: np.ndarray          # (N, d) scaled prediction errors, zero where failed
    failed: np.ndarray             # (N,) bool
    grad: np.ndarray = None        # (P,)
    jtj: np.ndarray = None         # (P, P) Gauss-Newton matrix
    jacobian: np.ndarray = None    # (N*d, P), only on request

    @property
    def n_failed(self):
        return int(np.count_nonzero(self.failed))

    @property
    def diverged(self):
        return not np.isfinite(self.ssr)


@dataclass
class TrainReport:
    loss_history: list
    final_params: np.ndarray
    diverged: bool
    divergence_epoch: int = None
    wall_time: float = 0.0
    initial_loss: float = float("nan")
    stop_reason: str = ""
    failed_samples: int = 0


def partition(traj_set):
    """One IVP per consecutive pair of points, trajectory-major order."""
    trajs = [traj_set] if isinstance(traj_set, Trajectory) else list(traj_set)
    if not trajs:
        raise EmptyTrajectory("no trajectories given")
    out = []
    for traj in trajs:
        if len(traj.times) < 2:
            raise EmptyTrajectory("a trajectory needs at least two points")
        for k in range(len(traj.times) - 1):
            out.append(IvpSample(float(traj.times[k]), float(traj.times[k + 1]),
                                 traj.states[k].copy(), traj.states[k + 1].copy()))
    return out


def _subset(res, idx):
    f = res.stage_jacobian_lu
    return StepResult(res.y_next[idx], res.stages[idx], res.t_next[idx], res.h[idx], res.iterations[idx],
                      res.residual_norm[idx], res.converged[idx], f.take(idx), res.y_n[idx], res.t_n[idx],
                      res.scheme, True)


def predict_interval(model, batch, cfg, want_grad=True):
    """Integrate each sample over its interval.

    Returns ``(y_end, d y_end / d theta or None, failed)``.
    """
    tab = get_tableau(cfg.scheme)
    n, d, p = len(batch), model.state_dim, model.n_params
    k = int(cfg.substeps_per_interval)
    h = (batch.t_end - batch.t_start) / k
    y = batch.y_start.copy()
    t = batch.t_start.copy()
    sens = np.zeros((n, d, p)) if want_grad else None
    failed = np.zeros(n, dtype=bool)
    for sub in range(k):
        live = np.flatnonzero(~failed)
        if live.size == 0:
            break
        if tab.is_implicit:
            res = implicit_step(tab, model, y[live], t[live], h[live], cfg.newton, raise_on_failure=False)
            ok = res.converged & np.all(np.isfinite(res.y_next), axis=1)
            failed[live[~ok]] = True
            good = live[ok]
            y[good] = res.y_next[ok]
            if want_grad and good.size:
                sel = np.flatnonzero(ok)
                regular = res.stage_jacobian_lu.info[sel] == 0
                failed[live[sel[~regular]]] = True
                sel, good = sel[regular], live[sel[regular]]
                if good.size:
                    g = step_gradients(_subset(res, sel), tab, model)
                    sens[good] = g.d_params if sub == 0 else g.d_state_in @ sens[good] + g.d_params
        else:
            with np.errstate(all="ignore"):
                if want_grad:
                    y_new, g = explicit_step_with_gradients(tab, model, y[live], t[live], h[live])
                else:
                    y_new = _explicit_only(tab, model, y[live], t[live], h[live])
            ok = np.all(np.isfinite(y_new), axis=1)
            if want_grad:
                ok &= np.all(np.isfinite(g.d_params), axis=(1, 2))
                sens[live] = g.d_params if sub == 0 else g.d_state_in @ sens[live] + g.d_params
            failed[live[~ok]] = True
            y[live] = y_new
        t = t + h
    return y, sens, failed


def _explicit_only(tab, model, y, t, h):
    from .steppers import _explicit_stages

    k = _explicit_stages(tab, model, y, t, h)[1]
    return y + h[:, None] * np.einsum("j,njd->nd", tab.b, k)


def _chunk_eval(model, batch, cfg, mode):
    want_grad = mode != "loss"
    with np.errstate(over="ignore", invalid="ignore"):
        y, sens, failed = predict_interval(model, batch, cfg, want_grad)
        e = y - batch.y_target
        if cfg.component_scale is not None:
            e = e * np.asarray(cfg.component_scale)[None, :]
        bad = failed | ~np.all(np.isfinite(e), axis=1)
    e[bad] = 0.0
    out = {"e": e, "failed": bad, "ssr": float(np.sum(e * e))}
    if want_grad:
        s = sens
        if cfg.component_scale is not None:
            s = s * np.asarray(cfg.component_scale)[None, :, None]
        s = np.where(bad[:, None, None], 0.0, s)
        jac = s.reshape(-1, model.n_params)
        out["grad"] = 2.0 * (jac.T @ e.reshape(-1))
        if mode in ("gn", "jacobian"):
            out["jtj"] = jac.T @ jac
        if mode == "jacobian":
            out["jac"] = jac
    return out


def loss_and_grad(model, samples, cfg, mode="grad"):
    """SSR loss at ``model``'s parameters.

    ``mode``: ``"loss"`` (no derivatives), ``"grad"``, ``"gn"`` (adds the
    Gauss-Newton matrix J^T J) or ``"jacobian"`` (also returns J itself,
    rows ordered sample-major then component).
    """
    batch = SampleBatch.from_samples(samples)
    if batch.y_start.shape[1] != model.state_dim:
        raise InvalidConfig(f"data dimension {batch.y_start.shape[1]} != model dimension {model.state_dim}")
    n = len(batch)
    bounds = [(i, min(i + cfg.chunk_size, n)) for i in range(0, n, cfg.chunk_size)]
    work = [batch[a:b] for a, b in bounds]
    if cfg.parallel_workers > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_workers) as pool:
            parts = list(pool.map(lambda b: _chunk_eval(model, b, cfg, mode), work))
    else:
        parts = [_chunk_eval(model, b, cfg, mode) for b in work]

    residuals = np.concatenate([p["e"] for p in parts])
    failed = np.concatenate([p["failed"] for p in parts])
    ssr = 0.0
    for p in parts:
        ssr += p["ssr"]
    n_failed = int(np.count_nonzero(failed))
    if n_failed and (cfg.policy == "fail_epoch" or n_failed > 0.1 * n):
        ssr = float("inf")
    result = LossResult(ssr, residuals, failed)
    if mode != "loss":
        result.grad = _reduce([p["grad"] for p in parts])
    if mode in ("gn", "jacobian"):
        result.jtj = _reduce([p["jtj"] for p in parts])
    if mode == "jacobian":
        result.jacobian = np.concatenate([p["jac"] for p in parts])
    return result


def _reduce(parts):
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total


def _lm_solve(jtj, grad_half, lam):
    a = jtj + lam * np.eye(len(grad_half))
    scale = np.sqrt(np.diag(a))
    if not np.all(np.isfinite(scale)) or np.any(scale == 0):
        raise SingularMatrix("degenerate Gauss-Newton matrix")
    a_s = a / scale[:, None] / scale[None, :]
    u = lu_solve(lu_factor(a_s), -grad_half / scale)
    return u / scale


def train(model0, traj_set, cfg, callback=None):
    """Fit the model's parameters; returns ``(TrainReport, trained_model)``."""
    if not isinstance(cfg, TrainConfig):
        raise InvalidConfig("cfg must be a TrainConfig")
    if isinstance(traj_set, SampleBatch):
        samples = traj_set
    elif traj_set and isinstance(next(iter(traj_set)), IvpSample):
        samples = SampleBatch.from_samples(traj_set)
    else:
        samples = SampleBatch.from_samples(partition(traj_set))
    start = time.perf_counter()
    if cfg.optimizer == "levenberg_marquardt":
        report, model = _train_lm(model0, samples, cfg, callback)
    else:
        report, model = _train_adam(model0, samples, cfg, callback)
    report.wall_time = time.perf_counter() - start
    return report, model


def _is_blowup(loss, initial, cfg):
    return (not np.isfinite(loss)) or (np.isfinite(initial) and initial > 0 and loss > cfg.divergence_factor * initial)


def _stalled(history, cfg):
    if len(history) <= cfg.early_stop_patience:
        return False
    recent = history[-(cfg.early_stop_patience + 1):]
    for prev, cur in zip(recent[:-1], recent[1:]):
        if prev <= 0 or (prev - cur) / prev >= cfg.early_stop_rtol:
            return False
    return True


def _train_lm(model, samples, cfg, callback):
    theta = model.params.copy()
    res = loss_and_grad(model, samples, cfg, mode="gn")
    report = TrainReport([], theta.copy(), False, initial_loss=res.ssr)
    if res.diverged:
        report.diverged, report.divergence_epoch, report.stop_reason = True, 0, "initial loss not finite"
        report.failed_samples = res.n_failed
        return report, model
    lam = float(cfg.lm_lambda0)
    for epoch in range(int(cfg.epochs)):
        if res.ssr == 0.0:
            report.stop_reason = "zero loss"
            break
        accepted = False
        while lam <= 1e16:
            try:
                delta = _lm_solve(res.jtj, 0.5 * res.grad, lam)
            except SingularMatrix:
                lam *= 8.0
                continue
            trial_model = model.with_params(theta + delta)
            trial = loss_and_grad(trial_model, samples, cfg, mode="gn")
            if np.isfinite(trial.ssr) and trial.ssr < res.ssr:
                theta, model, res = theta + delta, trial_model, trial
                lam = max(lam / 2.0, 1e-300)
                accepted = True
                break
            lam *= 8.0
        if not accepted:
            report.stop_reason = "no decreasing step (converged)"
            break
        report.loss_history.append(res.ssr)
        if callback is not None:
            callback(epoch, res.ssr, theta)
        if _stalled(report.loss_history, cfg):
            report.stop_reason = "relative improvement below tolerance"
            break
    else:
        report.stop_reason = "epoch budget exhausted"
    report.final_params = theta.copy()
    return report, model


def _train_adam(model, samples, cfg, callback, beta1=0.9, beta2=0.999, eps=1e-8):
    theta = model.params.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    report = TrainReport([], theta.copy(), False)
    for epoch in range(int(cfg.epochs)):
        res = loss_and_grad(model, samples, cfg, mode="grad")
        if epoch == 0:
            report.initial_loss = res.ssr
        report.loss_history.append(res.ssr)
        report.failed_samples = res.n_failed
        if callback is not None:
            callback(epoch, res.ssr, theta)
        if _is_blowup(res.ssr, report.initial_loss, cfg) or not np.all(np.isfinite(res.grad)):
            report.diverged, report.divergence_epoch = True, epoch
            report.stop_reason = "loss diverged"
            break
        if _stalled(report.loss_history, cfg):
            report.stop_reason = "relative improvement below tolerance"
            break
        g = res.grad
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** (epoch + 1))
        v_hat = v / (1 - beta2 ** (epoch + 1))
        theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        model = model.with_params(theta)
    else:
        report.stop_reason = "epoch budget exhausted"
    report.final_params = theta.copy()
    return report, model


def dataset_hash(traj_set):
    h = hashlib.sha256()
    for traj in traj_set:
        h.update(np.ascontiguousarray(traj.times).tobytes())
        h.update(np.ascontiguousarray(traj.states).tobytes())
    return h.hexdigest()


def run_manifest(cfg, report, traj_set, extra=None):
    doc = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "scheme": cfg.scheme,
        "dataset_hash": dataset_hash(traj_set),
        "loss_history": [float(v) for v in report.loss_history],
        "initial_loss": float(report.initial_loss),
        "final_params": [float(v) for v in report.final_params],
        "diverged": bool(report.diverged),
        "divergence_epoch": report.divergence_epoch,
        "stop_reason": report.stop_reason,
        "wall_time": report.wall_time,
    }
    if extra:
        doc.update(extra)
    return doc


def config_with(cfg, **changes):
    return replace(cfg, **changes)


def dumps_manifest(doc):
    return json.dumps(doc, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))
