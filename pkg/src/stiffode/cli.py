"""Command-line entry point: gen-data, train, extract, convergence.

Exit codes: 0 success, 2 usage or input error, 3 training divergence.
"""
import argparse
import json
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import problems as pb
from .errors import StiffOdeError
from .polynet import (DirectModel, PiNetModel, RhsModel, expand_to_monomials, model_from_json,
                      model_to_json)
from .steppers import SCHEMES, NewtonOptions
from .trainer import OPTIMIZERS, TrainConfig, run_manifest, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


@contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_text(path, text):
    with atomic_path(path) as tmp:
        with open(tmp, "w") as fh:
            fh.write(text)


def _workers(args):
    if getattr(args, "workers", None) is not None:
        n = args.workers
    else:
        try:
            n = int(os.environ.get("STIFFODE_WORKERS", "1"))
        except ValueError:
            raise UsageError("STIFFODE_WORKERS must be an integer")
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    problem = pb.make_problem(args.problem)
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    if args.ics_file:
        ics = pb.read_ics_csv(args.ics_file)
        if ics.ndim != 2 or ics.shape[1] != problem.dim:
            raise UsageError(f"{args.ics_file}: expected {problem.dim} columns of initial values")
    elif args.lhs:
        bounds = problem.ic_bounds
        if bounds is None:
            ic = np.asarray(problem.initial_conditions[0])
            bounds = np.stack([0.5 * ic, 1.5 * ic], axis=1)
        ics = pb.latin_hypercube(args.lhs, bounds, args.seed)
    else:
        ics = np.array(problem.initial_conditions)
    trajs = pb.generate_references(problem, args.n, ics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, traj in enumerate(trajs):
        name = f"traj_{i:03d}.csv"
        with atomic_path(out / name) as tmp:
            pb.write_trajectory_csv(tmp, traj)
        names.append(name)
    manifest = pb.dataset_manifest(problem, names, args.n, args.seed, ics)
    write_text(out / "manifest.json", pb.dumps(manifest) + "\n")
    print(f"wrote {len(names)} trajectories to {out}")
    return EXIT_OK


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    manifest = {}
    if (data_dir / "manifest.json").exists():
        manifest = json.loads((data_dir / "manifest.json").read_text())
        files = [data_dir / f for f in manifest.get("files", [])]
    else:
        files = sorted(data_dir.glob("*.csv"))
    if not files:
        raise UsageError(f"no trajectory files in {data_dir}")
    return [pb.read_trajectory_csv(f) for f in files], manifest


# ---------------------------------------------------------------------------
# train

RUN_KEYS = {"problem", "data", "out", "architecture", "degree", "width", "include_bias", "newton"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"newton"}


def load_run_config(path):
    """Parse a run JSON; paths are resolved against the file's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - RUN_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("data", "out"):
        if key in doc:
            doc[key] = str((path.parent / doc[key]).resolve())
    return doc


def build_train_config(doc):
    kw = {k: doc[k] for k in TRAIN_KEYS if k in doc and doc[k] is not None}
    if "component_scale" in kw:
        kw["component_scale"] = tuple(kw["component_scale"])
    if doc.get("newton"):
        try:
            kw["newton"] = NewtonOptions(**doc["newton"])
        except TypeError as exc:
            raise UsageError(f"bad newton options: {exc}")
    return TrainConfig(**kw)


def build_model(dim, architecture, degree, seed, width=None, include_bias=True):
    if architecture == "direct":
        return DirectModel(dim, degree, include_bias=include_bias)
    if architecture == "pinet":
        return PiNetModel.initialized(dim, degree, seed=seed, width=width, include_bias=include_bias)
    raise UsageError(f"unknown architecture {architecture!r}")


def cmd_train(args):
    doc = load_run_config(args.config) if args.config else {}
    flag_map = {
        "problem": args.problem, "data": args.data, "out": args.out, "scheme": args.scheme,
        "epochs": args.epochs, "optimizer": args.optimizer, "seed": args.seed,
        "learning_rate": args.learning_rate, "substeps_per_interval": args.substeps,
        "architecture": args.architecture, "degree": args.degree,
    }
    for key, value in flag_map.items():
        if value is not None:
            doc[key] = value
    if "data" not in doc or "out" not in doc:
        raise UsageError("train needs --data and --out (or a config providing them)")
    if args.workers is not None or "parallel_workers" not in doc:
        doc["parallel_workers"] = _workers(args)
    trajs, data_manifest = load_dataset(doc["data"])
    dim = trajs[0].dim
    problem_name = doc.get("problem") or data_manifest.get("problem")
    degree = doc.get("degree")
    if degree is None:
        degree = pb.make_problem(problem_name).suggested_degree if problem_name else 2
    cfg = build_train_config(doc)
    net = build_model(dim, doc.get("architecture", "direct"), int(degree), cfg.seed,
                      doc.get("width"), doc.get("include_bias", True))
    report, model = train(RhsModel(net), trajs, cfg)
    out = Path(doc["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "model.json", model_to_json(model.net) + "\n")
    manifest = run_manifest(cfg, report, trajs, {"problem": problem_name, "architecture": net.to_dict()["architecture"],
                                                 "degree": int(degree)})
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")
    if report.diverged:
        print(f"training diverged at epoch {report.divergence_epoch}", file=sys.stderr)
        return EXIT_DIVERGED
    final = report.loss_history[-1] if report.loss_history else report.initial_loss
    print(f"trained {len(report.loss_history)} epochs, final SSR {final:.6e} ({report.stop_reason})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args):
    problem = pb.make_problem(args.problem)
    try:
        net = model_from_json(args.model)
    except OSError as exc:
        raise UsageError(f"cannot read model {args.model}: {exc}")
    if net.state_dim != problem.dim:
        raise UsageError(f"model dimension {net.state_dim} does not match {problem.name} ({problem.dim})")
    learned = expand_to_monomials(net)
    table = pb.coeff_errors(learned, problem)
    with atomic_path(args.out) as tmp:
        pb.write_error_table_csv(tmp, table)
    for i, poly in enumerate(learned):
        print(f"dy{i + 1}/dt = {poly.render(12)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convergence


def _parse_list(text, kind, what):
    try:
        items = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {what}: {text!r}")
    return items


def cmd_convergence(args):
    problem = pb.make_problem(args.problem)
    schemes = _parse_list(args.schemes, str, "--schemes")
    for s in schemes:
        if s not in SCHEMES:
            raise UsageError(f"unknown scheme {s!r}")
    n_list = _parse_list(args.n_list, int, "--n-list")
    if len(set(n_list)) < 2:
        raise UsageError("--n-list needs at least two distinct values")
    cfg = TrainConfig(epochs=args.epochs, optimizer=args.optimizer, seed=args.seed,
                      parallel_workers=_workers(args))
    result = pb.convergence_study(problem, schemes, n_list, cfg, architecture=args.architecture)
    out = Path(args.out)
    with atomic_path(out) as tmp:
        pb.write_study_csv(tmp, result, problem)
    slopes_path = out.with_name(out.stem + "_slopes.csv")
    with atomic_path(slopes_path) as tmp:
        pb.write_slopes_csv(tmp, result)
    for scheme, slope in result.slopes.items():
        print(f"{scheme}: slope {slope:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="stiffode", description="Learn stiff ODE right-hand sides with implicit integrators.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate reference trajectories")
    g.add_argument("--problem", required=True)
    g.add_argument("--n", type=int, required=True, help="points per trajectory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ics-file", help="CSV of initial conditions, one row per trajectory")
    g.add_argument("--lhs", type=int, help="draw this many initial conditions by Latin hypercube")
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a polynomial model on a dataset")
    t.add_argument("--config")
    t.add_argument("--problem")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--scheme", choices=SCHEMES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--optimizer", choices=OPTIMIZERS)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--substeps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--architecture", choices=("direct", "pinet"))
    t.add_argument("--degree", type=int)
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="expand a model and tabulate coefficient errors")
    e.add_argument("--model", required=True)
    e.add_argument("--problem", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    c = sub.add_parser("convergence", help="error-vs-n study across schemes")
    c.add_argument("--problem", required=True)
    c.add_argument("--schemes", required=True)
    c.add_argument("--n-list", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int, default=500)
    c.add_argument("--optimizer", choices=OPTIMIZERS, default="levenberg_marquardt")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--architecture", choices=("direct", "pinet"), default="direct")
    c.add_argument("--workers", type=int)
    c.set_defaults(func=cmd_convergence)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, StiffOdeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
