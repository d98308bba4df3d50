"""Compare the numba LU kernels with the pure-numpy fallback.

Kernel timings run in-process on identical stacks. The end-to-end timing
(one SSR + gradient evaluation on Example 2 data) runs each backend in a
subprocess, because the backend is fixed when the package is imported.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --sizes 3,6,24 --batch 4000
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from stiffode import linalg
from stiffode._accel import backend

END_TO_END = r"""
import json, time
from stiffode import DirectModel, RhsModel, TrainConfig, loss_and_grad, backend
from stiffode.problems import generate_reference, make_problem
from stiffode.trainer import partition

prob = make_problem("example2")
samples = partition(generate_reference(prob, {n}))
model = RhsModel(DirectModel.from_polynomials(prob.true_coeffs, degree=2))
cfg = TrainConfig(scheme="radau5")
loss_and_grad(model, samples[:2], cfg, mode="gn")
best = float("inf")
for _ in range({repeat}):
    t0 = time.perf_counter()
    loss_and_grad(model, samples, cfg, mode="gn")
    best = min(best, time.perf_counter() - t0)
print(json.dumps({{"backend": backend(), "seconds": best}}))
"""


def make_stack(batch, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, n, n)) + n * np.eye(n)


def time_factor(kernel, a, repeat):
    nb, n, _ = a.shape

    def run():
        lu = np.empty_like(a)
        piv = np.empty((nb, n), dtype=np.int64)
        info = np.zeros(nb, dtype=np.int64)
        kernel(a, linalg.DEFAULT_SINGULAR_TOL, lu, piv, info)
        return lu, piv, info

    out = run()  # warm-up, includes numba compilation
    best = min(timeit.repeat(run, number=1, repeat=repeat))
    return best, out


def kernel_table(sizes, batch, repeat):
    rows = []
    compiled = None
    if backend() == "numba":
        compiled = linalg._factor_kernel
    for n in sizes:
        a = make_stack(batch, n)
        t_np, (lu_np, piv_np, _) = time_factor(linalg._lu_factor_numpy, a, repeat)
        row = {"n": n, "batch": batch, "numpy_s": t_np}
        if compiled is not None:
            t_nb, (lu_nb, piv_nb, _) = time_factor(compiled, a, repeat)
            row["numba_s"] = t_nb
            row["speedup"] = t_np / t_nb
            row["max_abs_diff"] = float(np.max(np.abs(lu_nb - lu_np)))
            row["same_pivots"] = bool(np.array_equal(piv_nb, piv_np))
        rows.append(row)
    return rows


def end_to_end(n_points, repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, STIFFODE_NUMBA=flag)
        code = END_TO_END.format(n=n_points, repeat=repeat)
        proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        doc = json.loads(proc.stdout.strip().splitlines()[-1])
        out[doc["backend"]] = doc["seconds"]
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="3,6,9,24")
    p.add_argument("--batch", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--n-points", type=int, default=400, help="grid size for the end-to-end timing")
    p.add_argument("--skip-end-to-end", action="store_true")
    args = p.parse_args(argv)

    sizes = [int(s) for s in args.sizes.split(",")]
    print(f"active backend: {backend()}")
    print(f"{'n':>4} {'batch':>6} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}  agree")
    for row in kernel_table(sizes, args.batch, args.repeat):
        nb = row.get("numba_s")
        agree = "-" if nb is None else f"{row['same_pivots']} / {row['max_abs_diff']:.1e}"
        print(f"{row['n']:>4} {row['batch']:>6} {1e3 * row['numpy_s']:>11.2f} "
              f"{(1e3 * nb if nb else float('nan')):>11.2f} {row.get('speedup', float('nan')):>8.1f}  {agree}")
    if not args.skip_end_to_end:
        e2e = end_to_end(args.n_points, args.repeat)
        print(f"loss+GN matrix, Example 2, {args.n_points - 1} samples, radau5:")
        for name, sec in e2e.items():
            print(f"  {name:>6}: {1e3 * sec:.1f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())
