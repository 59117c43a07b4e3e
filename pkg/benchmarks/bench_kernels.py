"""Time the compiled clause kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--worlds 4096] [--repeat 5]

Uses the rules of the standard synthetic task and random group-consistent
worlds. Prints one line per kernel with the best-of-N time for each backend.
"""
import argparse
import timeit

import numpy as np

from mlnsmooth import _pykernels
from mlnsmooth.mln import MlnModel
from mlnsmooth.rules import compile_rules
from mlnsmooth.synth import TaskSpec, gen_task, rules_from_task

try:
    from mlnsmooth import _ckernels
except ImportError:
    _ckernels = None


def setup(n_worlds: int, seed: int = 0):
    task, _, _ = gen_task(TaskSpec(seed=seed))
    rules = rules_from_task(task)
    c = compile_rules(rules)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, task.spec.C, n_worlds)
    T = task.truth_world(labels)
    # flip non-class bits at random so many clauses are violated
    flip = rng.random((n_worlds, task.L)) < 0.2
    flip[:, : task.spec.C] = False
    T = np.ascontiguousarray(T ^ flip, dtype=np.uint8)
    sensor = rng.normal(0, 1, task.L)
    model = MlnModel(c, sensor, tuple(np.asarray(g[1]) for g in rules.groups))
    return c, sensor, T, model.ungrouped


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--worlds", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    c, sensor, T, ungrouped = setup(args.worlds)
    indptr, indices, coef = c._csr
    calls = {
        "truth_batch": lambda k: k.truth_batch(indptr, indices, coef, c.B, T),
        "score_batch": lambda k: k.score_batch(indptr, indices, coef, c.B, c.w, sensor, T),
        "pll_batch": lambda k: k.pll_batch(indptr, indices, coef, c.B, c.w, sensor, T, ungrouped),
    }
    print(f"{T.shape[0]} worlds, {T.shape[1]} predicates, {c.n_formulas} formulas")
    print(f"{'kernel':<12} {'python':>10} {'cython':>10} {'speedup':>8}")
    for name, fn in calls.items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        if _ckernels is None:
            print(f"{name:<12} {t_py * 1e3:>8.2f}ms {'n/a':>10}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:<12} {t_py * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
