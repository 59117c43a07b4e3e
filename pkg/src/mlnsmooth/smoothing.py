"""Randomized smoothing: Monte-Carlo prediction and l2 certification.

A *classifier* here is any callable mapping a batch of inputs ``(n, D)`` to
integer class indices ``(n,)``. Gaussian noise is added to the raw input,
so when the classifier is the whole sensing-plus-reasoning pipeline the
certificate covers the pipeline end to end.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np
from scipy.stats import beta, binomtest

ABSTAIN = -1
P_CLAMP = 1e-12

Classifier = Callable[[np.ndarray], np.ndarray]

_STD = NormalDist()


def norm_ppf(p: float) -> float:
    """Standard normal quantile."""
    return _STD.inv_cdf(p)


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    batch: int = 1000

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n0 < 1 or self.n < 1 or self.batch < 1:
            raise ValueError("n0, n and batch must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class CertResult:
    prediction: int
    pA_lower: float
    radius: float

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN


def radius(pA: float, pB: float, sigma: float) -> float:
    """``sigma / 2 * (Phi^-1(pA) - Phi^-1(pB))``."""
    if pA < pB:
        raise ValueError("pA must be >= pB")
    pA = min(max(pA, P_CLAMP), 1 - P_CLAMP)
    pB = min(max(pB, P_CLAMP), 1 - P_CLAMP)
    return sigma / 2 * (norm_ppf(pA) - norm_ppf(pB))


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided ``1 - alpha`` lower confidence bound on a binomial rate."""
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    if k == 0:
        return 0.0
    return float(beta.ppf(alpha, k, n - k + 1))


def sample_counts(classifier: Classifier, x, sigma: float, num: int,
                  rng: np.random.Generator, batch: int = 1000) -> dict[int, int]:
    """Class vote counts of ``classifier`` over ``num`` noisy copies of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    counts: dict[int, int] = {}
    left = num
    while left > 0:
        m = min(batch, left)
        noisy = x[None, :] + rng.normal(0.0, sigma, size=(m,) + x.shape)
        labels, c = np.unique(np.asarray(classifier(noisy)), return_counts=True)
        for lab, cnt in zip(labels.tolist(), c.tolist()):
            counts[lab] = counts.get(lab, 0) + cnt
        left -= m
    return counts


def _top(counts: dict[int, int]) -> list[tuple[int, int]]:
    # highest count first, ties to the lower class index
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def certify(classifier: Classifier, x, config: SmoothingConfig,
            rng: np.random.Generator) -> CertResult:
    """Select the top class on ``n0`` draws, then bound its mass with ``n`` fresh draws."""
    sel = sample_counts(classifier, x, config.sigma, config.n0, rng, config.batch)
    c_hat = _top(sel)[0][0]
    est = sample_counts(classifier, x, config.sigma, config.n, rng, config.batch)
    p_lower = clopper_pearson_lower(est.get(c_hat, 0), config.n, config.alpha)
    if p_lower <= 0.5:
        return CertResult(ABSTAIN, p_lower, 0.0)
    return CertResult(int(c_hat), p_lower, config.sigma * norm_ppf(min(p_lower, 1 - P_CLAMP)))


def predict_smoothed(classifier: Classifier, x, config: SmoothingConfig,
                     rng: np.random.Generator) -> int:
    """Majority vote over ``n`` noisy draws, abstaining when the top two are not separated."""
    top = _top(sample_counts(classifier, x, config.sigma, config.n, rng, config.batch))
    nA = top[0][1]
    nB = top[1][1] if len(top) > 1 else 0
    if binomtest(nA, nA + nB, 0.5).pvalue > config.alpha:
        return ABSTAIN
    return int(top[0][0])


@dataclass(frozen=True)
class Curve:
    results: tuple[CertResult, ...]
    correct: np.ndarray  # bool per example
    grid: np.ndarray
    accuracy: np.ndarray  # certified accuracy at each grid radius
    acr: float


def build_curve(results: Sequence[CertResult], labels, grid) -> Curve:
    """Certified accuracy on ``grid`` and the average certified radius."""
    if len(results) == 0:
        raise ValueError("no certification results")
    labels = np.asarray(labels)
    if labels.shape != (len(results),):
        raise ValueError("one label per result required")
    pred = np.array([r.prediction for r in results])
    rad = np.array([r.radius for r in results], dtype=np.float64)
    correct = (pred == labels) & (pred != ABSTAIN)
    grid = np.asarray(grid, dtype=np.float64)
    acc = np.array([np.mean(correct & (rad >= r)) for r in grid])
    acr = float(np.mean(np.where(correct, rad, 0.0)))
    return Curve(tuple(results), correct, grid, acc, acr)


def write_results_jsonl(path, results: Sequence[CertResult], labels) -> None:
    with open(path, "w") as fh:
        for i, (r, lab) in enumerate(zip(results, labels)):
            rec = {"index": i, "label": int(lab), "prediction": r.prediction,
                   "pA_lower": r.pA_lower, "radius": r.radius}
            fh.write(json.dumps(rec) + "\n")


def read_results_jsonl(path) -> tuple[list[CertResult], np.ndarray]:
    results, labels = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                results.append(CertResult(int(d["prediction"]), float(d["pA_lower"]),
                                           float(d["radius"])))
                labels.append(int(d["label"]))
    return results, np.array(labels, dtype=np.int64)


def write_curves_csv(path, curves: dict[str, Curve]) -> None:
    """One row per pipeline: certified accuracy at each grid radius, then ACR."""
    grids = {tuple(c.grid.tolist()) for c in curves.values()}
    if len(grids) != 1:
        raise ValueError("all curves must share one radius grid")
    grid = next(iter(grids))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pipeline"] + [f"r={r:g}" for r in grid] + ["ACR"])
        for name, c in curves.items():
            wr.writerow([name] + [f"{a:.17g}" for a in c.accuracy] + [f"{c.acr:.17g}"])
