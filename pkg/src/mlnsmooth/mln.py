"""Markov logic network over one grounded input.

The joint is ``P(t) ∝ exp(w . Neg(A t + B) + s . t)`` where ``s`` are
per-example sensor log-odds. Exclusion groups are hard constraints: only
worlds with exactly one true predicate per group are in the support.

Exact routines enumerate the support and are meant for small models
(verification and diagnostics). The pseudo-likelihood routines scale to
any size and drive weight learning.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .rules import (
    CompiledRuleSet,
    RuleSet,
    compile_rules,
    neg_indicator,
    score,
    truth_values,
)

CONF_EPS = 1e-7
DEFAULT_CAP = 1 << 20
_CHUNK = 1 << 16


class StateSpaceTooLarge(RuntimeError):
    pass


def sensor_weights(z) -> np.ndarray:
    """Log-odds of clamped confidences."""
    z = np.clip(np.asarray(z, dtype=np.float64), CONF_EPS, 1.0 - CONF_EPS)
    return np.log(z) - np.log1p(-z)


def _as_groups(groups) -> tuple[np.ndarray, ...]:
    return tuple(np.asarray(g, dtype=np.intp) for g in (groups or ()))


@dataclass(frozen=True, eq=False)
class MlnModel:
    compiled: CompiledRuleSet
    sensor_weights: np.ndarray
    groups: tuple = ()

    def __post_init__(self):
        s = np.array(self.sensor_weights, dtype=np.float64).reshape(-1)
        if s.shape != (self.compiled.n_predicates,):
            raise ValueError(
                f"sensor weights have length {s.size}, expected {self.compiled.n_predicates}"
            )
        if not np.all(np.isfinite(s)):
            raise ValueError("sensor weights must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "sensor_weights", s)
        object.__setattr__(self, "groups", _as_groups(self.groups))
        mask = np.ones(self.L, dtype=np.uint8)
        for g in self.groups:
            mask[g] = 0
        object.__setattr__(self, "ungrouped", mask)

    @classmethod
    def from_rules(cls, rules: RuleSet, z=None, compiled: CompiledRuleSet | None = None):
        compiled = compiled if compiled is not None else compile_rules(rules)
        s = np.zeros(rules.n_predicates) if z is None else sensor_weights(z)
        return cls(compiled, s, rules.group_ids)

    @property
    def L(self) -> int:
        return self.compiled.n_predicates

    def with_weights(self, w) -> "MlnModel":
        return MlnModel(self.compiled.with_weights(w), self.sensor_weights, self.groups)

    def state_count(self) -> int:
        n = 1 << int(self.ungrouped.sum())
        for g in self.groups:
            n *= len(g)
        return n


def check_world(world, groups, L: int | None = None) -> np.ndarray:
    t = np.asarray(world)
    if L is not None and t.shape[-1] != L:
        raise ValueError(f"world length {t.shape[-1]} != {L}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("world entries must be 0/1")
    for g in _as_groups(groups):
        if np.any(t[..., g].sum(axis=-1) != 1):
            raise ValueError(f"world violates exclusion group {g.tolist()}")
    return t.astype(np.uint8)


def enumerate_worlds(L: int, groups=(), cap: int = DEFAULT_CAP):
    """Yield chunks of group-consistent worlds (uint8 arrays, fixed order)."""
    groups = _as_groups(groups)
    slot_of = np.full(L, -1)
    for k, g in enumerate(groups):
        slot_of[g] = k
    # each "digit" is a free bit or a group choice
    digits: list[tuple[str, np.ndarray]] = []
    seen = set()
    for i in range(L):
        k = slot_of[i]
        if k < 0:
            digits.append(("bit", np.array([i])))
        elif k not in seen:
            seen.add(k)
            digits.append(("grp", groups[k]))
    radices = [2 if kind == "bit" else len(ids) for kind, ids in digits]
    total = int(np.prod(radices, dtype=object)) if radices else 1
    if total > cap:
        raise StateSpaceTooLarge(f"{total} worlds exceed the enumeration cap {cap}")
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total))
        out = np.zeros((idx.size, L), dtype=np.uint8)
        rem = idx.copy()
        for (kind, ids), r in zip(reversed(digits), reversed(radices)):
            d = rem % r
            rem //= r
            if kind == "bit":
                out[:, ids[0]] = d
            else:
                out[np.arange(idx.size), ids[::-1][d]] = 1
        yield out


def all_worlds(L: int, groups=(), cap: int = DEFAULT_CAP) -> np.ndarray:
    chunks = list(enumerate_worlds(L, groups, cap))
    return np.concatenate(chunks) if chunks else np.zeros((0, L), dtype=np.uint8)


def log_unnormalized(model: MlnModel, world):
    return score(model.compiled, world, model.sensor_weights)


def log_partition(model: MlnModel, cap: int = DEFAULT_CAP) -> float:
    parts = [
        logsumexp(log_unnormalized(model, chunk))
        for chunk in enumerate_worlds(model.L, model.groups, cap)
    ]
    return float(logsumexp(parts))


def partition_exact(model: MlnModel, cap: int = DEFAULT_CAP) -> float:
    return float(np.exp(log_partition(model, cap)))


def joint_exact(model: MlnModel, cap: int = DEFAULT_CAP) -> tuple[np.ndarray, np.ndarray]:
    """All support worlds and their normalized probabilities."""
    worlds = all_worlds(model.L, model.groups, cap)
    lu = log_unnormalized(model, worlds)
    return worlds, np.exp(lu - logsumexp(lu))


def marginals_exact(model: MlnModel, cap: int = DEFAULT_CAP) -> np.ndarray:
    logz = log_partition(model, cap)
    acc = np.zeros(model.L)
    for chunk in enumerate_worlds(model.L, model.groups, cap):
        p = np.exp(log_unnormalized(model, chunk) - logz)
        acc += p @ chunk
    return acc


def map_exact(model: MlnModel, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Most probable world; ties go to the lexicographically smallest."""
    best, ties = -np.inf, []
    for chunk in enumerate_worlds(model.L, model.groups, cap):
        lu = log_unnormalized(model, chunk)
        top = lu.max()
        tol = 1e-12 * max(1.0, abs(top))
        if top > best + tol:
            best, ties = top, []
        if top >= best - tol:
            ties.extend(chunk[lu >= best - tol])
    return min(ties, key=lambda t: tuple(t.tolist())).copy()


def conditional(model: MlnModel, world, i: int) -> float:
    """``P(t_i = 1 | rest)`` from the clauses in predicate ``i``'s blanket."""
    if not model.ungrouped[i]:
        raise ValueError(f"predicate {i} belongs to an exclusion group")
    t = np.asarray(world, dtype=np.uint8)
    rows = model.compiled.formulas_of(i)
    t1, t0 = t.copy(), t.copy()
    t1[i], t0[i] = 1, 0
    sub = model.compiled
    act1 = sub.A[rows] @ t1 + sub.B[rows]
    act0 = sub.A[rows] @ t0 + sub.B[rows]
    delta = model.sensor_weights[i] + sub.w[rows] @ (
        neg_indicator(act1).astype(float) - neg_indicator(act0)
    )
    return float(0.5 * (1.0 + np.tanh(0.5 * delta)))


def _pll(model: MlnModel, worlds):
    T = np.ascontiguousarray(np.atleast_2d(worlds), dtype=np.uint8)
    if T.shape[1] != model.L:
        raise ValueError(f"world length {T.shape[1]} != {model.L}")
    c = model.compiled
    return kernels.pll_batch(*c._csr, c.B, c.w, model.sensor_weights, T, model.ungrouped)


def pseudo_log_likelihood(model: MlnModel, world):
    """Sum over ungrouped predicates of ``log P(t_i = world_i | blanket)``."""
    pll, _ = _pll(model, world)
    return float(pll[0]) if np.ndim(world) == 1 else pll


def pll_weight_gradient(model: MlnModel, world):
    """Derivative of :func:`pseudo_log_likelihood` w.r.t. the formula weights.

    For formula ``f``: sum over ungrouped ``i`` in ``f`` of
    ``f(t) - P(t_i=0|MB) f([t_i=0]) - P(t_i=1|MB) f([t_i=1])``. Grouped
    predicates keep their observed values and contribute no flip term.
    """
    _, grad = _pll(model, world)
    return grad[0] if np.ndim(world) == 1 else grad


def dump_table_csv(model: MlnModel, path, names: Sequence[str] | None = None,
                   cap: int = DEFAULT_CAP) -> None:
    worlds, probs = joint_exact(model, cap)
    scores = log_unnormalized(model, worlds)
    truth = truth_values(model.compiled, worlds)
    names = list(names) if names is not None else [f"t{i}" for i in range(model.L)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(names + [f"f{k}" for k in range(truth.shape[1])] + ["score", "prob"])
        for t, f, s, p in zip(worlds, truth, scores, probs):
            wr.writerow([*map(int, t), *map(int, f), f"{s:.17g}", f"{p:.17g}"])
