"""Mean-field posterior over predicates, parameterised by a two-layer GCN.

Node features are the sensor confidence times a learned per-predicate
embedding. Two graph convolutions (symmetric-normalised adjacency with
self-loops, ReLU) feed a shared linear readout that gives one logit per
predicate. Ungrouped predicates are Bernoulli(sigmoid(logit)); each
exclusion group is a categorical over its members' logits.

All routines accept a batch of inputs (leading axis) and the backward pass
is written out by hand for this fixed architecture.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .rules import RuleSet

FORMAT = "mlnsmooth.gcn"
VERSION = 1


@dataclass(frozen=True, eq=False)
class PredicateGraph:
    adjacency: np.ndarray  # binary, symmetric, self-loops
    norm_adj: np.ndarray
    groups: tuple[np.ndarray, ...] = ()

    @property
    def L(self) -> int:
        return self.adjacency.shape[0]

    @property
    def ungrouped(self) -> np.ndarray:
        mask = np.ones(self.L, dtype=bool)
        for g in self.groups:
            mask[g] = False
        return mask


def build_graph(rules: RuleSet) -> PredicateGraph:
    """Connect predicates that co-occur in a formula; add self-loops."""
    L = rules.n_predicates
    adj = np.eye(L, dtype=np.uint8)
    for f in rules.formulas:
        ids = np.asarray(f.predicates)
        adj[np.ix_(ids, ids)] = 1
    deg = adj.sum(axis=1).astype(np.float64)
    dinv = 1.0 / np.sqrt(deg)
    norm = adj * dinv[:, None] * dinv[None, :]
    return PredicateGraph(adj, norm, tuple(rules.group_ids))


@dataclass
class GcnParams:
    mu: np.ndarray  # (L, d) node embeddings
    W1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, h)
    b2: np.ndarray  # (h,)
    u: np.ndarray  # (h,) readout

    @classmethod
    def init(cls, L: int, d: int = 32, h: int = 32, seed=0) -> "GcnParams":
        rng = np.random.default_rng(seed)
        mu = rng.normal(0.0, 1.0 / np.sqrt(d), size=(L, d))
        W1 = rng.uniform(-1, 1, size=(d, h)) / np.sqrt(d)
        W2 = rng.uniform(-1, 1, size=(h, h)) / np.sqrt(h)
        u = rng.uniform(-1, 1, size=h) / np.sqrt(h)
        return cls(mu, W1, np.zeros(h), W2, np.zeros(h), u)

    @classmethod
    def zeros_like(cls, other: "GcnParams") -> "GcnParams":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mu.shape[0], self.mu.shape[1], self.W1.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflat(self, vec) -> "GcnParams":
        out, k = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[k : k + a.size], dtype=np.float64).reshape(a.shape))
            k += a.size
        return GcnParams(*out)

    def copy(self) -> "GcnParams":
        return GcnParams(*(a.copy() for a in self.arrays()))

    def axpy(self, alpha: float, other: "GcnParams") -> "GcnParams":
        return GcnParams(*(a + alpha * b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, alpha: float) -> "GcnParams":
        return GcnParams(*(alpha * a for a in self.arrays()))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True, eq=False)
class MeanFieldDist:
    q: np.ndarray
    groups: tuple = ()
    logits: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "groups", tuple(np.asarray(g, dtype=np.intp) for g in self.groups))

    @property
    def L(self) -> int:
        return self.q.shape[-1]

    @property
    def ungrouped(self) -> np.ndarray:
        mask = np.ones(self.L, dtype=bool)
        for g in self.groups:
            mask[g] = False
        return mask


@dataclass(frozen=True)
class SampleBatch:
    worlds: np.ndarray  # (S, L) uint8
    logq: np.ndarray  # (S,)


# ------------------------------------------------------------------ forward


def _propagate(norm_adj: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``norm_adj @ X[b]`` for every batch entry, as one GEMM."""
    B, L, k = X.shape
    Y = norm_adj @ X.transpose(1, 0, 2).reshape(L, B * k)
    return Y.reshape(L, B, k).transpose(1, 0, 2)


def forward_batch(params: GcnParams, graph: PredicateGraph, Z):
    """Logits for a batch of confidence vectors ``Z`` (B, L) plus a cache."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    L = graph.L
    if Z.shape[1] != L or params.mu.shape[0] != L:
        raise ValueError(f"dimension mismatch: z {Z.shape}, graph L={L}, mu {params.mu.shape}")
    M = Z[:, :, None] * params.mu[None]
    S0 = _propagate(graph.norm_adj, M)
    P1 = S0 @ params.W1 + params.b1
    H1 = np.maximum(P1, 0.0)
    S1 = _propagate(graph.norm_adj, H1)
    P2 = S1 @ params.W2 + params.b2
    H2 = np.maximum(P2, 0.0)
    logits = H2 @ params.u
    return logits, (Z, S0, P1, S1, P2, H2)


def probs_from_logits(logits: np.ndarray, groups) -> np.ndarray:
    q = expit(logits)
    for g in groups:
        q[..., g] = softmax(logits[..., g], axis=-1)
    return q


def forward(params: GcnParams, graph: PredicateGraph, z) -> MeanFieldDist:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("forward takes one confidence vector; use forward_batch")
    logits, _ = forward_batch(params, graph, z[None])
    return MeanFieldDist(probs_from_logits(logits[0], graph.groups), graph.groups, logits[0])


def backward(params: GcnParams, graph: PredicateGraph, cache, g_logits) -> GcnParams:
    """Parameter gradient of ``sum_b g_logits[b] . logits[b]``."""
    Z, S0, P1, S1, P2, H2 = cache
    G = np.atleast_2d(g_logits)
    A = graph.norm_adj  # symmetric
    du = np.einsum("blh,bl->h", H2, G)
    dP2 = G[:, :, None] * params.u[None, None, :] * (P2 > 0)
    db2 = dP2.sum(axis=(0, 1))
    dW2 = np.einsum("blh,blk->hk", S1, dP2)
    dP1 = _propagate(A, dP2 @ params.W2.T) * (P1 > 0)
    db1 = dP1.sum(axis=(0, 1))
    dW1 = np.einsum("bld,blh->dh", S0, dP1)
    dM = _propagate(A, dP1 @ params.W1.T)
    dmu = np.einsum("bl,bld->ld", Z, dM)
    return GcnParams(dmu, dW1, db1, dW2, db2, du)


# ----------------------------------------------------------- distribution ops


def check_group_consistent(worlds, groups) -> None:
    for g in groups:
        if np.any(np.asarray(worlds)[..., g].sum(axis=-1) != 1):
            raise ValueError(f"world violates exclusion group {np.asarray(g).tolist()}")


def log_prob(dist: MeanFieldDist, world):
    """Log mass of one world or a batch ``(S, L)`` under ``dist``."""
    T = np.asarray(world)
    single = T.ndim == 1
    T = np.atleast_2d(T).astype(np.float64)
    check_group_consistent(T, dist.groups)
    mask = dist.ungrouped
    if dist.logits is not None:
        lg = np.asarray(dist.logits)
        lp1, lp0 = -np.logaddexp(0.0, -lg), -np.logaddexp(0.0, lg)
    else:
        with np.errstate(divide="ignore"):
            lp1, lp0 = np.log(dist.q), np.log1p(-dist.q)
    bern = np.where(T[:, mask] > 0, lp1[mask], lp0[mask])
    out = bern.sum(axis=1) if bern.size else np.zeros(T.shape[0])
    for g in dist.groups:
        if dist.logits is not None:
            lsm = log_softmax(np.asarray(dist.logits)[g])
        else:
            with np.errstate(divide="ignore"):
                lsm = np.log(dist.q[g])
        out = out + np.where(T[:, g] > 0, lsm, 0.0).sum(axis=1)
    return float(out[0]) if single else out


def logit_score(dist: MeanFieldDist, worlds) -> np.ndarray:
    """``d log Q(t) / d logits`` for each world: ``t - q`` (Bernoulli and
    categorical heads alike, since ``q`` is the group softmax in a group)."""
    T = np.atleast_2d(np.asarray(worlds, dtype=np.float64))
    return T - dist.q[None, :]


def grad_log_prob(params: GcnParams, graph: PredicateGraph, z, world) -> GcnParams:
    """Exact gradient of ``log Q_theta(world)`` over every parameter."""
    logits, cache = forward_batch(params, graph, np.asarray(z, dtype=np.float64)[None])
    dist = MeanFieldDist(probs_from_logits(logits[0], graph.groups), graph.groups, logits[0])
    check_group_consistent(np.asarray(world)[None], graph.groups)
    return backward(params, graph, cache, logit_score(dist, world))


def sample(dist: MeanFieldDist, rng: np.random.Generator, S: int,
           stratified: bool = False) -> SampleBatch:
    """Draw ``S`` group-consistent worlds.

    With ``stratified=True`` every coordinate uses a randomly permuted
    stratified uniform (Latin hypercube): each world is still an exact draw
    from ``dist`` but empirical marginals are within ``1/S`` of ``q``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    L = dist.L
    n_coord = L
    if stratified:
        U = (rng.permuted(np.tile(np.arange(S), (n_coord, 1)), axis=1).T
             + rng.random((S, n_coord))) / S
    else:
        U = rng.random((S, n_coord))
    mask = dist.ungrouped
    worlds = np.zeros((S, L), dtype=np.uint8)
    worlds[:, mask] = U[:, mask] < dist.q[mask]
    for g in dist.groups:
        cdf = np.cumsum(dist.q[g])
        # one uniform per group: reuse the column of the group's first member
        k = np.searchsorted(cdf, U[:, g[0]] * cdf[-1], side="right")
        k = np.minimum(k, len(g) - 1)
        worlds[np.arange(S), g[k]] = 1
    return SampleBatch(worlds, np.atleast_1d(log_prob(dist, worlds)))


def marginal(dist: MeanFieldDist, i: int) -> float:
    if not 0 <= i < dist.L:
        raise IndexError(i)
    return float(dist.q[i])


def entropy(dist: MeanFieldDist) -> float:
    q = dist.q
    mask = dist.ungrouped
    with np.errstate(divide="ignore", invalid="ignore"):
        qm = q[mask]
        h = -np.sum(np.where(qm > 0, qm * np.log(qm), 0.0))
        h -= np.sum(np.where(qm < 1, (1 - qm) * np.log1p(-qm), 0.0))
        for g in dist.groups:
            qg = q[g]
            h -= np.sum(np.where(qg > 0, qg * np.log(qg), 0.0))
    return float(h)


# ------------------------------------------------------------ serialization


def save_params(path, params: GcnParams, graph: PredicateGraph, extra: dict | None = None) -> None:
    L, d, h = params.dims
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "dims": {"L": L, "d": d, "h": h},
        "groups": [g.tolist() for g in graph.groups],
        "params": {
            f.name: {"shape": list(a.shape), "data": a.ravel().tolist()}
            for f, a in zip(fields(params), params.arrays())
        },
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def params_from_doc(doc: dict, rules: RuleSet | None = None) -> GcnParams:
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ValueError(f"unsupported model file format {doc.get('format')!r} v{doc.get('version')}")
    dims = doc["dims"]
    arrays = []
    for f in fields(GcnParams):
        ent = doc["params"][f.name]
        arrays.append(np.asarray(ent["data"], dtype=np.float64).reshape(ent["shape"]))
    params = GcnParams(*arrays)
    if params.dims != (dims["L"], dims["d"], dims["h"]):
        raise ValueError("parameter shapes disagree with recorded dims")
    if rules is not None:
        if dims["L"] != rules.n_predicates:
            raise ValueError(f"model has L={dims['L']} but rules declare {rules.n_predicates}")
        if [list(ids) for _, ids in rules.groups] != doc["groups"]:
            raise ValueError("model group table does not match the rules")
    return params


def load_params(path, rules: RuleSet | None = None) -> GcnParams:
    return params_from_doc(json.loads(Path(path).read_text()), rules)
