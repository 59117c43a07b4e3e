"""Synthetic classes-with-attributes tasks, small sensors, and attacks.

Predicates are laid out as ``C`` classes (one exclusion group), then ``A``
attributes, then the ``C - 1`` internal nodes of a balanced binary class
hierarchy. Inputs are Gaussian blobs around per-class prototypes.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_softmax, softmax

from .rules import Formula, Kind, Literal, PredicateDecl, RuleSet

CLASS_GROUP = "cls"


@dataclass(frozen=True)
class TaskSpec:
    C: int = 10
    A: int = 12
    D: int = 20
    attr_prob: float = 0.4
    proto_scale: float = 1.0
    # mix of attribute-aligned directions in each prototype (0 = pure Gaussian)
    attr_share: float = 1.0
    noise: float = 0.3
    n_train: int = 20  # per class
    n_test: int = 20  # per class
    seed: int = 0

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("need at least two classes")
        if self.A < 1 or self.D < 1:
            raise ValueError("A and D must be positive")
        if not 0 < self.attr_prob < 1:
            raise ValueError("attr_prob must lie in (0, 1)")
        if self.A < 64 and 2**self.A - 1 < self.C:
            raise ValueError("too few attributes for distinct class rows")
        if self.noise < 0 or self.proto_scale <= 0 or not 0 <= self.attr_share <= 1:
            raise ValueError("bad scale parameters")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")


@dataclass
class Tree:
    """Internal nodes of a class hierarchy; a child id ``< C`` is a class."""

    C: int
    children: list[tuple[int, ...]]  # per internal node, child ids; node k has id C + k

    def descendants(self, node: int) -> set[int]:
        out: set[int] = set()
        for ch in self.children[node]:
            if ch < self.C:
                out.add(ch)
            else:
                out |= self.descendants(ch - self.C)
        return out

    def membership(self) -> np.ndarray:
        """``(C, n_nodes)`` bit matrix: class descends from node."""
        m = np.zeros((self.C, len(self.children)), dtype=np.uint8)
        for k in range(len(self.children)):
            m[sorted(self.descendants(k)), k] = 1
        return m


def balanced_tree(C: int) -> Tree:
    children: list[tuple[int, ...]] = []

    def build(classes: list[int]) -> int:
        if len(classes) == 1:
            return classes[0]
        k = len(children)
        children.append(())
        mid = (len(classes) + 1) // 2
        children[k] = (build(classes[:mid]), build(classes[mid:]))
        return C + k

    build(list(range(C)))
    return Tree(C, children)


@dataclass
class Task:
    spec: TaskSpec
    M: np.ndarray  # (C, A) class-attribute bits
    tree: Tree
    prototypes: np.ndarray  # (C, D)

    @property
    def n_nodes(self) -> int:
        return len(self.tree.children)

    @property
    def L(self) -> int:
        return self.spec.C + self.spec.A + self.n_nodes

    def truth_world(self, label) -> np.ndarray:
        """Ground-truth worlds for one label or an array of labels."""
        lab = np.atleast_1d(np.asarray(label, dtype=np.int64))
        W = np.zeros((lab.size, self.L), dtype=np.uint8)
        W[np.arange(lab.size), lab] = 1
        W[:, self.spec.C : self.spec.C + self.spec.A] = self.M[lab]
        W[:, self.spec.C + self.spec.A :] = self.tree.membership()[lab]
        return W[0] if np.ndim(label) == 0 else W

    def prototype_separation(self) -> float:
        P = self.prototypes
        d = np.linalg.norm(P[:, None] - P[None], axis=-1)
        return float(d[np.triu_indices(len(P), 1)].mean())


@dataclass
class Dataset:
    X: np.ndarray  # (N, D)
    y: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.y)


def _attribute_matrix(spec: TaskSpec, rng) -> np.ndarray:
    while True:
        M = (rng.random((spec.C, spec.A)) < spec.attr_prob).astype(np.uint8)
        if M.sum(axis=1).min() >= 1 and len({r.tobytes() for r in M}) == spec.C:
            return M


def make_task(spec: TaskSpec) -> Task:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    M = _attribute_matrix(spec, rng)
    own = rng.normal(0.0, 1.0, size=(spec.C, spec.D))
    if spec.attr_share > 0:
        # unit attribute directions, orthonormal whenever A <= D
        G = rng.normal(0.0, 1.0, size=(spec.D, spec.A))
        if spec.A <= spec.D:
            E = np.linalg.qr(G)[0].T
        else:
            E = (G / np.linalg.norm(G, axis=0)).T
        own = np.sqrt(1 - spec.attr_share) * own + np.sqrt(spec.attr_share) * (M @ E)
    return Task(spec, M, balanced_tree(spec.C), spec.proto_scale * own)


def _draw(task: Task, per_class: int, rng) -> Dataset:
    C = task.spec.C
    y = np.repeat(np.arange(C), per_class)
    X = task.prototypes[y] + rng.normal(0.0, task.spec.noise, size=(y.size, task.spec.D))
    return Dataset(X, y)


def gen_task(spec: TaskSpec) -> tuple[Task, Dataset, Dataset]:
    """Task plus balanced train and test sets, fully determined by ``spec.seed``."""
    task = make_task(spec)
    train = _draw(task, spec.n_train, np.random.default_rng(np.random.SeedSequence([spec.seed, 1])))
    test = _draw(task, spec.n_test, np.random.default_rng(np.random.SeedSequence([spec.seed, 2])))
    return task, train, test


def predicate_names(task: Task) -> list[str]:
    s = task.spec
    return ([f"cls{c}" for c in range(s.C)] + [f"attr{a}" for a in range(s.A)]
            + [f"node{k}" for k in range(task.n_nodes)])


def rules_from_task(task: Task, attr_weight: float = 1.0, node_weight: float = 1.0) -> RuleSet:
    s = task.spec
    names = predicate_names(task)
    preds = tuple(
        PredicateDecl(i, n, CLASS_GROUP if i < s.C else None) for i, n in enumerate(names)
    )
    formulas = []
    for c in range(s.C):
        for a in np.flatnonzero(task.M[c]):
            formulas.append(Formula(Kind.IMPLIES_ALL, Literal(c), (Literal(s.C + int(a)),),
                                    attr_weight))
    node_base = s.C + s.A
    for k, ch in enumerate(task.tree.children):
        body = tuple(Literal(c if c < s.C else node_base + c - s.C) for c in ch)
        formulas.append(Formula(Kind.IMPLIES_ANY, Literal(node_base + k), body, node_weight))
    return RuleSet(preds, tuple(formulas))


# ------------------------------------------------------------------ sensors


@dataclass
class Sensor:
    """Softmax (``multiclass``) or logistic (``binary``) model, optionally one hidden layer."""

    kind: str
    W: np.ndarray  # (D, k) or (H, k) after the hidden layer
    b: np.ndarray
    V: np.ndarray | None = None  # (D, H)
    c: np.ndarray | None = None
    sigma_train: float = 0.0

    @property
    def hidden(self) -> int:
        return 0 if self.V is None else self.V.shape[1]

    def _features(self, X):
        if self.V is None:
            return X, None
        pre = X @ self.V + self.c
        return np.tanh(pre), pre

    def logits(self, X) -> np.ndarray:
        H, _ = self._features(np.atleast_2d(X))
        out = H @ self.W + self.b
        return out[:, 0] if self.kind == "binary" else out

    def predict_proba(self, X) -> np.ndarray:
        lg = self.logits(X)
        return expit(lg) if self.kind == "binary" else softmax(lg, axis=1)

    def target_grad(self, X, target) -> tuple[np.ndarray, np.ndarray]:
        """Confidence of ``target`` per row and its gradient w.r.t. the input."""
        X = np.atleast_2d(X)
        H, _ = self._features(X)
        out = H @ self.W + self.b
        if self.kind == "binary":
            p = expit(out[:, 0])
            conf = p if target == 1 else 1 - p
            sign = 1.0 if target == 1 else -1.0
            g_out = (sign * p * (1 - p))[:, None]
        else:
            P = softmax(out, axis=1)
            conf = P[:, target]
            onehot = np.zeros(P.shape[1])
            onehot[target] = 1.0
            g_out = conf[:, None] * (onehot[None] - P)
        g_H = g_out @ self.W.T
        if self.V is None:
            return conf, g_H
        return conf, (g_H * (1 - H**2)) @ self.V.T

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "sigma_train": self.sigma_train,
             "W": self.W.tolist(), "b": self.b.tolist()}
        if self.V is not None:
            d["V"] = self.V.tolist()
            d["c"] = self.c.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Sensor":
        arr = lambda k: None if k not in d else np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(d["kind"], arr("W"), arr("b"), arr("V"), arr("c"), float(d["sigma_train"]))


def train_sensor(X, target, kind: str, sigma_train: float = 0.0, *, hidden: int = 0,
                 copies: int = 8, l2: float = 1e-3, max_iter: int = 500, seed=0,
                 n_classes: int | None = None) -> Sensor:
    """Fit on ``copies`` Gaussian-perturbed replicas of ``X`` by L-BFGS.

    ``target`` holds class indices for ``multiclass`` and 0/1 bits for
    ``binary``. The replicas are drawn once from ``seed``.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(target, dtype=np.int64)
    if len(X) == 0 or len(X) != len(t):
        raise ValueError("need a non-empty dataset with one target per row")
    if kind not in ("multiclass", "binary"):
        raise ValueError(f"unknown sensor kind {kind!r}")
    rng = np.random.default_rng(seed)
    if sigma_train > 0:
        Xa = np.concatenate([X + rng.normal(0.0, sigma_train, X.shape) for _ in range(copies)])
        ta = np.tile(t, copies)
    else:
        Xa, ta = X, t
    N, D = Xa.shape
    if kind == "multiclass":
        k = max(n_classes or int(t.max()) + 1, 2)
    else:
        k = 1
    H = hidden
    shapes = [(D, H), (H,), (H, k), (k,)] if H else [(D, k), (k,)]
    sizes = [int(np.prod(s)) for s in shapes]

    def unpack(theta):
        out, o = [], 0
        for s, n in zip(shapes, sizes):
            out.append(theta[o : o + n].reshape(s))
            o += n
        return out

    Y = np.eye(k)[ta] if kind == "multiclass" else None

    def loss_grad(theta):
        parts = unpack(theta)
        if H:
            V, c, W, b = parts
            Z = np.tanh(Xa @ V + c)
        else:
            W, b = parts
            Z = Xa
        out = Z @ W + b
        if kind == "multiclass":
            lsm = log_softmax(out, axis=1)
            loss = -np.sum(lsm[np.arange(N), ta]) / N
            g_out = (np.exp(lsm) - Y) / N
        else:
            o = out[:, 0]
            loss = np.sum(np.logaddexp(0.0, o) - ta * o) / N
            g_out = ((expit(o) - ta) / N)[:, None]
        gW = Z.T @ g_out + l2 * W
        gb = g_out.sum(axis=0)
        loss += 0.5 * l2 * np.sum(W * W)
        if not H:
            return loss, np.concatenate([gW.ravel(), gb])
        gZ = (g_out @ W.T) * (1 - Z**2)
        gV = Xa.T @ gZ + l2 * V
        loss += 0.5 * l2 * np.sum(V * V)
        return loss, np.concatenate([gV.ravel(), gZ.sum(axis=0), gW.ravel(), gb])

    init = np.zeros(sum(sizes))
    if H:
        init[: sizes[0]] = rng.normal(0.0, 1.0 / np.sqrt(D), sizes[0])
    res = minimize(loss_grad, init, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        raise FloatingPointError("sensor training diverged")
    parts = unpack(res.x)
    if H:
        V, c, W, b = parts
        return Sensor(kind, W.copy(), b.copy(), V.copy(), c.copy(), sigma_train)
    W, b = parts
    return Sensor(kind, W.copy(), b.copy(), None, None, sigma_train)


@dataclass
class SensorBank:
    """The main sensor followed by one binary sensor per attribute and node predicate."""

    main: Sensor
    knowledge: list[Sensor] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.main.W.shape[1]

    @property
    def L(self) -> int:
        return self.n_classes + len(self.knowledge)

    def sense(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cols = [self.main.predict_proba(X)] + [s.predict_proba(X)[:, None] for s in self.knowledge]
        return np.concatenate(cols, axis=1)

    def to_dict(self) -> dict:
        return {"main": self.main.to_dict(), "knowledge": [s.to_dict() for s in self.knowledge]}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorBank":
        return cls(Sensor.from_dict(d["main"]), [Sensor.from_dict(s) for s in d["knowledge"]])


def train_sensors(task: Task, data: Dataset, sigma_train: float, *, hidden_main: int = 0,
                  hidden_knowledge: int = 0, copies: int = 8, seed: int = 0) -> SensorBank:
    """One main sensor over classes plus a sensor per attribute and node."""
    W = task.truth_world(data.y)
    C = task.spec.C
    ss = np.random.SeedSequence([seed, 10]).spawn(task.L - C + 1)
    main = train_sensor(data.X, data.y, "multiclass", sigma_train, hidden=hidden_main,
                        copies=copies, seed=ss[0], n_classes=C)
    know = [
        train_sensor(data.X, W[:, C + j], "binary", sigma_train, hidden=hidden_knowledge,
                     copies=copies, seed=ss[j + 1])
        for j in range(task.L - C)
    ]
    return SensorBank(main, know)


def sense(bank: SensorBank, X, L: int | None = None) -> np.ndarray:
    """Confidence vectors in predicate order."""
    Z = bank.sense(X)
    if L is not None and Z.shape[1] != L:
        raise ValueError(f"sensor bank yields {Z.shape[1]} confidences, rules expect {L}")
    return Z


# ------------------------------------------------------------------ attacks


def _project(delta, eps: float, norm: str):
    if norm == "l2":
        n = np.linalg.norm(delta)
        return delta if n <= eps else delta * (eps / n)
    return np.clip(delta, -eps, eps)


def pgd_attack(sensor: Sensor, x, label: int, eps: float, *, steps: int = 100,
               step_size: float = 0.2, mc_samples: int = 100, sigma: float = 0.0,
               norm: str = "l2", rng: np.random.Generator) -> np.ndarray:
    """Lower the sensor's mean confidence in ``label`` over noisy copies, within an eps-ball."""
    if norm not in ("l2", "linf"):
        raise ValueError(f"unknown norm {norm!r}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    delta = np.zeros_like(x)
    for _ in range(steps):
        noisy = x + delta + (rng.normal(0.0, sigma, (mc_samples,) + x.shape) if sigma > 0
                             else np.zeros((1,) + x.shape))
        _, g = sensor.target_grad(noisy, label)
        g = -g.mean(axis=0)  # ascent direction of the negated confidence
        if norm == "l2":
            n = np.linalg.norm(g)
            if n == 0:
                break
            delta = _project(delta + step_size * g / n, eps, norm)
        else:
            delta = _project(delta + step_size * np.sign(g), eps, norm)
    return x + delta


def corrupt_sensors(Z, n_classes: int, fraction: float, rng: np.random.Generator):
    """Swap the top two main-sensor confidences on ``round(fraction * N)`` rows.

    Returns the corrupted copy and the indices of the altered rows.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    Z = np.array(Z, dtype=np.float64, copy=True)
    k = int(round(fraction * len(Z)))
    idx = np.sort(rng.choice(len(Z), size=k, replace=False)) if k else np.array([], dtype=int)
    for i in idx:
        order = np.argsort(-Z[i, :n_classes], kind="stable")
        a, b = order[0], order[1]
        Z[i, a], Z[i, b] = Z[i, b], Z[i, a]
    return Z, idx


# ------------------------------------------------------------------ I/O


def write_dataset_csv(path, task: Task, data: Dataset) -> None:
    s = task.spec
    W = task.truth_world(data.y)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"x{j}" for j in range(s.D)] + ["label"] + predicate_names(task)[s.C :])
        for x, y, w in zip(data.X, data.y, W):
            wr.writerow([f"{v:.17g}" for v in x] + [int(y)] + w[s.C :].tolist())


def read_dataset_csv(path, D: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    nx = sum(1 for h in head if h.startswith("x") and h[1:].isdigit())
    if D is not None and nx != D:
        raise ValueError(f"dataset has {nx} input columns, expected {D}")
    X = np.array([[float(v) for v in r[:nx]] for r in rows[1:]], dtype=np.float64).reshape(-1, nx)
    y = np.array([int(r[nx]) for r in rows[1:]], dtype=np.int64)
    return Dataset(X, y)


def task_to_dict(task: Task) -> dict:
    return {"spec": asdict(task.spec), "M": task.M.tolist(),
            "tree": [list(c) for c in task.tree.children],
            "prototypes": task.prototypes.tolist()}


def task_from_dict(d: dict) -> Task:
    spec = TaskSpec(**d["spec"])
    return Task(spec, np.asarray(d["M"], dtype=np.uint8),
                Tree(spec.C, [tuple(c) for c in d["tree"]]),
                np.asarray(d["prototypes"], dtype=np.float64))


def save_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
