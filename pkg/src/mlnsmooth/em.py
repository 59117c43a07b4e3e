"""Variational EM: score-function E-step on the GCN, pseudo-likelihood M-step.

E-step ascends ``ELBO(Q) - eta * label_loss(Q)``. The ELBO gradient uses the
score-function identity ``E_Q[(score(t) - log Q(t)) grad log Q(t)]``; every
sample's ``grad log Q`` factors through the logits, so a minibatch needs a
single backward pass through the network.

M-step ascends the expected pseudo-log-likelihood of the formula weights
under worlds drawn from the current posterior.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import meanfield as mf
from .meanfield import GcnParams, MeanFieldDist, PredicateGraph
from .mln import MlnModel, all_worlds, pll_weight_gradient, sensor_weights
from .rules import CompiledRuleSet, RuleSet, compile_rules, score


class DivergenceError(FloatingPointError):
    """A parameter or weight became non-finite during training."""


@dataclass
class TrainConfig:
    epochs: int = 60
    e_steps: int = 1
    m_steps: int = 1
    samples: int = 16
    eta: float = 0.6
    lr_theta: float = 0.01
    lr_theta_late: float = 0.001
    lr_switch: float = 2.0 / 3.0  # fraction of epochs before the late rate
    lr_w: float = 0.05
    seed: int = 0
    batch_size: int = 32
    embed_dim: int = 32
    hidden_dim: int = 32
    baseline: bool = True
    mstep: bool = True
    mstep_stratified: bool = True
    w_clip: float = 20.0
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("e_steps", "m_steps", "samples", "batch_size", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.lr_theta <= 0 or self.lr_theta_late <= 0 or self.lr_w <= 0:
            raise ValueError("learning rates must be positive")
        if self.baseline and self.samples < 2:
            raise ValueError("the sample-mean baseline needs samples >= 2")

    def lr_at(self, epoch: int) -> float:
        return self.lr_theta if epoch < self.lr_switch * self.epochs else self.lr_theta_late

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown training options: {sorted(bad)}")
        return cls(**d)


@dataclass
class Example:
    z: np.ndarray
    truth: np.ndarray | None = None


@dataclass
class TrainedModel:
    params: GcnParams
    w: np.ndarray
    rules: RuleSet
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.graph = mf.build_graph(self.rules)
        self.compiled = compile_rules(self.rules).with_weights(self.w)

    def posterior(self, Z) -> np.ndarray:
        logits, _ = mf.forward_batch(self.params, self.graph, Z)
        return mf.probs_from_logits(logits, self.graph.groups)


# ------------------------------------------------------------------ E-step


def _dist(q_row, logits_row, groups) -> MeanFieldDist:
    return MeanFieldDist(q_row, groups, logits_row)


def elbo_exact(params: GcnParams, graph: PredicateGraph, compiled: CompiledRuleSet, z,
               cap: int = 1 << 16) -> float:
    """``sum_t Q(t) score(t) + H(Q)`` over every group-consistent world."""
    dist = mf.forward(params, graph, z)
    worlds = all_worlds(graph.L, graph.groups, cap)
    logq = mf.log_prob(dist, worlds)
    qw = np.exp(logq)
    sc = score(compiled, worlds, sensor_weights(z))
    return float(qw @ sc - qw @ logq)


def estep_gradient_exact(params, graph, compiled, z, cap: int = 1 << 16) -> GcnParams:
    """Exact expectation of the score-function estimator (no sampling)."""
    logits, cache = mf.forward_batch(params, graph, np.asarray(z, float)[None])
    q = mf.probs_from_logits(logits, graph.groups)[0]
    dist = _dist(q, logits[0], graph.groups)
    worlds = all_worlds(graph.L, graph.groups, cap)
    logq = mf.log_prob(dist, worlds)
    coef = np.exp(logq) * (score(compiled, worlds, sensor_weights(z)) - logq)
    G = coef @ mf.logit_score(dist, worlds)
    return mf.backward(params, graph, cache, G[None])


def _estep_logit_grads(q, logits, graph, compiled, Z, truths, samples, eta, baseline, rng):
    """Per-example ascent direction at the logits, plus ELBO/label stats."""
    B = Z.shape[0]
    G = np.zeros_like(q)
    elbo = np.zeros(B)
    label = np.zeros(B)
    for b in range(B):
        dist = _dist(q[b], logits[b], graph.groups)
        batch = mf.sample(dist, rng, samples)
        c = score(compiled, batch.worlds, sensor_weights(Z[b])) - batch.logq
        elbo[b] = c.mean()
        if baseline:
            # leave-one-out mean: c_s - mean_{j != s} c_j, unbiased for S >= 2
            c = (c - c.mean()) * samples / (samples - 1)
        G[b] = c @ mf.logit_score(dist, batch.worlds) / samples
        if truths is not None and truths[b] is not None:
            t = np.asarray(truths[b], dtype=np.float64)
            label[b] = -mf.log_prob(dist, t)
            if eta:
                G[b] += eta * (t - q[b])
    return G, elbo, label


def estep_gradient(params: GcnParams, graph: PredicateGraph, compiled: CompiledRuleSet, z,
                   truth=None, *, samples: int = 16, eta: float = 0.6, baseline: bool = True,
                   rng: np.random.Generator) -> GcnParams:
    """Monte-Carlo ascent direction of ``ELBO - eta * label_loss`` for one input."""
    if baseline and samples < 2:
        raise ValueError("the sample-mean baseline needs samples >= 2")
    Z = np.asarray(z, dtype=np.float64)[None]
    logits, cache = mf.forward_batch(params, graph, Z)
    q = mf.probs_from_logits(logits, graph.groups)
    G, _, _ = _estep_logit_grads(
        q, logits, graph, compiled, Z, None if truth is None else [truth],
        samples, eta, baseline, rng,
    )
    return mf.backward(params, graph, cache, G)


def label_loss(params, graph, z, truth) -> float:
    """``-log Q(GT)``; grouped predicates contribute their categorical mass."""
    return -float(mf.log_prob(mf.forward(params, graph, z), truth))


def label_loss_gradient(params, graph, z, truth) -> GcnParams:
    """Gradient of :func:`label_loss` with respect to the GCN parameters."""
    logits, cache = mf.forward_batch(params, graph, np.asarray(z, dtype=np.float64)[None])
    q = mf.probs_from_logits(logits, graph.groups)
    return mf.backward(params, graph, cache, q - np.asarray(truth, dtype=np.float64)[None])


# ------------------------------------------------------------------ M-step


def mstep_gradient(dist: MeanFieldDist, compiled: CompiledRuleSet, sensor_w, S: int,
                   rng: np.random.Generator, stratified: bool = False) -> np.ndarray:
    """Mean pseudo-likelihood weight gradient over ``S`` worlds from ``dist``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    worlds = mf.sample(dist, rng, S, stratified=stratified).worlds
    model = MlnModel(compiled, sensor_w, dist.groups)
    return pll_weight_gradient(model, worlds).mean(axis=0)


# ------------------------------------------------------------------ training


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def _check_finite(params: GcnParams, w: np.ndarray) -> None:
    if not params.all_finite() or not np.all(np.isfinite(w)):
        raise DivergenceError("non-finite parameters during training")


def predict_batch(model: TrainedModel, Z) -> np.ndarray:
    """Argmax of the posterior over the main exclusion group (ties: lowest)."""
    g = model.graph.groups[model.rules.main_group]
    q = model.posterior(np.atleast_2d(Z))
    return np.argmax(q[:, g], axis=1)


def predict(model: TrainedModel, z) -> int:
    return int(predict_batch(model, np.asarray(z, dtype=np.float64)[None])[0])


def _evaluate(params, graph, compiled, rules, Z, truths, samples, rng) -> dict:
    logits, _ = mf.forward_batch(params, graph, Z)
    q = mf.probs_from_logits(logits, graph.groups)
    _, elbo, label = _estep_logit_grads(
        q, logits, graph, compiled, Z, truths, samples, 0.0, False, rng
    )
    rec = {"elbo_estimate": float(elbo.mean())}
    if truths is not None:
        rec["label_loss"] = float(label.mean())
        try:
            g = graph.groups[rules.main_group]
            pred = np.argmax(q[:, g], axis=1)
            gt = np.argmax(np.asarray(truths)[:, g], axis=1)
            rec["train_accuracy"] = float(np.mean(pred == gt))
        except Exception:
            rec["train_accuracy"] = float("nan")
    else:
        rec["label_loss"] = float("nan")
        rec["train_accuracy"] = float("nan")
    return rec


def train(rules: RuleSet, dataset: list[Example], config: TrainConfig,
          params: GcnParams | None = None, w=None) -> TrainedModel:
    """Alternate E-steps on the GCN and M-steps on the formula weights."""
    if not dataset:
        raise ValueError("empty dataset")
    L = rules.n_predicates
    Z = np.array([np.asarray(ex.z, dtype=np.float64) for ex in dataset])
    if Z.ndim != 2 or Z.shape[1] != L:
        raise ValueError(f"confidence vectors must have length {L}")
    has_truth = all(ex.truth is not None for ex in dataset)
    truths = np.array([ex.truth for ex in dataset], dtype=np.float64) if has_truth else None
    graph = mf.build_graph(rules)
    base = compile_rules(rules)
    if truths is not None:
        mf.check_group_consistent(truths, graph.groups)
    cfg = config
    params = (params if params is not None
              else GcnParams.init(L, cfg.embed_dim, cfg.hidden_dim, seed=_rng(cfg.seed, 0)))
    params = params.copy()
    w = np.array(base.w if w is None else w, dtype=np.float64)
    N = len(dataset)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order_rng = _rng(cfg.seed, 1, epoch)
        e_rng = _rng(cfg.seed, 2, epoch)
        m_rng = _rng(cfg.seed, 3, epoch)
        compiled = base.with_weights(w)
        for _ in range(cfg.e_steps):
            order = order_rng.permutation(N)
            for start in range(0, N, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                logits, cache = mf.forward_batch(params, graph, Z[idx])
                q = mf.probs_from_logits(logits, graph.groups)
                G, _, _ = _estep_logit_grads(
                    q, logits, graph, compiled, Z[idx],
                    None if truths is None else truths[idx],
                    cfg.samples, cfg.eta, cfg.baseline, e_rng,
                )
                grad = mf.backward(params, graph, cache, G).scale(1.0 / len(idx))
                if cfg.grad_clip is not None:
                    n = grad.norm()
                    if n > cfg.grad_clip:
                        grad = grad.scale(cfg.grad_clip / n)
                params = params.axpy(lr, grad)
                _check_finite(params, w)
        if cfg.mstep:
            # node features are recomputed from the updated embeddings here
            for _ in range(cfg.m_steps):
                order = order_rng.permutation(N)
                for start in range(0, N, cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    logits, _ = mf.forward_batch(params, graph, Z[idx])
                    q = mf.probs_from_logits(logits, graph.groups)
                    gw = np.zeros_like(w)
                    for k, b in enumerate(idx):
                        gw += mstep_gradient(
                            _dist(q[k], logits[k], graph.groups), compiled,
                            sensor_weights(Z[b]), cfg.samples, m_rng,
                            stratified=cfg.mstep_stratified,
                        )
                    w = np.clip(w + cfg.lr_w * gw / len(idx), -cfg.w_clip, cfg.w_clip)
                    compiled = base.with_weights(w)
                    _check_finite(params, w)
        rec = {"epoch": epoch}
        rec.update(_evaluate(params, graph, compiled, rules, Z, truths, cfg.samples,
                             _rng(cfg.seed, 4, epoch)))
        history.append(rec)
    return TrainedModel(params, w, rules, history)


# ------------------------------------------------------------------ persistence

HISTORY_FIELDS = ("epoch", "elbo_estimate", "label_loss", "train_accuracy")


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_FIELDS)
        for rec in history:
            wr.writerow([rec["epoch"]] + [f"{rec[k]:.17g}" for k in HISTORY_FIELDS[1:]])


def save_model(path, model: TrainedModel, config: TrainConfig | None = None) -> None:
    extra = {"formula_weights": [float(x) for x in model.w]}
    if config is not None:
        extra["train_config"] = asdict(config)
    mf.save_params(path, model.params, model.graph, extra)


def load_model(path, rules: RuleSet) -> TrainedModel:
    doc = json.loads(Path(path).read_text())
    params = mf.params_from_doc(doc, rules)
    w = np.asarray(doc["formula_weights"], dtype=np.float64)
    if w.shape != (len(rules.formulas),):
        raise ValueError("formula weight count does not match the rules")
    return TrainedModel(params, w, rules, [])


def smoothed(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        window = max(1, v.size)
    return np.convolve(v, np.ones(window) / window, mode="valid")


__all__ = [
    "DivergenceError", "Example", "TrainConfig", "TrainedModel", "elbo_exact",
    "estep_gradient", "estep_gradient_exact", "label_loss", "label_loss_gradient", "load_model", "mstep_gradient",
    "predict", "predict_batch", "save_model", "smoothed", "train", "write_history_csv",
]
