import math

import numpy as np
import pytest

from mlnsmooth.meanfield import (
    GcnParams,
    MeanFieldDist,
    build_graph,
    forward,
    forward_batch,
    grad_log_prob,
    load_params,
    log_prob,
    logit_score,
    marginal,
    sample,
    save_params,
)
from mlnsmooth.mln import all_worlds
from mlnsmooth.rules import Formula, Kind, Literal, PredicateDecl, RuleSet, parse_rules

RULES = parse_rules(
    """
    predicate c0 group=cls
    predicate c1 group=cls
    predicate c2 group=cls
    predicate a0
    predicate a1
    predicate h0
    rule 1.5: c0 => a0 & a1
    rule 1.0: c1 => a1
    rule 0.7: h0 => c0 | c1
    rule 0.3: a0 | !a1 => h0
    """
)


def relerr(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def fd_grad(params, graph, z, world, h=1e-6):
    flat = params.flat()
    out = np.zeros_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        fp = log_prob(forward(params.unflat(flat + e), graph, z), world)
        fm = log_prob(forward(params.unflat(flat - e), graph, z), world)
        out[k] = (fp - fm) / (2 * h)
    return params.unflat(out)


def test_build_graph_no_formulas_is_identity():
    rs = RuleSet(tuple(PredicateDecl(i, f"p{i}") for i in range(4)), ())
    g = build_graph(rs)
    np.testing.assert_array_equal(g.adjacency, np.eye(4))
    np.testing.assert_allclose(g.norm_adj, np.eye(4))


def test_build_graph_clique():
    rs = RuleSet(
        tuple(PredicateDecl(i, f"p{i}") for i in range(4)),
        (Formula(Kind.IMPLIES_ANY, Literal(0), (Literal(1), Literal(2))),),
    )
    adj = build_graph(rs).adjacency
    expected = np.eye(4)
    expected[:3, :3] = 1
    np.testing.assert_array_equal(adj, expected)
    assert (adj == adj.T).all()


def test_normalized_row_sums():
    g = build_graph(RULES)
    rows = g.norm_adj.sum(axis=1)
    deg = g.adjacency.sum(axis=1)
    # row i sums to sum_j 1/sqrt(d_i d_j): <= 1 only when neighbours are no
    # less connected than i; equality iff every neighbour has degree d_i
    for i in range(g.L):
        nbr = np.flatnonzero(g.adjacency[i])
        expect = np.sum(1 / np.sqrt(deg[i] * deg[nbr]))
        assert rows[i] == pytest.approx(expect)
        if np.all(deg[nbr] == deg[i]):
            assert rows[i] == pytest.approx(1.0)
    assert np.allclose(g.norm_adj, g.norm_adj.T)


def test_zero_params_uniform():
    g = build_graph(RULES)
    p = GcnParams.init(RULES.n_predicates, 4, 5, seed=1).scale(0.0)
    d = forward(p, g, np.full(RULES.n_predicates, 0.3))
    np.testing.assert_allclose(d.q[3:], 0.5)
    np.testing.assert_allclose(d.q[:3], 1 / 3)
    assert marginal(d, 4) == 0.5


def test_group_sums_to_one_and_locality():
    g = build_graph(RULES)
    p = GcnParams.init(RULES.n_predicates, 6, 7, seed=3)
    z = np.linspace(0.1, 0.9, RULES.n_predicates)
    d = forward(p, g, z)
    assert d.q[:3].sum() == pytest.approx(1.0, abs=1e-15)
    from mlnsmooth.meanfield import probs_from_logits

    bumped = d.logits.copy()
    bumped[4] += 0.8
    q2 = probs_from_logits(bumped, g.groups)
    changed = np.flatnonzero(~np.isclose(q2, d.q, rtol=0, atol=0))
    assert changed.tolist() == [4]
    bumped = d.logits.copy()
    bumped[1] += 0.8
    q3 = probs_from_logits(bumped, g.groups)
    changed = np.flatnonzero(~np.isclose(q3, d.q, rtol=0, atol=0))
    assert set(changed.tolist()) <= {0, 1, 2}


def test_sample_deterministic_and_constraints():
    d = MeanFieldDist(np.array([0.0, 1.0, 0.0, 1.0, 0.0]), ((2, 3, 4),))
    b = sample(d, np.random.default_rng(0), 50)
    assert (b.worlds == np.array([0, 1, 0, 1, 0])).all()
    g = build_graph(RULES)
    d = forward(GcnParams.init(6, 4, 4, seed=2), g, np.full(6, 0.5))
    for strat in (False, True):
        b = sample(d, np.random.default_rng(1), 300, stratified=strat)
        assert (b.worlds[:, :3].sum(axis=1) == 1).all()
        np.testing.assert_allclose(b.logq, log_prob(d, b.worlds))
    b1 = sample(d, np.random.default_rng(9), 40)
    b2 = sample(d, np.random.default_rng(9), 40)
    assert (b1.worlds == b2.worlds).all()


@pytest.mark.parametrize("stratified", [False, True])
def test_sample_frequencies_within_binomial_bands(stratified):
    q = np.array([0.2, 0.5, 0.5, 0.3, 0.2, 0.93])
    d = MeanFieldDist(q, ((2, 3, 4),))
    S = 10_000
    b = sample(d, np.random.default_rng(1), S, stratified=stratified)
    freq = b.worlds.mean(axis=0)
    band = 3 * np.sqrt(q * (1 - q) / S)
    assert np.all(np.abs(freq - q) <= band)
    if stratified:
        assert np.all(np.abs(freq - q) <= 1.0 / S + 1e-12)


def test_log_prob_examples():
    assert log_prob(MeanFieldDist(np.full(3, 0.5)), np.array([1, 0, 1])) == pytest.approx(
        3 * math.log(0.5)
    )
    d = MeanFieldDist(np.full(4, 0.25), ((0, 1, 2, 3),))
    assert log_prob(d, np.array([0, 0, 1, 0])) == pytest.approx(math.log(0.25))
    with pytest.raises(ValueError):
        log_prob(d, np.array([0, 1, 1, 0]))


def test_log_prob_normalizes_over_support():
    g = build_graph(RULES)
    d = forward(GcnParams.init(6, 5, 5, seed=4), g, np.linspace(0, 1, 6))
    worlds = all_worlds(6, g.groups)
    assert np.exp(log_prob(d, worlds)).sum() == pytest.approx(1.0, abs=1e-12)


def test_logit_level_scores():
    q = 1 / (1 + np.exp(-0.4))
    d = MeanFieldDist(np.array([q]), (), np.array([0.4]))
    assert logit_score(d, np.array([1]))[0, 0] == pytest.approx(1 - q)
    lg = np.array([0.3, -1.0, 2.0])
    sm = np.exp(lg) / np.exp(lg).sum()
    d = MeanFieldDist(sm, ((0, 1, 2),), lg)
    np.testing.assert_allclose(logit_score(d, np.array([0, 1, 0]))[0], [0, 1, 0] - sm)


@pytest.mark.parametrize("seed", range(4))
def test_grad_log_prob_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = build_graph(RULES)
    p = GcnParams.init(6, 4, 5, seed=seed)
    p.b1[:] = rng.normal(0, 0.1, 5)
    p.b2[:] = rng.normal(0, 0.1, 5)
    z = rng.uniform(0.05, 0.95, 6)
    world = all_worlds(6, g.groups)[rng.integers(0, 24)]
    an = grad_log_prob(p, g, z, world)
    fd = fd_grad(p, g, z, world)
    for a, b in zip(an.arrays(), fd.arrays()):
        assert relerr(a, b) <= 1e-4


def test_score_function_identity_by_enumeration():
    g = build_graph(RULES)
    p = GcnParams.init(6, 4, 5, seed=11)
    z = np.linspace(0.2, 0.8, 6)
    worlds = all_worlds(6, g.groups)
    logits, cache = forward_batch(p, g, z[None])
    from mlnsmooth.meanfield import backward, probs_from_logits

    d = MeanFieldDist(probs_from_logits(logits[0], g.groups), g.groups, logits[0])
    weights = np.exp(log_prob(d, worlds))
    G = (weights[:, None] * logit_score(d, worlds)).sum(axis=0)
    expect = backward(p, g, cache, G[None])
    assert np.abs(expect.flat()).max() < 1e-12


def test_batched_forward_matches_single():
    g = build_graph(RULES)
    p = GcnParams.init(6, 4, 5, seed=12)
    Z = np.random.default_rng(0).uniform(size=(7, 6))
    logits, _ = forward_batch(p, g, Z)
    for k in range(7):
        np.testing.assert_allclose(logits[k], forward(p, g, Z[k]).logits, atol=1e-14)


def test_save_load_round_trip(tmp_path):
    g = build_graph(RULES)
    p = GcnParams.init(6, 4, 5, seed=1)
    save_params(tmp_path / "m.json", p, g)
    q = load_params(tmp_path / "m.json", RULES)
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)
    other = parse_rules("predicate a\npredicate b")
    with pytest.raises(ValueError):
        load_params(tmp_path / "m.json", other)
