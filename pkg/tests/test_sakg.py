from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trigctl.memory.sakg import (
    ActionEdge,
    GraphFragment,
    HashingEmbedder,
    KgConfig,
    KnowledgeGraph,
    PrecomputedEmbedder,
    StateNode,
    best_action,
    fragment_action_scores,
    score_fragment,
)

PROPS = settings(max_examples=200, derandomize=True, deadline=None)


def edge(action, succ, n):
    return ActionEdge(0, 1, action, exec_count=n, success_count=succ)


def frag(sim, edges=()):
    node = StateNode(0, "s", np.ones(4) / 2)
    return GraphFragment(node, sorted(edges, key=lambda e: (-e.success_rate, -e.exec_count, e.action)), sim)


def linear_scan(nodes: dict[int, np.ndarray], q: np.ndarray, cfg: KgConfig) -> list[int]:
    sims = []
    for nid, v in nodes.items():
        s = float(sum(a * b for a, b in zip(v, q)))
        sims.append((-s, nid, s))
    sims.sort()
    return [nid for _, nid, s in sims[:cfg.top_k] if s >= cfg.tau_kg]


def test_embedder_deterministic_and_seeded():
    e = HashingEmbedder()
    assert np.array_equal(e.embed("chop the tree"), e.embed("chop the tree"))
    assert np.linalg.norm(e.embed("chop tree")) == pytest.approx(1.0)
    assert not np.array_equal(HashingEmbedder(seed=1).embed("chop"), HashingEmbedder(seed=2).embed("chop"))


def test_disjoint_vocabularies_are_dissimilar():
    rng = random.Random(7)
    vocab = [f"w{i}" for i in range(400)]
    e = HashingEmbedder()
    low = 0
    for _ in range(1000):
        words = rng.sample(vocab, 12)
        a, b = " ".join(words[:6]), " ".join(words[6:])
        low += float(e.embed(a) @ e.embed(b)) < 0.2
    assert low >= 990


def test_precomputed_embedder_lookup_and_fallback():
    table = {"Chop Tree": [1.0, 0.0], "plant": [0.0, 2.0]}
    e = PrecomputedEmbedder(table, fallback=HashingEmbedder(dim=2))
    assert np.allclose(e.embed("chop tree"), [1.0, 0.0])
    assert e.embed("unknown words").shape == (2,)
    with pytest.raises(KeyError):
        PrecomputedEmbedder(table).embed("unknown")


def test_upsert_examples():
    g = KnowledgeGraph()
    g.upsert_transition("at a", "move:up", "at b", True, 1.0)
    assert (len(g), len(g.edges)) == (2, 1)
    e = g.upsert_transition("at a", "move:up", "at b", True, 1.0)
    assert e.exec_count == 2 and len(g.edges) == 1


def test_eviction_keeps_cap_and_drops_least_executed_oldest():
    g = KnowledgeGraph(KgConfig(max_entries=50), HashingEmbedder(dim=16))
    for i in range(50):
        g.add_node(f"state {i}", now=float(i))
    g.upsert_transition("state 0", "a", "state 1", True, 1.0, now=100.0)
    g.add_node("state new", now=200.0)
    assert len(g) == 50
    assert g.find("state 2") is None
    assert g.find("state 0") is not None and g.find("state 1") is not None


def test_full_scale_cap():
    g = KnowledgeGraph(embedder=HashingEmbedder(dim=8))
    for i in range(10_001):
        g.add_node(f"s{i}", now=float(i))
    assert len(g) == 10_000
    assert g.find("s0") is None and g.find("s10000") is not None


def test_query_examples():
    assert KnowledgeGraph().query_fragments("anything") == []
    g = KnowledgeGraph(embedder=HashingEmbedder(dim=3))
    q = np.array([1.0, 0.0, 0.0])
    g.add_node("below", embedding=np.array([0.84, np.sqrt(1 - 0.84 ** 2), 0.0]))
    g.add_node("above", embedding=np.array([0.86, np.sqrt(1 - 0.86 ** 2), 0.0]))
    texts = [f.node.state_text for f in g.query_fragments("", query_vec=q)]
    assert texts == ["above"]


def test_topk_limits_fragments():
    g = KnowledgeGraph(embedder=HashingEmbedder(dim=8))
    q = np.eye(8)[0]
    rng = np.random.default_rng(0)
    for i in range(7):
        v = q + 0.05 * rng.normal(size=8)
        g.add_node(f"n{i}", embedding=v)
    frags = g.query_fragments("", query_vec=q)
    assert len(frags) == 5
    assert all(f.similarity >= 0.85 for f in frags)


def test_fragment_score_examples():
    assert score_fragment(frag(0.9, [edge("a", 1, 2)])) == pytest.approx(0.74)
    assert score_fragment(frag(1.0, [edge("a", 1, 1)])) == pytest.approx(1.0)
    assert score_fragment(frag(0.9)) == pytest.approx(0.54)


def test_best_action_examples():
    assert best_action([edge("A", 3, 4), edge("B", 1, 2)]).action == "A"
    assert best_action([edge("A", 1, 2), edge("B", 2, 4)]).action == "B"
    assert best_action([edge("Z", 0, 1)]).action == "Z"
    assert best_action([edge("B", 1, 2), edge("A", 1, 2)]).action == "A"
    with pytest.raises(LookupError):
        best_action([])


def test_fragment_action_scores_uses_each_edge():
    f = frag(0.9, [edge("a", 1, 1), edge("b", 0, 1)])
    scores = fragment_action_scores([f])
    assert scores == pytest.approx({"a": 0.94, "b": 0.54})


def test_save_load_roundtrip(tmp_path):
    g = KnowledgeGraph()
    g.upsert_transition("at a", "move:up", "at b", True, 1.0)
    g.upsert_transition("at b", "move:left", "at c", False, 0.0)
    g.save(tmp_path / "kg")
    back = KnowledgeGraph.load(tmp_path / "kg")
    assert [n.state_text for n in back.nodes] == [n.state_text for n in g.nodes]
    assert back.edges == g.edges
    q = g.query_fragments("at a")
    assert [f.node.node_id for f in back.query_fragments("at a")] == [f.node.node_id for f in q]


def test_import_embeddings():
    g = KnowledgeGraph(embedder=HashingEmbedder(dim=2))
    g.add_node("at a")
    n = g.import_embeddings([{"state_text": "at a", "embedding": [0.0, 3.0]},
                             {"state_text": "at b", "embedding": [1.0, 0.0]}])
    assert n == 2 and len(g) == 2
    assert np.allclose(g.find("at a").embedding, [0.0, 1.0])
    with pytest.raises(ValueError):
        g.import_embeddings([{"state_text": "at a", "embedding": [1.0, 0.0, 0.0]}])


def random_store(seed: int) -> tuple[KnowledgeGraph, dict[int, np.ndarray], np.ndarray]:
    rng = np.random.default_rng(seed)
    dim = 16
    q = rng.normal(size=dim)
    q /= np.linalg.norm(q)
    g = KnowledgeGraph(embedder=HashingEmbedder(dim=dim))
    n = int(rng.integers(1, 1001))
    for i in range(n):
        v = q + rng.uniform(0.05, 1.5) * rng.normal(size=dim) if rng.random() < 0.3 else rng.normal(size=dim)
        g.add_node(f"node {i}", embedding=v)
    return g, {node.node_id: node.embedding for node in g.nodes}, q


@pytest.mark.parametrize("seed", range(10))
def test_query_matches_linear_scan(seed):
    g, nodes, q = random_store(seed)
    got = [f.node.node_id for f in g.query_fragments("", query_vec=q)]
    assert got == linear_scan(nodes, q, g.cfg)


@PROPS
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=10))
def test_best_action_deterministic_under_permutation(pairs):
    edges = [edge(f"a{i}", min(s, n), max(n, 1)) for i, (s, n) in enumerate(pairs)]
    best = best_action(edges)
    for perm in (list(reversed(edges)), sorted(edges, key=lambda e: e.action)):
        assert best_action(perm) == best
    assert all(best.success_rate >= e.success_rate for e in edges)


@PROPS
@given(st.floats(0, 1), st.integers(0, 10), st.integers(0, 10))
def test_fragment_score_range(sim, s, extra):
    f = frag(sim, [edge("a", s, s + extra)] if s + extra else [])
    assert 0.0 <= score_fragment(f) <= 1.0 + 1e-12


def test_eviction_releases_neighbor_counts():
    g = KnowledgeGraph(KgConfig(max_entries=3), HashingEmbedder(dim=16))
    g.upsert_transition("s0", "a", "s1", True, 1.0, now=0.0)
    g.add_node("s2", now=1.0)
    g.add_node("s3", now=2.0)  # evicts s2, the only unexecuted node
    assert g.find("s2") is None
    g.upsert_transition("s3", "b", "s4", True, 1.0, now=3.0)  # s3 protected; evicts s0 (oldest, count 1)
    assert g.find("s0") is None and len(g) == 3
    assert g.edges and all(e.action == "b" for e in g.edges)
    g.add_node("s5", now=4.0)  # s1 lost its only edge, so it goes next
    assert g.find("s1") is None
