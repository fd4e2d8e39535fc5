import itertools
import time
from dataclasses import dataclass

import numpy as np
import pytest

from diffgraph.embeddings import HashEmbedder
from diffgraph.errors import InsufficientCandidatesError, PayloadMismatchError
from diffgraph.graph_store import ReferencePrompt, UniversalGraph
from diffgraph.llm import StubLlm
from diffgraph.merger import CKPT, CkptPayload
from diffgraph.registration import (
    add_expert,
    calibrate_node,
    calibrate_with_report,
    register_node,
    select_reference_prompts,
)
from diffgraph.testbed import ExpertSource, TestbedScorer
from diffgraph.workflows import reference_candidates


@dataclass
class TableEmbedder:
    """Embedder backed by a fixed text -> vector table."""
    table: dict
    d_node: int = 3

    def embed(self, text):
        v = np.asarray(self.table[text], dtype=np.float64)
        return (v / np.linalg.norm(v)).astype(np.float32)


def source(home, eid="x", W=None):
    return ExpertSource(eid, CKPT, home, CkptPayload(np.zeros((8, 8)) if W is None else W))


def test_register_description_from_homepage():
    rec = register_node(source("Expert for subject:forest. Trained on woodland scenes."),
                        StubLlm(), HashEmbedder())
    assert "subject:forest" in rec.description.split()
    assert rec.description == "Expert for subject:forest. subject:forest"
    np.testing.assert_array_equal(rec.node_feature, HashEmbedder().embed(rec.description))


def test_identical_homepages_identical_records():
    home = "Expert for subject:lake, release 1. Calm water."
    a = register_node(source(home, "a"), StubLlm(), HashEmbedder())
    b = register_node(source(home, "b"), StubLlm(), HashEmbedder())
    assert a.id != b.id
    assert a.description == b.description
    assert a.node_feature.tobytes() == b.node_feature.tobytes()


def test_empty_description_embeds_to_e0():
    rec = register_node(source("!!! ..."), StubLlm(), HashEmbedder())
    e0 = np.zeros(32, np.float32)
    e0[0] = 1.0
    np.testing.assert_array_equal(rec.node_feature, e0)


def test_perfect_expert_scores_one(testbed):
    prompts = testbed.sample_prompts(20, 0, max_attrs=0)
    p = prompts[0]
    scorer = TestbedScorer(testbed, prompts)
    rec = register_node(source("perfect", W=testbed.W_star[p.cluster]), StubLlm(), HashEmbedder())
    edges = calibrate_node(rec, [ReferencePrompt(p.id, p.text, HashEmbedder().embed(p.text))], scorer)
    np.testing.assert_allclose(edges[0].scores, np.ones(5), atol=1e-6)


def test_calibration_matches_hand_oracle(testbed):
    cands = reference_candidates(testbed, 12)
    refs = select_reference_prompts([(p.id, p.text) for p in cands], 3, HashEmbedder())
    scorer = TestbedScorer(testbed, cands)
    W = np.random.default_rng(5).standard_normal((8, 8))
    rec = register_node(source("random expert", W=W), StubLlm(), HashEmbedder())
    edges = calibrate_node(rec, refs, scorer)
    assert len(edges) == 3 and scorer.generate_calls == 3
    by_id = {p.id: p for p in cands}
    for edge, ref in zip(edges, refs):
        p = by_id[ref.id]
        y = W @ p.feature
        target = testbed.target(p)
        want = [np.exp(-np.linalg.norm(P @ (y - target)) / testbed.spec.tau)
                for P in testbed.projections]
        np.testing.assert_allclose(edge.scores, np.clip(want, 0, 1), rtol=1e-6, atol=1e-7)
        assert np.all((edge.scores >= 0) & (edge.scores <= 1))
    again = calibrate_node(rec, refs, scorer)
    assert all(a.scores.tobytes() == b.scores.tobytes() for a, b in zip(edges, again))


def test_payload_mismatch(testbed, small_built):
    rec = register_node(source("wrong shape", W=np.zeros((3, 3))), StubLlm(), HashEmbedder())
    with pytest.raises(PayloadMismatchError):
        calibrate_node(rec, small_built.graph.ref_prompts, small_built.scorer)


def test_report_shape(small_built, testbed):
    src = testbed.ckpt_source(3, 0, 2023)
    rec = register_node(src, StubLlm(), HashEmbedder())
    report = calibrate_with_report(rec, small_built.graph.ref_prompts, small_built.scorer)
    assert report.scores.shape == (3, 5) and report.wall_time >= 0.0


def test_add_expert_uses_exactly_nr_calls_and_is_fast(built, testbed):
    g = built.graph.copy()
    before = {e.id: g.scores(e.id).tobytes() for e in g.experts}
    for k in range(4):
        start = built.scorer.generate_calls
        t0 = time.perf_counter()
        add_expert(g, testbed.ckpt_source(k, 7, 2024), StubLlm(), HashEmbedder(), built.scorer)
        assert time.perf_counter() - t0 < 1.0
        assert built.scorer.generate_calls - start == g.n_ref
    assert all(g.scores(eid).tobytes() == b for eid, b in before.items())


def test_fps_all_candidates():
    cands = [(f"c{i}", f"text number{i} extra{i % 3}") for i in range(7)]
    refs = select_reference_prompts(cands, 7, HashEmbedder())
    assert sorted(r.id for r in refs) == sorted(c for c, _ in cands)


def test_fps_insufficient():
    with pytest.raises(InsufficientCandidatesError):
        select_reference_prompts([("a", "x")], 2, HashEmbedder())
    assert select_reference_prompts([("a", "x")], 0, HashEmbedder()) == []


def min_dispersion(X, subset):
    return min(np.linalg.norm(X[i] - X[j]) for i, j in itertools.combinations(subset, 2))


def test_fps_three_clusters_matches_exhaustive():
    rng = np.random.default_rng(3)
    centers = np.eye(3) * 5
    table, labels = {}, {}
    for i in range(15):
        k = i % 3
        text = f"t{i}"
        table[text] = centers[k] + 0.05 * rng.standard_normal(3)
        labels[f"id{i:02d}"] = k
    cands = [(f"id{i:02d}", f"t{i}") for i in range(15)]
    emb = TableEmbedder(table)
    X = np.stack([emb.embed(t).astype(np.float64) for _, t in cands])
    best = max(itertools.combinations(range(15), 3), key=lambda s: min_dispersion(X, s))
    assert sorted(labels[cands[i][0]] for i in best) == [0, 1, 2]
    refs = select_reference_prompts(cands, 3, emb)
    assert sorted(labels[r.id] for r in refs) == [0, 1, 2]


def test_fps_duplicates_not_selected_twice():
    cands = [("a", "forest rain"), ("b", "forest rain"), ("c", "desert sun"),
             ("d", "snowy peak"), ("e", "ocean wave")]
    refs = select_reference_prompts(cands, 4, HashEmbedder())
    texts = [r.text for r in refs]
    assert len(set(texts)) == len(texts)


def test_fps_deterministic_and_order_free():
    cands = [(f"c{i}", f"word{i} shared") for i in range(10)]
    a = select_reference_prompts(cands, 5, HashEmbedder())
    b = select_reference_prompts(list(reversed(cands)), 5, HashEmbedder())
    assert [r.id for r in a] == [r.id for r in b]


def test_graph_accepts_fps_refs():
    cands = [(f"c{i}", f"word{i}") for i in range(6)]
    refs = select_reference_prompts(cands, 3, HashEmbedder())
    assert UniversalGraph(refs, 32).n_ref == 3
