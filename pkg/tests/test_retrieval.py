import numpy as np
import pytest

from cornerkit import cornergraph as cg
from cornerkit import heads, retrieval, synth

from test_cornergraph import make_corner
from test_heads import small_model

MODEL = small_model(heads.RECEIVER, seed=31)
CORPUS = synth.generate(synth.SynthConfig(n_samples=40, seed=9))


def test_embedding_dimension_and_determinism():
    e = retrieval.embed(CORPUS[0], MODEL, cg.ATTACKING)
    assert e.vector.shape == (4,)
    e2 = retrieval.embed(CORPUS[0], MODEL, cg.ATTACKING)
    np.testing.assert_array_equal(e.vector, e2.vector)
    both = retrieval.embed(CORPUS[0], MODEL, "both")
    assert both.vector.shape == (8,)
    np.testing.assert_array_equal(both.vector[:4], e.vector)


def test_embedding_reflection_invariant():
    for corner in CORPUS[:10]:
        base = retrieval.embed(corner, MODEL, cg.DEFENDING)
        for g in cg.D2:
            ref = retrieval.embed(cg.apply(g, corner), MODEL, cg.DEFENDING)
            assert ref.vector.tobytes() == base.vector.tobytes()


def test_identical_corners_identical_embeddings():
    twin = cg.CornerGraph(players=CORPUS[3].players, id="twin",
                          receiver_index=CORPUS[3].receiver_index,
                          shot_taken=CORPUS[3].shot_taken)
    a = retrieval.embed(CORPUS[3], MODEL, cg.ATTACKING)
    b = retrieval.embed(twin, MODEL, cg.ATTACKING)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_embed_validates_model_and_side():
    with pytest.raises(heads.TaskError):
        retrieval.embed(CORPUS[0], small_model(heads.SHOT, seed=1), cg.ATTACKING)
    with pytest.raises(retrieval.RetrievalError, match="side"):
        retrieval.embed(CORPUS[0], MODEL, "neutral")


# -- nearest ---------------------------------------------------------------------


def test_nearest_self_at_distance_zero_when_not_excluded():
    index = retrieval.EmbeddingIndex.build(CORPUS[:10], MODEL)
    query = retrieval.embed(CORPUS[4], MODEL)
    results, truncated = retrieval.nearest(query, index, k=1, exclude_self=False)
    assert results[0] == (CORPUS[4].id, 0.0)
    assert not truncated
    results, _ = retrieval.nearest(query, index, k=1)
    assert results[0][0] != CORPUS[4].id


def test_singleton_index_returns_that_element():
    index = retrieval.EmbeddingIndex.build(CORPUS[:1], MODEL)
    query = retrieval.embed(CORPUS[20], MODEL)
    results, _ = retrieval.nearest(query, index, k=1, exclude_self=False)
    assert results[0][0] == CORPUS[0].id


def test_k_larger_than_index_truncates_with_flag():
    index = retrieval.EmbeddingIndex.build(CORPUS[:3], MODEL)
    query = retrieval.embed(CORPUS[5], MODEL)
    results, truncated = retrieval.nearest(query, index, k=10, exclude_self=False)
    assert truncated and len(results) == 3


def test_nearest_matches_brute_force_scan_on_500():
    rng = np.random.default_rng(0)
    entries = [retrieval.TeamEmbedding(corner_id=f"c{i:04d}", side=cg.ATTACKING,
                                       vector=rng.normal(size=4))
               for i in range(500)]
    index = retrieval.EmbeddingIndex(entries=entries)
    for trial in range(20):
        query = retrieval.TeamEmbedding(corner_id="q", side=cg.ATTACKING,
                                        vector=rng.normal(size=4))
        results, _ = retrieval.nearest(query, index, k=7, exclude_self=False)
        # independent oracle: vectorized scan + lexicographic sort
        mat = np.stack([e.vector for e in entries])
        d = np.linalg.norm(mat - query.vector, axis=1)
        ids = np.array([e.corner_id for e in entries])
        order = np.lexsort((ids, d))[:7]
        assert [r[0] for r in results] == list(ids[order])
        np.testing.assert_allclose([r[1] for r in results], d[order])


def test_index_rejects_duplicates_and_empty_queries():
    e = retrieval.embed(CORPUS[0], MODEL)
    with pytest.raises(retrieval.RetrievalError, match="duplicate"):
        retrieval.EmbeddingIndex(entries=[e, e])
    with pytest.raises(retrieval.RetrievalError, match="empty"):
        retrieval.nearest(e, retrieval.EmbeddingIndex(entries=[]), k=1)
    with pytest.raises(retrieval.RetrievalError, match="k must be"):
        retrieval.nearest(e, retrieval.EmbeddingIndex(entries=[e]), k=0)


# -- cosine baseline ----------------------------------------------------------------


def test_cosine_identical_corner_similarity_one():
    twin = cg.CornerGraph(players=CORPUS[7].players, id="twin")
    results, excluded = retrieval.cosine_baseline(twin, CORPUS, k=1)
    assert results[0][0] == CORPUS[7].id
    assert results[0][1] == pytest.approx(1.0)
    assert excluded == []


def test_cosine_scale_invariance_of_ranking():
    rng = np.random.default_rng(5)
    vectors = [rng.normal(size=12) for _ in range(30)]
    ids = [f"v{i:02d}" for i in range(30)]
    q = rng.normal(size=12)
    base, _ = retrieval.rank_by_cosine(q, vectors, ids, k=30)
    for scale in (0.001, 7.3, 4000.0):
        scaled, _ = retrieval.rank_by_cosine(scale * q, vectors, ids, k=30)
        assert [r[0] for r in scaled] == [r[0] for r in base]
        scaled_corpus, _ = retrieval.rank_by_cosine(q, [scale * v for v in vectors],
                                                    ids, k=30)
        assert [r[0] for r in scaled_corpus] == [r[0] for r in base]


def test_cosine_zero_norm_vectors_excluded_with_flag():
    vectors = [np.zeros(4), np.ones(4)]
    results, excluded = retrieval.rank_by_cosine(np.ones(4), vectors, ["z", "a"], k=5)
    assert excluded == ["z"]
    assert [r[0] for r in results] == ["a"]
    with pytest.raises(retrieval.RetrievalError, match="zero-norm"):
        retrieval.rank_by_cosine(np.zeros(4), vectors, ["z", "a"], k=1)


def test_cosine_ranking_matches_brute_force():
    for trial in range(5):
        query = CORPUS[trial]
        results, _ = retrieval.cosine_baseline(query, CORPUS, k=len(CORPUS) - 1)
        q = query.node_features().reshape(-1)
        sims = {}
        for corner in CORPUS:
            if corner.id == query.id:
                continue
            v = corner.node_features().reshape(-1)
            sims[corner.id] = float(q @ v / (np.linalg.norm(q) * np.linalg.norm(v)))
        expected = sorted(sims, key=lambda i: (-sims[i], i))
        assert [r[0] for r in results] == expected


def test_latent_retrieval_reflection_invariant_but_cosine_not():
    index = retrieval.EmbeddingIndex.build(CORPUS, MODEL, side=cg.ATTACKING)
    flip = cg.D2Element.FLIP_H
    invariant_checked = counterexample = False
    for corner in CORPUS[:15]:
        base_q = retrieval.embed(corner, MODEL)
        refl_q = retrieval.embed(cg.apply(flip, corner), MODEL)
        base_r, _ = retrieval.nearest(base_q, index, k=5)
        refl_r, _ = retrieval.nearest(refl_q, index, k=5)
        assert [r[0] for r in base_r] == [r[0] for r in refl_r]
        invariant_checked = True
        cos_base, _ = retrieval.cosine_baseline(corner, CORPUS, k=5)
        reflected = cg.apply(flip, corner)
        cos_refl, _ = retrieval.cosine_baseline(
            cg.CornerGraph(players=reflected.players, id=corner.id,
                           receiver_index=corner.receiver_index,
                           shot_taken=corner.shot_taken), CORPUS, k=5)
        if [r[0] for r in cos_base] != [r[0] for r in cos_refl]:
            counterexample = True
    assert invariant_checked
    assert counterexample  # raw-feature cosine rankings change under reflection


def test_export_embeddings_roundtrip(tmp_path):
    import json
    path = tmp_path / "emb.jsonl"
    retrieval.export_embeddings(path, CORPUS[:5], MODEL)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 10  # two sides per corner
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "side", "vector"}
    assert len(rec["vector"]) == 4
