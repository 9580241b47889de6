#!/usr/bin/env python3
"""
Tests for the retrieval index, two-stage search and Recall@K evaluation
"""

import numpy as np
import pytest

from contrastive import TextEncoder, encode_text, lookup
from embedding_core import EmbeddingMatrix, ProjectionHead, ToyMixer, l2_normalize, mix, project
from errors import (
    DuplicateIdError,
    EmptyMaskError,
    MissingLateMatrixError,
    MissingQrelError,
    UnknownItemError,
    UnsupportedModeError,
)
from retrieval import (
    EvalReport,
    RankedList,
    build_index,
    evaluate,
    evaluate_directions,
    load_qrels,
    load_results,
    mean_recall,
    recall_from_scores,
    rerank,
    save_qrels,
    save_results,
    search,
    two_stage_search,
)
from similarity import Direction, ItemEmbedding, PaddingMask, ScoringMode, pair_score


def unit_rows(rng, rows, dim):
    x = rng.standard_normal((rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def items(rng, count, dim=8, rows=4, prefix="t"):
    out = []
    for i in range(count):
        x = unit_rows(rng, rows + 1, dim)
        out.append(ItemEmbedding(f"{prefix}{i:04d}", x[0], EmbeddingMatrix(x[1:])))
    return out


def test_empty_index():
    index = build_index([])
    assert len(index) == 0
    assert search(index, np.array([1.0, 0.0])).entries == ()


def test_lookup_every_id():
    rng = np.random.default_rng(0)
    corpus = items(rng, 1000, dim=4, rows=1)
    index = build_index(corpus)
    for item in corpus:
        assert index.get(item.item_id) is item
    with pytest.raises(UnknownItemError):
        index.get("missing")
    assert index.supports(ScoringMode.BAGWISE)


def test_duplicate_id():
    rng = np.random.default_rng(1)
    a, b = items(rng, 2)
    with pytest.raises(DuplicateIdError):
        build_index([a, ItemEmbedding(a.item_id, b.cls)])


def test_declared_late_mode_needs_matrices():
    with pytest.raises(MissingLateMatrixError):
        build_index([ItemEmbedding("a", np.array([1.0, 0.0]))], modes=[ScoringMode.BAGWISE])
    index = build_index([ItemEmbedding("a", np.array([1.0, 0.0]))])
    assert not index.supports(ScoringMode.BAGWISE)


def test_search_orthonormal():
    index = build_index([ItemEmbedding(f"e{i}", row) for i, row in enumerate(np.eye(4))])
    ranking = search(index, np.eye(4)[2], top_k=10)
    assert ranking.item_ids[0] == "e2"
    assert ranking.entries[0][1] == 1.0
    assert len(ranking) == 4
    # remaining scores tie at 0.0 and come back in ascending id order
    assert ranking.item_ids[1:] == ["e0", "e1", "e3"]


def test_search_matches_full_scan():
    rng = np.random.default_rng(2)
    corpus = items(rng, 200)
    index = build_index(corpus)
    query = unit_rows(rng, 1, 8)[0]
    scores = {item.item_id: float(item.cls @ query) for item in corpus}
    expected = sorted(scores, key=lambda i: (-scores[i], i))[:25]
    assert search(index, query, top_k=25).item_ids == expected


def test_search_rejects_late_modes():
    rng = np.random.default_rng(3)
    index = build_index(items(rng, 3))
    with pytest.raises(UnsupportedModeError):
        search(index, unit_rows(rng, 1, 8)[0], ScoringMode.BAGWISE)


def test_rerank_replaces_scores():
    rng = np.random.default_rng(4)
    corpus = items(rng, 20)
    index = build_index(corpus)
    query = items(rng, 1, prefix="q")[0]
    first = search(index, query, top_k=10)
    second = rerank(index, query, first, ScoringMode.BAGWISE)
    assert sorted(second.item_ids) == sorted(first.item_ids)
    for item_id, score in second.entries:
        assert abs(score - pair_score(query, index.get(item_id), ScoringMode.BAGWISE, Direction.I2T)) < 1e-12

    single = rerank(index, query, first.top(1), ScoringMode.BAGWISE)
    assert single.item_ids == first.item_ids[:1]
    with pytest.raises(UnsupportedModeError):
        rerank(index, query, first, ScoringMode.GLOBAL)


def test_rerank_lifts_planted_match():
    # the true text is second by CLS but owns the only bag matching each patch
    e = np.eye(4)
    patches = EmbeddingMatrix(e[2:4])
    query = ItemEmbedding("img", e[0], patches)
    cls_near = np.array([0.9, np.sqrt(1 - 0.81), 0.0, 0.0])
    cls_far = np.array([0.8, np.sqrt(1 - 0.64), 0.0, 0.0])
    decoy = ItemEmbedding("decoy", cls_near, EmbeddingMatrix(e[1:2]))
    true = ItemEmbedding("true", cls_far, EmbeddingMatrix(e[2:4]))
    index = build_index([decoy, true])
    first = search(index, query, top_k=2)
    assert first.item_ids == ["decoy", "true"]
    assert rerank(index, query, first).item_ids == ["true", "decoy"]
    assert two_stage_search(index, query, ScoringMode.BAGWISE, top_k=1).item_ids == ["true"]


def test_degenerate_bagwise_equals_tokenwise():
    rng = np.random.default_rng(5)
    dim, vocab_size = 16, 64
    encoder = TextEncoder(EmbeddingMatrix(rng.standard_normal((vocab_size, dim))),
                          ToyMixer.from_seed(dim, 3), helper=None)
    head = ProjectionHead.random(dim, dim, seed=4)
    bagged, tokenized = [], []
    for i in range(500):
        tokens = [0] + [int(t) for t in rng.integers(1, vocab_size, size=rng.integers(1, 8))]
        bagged.append(encode_text(tokens, encoder, head, f"t{i:04d}", renormalize=False))
        rows = project(mix(lookup(encoder.token_table, tokens), encoder.mixer), head)
        tokenized.append(ItemEmbedding(f"t{i:04d}", l2_normalize(rows.data[0]), rows.take(1)))
    bag_index, token_index = build_index(bagged), build_index(tokenized)
    for q in range(20):
        image = ItemEmbedding(f"q{q}", unit_rows(rng, 1, dim)[0], EmbeddingMatrix(unit_rows(rng, 9, dim)))
        bag = two_stage_search(bag_index, image, ScoringMode.BAGWISE, Direction.I2T, depth=64)
        tok = two_stage_search(token_index, image, ScoringMode.TOKENWISE, Direction.I2T, depth=64)
        assert bag.entries == tok.entries


def test_search_is_thread_safe_and_deterministic():
    from concurrent.futures import ThreadPoolExecutor

    rng = np.random.default_rng(6)
    index = build_index(items(rng, 100))
    queries = items(rng, 16, prefix="q")
    serial = [two_stage_search(index, q, depth=32) for q in queries]
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = list(pool.map(lambda q: two_stage_search(index, q, depth=32), queries))
    assert [r.entries for r in serial] == [r.entries for r in parallel]


def test_evaluate_perfect_and_empty():
    results = [RankedList(f"q{i}", ((f"d{i}", 1.0), ("x", 0.5))) for i in range(3)]
    qrels = {f"q{i}": {f"d{i}"} for i in range(3)}
    report = evaluate(results, qrels)
    assert report.r_at == {1: 1.0, 5: 1.0, 10: 1.0} and report.mr == 1.0

    missed = evaluate(results, {f"q{i}": {"never"} for i in range(3)})
    assert missed.mr == 0.0

    with pytest.raises(MissingQrelError):
        evaluate(results, {"q0": {"d0"}})


def test_evaluate_matches_counting_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        results, qrels = [], {}
        for q in range(50):
            ids = [f"d{j}" for j in rng.permutation(30)[:15]]
            scores = np.sort(rng.random(15))[::-1]
            results.append(RankedList(f"q{q}", tuple(zip(ids, scores))))
            qrels[f"q{q}"] = {f"d{j}" for j in rng.integers(0, 30, size=rng.integers(1, 3))}
        report = evaluate(results, qrels)
        for k in (1, 5, 10):
            hits = 0
            for ranking in results:
                top = ranking.item_ids[:k]
                if any(item in qrels[ranking.query_id] for item in top):
                    hits += 1
            assert report.r_at[k] == hits / 50
        assert report.r_at[1] <= report.r_at[5] <= report.r_at[10]


def test_mean_recall_over_directions():
    i2t = EvalReport({1: 0.5, 5: 1.0, 10: 1.0}, 2.5 / 3)
    t2i = EvalReport({1: 0.0, 5: 0.5, 10: 1.0}, 0.5)
    assert abs(mean_recall(i2t, t2i) - 4.0 / 6) < 1e-12
    both = evaluate_directions(i2t, t2i)
    assert both["i2t_R@1"] == 0.5 and both["t2i_R@10"] == 1.0
    assert abs(both["MR"] - 4.0 / 6) < 1e-12


def test_recall_from_scores():
    scores = np.array([[0.9, 0.1, 0.0], [0.95, 0.2, 0.1], [0.0, 0.0, 0.5]])
    recall = recall_from_scores(scores, ks=(1, 2))
    assert recall[1] == 2 / 3
    assert recall[2] == 1.0


def test_ranked_list_validation():
    from errors import FormatError

    with pytest.raises(FormatError):
        RankedList("q", (("a", 0.1), ("b", 0.5)))
    with pytest.raises(DuplicateIdError):
        RankedList("q", (("a", 0.5), ("a", 0.1)))


def test_jsonl_round_trip(tmp_path):
    results = [RankedList("q1", (("a", 0.75), ("b", 0.25)))]
    save_results(results, str(tmp_path / "results.jsonl"))
    assert load_results(str(tmp_path / "results.jsonl")) == results
    save_qrels({"q1": ["b", "a"]}, str(tmp_path / "qrels.jsonl"))
    assert load_qrels(str(tmp_path / "qrels.jsonl")) == {"q1": {"a", "b"}}


def test_padded_candidates_are_ignored():
    q = ItemEmbedding("q", np.array([1.0, 0.0]), EmbeddingMatrix([[1.0, 0.0]]))
    padded = ItemEmbedding("c", np.array([1.0, 0.0]), EmbeddingMatrix([[0.0, 1.0], [1.0, 0.0]]),
                           PaddingMask([True, False]))
    index = build_index([padded])
    assert rerank(index, q, search(index, q)).entries[0][1] == 0.0


@pytest.mark.parametrize("direction", list(Direction))
def test_rerank_matches_pair_scores_with_ragged_padding(direction):
    rng = np.random.default_rng(8)
    corpus = []
    for i in range(40):
        rows = int(rng.integers(1, 9))
        x = unit_rows(rng, rows + 1, 6)
        valid = rng.random(rows) < 0.6
        valid[rng.integers(0, rows)] = True
        corpus.append(ItemEmbedding(f"c{i:03d}", x[0], EmbeddingMatrix(x[1:]), PaddingMask(valid)))
    index = build_index(corpus)
    for q in range(10):
        x = unit_rows(rng, 6, 6)
        mask = PaddingMask([True, True, False, True, True])
        query = ItemEmbedding(f"q{q}", x[0], EmbeddingMatrix(x[1:]), mask)
        shortlist = RankedList(query.item_id, tuple((item.item_id, 0.0) for item in corpus[::3]))
        for mode in (ScoringMode.BAGWISE, ScoringMode.TOKENWISE):
            ranked = rerank(index, query, shortlist, mode, direction)
            expected = {item_id: pair_score(query, index.get(item_id), mode, direction)
                        for item_id in shortlist.item_ids}
            assert sorted(ranked.item_ids) == sorted(expected)
            for item_id, score in ranked.entries:
                assert abs(score - expected[item_id]) < 1e-12


def test_rerank_unknown_and_empty_shortlists():
    rng = np.random.default_rng(9)
    index = build_index(items(rng, 5))
    query = items(rng, 1, prefix="q")[0]
    with pytest.raises(UnknownItemError):
        rerank(index, query, RankedList("q", (("nope", 1.0),)))
    assert rerank(index, query, RankedList("q", ())).entries == ()


def test_late_index_rejects_fully_padded_items():
    e = np.eye(2)
    hollow = ItemEmbedding("hollow", e[0], EmbeddingMatrix(e), PaddingMask([False, False]))
    with pytest.raises(EmptyMaskError):
        build_index([hollow])
    with pytest.raises(EmptyMaskError):
        build_index([hollow], modes=[ScoringMode.BAGWISE])
    assert not build_index([hollow], modes=[ScoringMode.GLOBAL]).supports(ScoringMode.BAGWISE)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
