#!/usr/bin/env python3
"""
Tests for the contrastive objectives and the text encoding pipeline
"""

import numpy as np
import pytest

from bagging import Vocabulary, build_helper
from contrastive import (
    BaggingPlacement,
    Temperature,
    bwc_loss,
    bwc_objective,
    contrastive_loss,
    encode_text_pipeline,
    grad_check,
    itc_loss,
    itc_objective,
    lookup,
)
from config import TAU_MIN
from embedding_core import EmbeddingMatrix, ProjectionHead, ToyMixer
from errors import DimMismatchError, EmptyInputError, NonPositiveTauError, NonSquareError
from similarity import ScoringMode, SimilarityMatrix


def scores_of(values, mode=ScoringMode.GLOBAL):
    return SimilarityMatrix(np.asarray(values, dtype=np.float64), mode)


def test_single_pair_loss_is_zero():
    report = itc_loss(scores_of([[0.37]]), Temperature(0.07))
    assert report.l_i2t == 0.0 and report.l_t2i == 0.0 and report.l_itc == 0.0
    assert bwc_loss(scores_of([[-0.5]]), Temperature(1.0)).l_bwc == 0.0


def test_two_pair_separation():
    report = itc_loss(scores_of([[10.0, -10.0], [-10.0, 10.0]]), Temperature(1.0))
    expected = float(np.log1p(np.exp(-20.0)))
    assert abs(report.l_i2t - expected) < 1e-12
    assert abs(report.l_itc - expected) < 1e-12


@pytest.mark.parametrize("bs", [2, 3, 8, 17])
def test_uniform_scores_give_log_bs(bs):
    report = itc_loss(scores_of(np.full((bs, bs), 0.3)), Temperature(0.07))
    assert abs(report.l_itc - np.log(bs)) < 1e-12


def test_itc_is_mean_of_directions():
    rng = np.random.default_rng(0)
    report = itc_loss(scores_of(rng.uniform(-1, 1, (5, 5))), Temperature(0.1))
    assert report.l_itc == (report.l_i2t + report.l_t2i) / 2


def test_row_shift_invariance():
    rng = np.random.default_rng(1)
    s = rng.uniform(-1, 1, (4, 4))
    shifted = s.copy()
    shifted[2] += 0.7
    a = itc_loss(scores_of(s), Temperature(0.5))
    b = itc_loss(scores_of(shifted), Temperature(0.5))
    assert abs(a.l_i2t - b.l_i2t) < 1e-9


def test_bwc_matches_itc_on_same_matrix():
    rng = np.random.default_rng(2)
    s = rng.uniform(-1, 1, (6, 6))
    itc = itc_loss(scores_of(s), Temperature(0.2))
    bwc = bwc_loss(scores_of(s, ScoringMode.BAGWISE), Temperature(0.2))
    assert bwc.l_bwc == itc.l_itc
    assert bwc.l_bwc_i2t == itc.l_i2t and bwc.l_bwc_t2i == itc.l_t2i
    assert np.array_equal(bwc.grad_scores_bwc, itc.grad_scores_itc)
    assert bwc.grad_tau == itc.grad_tau


def test_combined_objective():
    rng = np.random.default_rng(3)
    g, b = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (4, 4))
    tau = Temperature(0.1)
    report = contrastive_loss(scores_of(g), scores_of(b, ScoringMode.BAGWISE), tau, lam=0.5)
    assert report.total == report.l_itc + 0.5 * report.l_bwc
    assert report.l_itc == itc_loss(scores_of(g), tau).l_itc
    assert report.l_bwc == bwc_loss(scores_of(b), tau).l_bwc
    expected_tau = itc_loss(scores_of(g), tau).grad_tau + 0.5 * bwc_loss(scores_of(b), tau).grad_tau
    assert abs(report.grad_tau - expected_tau) < 1e-12

    separate = contrastive_loss(scores_of(g), scores_of(b), tau, lam=0.5, tau_bwc=Temperature(0.3))
    assert separate.grad_tau == itc_loss(scores_of(g), tau).grad_tau
    assert separate.grad_tau_bwc == 0.5 * bwc_loss(scores_of(b), Temperature(0.3)).grad_tau


def test_loss_errors():
    with pytest.raises(NonSquareError):
        itc_loss(scores_of(np.zeros((2, 3))), Temperature(1.0))
    with pytest.raises(NonPositiveTauError):
        Temperature(0.0)
    with pytest.raises(NonPositiveTauError):
        Temperature(-0.1)
    assert Temperature(50.0).clamped().tau == 10.0


def test_grad_check_on_quadratic():
    def quadratic(s, tau):
        return float((s ** 2).sum() + tau ** 2), 2 * s, 2 * tau

    rng = np.random.default_rng(4)
    assert grad_check(quadratic, rng.uniform(-1, 1, (3, 3)), 0.5) < 1e-8


def test_grad_check_at_tau_floor():
    def quadratic(s, tau):
        return float((s ** 2).sum() + tau ** 2), 2 * s, 2 * tau

    rng = np.random.default_rng(11)
    s = rng.uniform(-1, 1, (4, 4))
    # tau equal to the largest allowed epsilon must not step to a zero temperature
    assert grad_check(quadratic, s, TAU_MIN, epsilon=1e-3) < 1e-8
    assert np.isfinite(grad_check(itc_objective, s, TAU_MIN, epsilon=1e-3))
    assert np.isfinite(grad_check(bwc_objective, s, TAU_MIN, epsilon=1e-5))


def test_grad_check_rejects_epsilon():
    with pytest.raises(ValueError):
        grad_check(itc_objective, np.zeros((2, 2)), 1.0, epsilon=1e-2)


@pytest.mark.parametrize("bs,tau", [(4, 0.07), (8, 1.0), (3, 0.2)])
def test_itc_and_bwc_gradients(bs, tau):
    rng = np.random.default_rng(bs)
    s = rng.uniform(-1, 1, (bs, bs))
    assert grad_check(itc_objective, s, tau) < 1e-4
    assert grad_check(bwc_objective, s, tau) < 1e-4


def test_gradients_fuzz():
    rng = np.random.default_rng(5)
    for _ in range(100):
        bs = int(rng.integers(1, 9))
        tau = float(rng.uniform(0.05, 1.0))
        s = rng.uniform(-1, 1, (bs, bs))
        assert grad_check(itc_objective, s, tau) < 1e-4
        assert grad_check(bwc_objective, s, tau) < 1e-4


# ---------------------------
# Text pipeline
# ---------------------------
def random_setup(rng, dim=6, vocab_size=12):
    table = EmbeddingMatrix(rng.standard_normal((vocab_size, dim)))
    head = ProjectionHead(rng.standard_normal((dim, dim + 2)))
    return table, head


def test_early_late_equal_with_identity_mixer():
    rng = np.random.default_rng(6)
    for _ in range(100):
        table, head = random_setup(rng)
        entries = {tuple(int(t) for t in rng.integers(1, 12, size=rng.integers(1, 4))) for _ in range(4)}
        helper = build_helper(Vocabulary.from_token_sequences(sorted(entries)))
        tokens = [0] + [int(t) for t in rng.integers(1, 12, size=rng.integers(1, 10))]
        mixer = ToyMixer.identity(6)
        early = encode_text_pipeline(tokens, table, mixer, helper, head, BaggingPlacement.EARLY, renormalize=False)
        late = encode_text_pipeline(tokens, table, mixer, helper, head, BaggingPlacement.LATE, renormalize=False)
        assert np.max(np.abs(early[0] - late[0])) < 1e-9
        assert early[1].rows == late[1].rows
        assert np.max(np.abs(early[1].data - late[1].data)) < 1e-9


def test_early_late_differ_with_seeded_mixer():
    rng = np.random.default_rng(7)
    helper = build_helper(Vocabulary.from_token_sequences([[1, 2], [3, 4, 5]]))
    differ = 0
    for trial in range(100):
        table, head = random_setup(rng)
        tokens = [0] + [int(t) for t in rng.integers(6, 12, size=rng.integers(0, 4))] + [1, 2]
        mixer = ToyMixer.from_seed(6, seed=trial)
        _, early = encode_text_pipeline(tokens, table, mixer, helper, head, BaggingPlacement.EARLY)
        _, late = encode_text_pipeline(tokens, table, mixer, helper, head, BaggingPlacement.LATE)
        if early.rows != late.rows or not np.allclose(early.data, late.data, atol=1e-9):
            differ += 1
    assert differ >= 95


def test_empty_vocabulary_reduces_to_token_pipeline():
    rng = np.random.default_rng(8)
    table, head = random_setup(rng)
    tokens = [0, 3, 7, 7, 2]
    mixer = ToyMixer.from_seed(6, seed=1)
    cls_e, early = encode_text_pipeline(tokens, table, mixer, None, head, BaggingPlacement.EARLY)
    cls_l, late = encode_text_pipeline(tokens, table, mixer, None, head, BaggingPlacement.LATE)
    assert early.rows == late.rows == 4
    assert np.allclose(early.data, late.data, atol=1e-12)
    assert np.allclose(cls_e, cls_l, atol=1e-12)


def test_pipeline_output_normalization():
    rng = np.random.default_rng(9)
    table, head = random_setup(rng)
    helper = build_helper(Vocabulary.from_token_sequences([[1, 2]]))
    cls, bags = encode_text_pipeline([0, 1, 2, 5], table, ToyMixer.from_seed(6, 2), helper, head)
    assert abs(np.linalg.norm(cls) - 1.0) < 1e-12
    assert bags.rows == 2
    assert np.allclose(np.linalg.norm(bags.data, axis=1), 1.0)

    cls, bags = encode_text_pipeline([0], table, ToyMixer.identity(6), helper, head)
    assert bags.rows == 0


def test_pipeline_errors():
    rng = np.random.default_rng(10)
    table, head = random_setup(rng)
    with pytest.raises(EmptyInputError):
        encode_text_pipeline([], table, ToyMixer.identity(6), None, head)
    with pytest.raises(DimMismatchError):
        encode_text_pipeline([0, 1], table, ToyMixer.identity(5), None, head)
    with pytest.raises(DimMismatchError):
        lookup(table, [0, 12])


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
