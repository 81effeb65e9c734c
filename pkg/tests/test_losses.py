from __future__ import annotations

import math

import numpy as np
import pytest

from config import EmbeddingLossParams
from gradcheck import check_bce, check_distance, check_embedding_loss, check_regularization, check_variance, rel_error
from losses import (
    ClusterStats,
    MaskedEmbeddingBatch,
    bce_loss,
    cluster_stats,
    distance_term,
    embedding_loss,
    embedding_loss_map,
    regularization_term,
    semantic_loss,
    variance_term,
)


def _batch(x, ids) -> MaskedEmbeddingBatch:
    return MaskedEmbeddingBatch(x=np.asarray(x, dtype=np.float64), ids=np.asarray(ids))


def _means(*centers) -> ClusterStats:
    means = np.asarray(centers, dtype=np.float64).reshape(len(centers), -1)
    C = means.shape[0]
    return ClusterStats(ids=np.arange(1, C + 1), means=means, counts=np.ones(C, dtype=np.int64), inverse=np.arange(C))


def _three_clusters(rng: np.random.Generator, dims: int = 4) -> MaskedEmbeddingBatch:
    centers = rng.normal(0.0, 3.0, size=(3, dims))
    x = np.concatenate([c + rng.normal(0.0, 0.6, size=(6, dims)) for c in centers])
    return _batch(x, np.repeat([1, 2, 3], 6))


# ---------------------------------------------------------------------------
# semantic
# ---------------------------------------------------------------------------
def test_bce_half_probability_is_ln2() -> None:
    loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
    assert loss == pytest.approx(math.log(2.0), abs=1e-6)


def test_bce_saturated_prediction_is_near_zero() -> None:
    loss, grad = bce_loss(np.array([1.0 - 1e-7]), np.array([1.0]))
    assert loss == pytest.approx(0.0, abs=1e-6)
    assert grad[0] == 0.0


def test_bce_shape_mismatch() -> None:
    with pytest.raises(ValueError):
        bce_loss(np.zeros(3), np.zeros(4))


def test_bce_gradient_matches_finite_differences(rng: np.random.Generator) -> None:
    assert rel_error(*check_bce(rng)) < 1e-7


def test_semantic_loss_equal_logits() -> None:
    loss, d, fg = semantic_loss(np.zeros((1, 2, 2, 2, 2)), np.ones((1, 2, 2, 2)))
    assert loss == pytest.approx(math.log(2.0), abs=1e-6)
    assert np.allclose(fg, 0.5)
    # pushing foreground up lowers the loss
    assert np.all(d[:, 1] < 0) and np.all(d[:, 0] > 0)


# ---------------------------------------------------------------------------
# embedding terms
# ---------------------------------------------------------------------------
def test_cluster_stats_two_point_mean() -> None:
    stats = cluster_stats(_batch([[0.0], [2.0]], [5, 5]))
    assert stats.C == 1
    assert stats.means[0, 0] == pytest.approx(1.0)
    assert stats.counts[0] == 2


def test_cluster_stats_matches_naive_means(rng: np.random.Generator) -> None:
    batch = _three_clusters(rng)
    stats = cluster_stats(batch)
    for row, cid in enumerate(stats.ids):
        assert np.allclose(stats.means[row], batch.x[batch.ids == cid].mean(axis=0), atol=1e-12)


def test_cluster_stats_empty_batch_raises() -> None:
    with pytest.raises(ValueError):
        cluster_stats(_batch(np.zeros((0, 3)), np.zeros(0, dtype=np.uint32)))


def test_variance_term_hand_value() -> None:
    batch = _batch([[0.0], [1.0]], [1, 1])
    loss, _ = variance_term(cluster_stats(batch), batch, delta_v=0.2)
    assert loss == pytest.approx(0.09, abs=1e-12)


def test_variance_term_inactive_hinge() -> None:
    batch = _batch([[0.0], [0.4]], [1, 1])
    loss, dx = variance_term(cluster_stats(batch), batch, delta_v=0.5)
    assert loss == 0.0
    assert np.all(dx == 0.0)


def test_distance_term_hand_value() -> None:
    loss, _ = distance_term(_means([0.0], [1.0]), delta_d=3.0)
    assert loss == pytest.approx(4.0, abs=1e-12)


def test_distance_term_hinge_boundary() -> None:
    loss, dmu = distance_term(_means([0.0], [1.5]), delta_d=1.5)
    assert loss == 0.0
    assert np.all(dmu == 0.0)


def test_distance_term_single_instance_is_zero() -> None:
    assert distance_term(_means([0.3, 0.1]), delta_d=1.5)[0] == 0.0


def test_regularization_values() -> None:
    assert regularization_term(_means([0.5]))[0] == pytest.approx(0.5)
    loss, dmu = regularization_term(_means([0.0, 0.0], [0.0, 0.0]))
    assert loss == 0.0
    assert np.all(dmu == 0.0)


def test_embedding_loss_composition() -> None:
    batch = _batch([[0.0], [1.0]], [1, 1])
    res = embedding_loss(batch, EmbeddingLossParams(delta_v=0.2, delta_d=1.5, alpha=1.0, beta=1.0, gamma=0.001))
    assert res.l_v == pytest.approx(0.09)
    assert res.l_d == 0.0
    assert res.l_r == pytest.approx(0.5)
    assert res.total == pytest.approx(0.0905, abs=1e-12)


def test_tight_separated_clusters_leave_only_regularization() -> None:
    batch = _batch([[5.0, 0.0], [5.1, 0.0], [-5.0, 0.0], [-5.0, 0.1]], [1, 1, 2, 2])
    params = EmbeddingLossParams(delta_v=0.5, delta_d=1.5)
    res = embedding_loss(batch, params)
    assert res.l_v == 0.0 and res.l_d == 0.0
    assert res.total == pytest.approx(params.gamma * res.l_r)


def test_translation_changes_only_regularization(rng: np.random.Generator) -> None:
    batch = _three_clusters(rng)
    params = EmbeddingLossParams()
    base = embedding_loss(batch, params)
    moved = embedding_loss(_batch(batch.x + rng.normal(size=batch.x.shape[1]), batch.ids), params)
    assert moved.l_v == pytest.approx(base.l_v, rel=1e-9, abs=1e-12)
    assert moved.l_d == pytest.approx(base.l_d, rel=1e-9, abs=1e-12)
    assert moved.l_r != pytest.approx(base.l_r)


def test_relabeling_instances_leaves_loss_unchanged(rng: np.random.Generator) -> None:
    batch = _three_clusters(rng)
    params = EmbeddingLossParams()
    relabeled = _batch(batch.x, np.select([batch.ids == 1, batch.ids == 2], [40, 7], 13))
    a = embedding_loss(batch, params)
    b = embedding_loss(relabeled, params)
    assert b.total == pytest.approx(a.total, rel=1e-10)
    assert np.allclose(a.grad, b.grad, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("check", [check_variance, check_distance, check_regularization, check_embedding_loss])
def test_term_gradients_match_finite_differences(check, rng: np.random.Generator) -> None:
    assert rel_error(*check(rng)) < 1e-6


def test_loss_map_scatters_gradient_to_foreground(rng: np.random.Generator) -> None:
    gt = np.zeros((4, 4, 4), dtype=np.uint32)
    gt[0, :2, :2] = 1
    gt[3, 2:, 2:] = 2
    emb = rng.normal(size=(3, 4, 4, 4))
    res = embedding_loss_map(emb, gt, EmbeddingLossParams())
    assert res is not None
    assert res.grad.shape == emb.shape
    assert np.all(res.grad[:, gt == 0] == 0.0)


def test_loss_map_without_foreground_is_none(rng: np.random.Generator) -> None:
    assert embedding_loss_map(rng.normal(size=(3, 4, 4, 4)), np.zeros((4, 4, 4), dtype=np.uint32), EmbeddingLossParams()) is None
