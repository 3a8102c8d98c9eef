import numpy as np
import pytest

from scoopflow import (
    CorrespondenceConfig,
    InvalidInput,
    PointCloud,
    TransportConfig,
    TransportPlan,
    confidence,
    correspond,
    cost_matrix,
    initial_flow,
    sinkhorn,
    soft_correspondence,
    top_k_weights,
)
from scoopflow.features import FeatureMatrix


def test_uniform_row_equal_weights():
    plan = TransportPlan(np.full((2, 6), 0.05))
    idx, w = top_k_weights(plan, CorrespondenceConfig(k_s=4))
    assert np.allclose(w, 0.25, atol=1e-15)
    assert np.array_equal(idx, [[0, 1, 2, 3], [0, 1, 2, 3]])  # ties -> lower index


def test_top1_selects_max():
    plan = TransportPlan(np.array([[0.9, 0.1, 0.0]]))
    idx, w = top_k_weights(plan, CorrespondenceConfig(k_s=1))
    assert idx.tolist() == [[0]]
    assert w.tolist() == [[1.0]]


def test_top2_frozen_softmax_values():
    plan = TransportPlan(np.array([[0.5, 0.3, 0.2]]))
    idx, w = top_k_weights(plan, CorrespondenceConfig(k_s=2))
    assert idx.tolist() == [[0, 1]]
    assert w[0] == pytest.approx([0.549833997312478, 0.4501660026875221], rel=1e-12)


def test_k_s_exceeding_targets_rejected():
    plan = TransportPlan(np.ones((2, 3)))
    with pytest.raises(InvalidInput):
        top_k_weights(plan, CorrespondenceConfig(k_s=4))


def test_k_s_equals_n_t_weights_all_targets():
    rng = np.random.default_rng(0)
    mass = rng.uniform(size=(5, 8))
    idx, w = top_k_weights(TransportPlan(mass), CorrespondenceConfig(k_s=8))
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    # every target selected exactly once per row
    assert np.array_equal(np.sort(idx, axis=1), np.tile(np.arange(8), (5, 1)))


def test_weight_rows_sum_to_one_random():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mass = rng.uniform(size=(20, 30)) * rng.uniform(0, 1e-3)
        k_s = int(rng.integers(1, 31))
        _, w = top_k_weights(TransportPlan(mass), CorrespondenceConfig(k_s=k_s))
        assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12


def test_weight_monotone_in_selected_mass():
    rng = np.random.default_rng(1)
    mass = rng.uniform(0.1, 1.0, size=(1, 6))
    cfg = CorrespondenceConfig(k_s=3)
    idx, w = top_k_weights(TransportPlan(mass), cfg)
    bumped = mass.copy()
    bumped[0, idx[0, 1]] += 0.05  # stays within the selected set
    idx2, w2 = top_k_weights(TransportPlan(bumped), cfg)
    pos = np.where(idx2[0] == idx[0, 1])[0][0]
    assert w2[0, pos] >= w[0, 1]


def test_soft_correspondence_k1_exact_target():
    y = PointCloud(np.array([[0.0, 0, 0], [5.0, 1, 2]]))
    targets = soft_correspondence(y, np.array([[1], [0]]), np.array([[1.0], [1.0]]))
    assert np.array_equal(targets, np.array([[5.0, 1, 2], [0.0, 0, 0]]))


def test_soft_correspondence_midpoint():
    y = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    targets = soft_correspondence(y, np.array([[0, 1]]), np.array([[0.5, 0.5]]))
    assert np.array_equal(targets, np.array([[1.0, 0, 0]]))


def test_soft_targets_inside_selected_bbox():
    rng = np.random.default_rng(2)
    y = PointCloud(rng.normal(size=(30, 3)))
    idx = rng.integers(0, 30, size=(10, 5))
    raw = rng.uniform(size=(10, 5))
    w = raw / raw.sum(axis=1, keepdims=True)
    targets = soft_correspondence(y, idx, w)
    sel = y.points[idx]
    assert np.all(targets >= sel.min(axis=1) - 1e-12)
    assert np.all(targets <= sel.max(axis=1) + 1e-12)


def test_initial_flow_examples():
    x = PointCloud(np.array([[0.0, 0, 0], [1.0, 1, 1]]))
    flow = initial_flow(x, x.points.copy())
    assert not flow.vectors.any()

    x1 = PointCloud(np.array([[0.0, 0, 0]]))
    flow = initial_flow(x1, np.array([[0.0, 0, 3.0]]))
    assert flow.vectors.tolist() == [[0.0, 0.0, 3.0]]


def test_confidence_examples():
    # all selected similarities 1 -> p = 1
    sim = np.ones((2, 4))
    idx = np.array([[0, 1], [2, 3]])
    w = np.full((2, 2), 0.5)
    assert confidence(sim, idx, w).tolist() == [1.0, 1.0]

    # negative weighted similarity trims to zero
    sim = np.full((1, 2), -0.5)
    p = confidence(sim, np.array([[0, 1]]), np.array([[0.5, 0.5]]))
    assert p.tolist() == [0.0]

    # hand-evaluated dot product: 0.8 * 0.75 + 0.4 * 0.25 = 0.7
    sim = np.array([[0.8, 0.4]])
    p = confidence(sim, np.array([[0, 1]]), np.array([[0.75, 0.25]]))
    assert p[0] == pytest.approx(0.7, abs=1e-15)


def test_confidence_zero_for_fully_gated_rows():
    sim = np.ones((2, 3))
    idx = np.array([[0, 1], [0, 1]])
    w = np.full((2, 2), 0.5)
    p = confidence(sim, idx, w, fully_gated=np.array([False, True]))
    assert p.tolist() == [1.0, 0.0]


def test_confidence_bounds_random():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        sim = rng.uniform(-1, 1, size=(15, 20))
        mass = rng.uniform(size=(15, 20))
        idx, w = top_k_weights(TransportPlan(mass), CorrespondenceConfig(k_s=6))
        p = confidence(sim, idx, w)
        assert np.all(p >= 0.0) and np.all(p <= 1.0)


def test_correspond_pipeline_zero_flow_on_identical_clouds():
    # 50-point random cloud matched to itself with centered-coordinate
    # features: the sharp-kernel regime makes every top-1 match exact.
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 1, size=(50, 3))
    x = PointCloud(pts)
    y = PointCloud(pts.copy())
    feats = FeatureMatrix(pts - pts.mean(axis=0))
    cm = cost_matrix(feats, feats, x, y, gate_radius=10.0)
    plan = sinkhorn(cm, TransportConfig(epsilon=1e-4, lam=10.0, iterations=1))
    corr = correspond(x, y, plan, cm, CorrespondenceConfig(k_s=1))
    assert np.abs(corr.initial_flow.vectors).max() < 1e-12
    assert np.all(corr.confidence > 0.99)
