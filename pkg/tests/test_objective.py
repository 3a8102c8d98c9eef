import numpy as np
import pytest

from scoopflow import (
    DistanceMode,
    FlowField,
    InvalidInput,
    LossConfig,
    PointCloud,
    build_index,
    chamfer_loss,
    confidence_distance_loss,
    confidence_loss,
    evaluate_losses,
    nn_distance_loss,
    smoothness_loss,
    total_loss,
)
from scoopflow.objective import smoothness_neighborhoods

from oracles import (
    brute_neighborhoods,
    chamfer_oracle,
    confidence_distance_oracle,
    nn_distance_oracle,
    smoothness_oracle,
)


def _random_instance(seed, n_max=200):
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(5, n_max + 1))
    n_t = int(rng.integers(5, n_max + 1))
    soft = rng.normal(size=(n_s, 3))
    targets = rng.normal(size=(n_t, 3))
    p = rng.uniform(size=n_s)
    return soft, targets, p


def test_nn_distance_trivial_examples():
    targets = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    index = build_index(targets)
    assert nn_distance_loss(targets.points, index) == 0.0
    assert nn_distance_loss(np.array([[0.0, 0, 0]]), build_index(
        PointCloud(np.array([[0.0, 0, 2.0]])))) == pytest.approx(4.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_nn_distance_matches_oracle(seed):
    soft, targets, _ = _random_instance(seed)
    got = nn_distance_loss(soft, build_index(PointCloud(targets)))
    assert got == pytest.approx(nn_distance_oracle(soft.tolist(), targets.tolist()), abs=1e-12)


def test_confidence_distance_examples():
    soft = np.array([[0.0, 0, 0]])
    index = build_index(PointCloud(np.array([[0.0, 0, 2.0]])))
    assert confidence_distance_loss(soft, np.zeros(1), index) == 0.0
    assert confidence_distance_loss(soft, np.array([0.5]), index) == pytest.approx(2.0, abs=1e-15)


def test_confidence_distance_reduces_to_nn_at_unit_p():
    soft, targets, _ = _random_instance(10)
    index = build_index(PointCloud(targets))
    assert confidence_distance_loss(soft, np.ones(len(soft)), index) == \
        nn_distance_loss(soft, index)


@pytest.mark.parametrize("seed", range(5))
def test_confidence_distance_matches_oracle(seed):
    soft, targets, p = _random_instance(seed + 100)
    got = confidence_distance_loss(soft, p, build_index(PointCloud(targets)))
    expect = confidence_distance_oracle(soft.tolist(), p.tolist(), targets.tolist())
    assert got == pytest.approx(expect, abs=1e-12)


def test_confidence_loss_examples():
    assert confidence_loss(np.ones(7)) == 0.0
    assert confidence_loss(np.zeros(7)) == 1.0
    assert confidence_loss(np.array([0.2, 0.8])) == pytest.approx(0.5, abs=1e-15)


def test_smoothness_constant_flow_zero():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3))
    flow = FlowField(np.tile([0.3, -0.2, 1.0], (20, 1)))
    assert smoothness_loss(flow, build_index(PointCloud(pts)), k_f=4) == 0.0


def test_smoothness_two_point_example():
    pts = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    flow = FlowField(np.array([[0.0, 0, 0], [1.0, 2.0, 0]]))
    assert smoothness_loss(flow, build_index(pts), k_f=1) == pytest.approx(3.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_smoothness_matches_oracle(seed):
    rng = np.random.default_rng(seed + 200)
    n = int(rng.integers(10, 120))
    pts = rng.normal(size=(n, 3))
    flow = rng.normal(size=(n, 3))
    k_f = int(rng.integers(1, min(9, n)))
    got = smoothness_loss(FlowField(flow), build_index(PointCloud(pts)), k_f)
    expect = smoothness_oracle(flow.tolist(), k_f, pts.tolist())
    assert got == pytest.approx(expect, abs=1e-12)


def test_smoothness_neighborhoods_exclude_self():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(30, 3))
    nbr = smoothness_neighborhoods(build_index(PointCloud(pts)), 5)
    assert nbr.shape == (30, 5)
    assert not (nbr == np.arange(30)[:, None]).any()
    assert nbr.tolist() == brute_neighborhoods(pts.tolist(), 5)


def test_smoothness_invariant_to_constant_shift():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(40, 3))
    flow = rng.normal(size=(40, 3))
    index = build_index(PointCloud(pts))
    a = smoothness_loss(FlowField(flow), index, 6)
    b = smoothness_loss(FlowField(flow + np.array([10.0, -3.0, 0.5])), index, 6)
    assert a == pytest.approx(b, abs=1e-12)


def test_smoothness_k_f_must_be_below_n():
    pts = PointCloud(np.zeros((4, 3)) + np.arange(4)[:, None])
    with pytest.raises(InvalidInput):
        smoothness_loss(FlowField(np.zeros((4, 3))), build_index(pts), 4)


def test_chamfer_examples():
    rng = np.random.default_rng(5)
    cloud = PointCloud(rng.normal(size=(15, 3)))
    assert chamfer_loss(cloud, PointCloud(cloud.points.copy())) == 0.0
    a = PointCloud(np.array([[0.0, 0, 0]]))
    b = PointCloud(np.array([[0.0, 0, 1.0]]))
    assert chamfer_loss(a, b) == pytest.approx(2.0, abs=1e-15)


def test_chamfer_symmetric():
    rng = np.random.default_rng(6)
    a = PointCloud(rng.normal(size=(25, 3)))
    b = PointCloud(rng.normal(size=(35, 3)))
    assert chamfer_loss(a, b) == pytest.approx(chamfer_loss(b, a), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_matches_oracle(seed):
    rng = np.random.default_rng(seed + 300)
    a = rng.normal(size=(int(rng.integers(5, 120)), 3))
    b = rng.normal(size=(int(rng.integers(5, 120)), 3))
    got = chamfer_loss(PointCloud(a), PointCloud(b))
    assert got == pytest.approx(chamfer_oracle(a.tolist(), b.tolist()), abs=1e-12)


def test_total_loss_weighting():
    cfg = LossConfig(alpha_conf=0.1, alpha_flow=10.0)
    report = total_loss(0.0, 0.0, 0.0, cfg)
    assert report.total == 0.0
    report = total_loss(1.0, 1.0, 1.0, cfg)
    assert report.total == pytest.approx(11.1, abs=1e-12)
    # dropping the smoothness weight removes that term entirely
    report = total_loss(1.0, 1.0, 1.0, LossConfig(alpha_conf=0.1, alpha_flow=0.0))
    assert report.total == pytest.approx(1.1, abs=1e-12)


def test_losses_nonnegative_finite():
    for seed in range(5):
        soft, targets, p = _random_instance(seed + 400, n_max=60)
        index = build_index(PointCloud(targets))
        vals = [
            nn_distance_loss(soft, index),
            confidence_distance_loss(soft, p, index),
            confidence_loss(p),
        ]
        assert all(np.isfinite(v) and v >= 0 for v in vals)


def test_evaluate_losses_modes():
    rng = np.random.default_rng(7)
    x = PointCloud(rng.normal(size=(30, 3)))
    y = PointCloud(rng.normal(size=(30, 3)))
    flow = FlowField(rng.normal(size=(30, 3)) * 0.1)
    p = rng.uniform(size=30)
    cfg_nn = LossConfig(k_f=4)
    report = evaluate_losses(x, y, flow, p, cfg_nn)
    warped = x.points + flow.vectors
    assert report.dist == pytest.approx(
        confidence_distance_loss(warped, p, build_index(y)), abs=1e-15)
    assert report.total == pytest.approx(
        report.dist + 0.1 * report.conf + 10.0 * report.flow_smooth, abs=1e-12)

    cfg_cd = LossConfig(k_f=4, distance_mode=DistanceMode.CHAMFER)
    report_cd = evaluate_losses(x, y, flow, p, cfg_cd)
    assert report_cd.dist == pytest.approx(
        chamfer_loss(PointCloud(warped), y), abs=1e-15)
