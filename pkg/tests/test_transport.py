import numpy as np
import pytest

from scoopflow import (
    DegenerateTransport,
    InvalidInput,
    TransportConfig,
    TransportPlan,
    marginals,
    sinkhorn,
)
from scoopflow.features import CostMatrix

from oracles import sinkhorn_oracle


def _cost(entries, gated=None):
    entries = np.asarray(entries, dtype=np.float64)
    if gated is None:
        gated = np.zeros_like(entries, dtype=bool)
    return CostMatrix(entries, gated)


def test_config_validation():
    with pytest.raises(InvalidInput):
        TransportConfig(epsilon=0.0, epsilon_offset=0.0)
    with pytest.raises(InvalidInput):
        TransportConfig(iterations=0)
    with pytest.raises(InvalidInput):
        TransportConfig(lam=-1.0)
    assert TransportConfig(epsilon=0.01, epsilon_offset=0.02).effective_epsilon == pytest.approx(0.03)


def test_uniform_cost_gives_uniform_plan():
    cost = _cost(np.full((5, 5), 0.7))
    plan = sinkhorn(cost, TransportConfig())
    assert np.abs(plan.mass - plan.mass[0, 0]).max() < 1e-12


def test_two_by_two_diagonal_dominates():
    cost = _cost([[0.0, 2.0], [2.0, 0.0]])
    plan = sinkhorn(cost, TransportConfig(epsilon=0.03, lam=10.0, iterations=1))
    assert plan.mass[0, 0] > plan.mass[0, 1]
    assert plan.mass[1, 1] > plan.mass[1, 0]


def test_three_by_three_frozen_oracle_values():
    # Scaling transcript executed independently by scalar loops (see
    # oracles.sinkhorn_oracle); values frozen from that run.
    cost = np.array([
        [0.3, 1.1, 0.7],
        [0.9, 0.2, 1.5],
        [0.6, 1.3, 0.4],
    ])
    plan = sinkhorn(_cost(cost), TransportConfig(epsilon=0.05, lam=2.0, iterations=1))
    frozen = np.array([
        [0.3403619387411088, 5.4560325685859475e-09, 0.0008035105760220752],
        [1.993928282940238e-06, 0.3415701858820269, 8.621487735174181e-11],
        [0.0008845812296601727, 1.0477620126370448e-10, 0.3398772621126629],
    ])
    assert np.abs(plan.mass - frozen).max() < 1e-15
    oracle = np.array(sinkhorn_oracle(cost.tolist(), np.zeros((3, 3), bool).tolist(), 0.05, 2.0, 1))
    assert np.abs(plan.mass - oracle).max() < 1e-15


@pytest.mark.parametrize("seed", range(4))
def test_random_rectangular_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n_s, n_t = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    cost = rng.uniform(0, 2, size=(n_s, n_t))
    gated = rng.uniform(size=(n_s, n_t)) < 0.15
    gated[np.arange(n_s), rng.integers(0, n_t, n_s)] = False  # keep rows active
    gated[rng.integers(0, n_s, n_t), np.arange(n_t)] = False  # keep columns active
    cfg = TransportConfig(epsilon=0.1, lam=3.0, iterations=int(rng.integers(1, 4)))
    plan = sinkhorn(_cost(cost, gated), cfg)
    oracle = np.array(sinkhorn_oracle(cost.tolist(), gated.tolist(),
                                      cfg.epsilon, cfg.lam, cfg.iterations))
    assert np.abs(plan.mass - oracle).max() < 1e-14
    assert np.all(plan.mass[gated] == 0.0)


def test_gated_pairs_carry_zero_mass():
    rng = np.random.default_rng(9)
    cost = rng.uniform(0, 2, size=(12, 12))
    gated = rng.uniform(size=(12, 12)) < 0.3
    gated[:, 0] = False  # every row keeps an ungated entry
    gated[0, :] = False
    plan = sinkhorn(_cost(cost, gated), TransportConfig())
    assert np.all(plan.mass[gated] == 0.0)
    assert np.all(plan.mass[~gated] > 0.0)


def test_fully_gated_row_uniform_fallback():
    cost = np.array([[0.1, 0.2], [0.3, 0.1], [0.2, 0.2]])
    gated = np.array([[False, False], [True, True], [False, False]])
    plan = sinkhorn(_cost(cost, gated), TransportConfig())
    assert np.all(plan.mass[1] == 1.0 / 6.0)
    assert np.all(plan.mass[[0, 2]] > 0.0)


def test_zero_column_raises_degenerate():
    x_cost = np.array([[0.1, 0.5], [0.2, 0.6]])
    gated = np.array([[False, True], [False, True]])
    with pytest.raises(DegenerateTransport) as err:
        sinkhorn(_cost(x_cost, gated), TransportConfig())
    assert err.value.axis == "column" and err.value.index == 1


def test_underflow_row_raises_degenerate():
    # exp(-2 / 1e-4) underflows to exactly zero; row 1 dies without gating.
    cost = np.array([[0.0, 0.0], [2.0, 2.0]])
    with pytest.raises(DegenerateTransport) as err:
        sinkhorn(_cost(cost), TransportConfig(epsilon=1e-4))
    assert err.value.axis == "row" and err.value.index == 1


def test_lambda_zero_returns_kernel():
    rng = np.random.default_rng(11)
    cost = rng.uniform(0, 2, size=(6, 6))
    plan = sinkhorn(_cost(cost), TransportConfig(epsilon=0.5, lam=0.0))
    assert np.abs(plan.mass - np.exp(-cost / 0.5)).max() < 1e-15


def test_large_lambda_tightens_row_sums():
    rng = np.random.default_rng(12)
    cost = rng.uniform(0, 2, size=(64, 64))
    plan = sinkhorn(_cost(cost), TransportConfig(epsilon=0.03, lam=1e6, iterations=50))
    rows, _ = marginals(plan)
    assert np.abs(rows - 1.0 / 64).max() < 1e-3


def test_marginals_examples():
    plan = TransportPlan(np.array([[0.25]]))
    rows, cols = marginals(plan)
    assert rows.tolist() == [0.25] and cols.tolist() == [0.25]

    zero = TransportPlan(np.zeros((3, 4)))
    rows, cols = marginals(zero)
    assert not rows.any() and not cols.any()


def test_plan_entries_nonnegative_finite():
    for seed in range(5):
        r = np.random.default_rng(seed)
        cost = r.uniform(0, 2, size=(10, 7))
        plan = sinkhorn(_cost(cost), TransportConfig(epsilon=0.03, lam=10.0))
        assert np.all(np.isfinite(plan.mass)) and np.all(plan.mass >= 0)
    with pytest.raises(InvalidInput):
        TransportPlan(np.array([[-1.0]]))
