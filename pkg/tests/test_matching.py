import itertools

import numpy as np
import pytest
import torch

from armsight.matching import (
    instance_sequence_loss,
    min_cost_assignment,
    pair_instances,
    soft_iou_cost_matrix,
)


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimal total cost over every injective row-to-column map.

    A rectangular matrix is padded to square with 1.0, the same dummy cost
    the production path uses; all n! permutations are enumerated.
    """
    n = max(cost.shape)
    padded = np.ones((n, n))
    padded[: cost.shape[0], : cost.shape[1]] = cost
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(padded[i, perm[i]] for i in range(n)))
    return best


def reference_soft_iou(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Scalar-loop soft-IoU costs, no broadcasting, no einsum."""
    out = np.ones((gt.shape[0], pred.shape[0]))
    for r in range(gt.shape[0]):
        for n in range(pred.shape[0]):
            inter = float((gt[r] * pred[n]).sum())
            union = float(gt[r].sum() + pred[n].sum() - inter)
            if union > 0:
                out[r, n] = 1.0 - inter / union
    return out


def test_cost_matrix_matches_scalar_reference():
    rng = np.random.default_rng(0)
    for _ in range(10):
        gt = rng.random((3, 6, 5))
        pred = rng.random((4, 6, 5))
        cost, degenerate = soft_iou_cost_matrix(
            torch.tensor(gt), torch.tensor(pred)
        )
        np.testing.assert_allclose(cost.numpy(), reference_soft_iou(gt, pred),
                                   rtol=1e-12)
        assert not degenerate.any()


def test_identical_masks_cost_zero():
    m = torch.zeros(2, 4, 4)
    m[0, :2] = 1.0
    m[1, 2:] = 1.0
    cost, _ = soft_iou_cost_matrix(m, m)
    assert cost[0, 0] == 0.0 and cost[1, 1] == 0.0
    assert cost[0, 1] == 1.0 and cost[1, 0] == 1.0


def test_empty_vs_empty_is_degenerate_cost_one():
    gt = torch.zeros(1, 4, 4)
    pred = torch.zeros(2, 4, 4)
    pred[1, 0, 0] = 1.0
    cost, degenerate = soft_iou_cost_matrix(gt, pred)
    assert cost[0, 0] == 1.0 and degenerate[0, 0]
    assert cost[0, 1] == 1.0 and not degenerate[0, 1]


def test_shape_validation():
    with pytest.raises(ValueError):
        soft_iou_cost_matrix(torch.zeros(2, 4), torch.zeros(2, 4, 4))
    with pytest.raises(ValueError):
        soft_iou_cost_matrix(torch.zeros(1, 4, 4), torch.zeros(1, 4, 5))


def test_assignment_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(42)
    for _ in range(200):
        r = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        cost = rng.random((r, n))
        rows, cols = min_cost_assignment(cost)
        # padded square total: matched entries plus 1.0 per dropped pad pair
        padded_total = cost[rows, cols].sum() + (max(r, n) - len(rows)) * 1.0
        assert padded_total == pytest.approx(
            brute_force_assignment_cost(cost), abs=1e-12
        )
        assert len(set(rows.tolist())) == len(rows)
        assert len(set(cols.tolist())) == len(cols)


def test_assignment_handles_empty_and_rectangular():
    rows, cols = min_cost_assignment(np.zeros((0, 3)))
    assert len(rows) == 0 and len(cols) == 0
    cost = np.array([[0.9, 0.1, 0.8]])
    rows, cols = min_cost_assignment(cost)
    assert rows.tolist() == [0] and cols.tolist() == [1]


def test_sequence_loss_perfect_prediction_is_zero():
    gt = torch.zeros(2, 6, 6)
    gt[0, :3] = 1.0
    gt[1, 3:] = 1.0
    pred = torch.cat([gt, torch.zeros(1, 6, 6)])
    loss, (rows, cols) = instance_sequence_loss(pred, gt)
    assert float(loss) == 0.0
    assert sorted(zip(rows.tolist(), cols.tolist())) == [(0, 0), (1, 1)]


def test_sequence_loss_orders_predictions_by_assignment():
    gt = torch.zeros(2, 6, 6)
    gt[0, :3] = 1.0
    gt[1, 3:] = 1.0
    pred = torch.cat([gt[[1, 0]], torch.zeros(1, 6, 6)])  # swapped order
    loss, (rows, cols) = instance_sequence_loss(pred, gt)
    assert float(loss) == 0.0
    assert sorted(zip(rows.tolist(), cols.tolist())) == [(0, 1), (1, 0)]


def test_sequence_loss_end_penalty():
    gt = torch.zeros(0, 4, 4)
    pred = torch.full((1, 4, 4), 0.5)
    loss, (rows, cols) = instance_sequence_loss(pred, gt)
    assert float(loss) == pytest.approx(16 * 0.25)
    assert len(rows) == 0


def test_sequence_loss_requires_one_extra_step():
    with pytest.raises(ValueError):
        instance_sequence_loss(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4))


def test_sequence_loss_gradients_flow_through_matched_costs():
    gt = torch.zeros(1, 4, 4)
    gt[0, :2] = 1.0
    pred = torch.full((2, 4, 4), 0.3, requires_grad=True)
    loss, _ = instance_sequence_loss(pred, gt)
    loss.backward()
    assert pred.grad is not None
    assert torch.isfinite(pred.grad).all()
    # the end-of-sequence step receives the 2 * pred penalty gradient
    np.testing.assert_allclose(pred.grad[1].numpy(), 2 * 0.3 * np.ones((4, 4)),
                               rtol=1e-6)


def test_pair_instances_drops_nonoverlapping():
    gt = np.zeros((2, 4, 4))
    gt[0, :2] = 1.0
    gt[1, 2:] = 1.0
    pred = np.zeros((2, 4, 4))
    pred[0, :2] = 1.0  # overlaps gt 0 exactly
    # pred 1 stays empty: no overlap with anything
    pairs, missed, spurious = pair_instances(gt, pred)
    assert pairs == [(0, 0)]
    assert missed == [1]
    assert spurious == [1]


def test_pair_instances_empty_sides():
    pairs, missed, spurious = pair_instances(np.zeros((0, 4, 4)), np.zeros((2, 4, 4)))
    assert pairs == [] and missed == [] and spurious == [0, 1]
    pairs, missed, spurious = pair_instances(np.zeros((2, 4, 4)), np.zeros((0, 4, 4)))
    assert pairs == [] and missed == [0, 1] and spurious == []
