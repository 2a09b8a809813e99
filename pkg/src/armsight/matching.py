"""Soft-IoU instance matching and the sequence loss built on it.

Ground-truth masks are matched to a recurrent network's per-step mask
predictions by minimum-cost assignment over pairwise soft-IoU costs.  The
assignment indices are treated as constants; gradients flow only through
the cost entries of the matched pairs and through the end-of-sequence
penalty.
"""

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment


def soft_iou_cost_matrix(gt_masks: torch.Tensor, pred_masks: torch.Tensor):
    """Pairwise soft-IoU costs between mask sets.

    gt_masks (R, H, W) and pred_masks (N, H, W) hold values in [0, 1].
    Cost is 1 - sum(gt * pred) / (sum(gt) + sum(pred) - sum(gt * pred)).
    An empty-vs-empty pair has an undefined ratio (0/0); it is assigned
    cost 1 and reported in the returned degenerate flag matrix.

    Returns (cost (R, N) tensor, degenerate (R, N) bool tensor).
    """
    gt = gt_masks.to(dtype=pred_masks.dtype if pred_masks.is_floating_point()
                     else torch.float64)
    pred = pred_masks.to(gt.dtype)
    if gt.ndim != 3 or pred.ndim != 3:
        raise ValueError("mask stacks must be (count, height, width)")
    if gt.shape[1:] != pred.shape[1:]:
        raise ValueError("ground truth and predictions differ in image shape")

    inter = torch.einsum("rhw,nhw->rn", gt, pred)
    gt_sum = gt.sum(dim=(1, 2))[:, None]
    pred_sum = pred.sum(dim=(1, 2))[None, :]
    union = gt_sum + pred_sum - inter
    degenerate = union == 0
    safe_union = torch.where(degenerate, torch.ones_like(union), union)
    cost = 1.0 - inter / safe_union
    cost = torch.where(degenerate, torch.ones_like(cost), cost)
    return cost, degenerate


def min_cost_assignment(cost) -> tuple:
    """Minimum-cost row/column assignment of a rectangular cost matrix.

    The matrix is padded to square with cost 1 (the soft-IoU cost of a
    non-overlapping pair), solved exactly, and pairs touching padding are
    dropped.  Returns (rows, cols) index arrays of equal length.
    """
    c = np.asarray(
        cost.detach().cpu().numpy() if isinstance(cost, torch.Tensor) else cost,
        dtype=np.float64,
    )
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    if c.size == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    n = max(c.shape)
    padded = np.ones((n, n), dtype=np.float64)
    padded[: c.shape[0], : c.shape[1]] = c
    rows, cols = linear_sum_assignment(padded)
    keep = (rows < c.shape[0]) & (cols < c.shape[1])
    return rows[keep], cols[keep]


def instance_sequence_loss(pred_masks: torch.Tensor, gt_masks: torch.Tensor):
    """Loss of one unrolled prediction sequence against R instances.

    pred_masks is (R+1, H, W): one mask per instance plus a final step
    whose target is the all-zero end-of-sequence mask.  The first R steps
    are matched to the ground truth by minimum-cost assignment on the
    soft-IoU matrix; the loss is the sum of matched costs plus the squared
    sum of the final mask.  Assignment indices carry no gradient.

    Returns (loss scalar tensor, (rows, cols) matched indices).
    """
    n_gt = gt_masks.shape[0]
    if pred_masks.shape[0] != n_gt + 1:
        raise ValueError(
            f"expected {n_gt + 1} prediction steps for {n_gt} instances, "
            f"got {pred_masks.shape[0]}"
        )
    end_penalty = (pred_masks[n_gt] ** 2).sum()
    if n_gt == 0:
        rows = np.empty(0, dtype=int)
        return end_penalty, (rows, rows.copy())
    cost, _ = soft_iou_cost_matrix(gt_masks, pred_masks[:n_gt])
    rows, cols = min_cost_assignment(cost.detach())
    matched = cost[rows, cols].sum()
    return matched + end_penalty, (rows, cols)


def pair_instances(gt_masks, pred_masks):
    """Match predicted to ground-truth instances for evaluation.

    Works on numpy or torch stacks.  Pairs with no overlap at all (cost 1,
    no better than padding) are not treated as matches.  Returns
    (pairs [(gt_idx, pred_idx), ...], missed gt indices, spurious pred
    indices).
    """
    gt = torch.as_tensor(np.asarray(gt_masks), dtype=torch.float64)
    pred = torch.as_tensor(np.asarray(pred_masks), dtype=torch.float64)
    if gt.shape[0] == 0 or pred.shape[0] == 0:
        return [], list(range(gt.shape[0])), list(range(pred.shape[0]))
    cost, _ = soft_iou_cost_matrix(gt, pred)
    rows, cols = min_cost_assignment(cost)
    pairs = [
        (int(r), int(c))
        for r, c in zip(rows, cols)
        if float(cost[r, c]) < 1.0
    ]
    matched_gt = {r for r, _ in pairs}
    matched_pred = {c for _, c in pairs}
    missed = [i for i in range(gt.shape[0]) if i not in matched_gt]
    spurious = [j for j in range(pred.shape[0]) if j not in matched_pred]
    return pairs, missed, spurious
