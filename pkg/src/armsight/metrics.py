"""Detection, counting, pixel and depth metrics.

Detection quality is measured as average precision over instance bounding
boxes pooled across all scenes (micro-averaged), with the continuous
precision-envelope integral.  Depth is evaluated in centimeters on the
supervised disc region only, split into near and far ranges.  All writers
emit canonical bytes: sorted keys, repr-formatted floats, no timestamps.
"""

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .matching import pair_instances

BOX_ACTIVATION = 0.6
NEAR_FAR_SPLIT_M = 5.0


def mask_to_box(mask: np.ndarray, activation: float = BOX_ACTIVATION):
    """Tight box around pixels strictly above the activation level.

    Returns (row_min, col_min, row_max, col_max) with inclusive limits, or
    None for an empty mask.
    """
    m = np.asarray(mask) > activation
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        return None
    return (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def box_iou(a, b) -> float:
    """Intersection over union of inclusive pixel boxes."""

    def area(box):
        return (box[2] - box[0] + 1) * (box[3] - box[1] + 1)

    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    if r1 < r0 or c1 < c0:
        return 0.0
    inter = (r1 - r0 + 1) * (c1 - c0 + 1)
    return inter / float(area(a) + area(b) - inter)


@dataclass(frozen=True)
class Detection:
    scene_id: str
    index: int
    confidence: float
    box: tuple


def average_precision(detections, gt_boxes: dict,
                      iou_threshold: float = 0.5) -> float:
    """Micro-averaged detection AP with the continuous precision envelope.

    detections is an iterable of Detection records pooled over scenes;
    gt_boxes maps scene_id to its list of ground-truth boxes.  Detections
    are ranked by descending confidence (ties broken by scene id, then
    detection index); each ground-truth box can match at most once.
    Returns nan when there is no ground truth at all.
    """
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return float("nan")
    order = sorted(detections, key=lambda d: (-d.confidence, d.scene_id, d.index))
    taken = {sid: np.zeros(len(boxes), dtype=bool) for sid, boxes in gt_boxes.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for i, det in enumerate(order):
        boxes = gt_boxes.get(det.scene_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(boxes):
            if taken[det.scene_id][j]:
                continue
            iou = box_iou(det.box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[det.scene_id][best_j] = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def summary_stats(values) -> dict:
    """mean / std / quartiles / count of a value collection."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return {"count": 0, "mean": float("nan"), "std": float("nan"),
                "p25": float("nan"), "p50": float("nan"), "p75": float("nan")}
    return {
        "count": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "p25": float(np.percentile(v, 25)),
        "p50": float(np.percentile(v, 50)),
        "p75": float(np.percentile(v, 75)),
    }


def depth_error_stats(pred_units, gt_units, transform,
                      split_m: float = NEAR_FAR_SPLIT_M) -> dict:
    """Centimeter depth errors on the supervised region, near/far split.

    Both inputs are unit-interval depth maps (stacks or single maps); the
    region is wherever the ground truth is positive, i.e. exactly where a
    belief reached the gating level during generation.  The split uses the
    ground-truth metric depth.
    """
    pred = np.asarray(pred_units, dtype=np.float64)
    gt = np.asarray(gt_units, dtype=np.float64)
    region = gt > 0
    if not region.any():
        empty = summary_stats([])
        return {"all": empty, "near": empty, "far": empty}
    z_gt = transform.to_depth(gt[region])
    z_pred = transform.to_depth(np.clip(pred[region], 0.0, 1.0))
    err_cm = np.abs(z_pred - z_gt) * 100.0
    near = z_gt < split_m
    return {
        "all": summary_stats(err_cm),
        "near": summary_stats(err_cm[near]),
        "far": summary_stats(err_cm[~near]),
    }


def pixel_error_stats(errors_px) -> dict:
    stats = summary_stats(errors_px)
    v = np.asarray(errors_px, dtype=np.float64).ravel()
    for t in (1.0, 3.0, 5.0):
        stats[f"within_{int(t)}px"] = (
            float((v <= t).mean()) if v.size else float("nan")
        )
    return stats


@dataclass
class SceneRecord:
    """Everything the evaluator needs from one scene.

    pred_joints is a list (one entry per predicted instance) of arrays
    shaped (J, 2) with nan rows for joints that were not found.
    """

    scene_id: str
    gt_masks: np.ndarray
    pred_masks: np.ndarray
    confidences: np.ndarray
    gt_depth: np.ndarray
    pred_depth: np.ndarray
    gt_joints_2d: np.ndarray
    gt_valid: np.ndarray
    pred_joints: list


def evaluate_scenes(records, transform, iou_threshold: float = 0.5,
                    box_activation: float = BOX_ACTIVATION,
                    split_m: float = NEAR_FAR_SPLIT_M) -> dict:
    """Aggregate metrics over a list of SceneRecord.

    Joint pixel errors are computed on instance pairs found by soft-IoU
    min-cost matching, restricted to joints that are valid in the ground
    truth (in frame, unoccluded) and found by the decoder.  Unmatched
    ground-truth robots are counted as misses, unmatched predictions as
    spurious.
    """
    detections = []
    gt_boxes = {}
    exact_count = 0
    pixel_errors = []
    joints_evaluable = 0
    joints_found = 0
    misses = 0
    spurious = 0
    pred_depths, gt_depths = [], []

    for rec in records:
        gt_boxes[rec.scene_id] = [
            b for b in (mask_to_box(m, box_activation) for m in rec.gt_masks)
            if b is not None
        ]
        for k in range(rec.pred_masks.shape[0]):
            box = mask_to_box(rec.pred_masks[k], box_activation)
            if box is not None:
                detections.append(
                    Detection(rec.scene_id, k, float(rec.confidences[k]), box)
                )
        if rec.pred_masks.shape[0] == rec.gt_masks.shape[0]:
            exact_count += 1

        pairs, missed, extra = pair_instances(
            rec.gt_masks.astype(np.float64),
            (rec.pred_masks > 0.5).astype(np.float64),
        )
        misses += len(missed)
        spurious += len(extra)
        for gi, pi in pairs:
            valid = rec.gt_valid[gi]
            joints_evaluable += int(valid.sum())
            pred = rec.pred_joints[pi]
            for j in np.nonzero(valid)[0]:
                if np.isnan(pred[j]).any():
                    continue
                joints_found += 1
                pixel_errors.append(
                    float(np.hypot(*(pred[j] - rec.gt_joints_2d[gi, j])))
                )
        pred_depths.append(rec.pred_depth)
        gt_depths.append(rec.gt_depth)

    n_scenes = len(list(records))
    return {
        "scenes": n_scenes,
        "ap": average_precision(detections, gt_boxes, iou_threshold),
        "count_accuracy": exact_count / n_scenes if n_scenes else float("nan"),
        "misses": misses,
        "spurious": spurious,
        "joint_recall": joints_found / joints_evaluable if joints_evaluable
        else float("nan"),
        "pixel_error": pixel_error_stats(pixel_errors),
        "depth_error_cm": depth_error_stats(
            np.stack(pred_depths), np.stack(gt_depths), transform, split_m
        ) if gt_depths else None,
    }


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    """Deterministic CSV: fixed column order, repr-exact floats."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def metrics_to_rows(metrics: dict, prefix: str = "") -> list:
    """Flatten a nested metrics dict into sorted (key, value) rows."""
    rows = []
    for key in sorted(metrics):
        value = metrics[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(metrics_to_rows(value, prefix=f"{name}."))
        elif value is None:
            rows.append((name, ""))
        else:
            rows.append((name, value))
    return rows


def write_metrics_csv(path, metrics: dict) -> None:
    write_csv(path, ["metric", "value"], metrics_to_rows(metrics))


_OVERLAY_COLORS = [
    (255, 80, 80), (80, 200, 255), (120, 255, 120), (255, 200, 60),
    (220, 120, 255), (255, 255, 255),
]


def render_overlay(image: np.ndarray, robots) -> Image.Image:
    """Draw decoded skeletons and mask outlines over a scene image.

    robots is a list of RobotEstimate-like objects (joints with row / col /
    found, an optional mask, a confidence).
    """
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(img)
    for k, robot in enumerate(robots):
        color = _OVERLAY_COLORS[k % len(_OVERLAY_COLORS)]
        if getattr(robot, "mask", None) is not None:
            edge = _mask_edges(np.asarray(robot.mask) > 0.5)
            for r, c in zip(*np.nonzero(edge)):
                draw.point((int(c), int(r)), fill=color)
        pts = []
        for joint in robot.joints:
            pts.append((joint.col, joint.row) if joint.found else None)
        for a, b in zip(pts, pts[1:]):
            if a is not None and b is not None:
                draw.line([a, b], fill=color, width=1)
        for p in pts:
            if p is not None:
                draw.ellipse(
                    [p[0] - 2, p[1] - 2, p[0] + 2, p[1] + 2], outline=color
                )
    return img


def _mask_edges(mask: np.ndarray) -> np.ndarray:
    inner = np.zeros_like(mask)
    inner[1:-1, 1:-1] = (
        mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1]
        & mask[1:-1, :-2] & mask[1:-1, 2:]
    )
    return mask & ~inner
