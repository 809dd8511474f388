"""Map querying (retrieval, classification) and evaluation metrics.

Instance point sets are compared on the map's voxel lattice: a point set is
reduced to the set of voxel cells it occupies and IoU is computed over those
cells, which makes scores independent of point density and sampling order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .semantics import bank_similarity
from .tsdf import pack_coords


def retrieve(records, query: np.ndarray, top_k: int | None = None, threshold: float | None = None):
    """Rank instances against a query embedding by best bank similarity.

    Returns (id, score) pairs sorted by score descending (lower id wins
    ties). top_k keeps the best k; threshold keeps scores strictly above it;
    both may be combined. Instances with empty banks never appear.
    """
    scored = []
    for rec in records:
        if not rec.bank.entries:
            continue
        scored.append((rec.id, bank_similarity(rec.bank, query)))
    scored.sort(key=lambda t: (-t[1], t[0]))
    if threshold is not None:
        scored = [(i, s) for i, s in scored if s > threshold]
    if top_k is not None:
        scored = scored[:top_k]
    return scored


def classify(records, label_bank, exclude=()):
    """Assign each instance the best-matching label from a labeled embedding set.

    label_bank is an ordered list of (label, unit embedding); ties go to the
    earlier entry. Instances with empty banks are skipped. Returns a dict
    id -> label.
    """
    labels = [(lab, emb) for lab, emb in label_bank if lab not in exclude]
    if not labels:
        raise ValueError("label bank is empty")
    out = {}
    for rec in records:
        if not rec.bank.entries:
            continue
        best_lab, best_s = None, -np.inf
        for lab, emb in labels:
            s = bank_similarity(rec.bank, emb)
            if s > best_s:
                best_lab, best_s = lab, s
        out[rec.id] = best_lab
    return out


def cell_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Packed voxel key per point, in point order.

    Points are snapped to the nearest cell center, so points that came from
    cell centers map back to exactly their cell.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    coords = np.rint(pts / voxel_size - 0.5).astype(np.int64)
    return pack_coords(coords)


def voxel_keys(points: np.ndarray, voxel_size: float) -> set[int]:
    """Set of voxel cells (as packed keys) a point set touches."""
    return set(int(k) for k in cell_keys(points, voxel_size))


def point_set_iou(a: np.ndarray, b: np.ndarray, voxel_size: float) -> float:
    """IoU of two point sets on the voxel lattice; 0 when either is empty."""
    ka, kb = voxel_keys(a, voxel_size), voxel_keys(b, voxel_size)
    if not ka or not kb:
        return 0.0
    return len(ka & kb) / len(ka | kb)


def instance_ap(
    predictions: list[tuple[np.ndarray, float]],
    ground_truth: list[np.ndarray],
    iou_threshold: float,
    voxel_size: float,
) -> float:
    """Average precision of scored instance predictions against ground truth.

    Predictions are walked in score order (stable for ties); each one is a
    true positive iff its best lattice IoU against a still-unclaimed ground
    truth instance reaches the threshold. AP is the Riemann sum of precision
    over recall increments, exactly as the PR points fall (no interpolation).
    """
    if not ground_truth:
        raise ValueError("ground truth is empty")
    gt_keys = [voxel_keys(g, voxel_size) for g in ground_truth]
    if any(not k for k in gt_keys):
        raise ValueError("ground truth instance with no points")
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i][1], i))
    claimed = [False] * len(gt_keys)
    ap = 0.0
    tp = 0
    for rank, i in enumerate(order, start=1):
        keys = voxel_keys(predictions[i][0], voxel_size)
        best_j, best_iou = -1, 0.0
        for j, gk in enumerate(gt_keys):
            if claimed[j] or not keys:
                continue
            iou = len(keys & gk) / len(keys | gk)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_threshold:
            claimed[best_j] = True
            tp += 1
            ap += (1.0 / len(gt_keys)) * (tp / rank)
    return ap


def instance_map(
    predictions: list[tuple[np.ndarray, float, int]],
    ground_truth: list[tuple[np.ndarray, int]],
    iou_threshold: float,
    voxel_size: float,
) -> float:
    """Mean AP over the classes present in ground truth.

    Predictions and ground truth carry class ids; predictions for classes
    with no ground truth are ignored.
    """
    if not ground_truth:
        raise ValueError("ground truth is empty")
    classes = sorted({cls for _, cls in ground_truth})
    aps = []
    for cls in classes:
        preds = [(pts, score) for pts, score, c in predictions if c == cls]
        gts = [pts for pts, c in ground_truth if c == cls]
        aps.append(instance_ap(preds, gts, iou_threshold, voxel_size))
    return float(np.mean(aps))


@dataclass(frozen=True)
class SemanticScores:
    miou: float
    macc: float
    fw_iou: float
    fw_acc: float
    per_class_iou: dict[int, float]


def eval_semantic(pred: np.ndarray, gt: np.ndarray, ignore=(0,)) -> SemanticScores:
    """Per-element semantic scores between predicted and true label arrays.

    Classes in the ignore set (background by default) never form rows of
    their own but still absorb false positives/negatives of real classes.
    mIoU averages over classes present in either array; mAcc (recall) and the
    frequency-weighted variants average only over classes with ground truth
    support, weighted by it in the fw_ forms.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground truth length mismatch")
    if len(gt) == 0:
        raise ValueError("nothing to evaluate")
    classes = sorted(set(np.unique(pred)) | set(np.unique(gt)))
    classes = [int(c) for c in classes if int(c) not in set(ignore)]
    if not classes:
        raise ValueError("no classes outside the ignore set")
    iou_by_class: dict[int, float] = {}
    accs, weights, gt_counts = [], [], []
    for c in classes:
        tp = int(np.count_nonzero((pred == c) & (gt == c)))
        fp = int(np.count_nonzero((pred == c) & (gt != c)))
        fn = int(np.count_nonzero((pred != c) & (gt == c)))
        iou_by_class[c] = tp / (tp + fp + fn)
        if tp + fn > 0:
            accs.append(tp / (tp + fn))
            weights.append(iou_by_class[c])
            gt_counts.append(tp + fn)
    if not gt_counts:
        raise ValueError("ground truth has no labeled elements")
    total = float(sum(gt_counts))
    return SemanticScores(
        miou=float(np.mean(list(iou_by_class.values()))),
        macc=float(np.mean(accs)),
        fw_iou=float(sum(w * n for w, n in zip(weights, gt_counts)) / total),
        fw_acc=float(sum(a * n for a, n in zip(accs, gt_counts)) / total),
        per_class_iou=iou_by_class,
    )


def match_instances(
    pred_sets: list[np.ndarray], gt_sets: list[np.ndarray], voxel_size: float
) -> dict[int, int]:
    """Greedy one-to-one matching of predicted to true instances by lattice IoU.

    Pairs are taken in decreasing IoU order (ties: lower pred index, then
    lower gt index); pairs with zero overlap never match. Returns
    pred index -> gt index.
    """
    scored = []
    for i, p in enumerate(pred_sets):
        for j, g in enumerate(gt_sets):
            iou = point_set_iou(p, g, voxel_size)
            if iou > 0.0:
                scored.append((-iou, i, j))
    scored.sort()
    used_p, used_g = set(), set()
    out = {}
    for _, i, j in scored:
        if i in used_p or j in used_g:
            continue
        out[i] = j
        used_p.add(i)
        used_g.add(j)
    return out
