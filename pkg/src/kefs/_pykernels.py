"""Pure-Python/numpy versions of the evaluation kernels.

Semantics must match ``_ckernels.pyx`` exactly; the test suite compares them.
"""

import numpy as np


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def greedy_match(iou, thresh):
    """Rows are detections in descending-score order. Each takes the unmatched
    column with the highest IoU (lowest index on ties) if it reaches ``thresh``.
    Returns the matched column per row, -1 for false positives."""
    iou = np.asarray(iou, dtype=np.float64)
    n_det, n_gt = iou.shape
    taken = [False] * n_gt
    out = np.full(n_det, -1, dtype=np.int64)
    for i in range(n_det):
        best, best_j = -1.0, -1
        row = iou[i]
        for j in range(n_gt):
            if not taken[j] and row[j] > best:
                best, best_j = row[j], j
        if best_j >= 0 and best >= thresh:
            taken[best_j] = True
            out[i] = best_j
    return out


def average_precision_from_hits(hits, n_gt):
    """All-points interpolated AP from true-positive flags in ranked order."""
    hits = np.asarray(hits, dtype=np.float64)
    if n_gt <= 0:
        return 0.0
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    ap = 0.0
    prev_recall = 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    for r, p in zip(recall, envelope):
        ap += (r - prev_recall) * p
        prev_recall = r
    return float(ap)


def silhouette_samples(X, labels):
    """Per-sample silhouette with Euclidean distance; singleton classes score 0."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    K = int(labels.max()) + 1 if n else 0
    counts = np.bincount(labels, minlength=K)
    sums = np.zeros((n, K))
    for i in range(n):
        d = np.sqrt(((X - X[i]) ** 2).sum(axis=1))
        sums[i] = np.bincount(labels, weights=d, minlength=K)
    out = np.zeros(n)
    for i in range(n):
        own = labels[i]
        if counts[own] < 2:
            continue
        a = sums[i, own] / (counts[own] - 1)
        b = np.inf
        for c in range(K):
            if c != own and counts[c] > 0:
                b = min(b, sums[i, c] / counts[c])
        m = max(a, b)
        out[i] = 0.0 if m == 0 else (b - a) / m
    return out
