"""Slow, loop-based reference implementations used to cross-check the package.

Nothing here imports the code under test; each function follows the textbook
definition as literally as possible.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

# closed forms evaluated by hand (natural logs)
NCE_ONE_POS_ONE_NEG = -math.log(math.e / (math.e + 1.0))  # 0.31326...
FOCAL_HALF_GAMMA2 = 0.25 * math.log(2.0)  # 0.17329...
ENTROPY_09_01 = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))  # 0.32508...
RHO_H0_H1 = (1.0 / (1.0 + math.exp(-1.0)), math.exp(-1.0) / (1.0 + math.exp(-1.0)))
FOCAL_WEIGHT_ABSENT = math.log(1.0 + 1e6)  # 13.8155...


def project_point(x, y, z, height, width, fov_up_deg, fov_down_deg):
    """(row, col, range) of one point, or None when it is outside the vertical fov."""
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        return None
    pitch = math.asin(max(-1.0, min(1.0, z / r)))
    up, down = math.radians(fov_up_deg), math.radians(fov_down_deg)
    if pitch > up or pitch < down:
        return None
    yaw = math.atan2(y, x)
    row = math.floor((1.0 - (pitch - down) / (up - down)) * height)
    col = math.floor((yaw + math.pi) / (2 * math.pi) * width)
    return min(max(row, 0), height - 1), min(max(col, 0), width - 1), r


def nearest_per_pixel(coords, height, width, fov_up, fov_down):
    """dict pixel -> index of the nearest point (lowest index on equal range)."""
    best = {}
    for i, (x, y, z) in enumerate(coords):
        p = project_point(x, y, z, height, width, fov_up, fov_down)
        if p is None:
            continue
        key = (p[0], p[1])
        if key not in best or p[2] < best[key][1]:
            best[key] = (i, p[2])
    return {k: v[0] for k, v in best.items()}


def knn_label(point_row, point_col, point_range, pix_range, pix_label, k, window, n_classes):
    """Majority label among the k range-closest valid pixels of the window (columns wrap)."""
    H, W = pix_range.shape
    half = window // 2
    cands = []
    for dr in range(-half, half + 1):
        r = point_row + dr
        if r < 0 or r >= H:
            continue
        for dc in range(-half, half + 1):
            c = (point_col + dc) % W
            if pix_label[r, c] < 0:
                continue
            cands.append((abs(pix_range[r, c] - point_range), (dr + half) * window + (dc + half), pix_label[r, c]))
    if not cands:
        return -1
    cands.sort(key=lambda t: (t[0], t[1]))
    chosen = cands[:k]
    votes = {}
    for d, _, lab in chosen:
        n, dmin = votes.get(lab, (0, math.inf))
        votes[lab] = (n + 1, min(dmin, d))
    return min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], lab))


def balanced_assignments(n_k, n_p):
    """All maps rows -> columns with column loads differing by at most one."""
    lo, hi = n_k // n_p, -(-n_k // n_p)
    for assign in itertools.product(range(n_p), repeat=n_k):
        loads = np.bincount(assign, minlength=n_p)
        if loads.min() >= lo and loads.max() <= hi:
            yield assign


def best_balanced_assignment(cost):
    """(best assignment, best cost, runner-up cost) by exhaustive search."""
    n_k, n_p = cost.shape
    scored = sorted(
        (sum(cost[i, a[i]] for i in range(n_k)), a) for a in balanced_assignments(n_k, n_p)
    )
    best_cost, best = scored[0]
    second = scored[1][0] if len(scored) > 1 else math.inf
    return np.array(best), best_cost, second


def iou_from_pairs(gt, pred, n_classes):
    ious = []
    for k in range(n_classes):
        tp = sum(1 for g, p in zip(gt, pred) if g == k and p == k)
        fp = sum(1 for g, p in zip(gt, pred) if g != k and p == k)
        fn = sum(1 for g, p in zip(gt, pred) if g == k and p != k)
        ious.append(tp / (tp + fp + fn) if (tp + fn) > 0 else float("nan"))
    return ious


def lovasz_class_loss(errors, fg):
    """Lovasz extension of the Jaccard loss, evaluated by its greedy definition.

    Sort errors descending; the loss is sum_i e_(i) * (J(S_i) - J(S_{i-1})) where
    S_i is the set of the i largest-error pixels flagged as mistakes and
    J(S) = 1 - |fg minus S| / |fg union S|.
    """
    order = sorted(range(len(errors)), key=lambda i: -errors[i])
    fg_set = {i for i in range(len(fg)) if fg[i]}

    def jac(S):
        inter = len(fg_set - S)
        union = len(fg_set | S)
        return 1.0 - inter / union if union else 0.0

    total, prev, S = 0.0, 0.0, set()
    for i in order:
        S.add(i)
        cur = jac(S)
        total += errors[i] * (cur - prev)
        prev = cur
    return total


def sinkhorn_reference(cost, iterations, epsilon):
    """Plain-numpy Sinkhorn with the same schedule (columns then rows)."""
    n_k, n_p = cost.shape
    P = np.exp(-np.asarray(cost, dtype=np.float64) / epsilon)
    P /= P.sum()
    for _ in range(iterations):
        P *= (1.0 / n_p) / P.sum(axis=0, keepdims=True)
        P *= (1.0 / n_k) / P.sum(axis=1, keepdims=True)
    return P


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at float64 array ``x`` (copied)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
