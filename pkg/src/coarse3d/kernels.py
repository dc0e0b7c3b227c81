"""Hot loops over points and pixels.

Every kernel has a numba implementation (``*_numba``) and a vectorised numpy
implementation (``*_numpy``). The public name dispatches on
:data:`coarse3d._accel.USE_NUMBA`. Both paths produce identical outputs,
including tie-breaking, which the test-suite checks directly.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# z-buffer: nearest point per pixel
# ---------------------------------------------------------------------------


@njit(cache=True)
def zbuffer_numba(pixel, ranges, n_pixels):
    best = np.full(n_pixels, np.inf)
    owner = np.full(n_pixels, -1, dtype=np.int64)
    for i in range(pixel.shape[0]):
        p = pixel[i]
        if p < 0:
            continue
        # strict < keeps the lowest point id on equal range
        if ranges[i] < best[p]:
            best[p] = ranges[i]
            owner[p] = i
    return owner


def zbuffer_numpy(pixel, ranges, n_pixels):
    owner = np.full(n_pixels, -1, dtype=np.int64)
    ids = np.flatnonzero(pixel >= 0)
    if ids.size == 0:
        return owner
    order = np.lexsort((ids, ranges[ids], pixel[ids]))
    sorted_pix = pixel[ids][order]
    first = np.ones(sorted_pix.size, dtype=bool)
    first[1:] = sorted_pix[1:] != sorted_pix[:-1]
    owner[sorted_pix[first]] = ids[order][first]
    return owner


def zbuffer(pixel, ranges, n_pixels):
    """Index of the smallest-range point for each flat pixel, -1 where empty.

    ``pixel`` holds the flat pixel id of each point, negative for dropped points.
    """
    pixel = np.ascontiguousarray(pixel, dtype=np.int64)
    ranges = np.ascontiguousarray(ranges, dtype=np.float64)
    if USE_NUMBA:
        return zbuffer_numba(pixel, ranges, int(n_pixels))
    return zbuffer_numpy(pixel, ranges, int(n_pixels))


# ---------------------------------------------------------------------------
# kNN majority vote in a range-image window
# ---------------------------------------------------------------------------


@njit(cache=True)
def knn_vote_numba(rows, cols, ranges, pix_range, pix_label, k, window, n_classes):
    H, W = pix_range.shape
    half = window // 2
    n = rows.shape[0]
    out = np.empty(n, dtype=np.int64)
    kd = np.empty(k)
    kl = np.empty(k, dtype=np.int64)
    counts = np.zeros(n_classes, dtype=np.int64)
    mind = np.empty(n_classes)
    for i in range(n):
        m = 0
        for dr in range(-half, half + 1):
            r = rows[i] + dr
            if r < 0 or r >= H:
                continue
            for dc in range(-half, half + 1):
                c = (cols[i] + dc) % W
                lab = pix_label[r, c]
                if lab < 0:
                    continue
                d = abs(pix_range[r, c] - ranges[i])
                # insertion into the sorted k-best list; equal distances keep scan order
                if m < k:
                    j = m
                    m += 1
                elif d < kd[k - 1]:
                    j = k - 1
                else:
                    continue
                while j > 0 and kd[j - 1] > d:
                    kd[j] = kd[j - 1]
                    kl[j] = kl[j - 1]
                    j -= 1
                kd[j] = d
                kl[j] = lab
        if m == 0:
            out[i] = -1
            continue
        counts[:] = 0
        mind[:] = np.inf
        for j in range(m):
            counts[kl[j]] += 1
            if kd[j] < mind[kl[j]]:
                mind[kl[j]] = kd[j]
        best = -1
        for c in range(n_classes):
            if counts[c] == 0:
                continue
            if best < 0 or counts[c] > counts[best] or (
                counts[c] == counts[best] and mind[c] < mind[best]
            ):
                best = c
        out[i] = best
    return out


def knn_vote_numpy(rows, cols, ranges, pix_range, pix_label, k, window, n_classes):
    H, W = pix_range.shape
    half = window // 2
    n = rows.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    offs = np.arange(-half, half + 1)
    dr = np.repeat(offs, window)
    dc = np.tile(offs, window)
    rr = rows[:, None] + dr[None, :]
    cc = (cols[:, None] + dc[None, :]) % W
    inside = (rr >= 0) & (rr < H)
    rr_c = np.clip(rr, 0, H - 1)
    lab = np.where(inside, pix_label[rr_c, cc], -1)
    dist = np.abs(pix_range[rr_c, cc] - ranges[:, None])
    dist = np.where(lab >= 0, dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    sel_d = np.take_along_axis(dist, order, axis=1)
    sel_l = np.take_along_axis(lab, order, axis=1)
    ok = np.isfinite(sel_d)
    row_id = np.broadcast_to(np.arange(n)[:, None], sel_l.shape)
    counts = np.zeros((n, n_classes), dtype=np.int64)
    mind = np.full((n, n_classes), np.inf)
    np.add.at(counts, (row_id[ok], sel_l[ok]), 1)
    np.minimum.at(mind, (row_id[ok], sel_l[ok]), sel_d[ok])
    top = counts.max(axis=1, keepdims=True)
    key = np.where((counts == top) & (counts > 0), mind, np.inf)
    out = np.argmin(key, axis=1).astype(np.int64)
    out[top[:, 0] == 0] = -1
    return out


def knn_vote(rows, cols, ranges, pix_range, pix_label, k, window, n_classes):
    """Majority label among the ``k`` range-closest labelled pixels in a window.

    Columns wrap around (the azimuth axis is circular), rows do not. Vote ties go
    to the class with the smallest range difference, then the smallest id.
    Points with no labelled neighbour get -1.
    """
    args = (
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(ranges, dtype=np.float64),
        np.ascontiguousarray(pix_range, dtype=np.float64),
        np.ascontiguousarray(pix_label, dtype=np.int64),
        int(k),
        int(window),
        int(n_classes),
    )
    if USE_NUMBA:
        return knn_vote_numba(*args)
    return knn_vote_numpy(*args)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------


@njit(cache=True)
def confusion_numba(gt, pred, n_classes):
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i in range(gt.shape[0]):
        g = gt[i]
        p = pred[i]
        if g < 0 or g >= n_classes or p < 0 or p >= n_classes:
            continue
        conf[g, p] += 1
    return conf


def confusion_numpy(gt, pred, n_classes):
    ok = (gt >= 0) & (gt < n_classes) & (pred >= 0) & (pred < n_classes)
    flat = gt[ok] * n_classes + pred[ok]
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def confusion(gt, pred, n_classes):
    """Row = ground truth, column = prediction. Out-of-range entries are skipped."""
    gt = np.ascontiguousarray(gt, dtype=np.int64)
    pred = np.ascontiguousarray(pred, dtype=np.int64)
    if USE_NUMBA:
        return confusion_numba(gt, pred, int(n_classes))
    return confusion_numpy(gt, pred, int(n_classes))
