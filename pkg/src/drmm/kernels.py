"""Hot numeric kernels.

Every kernel has a numba path and a numpy path; ``DRMM_DISABLE_JIT=1``
selects the numpy one (see ``_jit``). Both paths must agree to rounding.
"""
import numpy as np

from ._jit import USE_JIT, njit

LOG_FLOOR = float(np.log(1e-12))
LOG_PI = float(np.log(np.pi))


# ---------------------------------------------------------------- IoU matrix

@njit
def _iou_matrix_jit(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def _iou_matrix_np(a, b):
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where((union > 0) & (inter > 0), inter / np.where(union > 0, union, 1.0), 0.0)


def iou_matrix(a, b):
    if USE_JIT:
        return _iou_matrix_jit(a, b)
    return _iou_matrix_np(a, b)


# ---------------------------------------------------------- bilinear crop

@njit
def _crop_jit(rasters, boxes, out_size, sampling):
    bsz, k = boxes.shape[0], boxes.shape[1]
    h, w, cin = rasters.shape[1], rasters.shape[2], rasters.shape[3]
    out = np.zeros((bsz, k, out_size, out_size, cin))
    norm = 1.0 / (sampling * sampling)
    for s in range(bsz):
        for q in range(k):
            l, t, r, bt = boxes[s, q, 0], boxes[s, q, 1], boxes[s, q, 2], boxes[s, q, 3]
            for a in range(out_size):
                for u in range(sampling):
                    y = t + (a + (u + 0.5) / sampling) / out_size * (bt - t)
                    py = min(max(y * h - 0.5, 0.0), h - 1.0)
                    y0 = min(int(np.floor(py)), h - 1)
                    y1 = min(y0 + 1, h - 1)
                    fy = py - y0
                    for c in range(out_size):
                        for v in range(sampling):
                            x = l + (c + (v + 0.5) / sampling) / out_size * (r - l)
                            px = min(max(x * w - 0.5, 0.0), w - 1.0)
                            x0 = min(int(np.floor(px)), w - 1)
                            x1 = min(x0 + 1, w - 1)
                            fx = px - x0
                            w00 = (1.0 - fy) * (1.0 - fx)
                            w01 = (1.0 - fy) * fx
                            w10 = fy * (1.0 - fx)
                            w11 = fy * fx
                            for ch in range(cin):
                                out[s, q, a, c, ch] += norm * (
                                    w00 * rasters[s, y0, x0, ch]
                                    + w01 * rasters[s, y0, x1, ch]
                                    + w10 * rasters[s, y1, x0, ch]
                                    + w11 * rasters[s, y1, x1, ch]
                                )
    return out


def _crop_np(rasters, boxes, out_size, sampling):
    bsz, k = boxes.shape[:2]
    h, w, cin = rasters.shape[1:]
    frac = (np.arange(out_size)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling) / out_size
    frac = frac.reshape(-1)  # (out_size * sampling,)
    ys = boxes[:, :, 1, None] + frac[None, None, :] * (boxes[:, :, 3] - boxes[:, :, 1])[:, :, None]
    xs = boxes[:, :, 0, None] + frac[None, None, :] * (boxes[:, :, 2] - boxes[:, :, 0])[:, :, None]
    py = np.clip(ys * h - 0.5, 0.0, h - 1.0)
    px = np.clip(xs * w - 0.5, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(py).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (py - y0)[:, :, :, None, None]
    fx = (px - x0)[:, :, None, :, None]
    sidx = np.arange(bsz)[:, None, None, None]

    def gather(yi, xi):
        return rasters[sidx, yi[:, :, :, None], xi[:, :, None, :]]

    vals = (
        (1.0 - fy) * (1.0 - fx) * gather(y0, x0)
        + (1.0 - fy) * fx * gather(y0, x1)
        + fy * (1.0 - fx) * gather(y1, x0)
        + fy * fx * gather(y1, x1)
    )
    vals = vals.reshape(bsz, k, out_size, sampling, out_size, sampling, cin)
    return vals.mean(axis=(3, 5))


def crop(rasters, boxes, out_size, sampling=1):
    """Bilinear samples of ``rasters`` (B, H, W, Cin) inside ``boxes`` (B, K, 4).

    Each of the out_size x out_size bins averages ``sampling``^2 samples.
    Returns (B, K, out_size, out_size, Cin).
    """
    rasters = np.ascontiguousarray(rasters, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    if USE_JIT:
        return _crop_jit(rasters, boxes, int(out_size), int(sampling))
    return _crop_np(rasters, boxes, int(out_size), int(sampling))


# ------------------------------------------------------- mixture likelihood

@njit
def _component_loglik_jit(gt_boxes, gt_cls, log_pi, mu, gamma, logp):
    bsz, n = gt_cls.shape
    k = mu.shape[1]
    lf = np.empty((bsz, n, k))
    lp = np.empty((bsz, n, k))
    for s in range(bsz):
        for i in range(n):
            c = gt_cls[s, i]
            for q in range(k):
                acc = 0.0
                for j in range(4):
                    g = gamma[s, q, j]
                    d = gt_boxes[s, i, j] - mu[s, q, j]
                    acc += np.log(g) - np.log(g * g + d * d) - LOG_PI
                lf[s, i, q] = acc
                if c >= 0:
                    lp[s, i, q] = max(logp[s, q, c], LOG_FLOOR)
                else:
                    lp[s, i, q] = 0.0
    lpi = np.empty((bsz, k))
    for s in range(bsz):
        for q in range(k):
            lpi[s, q] = max(log_pi[s, q], LOG_FLOOR)
    return lpi, lf, lp


def _component_loglik_np(gt_boxes, gt_cls, log_pi, mu, gamma, logp):
    d = gt_boxes[:, :, None, :] - mu[:, None, :, :]
    g = gamma[:, None, :, :]
    lf = (np.log(g) - np.log(g * g + d * d) - LOG_PI).sum(axis=-1)
    cls = np.where(gt_cls >= 0, gt_cls, 0)
    picked = np.take_along_axis(logp, np.broadcast_to(cls[:, None, :], (logp.shape[0], logp.shape[1], cls.shape[1])), axis=2)
    lp = np.maximum(picked.transpose(0, 2, 1), LOG_FLOOR)
    lp = np.where((gt_cls >= 0)[:, :, None], lp, 0.0)
    lpi = np.maximum(log_pi, LOG_FLOOR)
    return lpi, lf, lp


def component_loglik(gt_boxes, gt_cls, log_pi, mu, gamma, logp):
    """Log-domain factors of every (ground truth, component) pair.

    Shapes: gt_boxes (B, N, 4), gt_cls (B, N) with -1 for padding,
    log_pi (B, K), mu/gamma (B, K, 4), logp (B, K, C).
    Returns (log_pi_floored (B, K), log_cauchy (B, N, K), log_cat (B, N, K)).
    """
    args = (
        np.ascontiguousarray(gt_boxes, dtype=np.float64),
        np.ascontiguousarray(gt_cls, dtype=np.int64),
        np.ascontiguousarray(log_pi, dtype=np.float64),
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(gamma, dtype=np.float64),
        np.ascontiguousarray(logp, dtype=np.float64),
    )
    if USE_JIT:
        return _component_loglik_jit(*args)
    return _component_loglik_np(*args)


@njit
def _cauchy_grad_jit(gt_boxes, mu, gamma, weight):
    bsz, n = weight.shape[0], weight.shape[1]
    k = mu.shape[1]
    dmu = np.zeros((bsz, k, 4))
    dgamma = np.zeros((bsz, k, 4))
    for s in range(bsz):
        for i in range(n):
            for q in range(k):
                wt = weight[s, i, q]
                if wt == 0.0:
                    continue
                for j in range(4):
                    g = gamma[s, q, j]
                    d = gt_boxes[s, i, j] - mu[s, q, j]
                    den = g * g + d * d
                    dmu[s, q, j] += wt * 2.0 * d / den
                    dgamma[s, q, j] += wt * (1.0 / g - 2.0 * g / den)
    return dmu, dgamma


def _cauchy_grad_np(gt_boxes, mu, gamma, weight):
    d = gt_boxes[:, :, None, :] - mu[:, None, :, :]
    g = gamma[:, None, :, :]
    den = g * g + d * d
    w = weight[:, :, :, None]
    dmu = (w * 2.0 * d / den).sum(axis=1)
    dgamma = (w * (1.0 / g - 2.0 * g / den)).sum(axis=1)
    return dmu, dgamma


def cauchy_grad(gt_boxes, mu, gamma, weight):
    """Accumulate ``sum_i weight[i,k] * d log F(b_i; mu_k, gamma_k)``.

    Returns (d/dmu, d/dgamma), each (B, K, 4).
    """
    args = (
        np.ascontiguousarray(gt_boxes, dtype=np.float64),
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(gamma, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.float64),
    )
    if USE_JIT:
        return _cauchy_grad_jit(*args)
    return _cauchy_grad_np(*args)


# ---------------------------------------------------------------------- NMS

@njit
def _nms_order(boxes, scores, iou_thresh):
    """Greedy suppression. Returns keeper index for each input (self if kept)."""
    n = boxes.shape[0]
    order = np.argsort(-scores, kind="mergesort")
    owner = np.full(n, -1, dtype=np.int64)
    for a in range(n):
        i = order[a]
        if owner[i] != -1:
            continue
        owner[i] = i
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for c in range(a + 1, n):
            j = order[c]
            if owner[j] != -1:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union > 0.0 and inter / union >= iou_thresh:
                owner[j] = i
    return owner


def nms_owner(boxes, scores, iou_thresh):
    """Keeper index of every box under greedy class-agnostic NMS.

    Ties in score keep the lower index first (stable sort). A box is
    suppressed when its IoU with a keeper reaches ``iou_thresh``.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    return _nms_order(boxes, scores, float(iou_thresh))


# ---------------------------------------------------------------- Hungarian

@njit
def _hungarian_square(cost):
    """Shortest augmenting path assignment on an n x n matrix (rows -> cols)."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def hungarian_square(cost):
    return _hungarian_square(np.ascontiguousarray(cost, dtype=np.float64))
