"""Axis-aligned boxes in (left, top, right, bottom) order."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Box in normalized scene coordinates.

    Pass ``normalized=False`` to allow coordinates outside [0, 1] (tests and
    refined predictions that wander past the scene border).
    """

    l: float
    t: float
    r: float
    b: float
    normalized: bool = True

    def __post_init__(self):
        coords = (self.l, self.t, self.r, self.b)
        if not all(math.isfinite(v) for v in coords):
            raise BoxError(f"non-finite box coordinates {coords}")
        if self.r < self.l or self.b < self.t:
            raise BoxError(f"negative extent {coords}")
        if self.normalized and not all(0.0 <= v <= 1.0 for v in coords):
            raise BoxError(f"coordinates outside [0, 1]: {coords}")

    @classmethod
    def from_array(cls, a, normalized: bool = True) -> "Box":
        l, t, r, b = (float(v) for v in a)
        return cls(l, t, r, b, normalized=normalized)

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.t, self.r, self.b], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.r - self.l

    @property
    def height(self) -> float:
        return self.b - self.t


def area(box: Box) -> float:
    return (box.r - box.l) * (box.b - box.t)


def _inter_union(a: Box, b: Box):
    iw = min(a.r, b.r) - max(a.l, b.l)
    ih = min(a.b, b.b) - max(a.t, b.t)
    inter = max(iw, 0.0) * max(ih, 0.0)
    return inter, area(a) + area(b) - inter


def iou(a: Box, b: Box) -> float:
    inter, union = _inter_union(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU; 0 when the enclosing box has no area."""
    inter, union = _inter_union(a, b)
    enclose = (max(a.r, b.r) - min(a.l, b.l)) * (max(a.b, b.b) - min(a.t, b.t))
    if enclose <= 0.0:
        return 0.0
    value = inter / union if union > 0.0 else 0.0
    return value - (enclose - union) / enclose


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) coordinate arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return kernels.iou_matrix(a, b)


def giou_and_grad(pred, target):
    """GIoU of (M, 4) predictions against (M, 4) targets, row by row.

    Returns ``(giou, dgiou_dpred)``; the gradient is taken with the
    predictions treated as free coordinates (no ordering constraint).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    pl, pt, pr, pb = pred.T
    tl, tt, tr, tb = target.T

    iw_raw = np.minimum(pr, tr) - np.maximum(pl, tl)
    ih_raw = np.minimum(pb, tb) - np.maximum(pt, tt)
    iw = np.maximum(iw_raw, 0.0)
    ih = np.maximum(ih_raw, 0.0)
    inter = iw * ih
    pw, ph = pr - pl, pb - pt
    union = pw * ph + (tr - tl) * (tb - tt) - inter
    ew = np.maximum(pr, tr) - np.minimum(pl, tl)
    eh = np.maximum(pb, tb) - np.minimum(pt, tt)
    enclose = ew * eh

    ok_u = union > 0.0
    ok_e = enclose > 0.0
    safe_u = np.where(ok_u, union, 1.0)
    safe_e = np.where(ok_e, enclose, 1.0)
    iou_v = np.where(ok_u, inter / safe_u, 0.0)
    g = np.where(ok_e, iou_v - (enclose - union) / safe_e, 0.0)

    # giou = I/U - 1 + U/E with U = A_pred + A_target - I
    dI_dU = np.where(ok_u, 1.0 / safe_u, 0.0)
    dg_dU = np.where(ok_u, -inter / safe_u ** 2, 0.0) + np.where(ok_e, 1.0 / safe_e, 0.0)
    dg_dE = np.where(ok_e, -union / safe_e ** 2, 0.0)
    dg_dI = dI_dU - dg_dU  # U = A_p + A_t - I

    in_w = iw_raw > 0.0
    in_h = ih_raw > 0.0
    # intersection partials
    dI_dl = np.where(in_w & (pl > tl), -ih, 0.0)
    dI_dr = np.where(in_w & (pr < tr), ih, 0.0)
    dI_dt = np.where(in_h & (pt > tt), -iw, 0.0)
    dI_db = np.where(in_h & (pb < tb), iw, 0.0)
    # pred area partials
    dA_dl, dA_dr, dA_dt, dA_db = -ph, ph, -pw, pw
    # enclosing partials
    dE_dl = np.where(pl < tl, -eh, 0.0)
    dE_dr = np.where(pr > tr, eh, 0.0)
    dE_dt = np.where(pt < tt, -ew, 0.0)
    dE_db = np.where(pb > tb, ew, 0.0)

    grad = np.empty_like(pred)
    for j, (dI, dA, dE) in enumerate(
        ((dI_dl, dA_dl, dE_dl), (dI_dt, dA_dt, dE_dt), (dI_dr, dA_dr, dE_dr), (dI_db, dA_db, dE_db))
    ):
        grad[:, j] = dg_dI * dI + dg_dU * dA + dg_dE * dE
    grad[~ok_e] = 0.0
    return g, grad
