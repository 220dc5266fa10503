"""Desk-scale detection metrics: AP/AR, ECE, duplicate rate, histograms."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import iou_matrix

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


class EvalError(ValueError):
    pass


def _gt_arrays(gts):
    boxes = np.array([[g.box.l, g.box.t, g.box.r, g.box.b] for g in gts]).reshape(-1, 4)
    cls = np.array([g.class_index for g in gts], dtype=np.int64)
    return boxes, cls


def _pred_arrays(preds):
    boxes = np.array([[q.box.l, q.box.t, q.box.r, q.box.b] for q in preds]).reshape(-1, 4)
    cls = np.array([q.class_index for q in preds], dtype=np.int64)
    scores = np.array([q.score for q in preds], dtype=np.float64)
    return boxes, cls, scores


def match_scene(preds, gts, iou_thresh: float) -> np.ndarray:
    """TP flag per prediction: score-descending greedy, same class, each GT used once.

    Among unmatched same-class GTs at or above the threshold, the best-IoU one
    is taken.
    """
    pb, pc, ps = _pred_arrays(preds)
    tp = np.zeros(len(preds), dtype=bool)
    if not len(preds) or not len(gts):
        return tp
    gb, gc = _gt_arrays(gts)
    ious = iou_matrix(pb, gb)
    used = np.zeros(len(gts), dtype=bool)
    order = np.argsort(-ps, kind="stable")
    for i in order:
        cand = np.where((gc == pc[i]) & ~used & (ious[i] >= iou_thresh), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0.0:
            used[j] = True
            tp[i] = True
    return tp


def _ap_from_ranked(tp_sorted, n_gt):
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return float("nan")
    if len(tp_sorted) == 0:
        return 0.0
    ctp = np.cumsum(tp_sorted)
    cfp = np.cumsum(~tp_sorted)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _per_class_stats(preds_by_scene, gts_by_scene, iou_thresh):
    scenes = sorted(gts_by_scene)
    classes: dict = {}
    for sid in scenes:
        gts = gts_by_scene[sid]
        preds = preds_by_scene.get(sid, [])
        tp = match_scene(preds, gts, iou_thresh)
        for g in gts:
            classes.setdefault(g.class_index, [[], [], 0])[2] += 1
        for q, t in zip(preds, tp):
            entry = classes.setdefault(q.class_index, [[], [], 0])
            entry[0].append(q.score)
            entry[1].append(t)
    return classes


def _check_gts(gts_by_scene):
    if not any(len(g) for g in gts_by_scene.values()):
        raise EvalError("no ground truths in the evaluation set")


def average_precision(preds_by_scene: dict, gts_by_scene: dict, iou_thresh: float = 0.5) -> float:
    """Class-averaged AP at one IoU threshold (classes without GTs are skipped)."""
    _check_gts(gts_by_scene)
    aps = []
    for c, (scores, tps, n_gt) in sorted(_per_class_stats(preds_by_scene, gts_by_scene, iou_thresh).items()):
        if n_gt == 0:
            continue
        order = np.argsort(-np.asarray(scores), kind="stable")
        aps.append(_ap_from_ranked(np.asarray(tps, dtype=bool)[order], n_gt))
    return float(np.mean(aps))


def average_recall(preds_by_scene, gts_by_scene, iou_thresh=0.5) -> float:
    _check_gts(gts_by_scene)
    recalls = []
    for c, (scores, tps, n_gt) in sorted(_per_class_stats(preds_by_scene, gts_by_scene, iou_thresh).items()):
        if n_gt:
            recalls.append(sum(tps) / n_gt)
    return float(np.mean(recalls))


def coco_ap(preds_by_scene, gts_by_scene, thresholds=COCO_THRESHOLDS) -> float:
    return float(np.mean([average_precision(preds_by_scene, gts_by_scene, t) for t in thresholds]))


def coco_ar(preds_by_scene, gts_by_scene, thresholds=COCO_THRESHOLDS) -> float:
    return float(np.mean([average_recall(preds_by_scene, gts_by_scene, t) for t in thresholds]))


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_conf: float
    accuracy: float


def ece(preds_by_scene: dict, gts_by_scene: dict, n_bins: int = 10, iou_thresh: float = 0.5):
    """Expected calibration error over equal-width score bins.

    A prediction is accurate when it is a TP under ``match_scene``.
    Returns (ece, bins); empty bins are reported with count 0.
    """
    if n_bins < 1:
        raise EvalError("n_bins must be >= 1")
    conf, acc = [], []
    for sid in sorted(preds_by_scene):
        preds = preds_by_scene[sid]
        tp = match_scene(preds, gts_by_scene.get(sid, []), iou_thresh)
        conf.extend(q.score for q in preds)
        acc.extend(tp.tolist())
    conf = np.asarray(conf, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = []
    if conf.size == 0:
        return 0.0, bins
    which = np.clip(np.floor(conf * n_bins).astype(np.int64), 0, n_bins - 1)
    total = 0.0
    for m in range(n_bins):
        sel = which == m
        cnt = int(sel.sum())
        if cnt:
            mc, ma = float(conf[sel].mean()), float(acc[sel].mean())
            total += cnt / conf.size * abs(ma - mc)
        else:
            mc = ma = 0.0
        bins.append(ReliabilityBin(float(edges[m]), float(edges[m + 1]), cnt, mc, ma))
    return float(total), bins


def dup_rate(preds_by_scene: dict, iou_thresh: float = 0.7) -> float:
    """Fraction of predictions overlapping a higher-scored prediction above ``iou_thresh``."""
    n = dup = 0
    for sid in sorted(preds_by_scene):
        preds = preds_by_scene[sid]
        if not preds:
            continue
        b, _, s = _pred_arrays(preds)
        ious = iou_matrix(b, b)
        order = np.argsort(-s, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        higher = rank[None, :] < rank[:, None]
        dup += int(np.any((ious > iou_thresh) & higher, axis=1).sum())
        n += len(preds)
    return dup / n if n else 0.0


def histograms(p, o, n_bins: int = 20) -> dict:
    """Counts of class probability, objectness and confidence over [0, 1]."""
    p = np.asarray(p, dtype=np.float64).ravel()
    o = np.asarray(o, dtype=np.float64).ravel()
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    out = {"edges": edges}
    for name, v in (("p", p), ("o", o), ("p*o", p * o)):
        out[name] = np.histogram(np.clip(v, 0.0, 1.0), bins=edges)[0]
    return out


def stage_diagnostics(weights, cfg, dataset, beta: float = 0.5, batch_size: int = 128) -> list:
    """Per-stage (mean NLL, mean per-instance exp(-MCM)) over ``dataset``.

    NLL is averaged over ground truths within a scene and then over scenes,
    as in training; the ratio is averaged over all ground-truth instances.
    """
    from .losses import pack_gts
    from .model import drmm_objective, forward_batch, stack_rasters

    if not dataset:
        raise EvalError("empty dataset")
    nll = np.zeros(cfg.num_stages)
    ratio = np.zeros(cfg.num_stages)
    n_inst = np.zeros(cfg.num_stages)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        boxes, cls = pack_gts([s.gts for s in chunk])
        trace = forward_batch(weights, cfg, stack_rasters(chunk))
        _, stages, _, _ = drmm_objective(trace, boxes, cls, beta, need_grad=False)
        for i, sl in enumerate(stages):
            nll[i] += sl.nll * len(chunk)
            ratio[i] += sl.ratio * sl.count
            n_inst[i] += sl.count
    nll /= len(dataset)
    ratio = np.where(n_inst > 0, ratio / np.maximum(n_inst, 1), 1.0)
    return [(float(a), float(b)) for a, b in zip(nll, ratio)]


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar: float
    ece: float
    dup_rate: float
    reliability_bins: list = field(default_factory=list)
    per_stage_losses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reliability_bins"] = [asdict(b) if not isinstance(b, dict) else b for b in self.reliability_bins]
        return d


def evaluate(preds_by_scene, gts_by_scene, n_bins=10, per_stage_losses=None) -> EvalReport:
    e, bins = ece(preds_by_scene, gts_by_scene, n_bins)
    return EvalReport(
        ap=coco_ap(preds_by_scene, gts_by_scene),
        ap50=average_precision(preds_by_scene, gts_by_scene, 0.5),
        ap75=average_precision(preds_by_scene, gts_by_scene, 0.75),
        ar=coco_ar(preds_by_scene, gts_by_scene),
        ece=e,
        dup_rate=dup_rate(preds_by_scene),
        reliability_bins=bins,
        per_stage_losses=list(per_stage_losses or []),
    )


def write_report(report: EvalReport, json_path=None, csv_dir=None, hist=None):
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=False)
            fh.write("\n")
    if csv_dir:
        os.makedirs(csv_dir, exist_ok=True)
        with open(os.path.join(csv_dir, "metrics.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k in ("ap", "ap50", "ap75", "ar", "ece", "dup_rate"):
                w.writerow([k, repr(getattr(report, k))])
        with open(os.path.join(csv_dir, "reliability.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"])
            for b in report.reliability_bins:
                w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.mean_conf), repr(b.accuracy)])
        with open(os.path.join(csv_dir, "stage_losses.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "nll", "exp_neg_mcm"])
            for s, row in enumerate(report.per_stage_losses, 1):
                w.writerow([s, repr(row[0]), repr(row[1])])
        if hist is not None:
            with open(os.path.join(csv_dir, "histograms.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_lo", "bin_hi", "p", "o", "p*o"])
                e = hist["edges"]
                for i in range(len(e) - 1):
                    w.writerow([repr(float(e[i])), repr(float(e[i + 1])), int(hist["p"][i]), int(hist["o"][i]), int(hist["p*o"][i])])
