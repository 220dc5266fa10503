"""Bipartite-matching baselines trained on the same head.

Variants:

``eq1``
    matched pairs get w1*CE + w2*L1 + w3*(1 - GIoU); every component gets an
    objectness log-loss (target 1 when matched, 0 otherwise).
``matched-nll``
    matching cost and matched loss are both the component NLL
    ``-log F(b; mu, gamma) P(c; p)``; objectness as above.
``nll-mcm``
    full mixture NLL plus beta*MCM, where the MCM "max" component is the one
    assigned by Hungarian matching on the component log-likelihood.

``copies`` repeats every ground truth before matching so each object gets
that many positives.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .activation import activate_backward
from .geometry import giou, giou_and_grad
from .losses import DEFAULT_BETA, StageLoss, stage_loss
from .mixture import LOG_PROB_FLOOR, ComponentParams, PROB_FLOOR
from .model import ConfigError, ModelConfig, TrainConfig, train_loop

log = logging.getLogger(__name__)

VARIANTS = ("eq1", "matched-nll", "nll-mcm")
DEFAULT_COST_WEIGHTS = (2.0, 5.0, 2.0)


class MatchError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: list          # (gt_index, component_index), sorted by gt index
    total_cost: float


def match_cost(gt, comp: ComponentParams, weights=DEFAULT_COST_WEIGHTS) -> float:
    """w1 * CE + w2 * L1 + w3 * (1 - GIoU) between a ground truth and a component."""
    w1, w2, w3 = weights
    if min(weights) < 0:
        raise MatchError("cost weights must be non-negative")
    from .geometry import Box

    b = gt.box.as_array()
    mu = np.asarray(comp.mu, dtype=np.float64)
    ce = -np.log(max(float(comp.p[gt.class_index]), PROB_FLOOR))
    l1 = float(np.abs(mu - b).sum())
    mu_box = Box(min(mu[0], mu[2]), min(mu[1], mu[3]), max(mu[0], mu[2]), max(mu[1], mu[3]), normalized=False)
    return float(w1 * ce + w2 * l1 + w3 * (1.0 - giou(mu_box, gt.box)))


def hungarian(cost) -> MatchResult:
    """Minimum-cost assignment of every row (ground truth) to a distinct column."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchError("cost matrix must be 2-D")
    n, k = cost.shape
    if n > k:
        raise MatchError(f"cannot match {n} ground truths to {k} components")
    if n == 0:
        return MatchResult([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise MatchError("cost matrix has non-finite entries")
    square = np.zeros((k, k))
    square[:n] = cost
    assign = kernels.hungarian_square(square)[:n]
    pairs = [(i, int(assign[i])) for i in range(n)]
    return MatchResult(pairs, float(sum(cost[i, j] for i, j in pairs)))


def brute_force_assignment(cost) -> MatchResult:
    """Exhaustive search over injective assignments; the Hungarian oracle."""
    cost = np.asarray(cost, dtype=np.float64)
    n, k = cost.shape
    best, best_cols = np.inf, None
    for cols in itertools.permutations(range(k), n):
        c = sum(cost[i, j] for i, j in enumerate(cols))
        if c < best:
            best, best_cols = c, cols
    return MatchResult([(i, j) for i, j in enumerate(best_cols or ())], float(best if n else 0.0))


# ------------------------------------------------------------------ training

def _cost_matrices(act, s, gt_boxes, gt_cls, weights):
    """Matching cost (weighted CE + L1 + 1 - GIoU) of every (ground truth, component) pair of scene ``s``."""
    w1, w2, w3 = weights
    mu = act.mu[s]
    logp = np.maximum(act.logp[s], LOG_PROB_FLOOR)
    ce = -logp[:, gt_cls].T                                    # (N, K)
    l1 = np.abs(gt_boxes[:, None, :] - mu[None, :, :]).sum(-1)
    n, k = len(gt_cls), mu.shape[0]
    g, _ = giou_and_grad(np.tile(mu, (n, 1)), np.repeat(gt_boxes, k, axis=0))
    return w1 * ce + w2 * l1 + w3 * (1.0 - g.reshape(n, k))


def _replicate(gt_boxes, gt_cls, copies):
    valid = gt_cls >= 0
    return np.repeat(gt_boxes[valid], copies, axis=0), np.repeat(gt_cls[valid], copies)


def _objectness_grad(o, target, norm):
    # d/d o_bar of BCE(sigmoid(o_bar), target), divided by norm
    return (o - target) / norm


def _stage_matched(act, gt_boxes, gt_cls, variant, copies, weights, skipped):
    """Matched-pair objective for one stage. Returns (loss, d_raw, d_base)."""
    bsz, k = act.o.shape
    w1, w2, w3 = weights
    g_mu = np.zeros_like(act.mu)
    g_logp = np.zeros_like(act.logp)
    g_gamma = np.zeros_like(act.gamma)
    d_obar = np.zeros((bsz, k))
    total = 0.0
    for s in range(bsz):
        boxes, cls = _replicate(gt_boxes[s], gt_cls[s], copies)
        n = len(cls)
        if n > k:
            skipped.add(s)
            continue
        target = np.zeros(k)
        norm = float(max(n, 1))
        if n:
            if variant == "eq1":
                cost = _cost_matrices(act, s, boxes, cls, weights)
            else:
                lpi, lf, lp = kernels.component_loglik(boxes[None], cls[None], act.log_pi[s:s + 1],
                                                       act.mu[s:s + 1], act.gamma[s:s + 1], act.logp[s:s + 1])
                cost = -(lf[0] + lp[0])
            m = hungarian(cost)
            rows = np.array([i for i, _ in m.pairs])
            cols = np.array([j for _, j in m.pairs])
            target[cols] = 1.0
            mu = act.mu[s, cols]
            if variant == "eq1":
                ce = -np.maximum(act.logp[s, cols, cls[rows]], LOG_PROB_FLOOR)
                diff = mu - boxes[rows]
                gv, gg = giou_and_grad(mu, boxes[rows])
                total += float(np.sum(w1 * ce + w2 * np.abs(diff).sum(1) + w3 * (1.0 - gv))) / norm / bsz
                np.add.at(g_mu[s], cols, (w2 * np.sign(diff) - w3 * gg) / norm / bsz)
                pick = act.logp[s, cols, cls[rows]] > LOG_PROB_FLOOR
                np.add.at(g_logp[s], (cols, cls[rows]), -w1 * pick / norm / bsz)
            else:
                total += float(m.total_cost) / norm / bsz
                wt = np.zeros((1, n, k))
                wt[0, rows, cols] = -1.0 / norm / bsz
                dmu, dgam = kernels.cauchy_grad(boxes[None], act.mu[s:s + 1], act.gamma[s:s + 1], wt)
                g_mu[s] += dmu[0]
                g_gamma[s] += dgam[0]
                pick = act.logp[s, cols, cls[rows]] > LOG_PROB_FLOOR
                np.add.at(g_logp[s], (cols, cls[rows]), -1.0 * pick / norm / bsz)
        o = np.clip(act.o[s], 1e-12, 1 - 1e-12)
        bce = -(target * np.log(o) + (1 - target) * np.log(1 - o))
        total += w1 * float(bce.sum()) / norm / bsz
        d_obar[s] = w1 * _objectness_grad(act.o[s], target, norm) / bsz
    d_raw, d_base = activate_backward(act, g_mu, g_gamma, g_logp, np.zeros_like(act.o))
    d_raw[..., -1] += d_obar
    return total, d_raw, d_base


def _stage_mcm_bipartite(act, gt_boxes, gt_cls, copies, beta, stop, skipped):
    bsz, k = act.o.shape
    rep_b, rep_c = [], []
    for s in range(bsz):
        b, c = _replicate(gt_boxes[s], gt_cls[s], copies)
        if len(c) > k:
            skipped.add(s)
            b, c = b[:0], c[:0]
        rep_b.append(b)
        rep_c.append(c)
    n = max(max((len(c) for c in rep_c), default=0), 1)
    boxes = np.zeros((bsz, n, 4))
    cls = np.full((bsz, n), -1, dtype=np.int64)
    max_index = np.zeros((bsz, n), dtype=np.int64)
    lpi, lf, lp = kernels.component_loglik(
        np.array([np.pad(b, ((0, n - len(b)), (0, 0))) for b in rep_b]),
        np.array([np.pad(c, (0, n - len(c)), constant_values=-1) for c in rep_c]),
        act.log_pi, act.mu, act.gamma, act.logp)
    for s in range(bsz):
        m = len(rep_c[s])
        boxes[s, :m] = rep_b[s]
        cls[s, :m] = rep_c[s]
        if m:
            ll = lpi[s][None, :] + lf[s, :m] + lp[s, :m]
            res = hungarian(-ll)
            max_index[s, :m] = [j for _, j in res.pairs]
    sl: StageLoss = stage_loss(boxes, cls, act.log_pi, act.mu, act.gamma, act.logp, beta, stop,
                               max_index=max_index)
    d_raw, d_base = activate_backward(act, sl.g_mu, sl.g_gamma, sl.g_logp, sl.g_logpi)
    return sl, d_raw, d_base


def bipartite_objective(variant, copies=1, beta=DEFAULT_BETA, stop=None, weights=DEFAULT_COST_WEIGHTS):
    if variant not in VARIANTS:
        raise ConfigError(f"unknown bipartite variant {variant!r}; expected one of {VARIANTS}")
    if copies < 1:
        raise ConfigError("copies must be >= 1")
    from .losses import StopGradConfig

    stop = StopGradConfig() if stop is None else stop
    skipped_ids = set()

    def objective(trace, batch, gt_boxes, gt_cls):
        total = 0.0
        stages, d_raws, d_bases = [], [], []
        skipped = set()
        for st in trace.stages:
            if variant == "nll-mcm":
                sl, d_raw, d_base = _stage_mcm_bipartite(st.act, gt_boxes, gt_cls, copies, beta, stop, skipped)
                total += sl.nll + beta * sl.mcm
                stages.append(sl)
            else:
                loss, d_raw, d_base = _stage_matched(st.act, gt_boxes, gt_cls, variant, copies, weights, skipped)
                total += loss
                stages.append(StageLoss(loss, 0.0, 1.0, 0, *(np.zeros(0),) * 4))
            d_raws.append(d_raw)
            d_bases.append(d_base)
        for s in skipped:
            sid = batch[s].id
            if sid not in skipped_ids:
                skipped_ids.add(sid)
                log.warning("scene %d skipped: %d copies exceed the component count", sid, copies)
        return total, stages, d_raws, d_bases

    objective.skipped = skipped_ids
    return objective


def train_bipartite(dataset, cfg: ModelConfig, tcfg: TrainConfig = TrainConfig(), variant="eq1",
                    copies: int = 1, cost_weights=DEFAULT_COST_WEIGHTS, weights=None):
    """Train the shared head with a bipartite-matching objective. Returns (weights, history)."""
    objective = bipartite_objective(variant, copies, tcfg.beta, tcfg.stop, cost_weights)
    return train_loop(dataset, cfg, tcfg, objective, weights)
