"""NLL and MCM losses with analytic gradients.

Per-instance losses are averaged over the ground truths of a scene, then over
the scenes of a batch. A scene without objects contributes zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .activation import Activated, activate, activate_backward
from .mixture import LOG_PROB_FLOOR, MixtureParams, ParamError

DEFAULT_BETA = 0.5


@dataclass(frozen=True)
class StopGradConfig:
    """Factors whose gradient is blocked inside the MCM term (never the NLL)."""

    stop_pi: bool = False
    stop_cauchy: bool = True
    stop_categorical: bool = False


NO_STOP = StopGradConfig(False, False, False)


@dataclass
class LossReport:
    nll: float
    mcm: float
    total: float
    per_stage: list = field(default_factory=list)  # (nll, mcm, exp_neg_mcm)


@dataclass
class StageLoss:
    nll: float
    mcm: float
    ratio: float          # mean over instances of max component / mixture
    count: int            # number of instances
    g_mu: np.ndarray
    g_gamma: np.ndarray
    g_logp: np.ndarray
    g_logpi: np.ndarray


def pack_gts(gt_lists, num_classes=None):
    """Pad per-scene ground-truth lists to (B, N, 4) boxes and (B, N) classes (-1 = pad)."""
    bsz = len(gt_lists)
    n = max((len(g) for g in gt_lists), default=0)
    boxes = np.zeros((bsz, max(n, 1), 4))
    cls = np.full((bsz, max(n, 1)), -1, dtype=np.int64)
    for s, gts in enumerate(gt_lists):
        for i, g in enumerate(gts):
            boxes[s, i] = (g.box.l, g.box.t, g.box.r, g.box.b)
            cls[s, i] = g.class_index
    return boxes, cls


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def stage_loss(gt_boxes, gt_cls, log_pi, mu, gamma, logp, beta=DEFAULT_BETA,
               stop: StopGradConfig = StopGradConfig(), max_index=None,
               need_grad=True) -> StageLoss:
    """Forward and backward of NLL + beta*MCM for one stage of a batch.

    ``max_index`` (B, N) overrides the argmax component used by the MCM
    term (the bipartite variant passes matched components here).
    Gradients are w.r.t. the floored log mixing coefficients, mu, gamma
    and the log class probabilities.
    """
    bsz, n = gt_cls.shape
    lpi, lf, lp = kernels.component_loglik(gt_boxes, gt_cls, log_pi, mu, gamma, logp)
    ll = lpi[:, None, :] + lf + lp
    valid = gt_cls >= 0
    counts = valid.sum(axis=1)
    weight = np.where(valid, 1.0 / (np.maximum(counts, 1)[:, None] * bsz), 0.0)

    lse = _lse(ll, axis=2)
    if max_index is None:
        max_index = np.argmax(ll, axis=2)
    ll_max = np.take_along_axis(ll, max_index[:, :, None], axis=2)[:, :, 0]
    mcm_i = np.where(valid, lse - ll_max, 0.0)
    nll = float(np.sum(weight * -np.where(valid, lse, 0.0)))
    mcm = float(np.sum(weight * mcm_i))
    n_inst = int(valid.sum())
    ratio = float(np.exp(-mcm_i[valid]).mean()) if n_inst else 1.0

    if not need_grad:
        z = np.zeros(0)
        return StageLoss(nll, mcm, ratio, n_inst, z, z, z, z)

    resp = np.where(valid[:, :, None], np.exp(ll - lse[:, :, None]), 0.0)
    g_nll = -resp * weight[:, :, None]
    onehot = np.zeros_like(ll)
    np.put_along_axis(onehot, max_index[:, :, None], 1.0, axis=2)
    g_mcm = beta * (resp - onehot) * weight[:, :, None]

    g_f = g_nll if stop.stop_cauchy else g_nll + g_mcm
    g_c = g_nll if stop.stop_categorical else g_nll + g_mcm
    g_p = g_nll if stop.stop_pi else g_nll + g_mcm

    g_mu, g_gamma = kernels.cauchy_grad(gt_boxes, mu, gamma, g_f)

    g_logp = np.zeros_like(logp)
    cls = np.where(valid, gt_cls, 0)
    onehot_c = np.zeros((bsz, n, logp.shape[2]))
    np.put_along_axis(onehot_c, cls[:, :, None], 1.0, axis=2)
    onehot_c *= valid[:, :, None]
    g_logp = np.einsum("bnk,bnc->bkc", g_c, onehot_c)
    g_logp *= logp > LOG_PROB_FLOOR

    g_logpi = g_p.sum(axis=1) * (log_pi > LOG_PROB_FLOOR)
    return StageLoss(nll, mcm, ratio, n_inst, g_mu, g_gamma, g_logp, g_logpi)


# ------------------------------------------------------ per-mixture interface

def _mixture_arrays(m: MixtureParams):
    pi, mu, gamma, p = m.arrays()
    with np.errstate(divide="ignore"):
        return np.log(pi)[None], mu[None], gamma[None], np.log(p)[None]


def _single(gts, m: MixtureParams, beta, stop, need_grad=False):
    if not isinstance(m, MixtureParams):
        raise ParamError("expected MixtureParams")
    boxes, cls = pack_gts([list(gts)])
    log_pi, mu, gamma, logp = _mixture_arrays(m)
    return stage_loss(boxes, cls, log_pi, mu, gamma, logp, beta, stop, need_grad=need_grad)


def nll_loss(gts, m: MixtureParams) -> float:
    """Mean over ground truths of the negative mixture log-likelihood."""
    return _single(gts, m, 0.0, NO_STOP).nll


def mcm_loss(gts, m: MixtureParams) -> float:
    """Mean over ground truths of -log(max component / mixture)."""
    return _single(gts, m, 0.0, NO_STOP).mcm


def total_loss(gts, m, beta: float = DEFAULT_BETA, cfg: StopGradConfig = StopGradConfig()) -> LossReport:
    """Loss report for one mixture, or summed over stages for a list of mixtures."""
    if beta < 0:
        raise ParamError("beta must be non-negative")
    stages = m if isinstance(m, (list, tuple)) else [m]
    per_stage = []
    for sm in stages:
        st = _single(gts, sm, beta, cfg)
        per_stage.append((st.nll, st.mcm, float(np.exp(-st.mcm))))
    nll = sum(s[0] for s in per_stage)
    mcm = sum(s[1] for s in per_stage)
    return LossReport(nll, mcm, nll + beta * mcm, per_stage)


@dataclass
class GradTape:
    """Partials of the total loss.

    ``raw`` is (K, 9 + C) in head-row layout, ``proposals`` (K, 4); the
    ``pi/mu/gamma/logp`` entries are partials w.r.t. the activated values.
    """

    raw: np.ndarray
    proposals: np.ndarray
    log_pi: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    logp: np.ndarray
    report: LossReport | None = None


def loss_backward(gts, raw, proposals, num_classes: int, beta: float = DEFAULT_BETA,
                  cfg: StopGradConfig = StopGradConfig(), min_scale: float = 0.0) -> GradTape:
    """Gradient of NLL + beta*MCM w.r.t. raw head rows of one scene.

    ``raw`` is (K, 9 + C); ``proposals`` (K, 4) are the boxes the deltas
    are added to.
    """
    raw = np.asarray(raw, dtype=np.float64)[None]
    proposals = np.asarray(proposals, dtype=np.float64)[None]
    act = activate(raw, proposals, num_classes, min_scale)
    boxes, cls = pack_gts([list(gts)])
    st = stage_loss(boxes, cls, act.log_pi, act.mu, act.gamma, act.logp, beta, cfg)
    d_raw, d_prop = activate_backward(act, st.g_mu, st.g_gamma, st.g_logp, st.g_logpi)
    report = LossReport(st.nll, st.mcm, st.nll + beta * st.mcm, [(st.nll, st.mcm, float(np.exp(-st.mcm)))])
    return GradTape(d_raw[0], d_prop[0], st.g_logpi[0], st.g_mu[0], st.g_gamma[0], st.g_logp[0], report)


def activated_loss(gts, raw, proposals, num_classes, beta=DEFAULT_BETA, min_scale=0.0) -> LossReport:
    raw = np.asarray(raw, dtype=np.float64)[None]
    proposals = np.asarray(proposals, dtype=np.float64)[None]
    act: Activated = activate(raw, proposals, num_classes, min_scale)
    boxes, cls = pack_gts([list(gts)])
    st = stage_loss(boxes, cls, act.log_pi, act.mu, act.gamma, act.logp, beta, NO_STOP, need_grad=False)
    return LossReport(st.nll, st.mcm, st.nll + beta * st.mcm, [(st.nll, st.mcm, float(np.exp(-st.mcm)))])
