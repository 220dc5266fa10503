"""End-to-end detection as regularized mixture density estimation (desk-scale toy).

Modules: ``geometry`` (boxes, IoU, GIoU), ``mixture`` (Cauchy x categorical
mixture likelihood), ``losses`` (NLL and MCM with gradients), ``model``
(multi-stage head, trainer, gradient check), ``data`` (synthetic scenes),
``inference`` (extraction, NMS, WTA), ``baselines`` (bipartite matching),
``evaluation`` (AP/AR, ECE, diagnostics) and ``cli``.
"""
from .geometry import Box, giou, iou
from .losses import NO_STOP, StopGradConfig, mcm_loss, nll_loss, total_loss
from .mixture import ComponentParams, MixtureParams, mixture_loglik

__version__ = "0.1.0"

__all__ = [
    "Box", "iou", "giou",
    "ComponentParams", "MixtureParams", "mixture_loglik",
    "StopGradConfig", "NO_STOP", "nll_loss", "mcm_loss", "total_loss",
]
