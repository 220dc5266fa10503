"""Head activation chain, batched over (scene, component).

Raw head rows are laid out as ``[mu_bar(4) | gamma_bar(4) | p_bar(C) | o_bar]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, log_softmax

BOX_MIN, BOX_MAX = -0.5, 1.5


def raw_width(num_classes: int) -> int:
    return 9 + num_classes


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class Activated:
    """Mixture parameters for a (B, K) block of components plus backward caches."""

    mu: np.ndarray        # (B, K, 4)
    gamma: np.ndarray     # (B, K, 4)
    logp: np.ndarray      # (B, K, C)
    o: np.ndarray         # (B, K)
    log_pi: np.ndarray    # (B, K)
    # caches
    mu_pass: np.ndarray   # (B, K, 4) 1 where the clamp is inactive
    swap_x: np.ndarray    # (B, K) l/r were exchanged
    swap_y: np.ndarray    # (B, K) t/b were exchanged
    gamma_bar: np.ndarray
    o_sum: np.ndarray     # (B,)

    @property
    def p(self):
        return np.exp(self.logp)

    @property
    def pi(self):
        return np.exp(self.log_pi)


def activate(raw, proposals, num_classes: int, min_scale: float = 0.0) -> Activated:
    """Map raw head outputs to mixture parameters.

    mu = proposal + mu_bar, clamped to [-0.5, 1.5] and re-ordered so l<=r, t<=b;
    gamma = softplus(gamma_bar) + min_scale; p = softmax(p_bar);
    o = sigmoid(o_bar); pi = o / sum(o) per scene.
    """
    raw = np.asarray(raw, dtype=np.float64)
    c = num_classes
    pre = proposals + raw[..., 0:4]
    mu_pass = ((pre >= BOX_MIN) & (pre <= BOX_MAX)).astype(np.float64)
    mu = np.clip(pre, BOX_MIN, BOX_MAX)
    swap_x = mu[..., 0] > mu[..., 2]
    swap_y = mu[..., 1] > mu[..., 3]
    mu = np.stack(
        [
            np.where(swap_x, mu[..., 2], mu[..., 0]),
            np.where(swap_y, mu[..., 3], mu[..., 1]),
            np.where(swap_x, mu[..., 0], mu[..., 2]),
            np.where(swap_y, mu[..., 1], mu[..., 3]),
        ],
        axis=-1,
    )
    gamma_bar = raw[..., 4:8]
    gamma = softplus(gamma_bar) + min_scale
    logp = log_softmax(raw[..., 8:8 + c], axis=-1)
    o_bar = raw[..., 8 + c]
    o = expit(o_bar)
    o_sum = o.sum(axis=-1)
    log_pi = log_expit(o_bar) - np.log(o_sum)[..., None]
    return Activated(mu, gamma, logp, o, log_pi, mu_pass, swap_x, swap_y, gamma_bar, o_sum)


def activate_backward(act: Activated, g_mu, g_gamma, g_logp, g_logpi):
    """Chain mixture-parameter gradients back to raw head rows.

    Returns ``(d_raw, d_proposals)``; the proposal gradient equals the
    mu_bar gradient because mu is their sum.
    """
    gx_l = np.where(act.swap_x, g_mu[..., 2], g_mu[..., 0])
    gx_r = np.where(act.swap_x, g_mu[..., 0], g_mu[..., 2])
    gy_t = np.where(act.swap_y, g_mu[..., 3], g_mu[..., 1])
    gy_b = np.where(act.swap_y, g_mu[..., 1], g_mu[..., 3])
    d_mu = np.stack([gx_l, gy_t, gx_r, gy_b], axis=-1) * act.mu_pass

    d_gamma = g_gamma * expit(act.gamma_bar)
    p = np.exp(act.logp)
    d_p = g_logp - p * g_logp.sum(axis=-1, keepdims=True)

    o = act.o
    do = o * (1.0 - o)
    total = g_logpi.sum(axis=-1, keepdims=True)
    d_o = g_logpi * (1.0 - o) - total * do / act.o_sum[..., None]

    d_raw = np.concatenate([d_mu, d_gamma, d_p, d_o[..., None]], axis=-1)
    return d_raw, d_mu
