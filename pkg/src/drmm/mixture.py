"""Cauchy x categorical mixture likelihood, in log domain.

Scalar reference API over ``ComponentParams``/``MixtureParams`` plus the
partial derivatives of the mixture log-likelihood. The batched training
path lives in ``kernels.component_loglik`` and ``losses``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import GroundTruth
from .geometry import Box

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class ComponentParams:
    pi: float
    mu: np.ndarray
    gamma: np.ndarray
    p: np.ndarray
    o: float = 0.5

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(4)
        gamma = np.asarray(self.gamma, dtype=np.float64).reshape(4)
        p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        if not np.all(gamma > 0):
            raise ParamError(f"scale must be positive, got {gamma}")
        if not 0.0 <= self.pi <= 1.0:
            raise ParamError(f"mixing coefficient {self.pi} outside [0, 1]")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
            raise ParamError("class probabilities must form a distribution")
        if not 0.0 < self.o < 1.0:
            raise ParamError(f"objectness {self.o} outside (0, 1)")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class MixtureParams:
    components: tuple
    num_classes: int

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ParamError("mixture needs at least one component")
        if abs(sum(c.pi for c in comps) - 1.0) > 1e-9:
            raise ParamError("mixing coefficients must sum to 1")
        if any(c.p.shape[0] != self.num_classes for c in comps):
            raise ParamError("class vector length differs from num_classes")
        object.__setattr__(self, "components", comps)

    @property
    def K(self) -> int:
        return len(self.components)

    def arrays(self):
        """(pi (K,), mu (K, 4), gamma (K, 4), p (K, C))."""
        c = self.components
        return (
            np.array([x.pi for x in c]),
            np.stack([x.mu for x in c]),
            np.stack([x.gamma for x in c]),
            np.stack([x.p for x in c]),
        )

    @classmethod
    def from_arrays(cls, pi, mu, gamma, p, o=None):
        pi = np.asarray(pi, dtype=np.float64)
        o = np.full(pi.shape, 0.5) if o is None else np.asarray(o, dtype=np.float64)
        comps = [ComponentParams(float(pi[k]), mu[k], gamma[k], p[k], float(o[k])) for k in range(len(pi))]
        return cls(tuple(comps), int(np.asarray(p).shape[1]))


def _box_vec(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64).reshape(4)


def cauchy_logpdf_1d(x: float, mu: float, gamma: float) -> float:
    if not gamma > 0:
        raise ParamError(f"scale must be positive, got {gamma}")
    d = x - mu
    return math.log(gamma) - math.log(gamma * gamma + d * d) - math.log(math.pi)


def cauchy_logpdf_box(b, mu, gamma) -> float:
    """Sum of four independent 1-D Cauchy log-densities (l, t, r, b)."""
    bv, mu, gamma = _box_vec(b), np.asarray(mu, float), np.asarray(gamma, float)
    return float(sum(cauchy_logpdf_1d(bv[j], mu[j], gamma[j]) for j in range(4)))


def categorical_logpmf(c, p) -> float:
    c = np.asarray(c, dtype=np.float64)
    if np.count_nonzero(c == 1.0) != 1 or np.count_nonzero(c) != 1:
        raise ParamError(f"class vector is not one-hot: {c}")
    return math.log(max(float(p[int(np.argmax(c))]), PROB_FLOOR))


def _log_pi(pi: float) -> float:
    return math.log(max(pi, PROB_FLOOR))


def component_loglik(g: GroundTruth, comp: ComponentParams) -> float:
    return (
        _log_pi(comp.pi)
        + cauchy_logpdf_box(g.box, comp.mu, comp.gamma)
        + categorical_logpmf(g.class_onehot, comp.p)
    )


def component_logliks(g: GroundTruth, m: MixtureParams) -> np.ndarray:
    return np.array([component_loglik(g, c) for c in m.components])


def mixture_loglik(g: GroundTruth, m: MixtureParams) -> float:
    if not m.components:
        raise ParamError("empty mixture")
    return float(logsumexp(component_logliks(g, m)))


def mixture_loglik_grad(g: GroundTruth, m: MixtureParams) -> dict:
    """Partials of ``mixture_loglik`` w.r.t. pi, mu, gamma and p.

    Each parameter is treated as a free coordinate (no simplex constraint).
    Floored entries get zero derivative.
    """
    pi, mu, gamma, p = m.arrays()
    ll = component_logliks(g, m)
    resp = np.exp(ll - logsumexp(ll))
    b = _box_vec(g.box)
    d = b[None, :] - mu
    den = gamma ** 2 + d ** 2
    c = g.class_index
    d_pi = np.where(pi > PROB_FLOOR, resp / np.maximum(pi, PROB_FLOOR), 0.0)
    d_p = np.zeros_like(p)
    d_p[:, c] = np.where(p[:, c] > PROB_FLOOR, resp / np.maximum(p[:, c], PROB_FLOOR), 0.0)
    return {
        "pi": d_pi,
        "mu": resp[:, None] * 2.0 * d / den,
        "gamma": resp[:, None] * (1.0 / gamma - 2.0 * gamma / den),
        "p": d_p,
    }
