import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drmm.data import GroundTruth
from drmm.geometry import Box
from drmm.mixture import (
    ComponentParams, MixtureParams, ParamError, categorical_logpmf, cauchy_logpdf_1d, cauchy_logpdf_box,
    component_loglik, mixture_loglik, mixture_loglik_grad,
)

LOG_INV_PI = math.log(1 / math.pi)


def gt(box=(0.2, 0.3, 0.6, 0.7), c=0, C=3):
    return GroundTruth.of(Box(*box), c, C)


def comp(pi=1.0, mu=(0.2, 0.3, 0.6, 0.7), gamma=(1, 1, 1, 1), p=(1.0, 0.0, 0.0)):
    return ComponentParams(pi, np.array(mu, float), np.array(gamma, float), np.array(p, float))


def test_cauchy_1d_examples():
    assert cauchy_logpdf_1d(0.3, 0.3, 1.0) == pytest.approx(-1.1447298858494002, abs=1e-12)
    assert cauchy_logpdf_1d(0.3 + 1.7, 0.3, 1.7) == pytest.approx(math.log(1 / (2 * math.pi * 1.7)), abs=1e-12)
    assert cauchy_logpdf_1d(5, 0, 2) == pytest.approx(math.log(2 / (math.pi * 29)), abs=1e-12)
    with pytest.raises(ParamError):
        cauchy_logpdf_1d(0, 0, 0)


def test_cauchy_quadrature_unit_mass():
    for mu, gamma in ((0.0, 1.0), (0.4, 0.05), (-3.0, 7.0)):
        x = np.linspace(mu - 1000 * gamma, mu + 1000 * gamma, 2_000_001)
        f = np.exp([cauchy_logpdf_1d(v, mu, gamma) for v in x[::100]])
        mass = np.trapezoid(f, x[::100]) if hasattr(np, "trapezoid") else np.trapz(f, x[::100])
        assert mass >= 0.999


def test_cauchy_box_examples():
    mu = np.array([0.1, 0.2, 0.5, 0.6])
    assert cauchy_logpdf_box(mu, mu, np.ones(4)) == pytest.approx(4 * LOG_INV_PI, abs=1e-12)
    off = mu + np.array([1.0, 0, 0, 0])
    assert cauchy_logpdf_box(off, mu, np.ones(4)) == pytest.approx(3 * LOG_INV_PI + math.log(1 / (2 * math.pi)))
    assert cauchy_logpdf_box(mu, mu, 2 * np.ones(4)) == pytest.approx(4 * math.log(1 / (2 * math.pi)))


def test_categorical_examples():
    assert categorical_logpmf((1, 0, 0), (1.0, 0.0, 0.0)) == 0.0
    assert categorical_logpmf((0, 0, 1, 0), (0.25,) * 4) == pytest.approx(math.log(0.25))
    assert categorical_logpmf((0, 1), (0.7, 0.3)) == pytest.approx(math.log(0.3))
    assert categorical_logpmf((0, 1), (1.0, 0.0)) == pytest.approx(math.log(1e-12))
    with pytest.raises(ParamError):
        categorical_logpmf((1, 1), (0.5, 0.5))


def test_component_loglik_examples():
    g = gt()
    full = component_loglik(g, comp())
    assert full == pytest.approx(4 * LOG_INV_PI, abs=1e-12)
    assert component_loglik(g, comp(pi=0.5)) == pytest.approx(full + math.log(0.5), abs=1e-12)
    assert component_loglik(g, comp(pi=0.0)) == pytest.approx(full + math.log(1e-12))


def test_mixture_examples():
    g = gt()
    single = MixtureParams((comp(),), 3)
    assert mixture_loglik(g, single) == pytest.approx(component_loglik(g, comp()), abs=1e-15)
    two = MixtureParams((comp(pi=0.5), comp(pi=0.5)), 3)
    assert mixture_loglik(g, two) == pytest.approx(mixture_loglik(g, single), abs=1e-12)
    a = comp(pi=0.3, mu=(0.1, 0.2, 0.5, 0.5), gamma=(0.1, 0.2, 0.3, 0.1), p=(0.5, 0.25, 0.25))
    b = comp(pi=0.7, mu=(0.3, 0.3, 0.8, 0.6), gamma=(0.4, 0.1, 0.1, 0.2), p=(0.2, 0.3, 0.5))
    la, lb = component_loglik(g, a), component_loglik(g, b)
    want = float(mpmath.log(mpmath.exp(la) + mpmath.exp(lb)))
    assert mixture_loglik(g, MixtureParams((a, b), 3)) == pytest.approx(want, abs=1e-12)


def test_invalid_params():
    with pytest.raises(ParamError):
        comp(gamma=(1, 1, 0, 1))
    with pytest.raises(ParamError):
        comp(p=(0.5, 0.4, 0.0))
    with pytest.raises(ParamError):
        MixtureParams((), 3)
    with pytest.raises(ParamError):
        MixtureParams((comp(pi=0.4),), 3)


def random_mixture(rng, k, c):
    pi = rng.dirichlet(np.ones(k))
    lo = rng.uniform(0, 0.6, (k, 2))
    mu = np.hstack([lo, lo + rng.uniform(0.05, 0.4, (k, 2))])
    gamma = rng.uniform(0.02, 0.5, (k, 4))
    p = rng.dirichlet(np.ones(c), size=k)
    return MixtureParams.from_arrays(pi, mu, gamma, p)


def random_gt(rng, c):
    lo = rng.uniform(0, 0.6, 2)
    return GroundTruth.of(Box(*lo, *(lo + rng.uniform(0.05, 0.4, 2))), int(rng.integers(c)), c)


def oracle_loglik(g, m):
    """Brute force at 50 digits straight from the density formula."""
    with mpmath.workdps(50):
        b = [mpmath.mpf(v) for v in g.box.as_array()]
        total = mpmath.mpf(0)
        for cp in m.components:
            f = mpmath.mpf(max(cp.pi, 1e-12)) * mpmath.mpf(max(cp.p[g.class_index], 1e-12))
            for j in range(4):
                gm = mpmath.mpf(cp.gamma[j])
                f *= gm / (mpmath.pi * (gm ** 2 + (b[j] - mpmath.mpf(cp.mu[j])) ** 2))
            total += f
        return mpmath.log(total)


def test_mixture_matches_extended_precision_oracle():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(200):
        c = int(rng.integers(2, 6))
        m, g = random_mixture(rng, int(rng.integers(1, 9)), c), random_gt(rng, c)
        worst = max(worst, abs(mixture_loglik(g, m) - float(oracle_loglik(g, m))))
    assert worst < 1e-10


def test_logsumexp_stability_wide_range():
    # components whose log-likelihoods span roughly [-700, 50]
    g = gt(box=(0.5, 0.5, 0.5, 0.5))
    far = comp(pi=0.5, mu=(1e75, 1e75, 1e75, 1e75), gamma=(1e-100,) * 4)
    near = comp(pi=0.5, mu=(0.5,) * 4, gamma=(1e-6,) * 4)
    v = mixture_loglik(g, MixtureParams((far, near), 3))
    assert math.isfinite(v)
    assert v == pytest.approx(component_loglik(g, near), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    m, g = random_mixture(rng, 5, 3), random_gt(rng, 3)
    perm = MixtureParams(tuple(m.components[i] for i in rng.permutation(5)), 3)
    assert mixture_loglik(g, perm) == pytest.approx(mixture_loglik(g, m), abs=1e-12)


def test_analytic_partials_match_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-5
    for _ in range(20):
        m, g = random_mixture(rng, 4, 3), random_gt(rng, 3)
        grads = mixture_loglik_grad(g, m)
        pi, mu, gamma, p = m.arrays()
        arrays = {"pi": pi, "mu": mu, "gamma": gamma, "p": p}

        def f(arrs):
            # raw evaluation so pi/p need not stay normalized
            total = []
            for k in range(len(arrs["pi"])):
                total.append(math.log(arrs["pi"][k]) + math.log(arrs["p"][k, g.class_index])
                             + cauchy_logpdf_box(g.box, arrs["mu"][k], arrs["gamma"][k]))
            return float(np.logaddexp.reduce(total))

        for name, a in arrays.items():
            for idx in np.ndindex(a.shape):
                up = {k: v.copy() for k, v in arrays.items()}
                dn = {k: v.copy() for k, v in arrays.items()}
                up[name][idx] += h
                dn[name][idx] -= h
                num = (f(up) - f(dn)) / (2 * h)
                ana = grads[name][idx]
                assert abs(ana - num) <= 1e-5 * max(abs(ana), abs(num), 1e-3), (name, idx, ana, num)
