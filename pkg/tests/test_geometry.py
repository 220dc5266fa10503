import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drmm.geometry import Box, BoxError, area, giou, giou_and_grad, iou, iou_matrix


def B(*c, normalized=True):
    return Box(*c, normalized=normalized)


def test_area_examples():
    assert area(B(0, 0, 1, 1)) == 1.0
    assert area(B(0.2, 0.2, 0.2, 0.9)) == 0.0
    assert area(B(0, 0, 2, 2, normalized=False)) == 4.0


def test_iou_examples():
    assert iou(B(0, 0, 1, 1), B(0, 0, 1, 1)) == 1.0
    a, b = B(0, 0, 2, 2, normalized=False), B(1, 1, 3, 3, normalized=False)
    assert iou(a, b) == pytest.approx(1 / 7, abs=1e-15)
    assert iou(B(0, 0, 0.2, 0.2), B(0.5, 0.5, 0.9, 0.9)) == 0.0


def test_giou_examples():
    a = B(0.1, 0.2, 0.6, 0.7)
    assert giou(a, a) == pytest.approx(1.0)
    a, b = B(0, 0, 2, 2, normalized=False), B(1, 1, 3, 3, normalized=False)
    assert giou(a, b) == pytest.approx(-5 / 63, abs=1e-15)
    eps = 1e-6
    far = giou(B(0, 0, eps, eps, normalized=False), B(1e3, 1e3, 1e3 + eps, 1e3 + eps, normalized=False))
    assert far == pytest.approx(-1.0, abs=1e-9)


def test_degenerate_boxes():
    z = B(0.3, 0.3, 0.3, 0.3)
    assert iou(z, z) == 0.0
    assert giou(z, z) == 0.0


@pytest.mark.parametrize("coords", [(0.5, 0, 0.4, 1), (0, 0.5, 1, 0.4), (0, 0, math.nan, 1), (0, 0, 1.5, 1)])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(BoxError):
        B(*coords)


def test_unnormalized_flag_allows_outside():
    assert B(-1, -1, 2, 2, normalized=False).width == 3


box_st = st.tuples(*(st.floats(0, 1, allow_nan=False),) * 4).map(
    lambda c: Box(min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3])))


@settings(max_examples=300, deadline=None)
@given(box_st, box_st)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert giou(a, b) <= v + 1e-12
    assert -1.0 <= giou(a, b) <= 1.0
    if area(a) > 0:
        assert iou(a, a) == pytest.approx(1.0)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    lo = rng.uniform(0, 0.6, (7, 2))
    boxes = np.hstack([lo, lo + rng.uniform(0, 0.4, (7, 2))])
    m = iou_matrix(boxes, boxes[:5])
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou(Box.from_array(boxes[i]), Box.from_array(boxes[j])), abs=1e-14)


def test_giou_grad_finite_differences():
    rng = np.random.default_rng(1)
    lo = rng.uniform(0, 0.5, (50, 2))
    pred = np.hstack([lo, lo + rng.uniform(0.1, 0.4, (50, 2))])
    tlo = rng.uniform(0, 0.5, (50, 2))
    tgt = np.hstack([tlo, tlo + rng.uniform(0.1, 0.4, (50, 2))])
    g, grad = giou_and_grad(pred, tgt)
    for m in range(50):
        assert g[m] == pytest.approx(giou(Box.from_array(pred[m]), Box.from_array(tgt[m])), abs=1e-14)
    h = 1e-7
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        num = (giou_and_grad(pred + e, tgt)[0] - giou_and_grad(pred - e, tgt)[0]) / (2 * h)
        np.testing.assert_allclose(grad[:, j], num, atol=1e-6)
