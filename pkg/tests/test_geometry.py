import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ioupost.errors import DegenerateBoxError
from ioupost.geometry import (
    BoundingBox,
    BoxDelta,
    decode_delta,
    encode_delta,
    iou,
    iou_grad,
    iou_matrix,
    scale_gradient,
)

B = BoundingBox


def boxes(min_side=0.1, max_side=5.0):
    coord = st.floats(-10.0, 10.0, allow_nan=False)
    side = st.floats(min_side, max_side, allow_nan=False)
    return st.builds(lambda x, y, w, h: B(x, y, x + w, y + h), coord, coord, side, side)


def test_iou_identity():
    b = B(1.0, 2.0, 4.0, 7.0)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(B(0, 0, 1, 1), B(2, 2, 3, 3)) == 0.0


def test_iou_hand_computed_overlap():
    # intersection 1, union 4 + 4 - 1 = 7
    assert iou(B(0, 0, 2, 2), B(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_edge_touching_is_zero():
    assert iou(B(0, 0, 1, 1), B(1, 0, 2, 1)) == 0.0


def test_iou_degenerate_raises():
    with pytest.raises(DegenerateBoxError):
        iou(B(0, 0, 0, 1), B(0, 0, 1, 1))
    with pytest.raises(DegenerateBoxError):
        iou(B(0, 0, 1, 1), B(2, 2, 2, 3))


@given(boxes(), boxes())
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_iou_strictly_below_one_for_distinct_overlap():
    assert iou(B(0, 0, 2, 2), B(0, 0, 2, 2.5)) < 1.0


def test_iou_invariant_under_joint_scale_and_shift():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x0, y0 = rng.uniform(-5, 5, 2)
        a = B(x0, y0, x0 + rng.uniform(0.5, 3), y0 + rng.uniform(0.5, 3))
        bx, by = rng.uniform(-1, 1, 2)
        b = B(a.x0 + bx, a.y0 + by, a.x1 + bx * 0.5, a.y1 + by * 0.5)
        if not b.is_valid or iou(a, b) == 0.0:
            continue
        base = iou(a, b)
        scaled = iou(
            B(2 * a.x0, 2 * a.y0, 2 * a.x1, 2 * a.y1),
            B(2 * b.x0, 2 * b.y0, 2 * b.x1, 2 * b.y1),
        )
        shifted = iou(
            B(a.x0 + 7, a.y0 - 3, a.x1 + 7, a.y1 - 3),
            B(b.x0 + 7, b.y0 - 3, b.x1 + 7, b.y1 - 3),
        )
        assert scaled == base  # doubling is exact in binary floating point
        assert shifted == pytest.approx(base, rel=1e-12)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(4)
    arr_a = np.column_stack([rng.uniform(0, 5, 6), rng.uniform(0, 5, 6),
                             rng.uniform(5.5, 9, 6), rng.uniform(5.5, 9, 6)])
    arr_b = arr_a + rng.uniform(-1, 1, size=(6, 4))
    m = iou_matrix(arr_a, arr_b)
    for i in range(6):
        for j in range(6):
            a = B.from_array(arr_a[i])
            b = B.from_array(arr_b[j])
            assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


def _fd_iou(a, b, h=1e-5):
    g = np.zeros(4)
    for k in range(4):
        hi = a.as_array()
        hi[k] += h
        lo = a.as_array()
        lo[k] -= h
        g[k] = (iou(B.from_array(hi), b) - iou(B.from_array(lo), b)) / (2 * h)
    return g


def test_iou_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 300:
        x0, y0 = rng.uniform(0, 4, 2)
        a = B(x0, y0, x0 + rng.uniform(0.5, 3), y0 + rng.uniform(0.5, 3))
        shift = rng.uniform(-0.5, 0.5, 2)
        b = B(a.x0 + shift[0], a.y0 + shift[1],
              a.x1 + shift[0] * 0.3, a.y1 + shift[1] * 0.3)
        if not b.is_valid or iou(a, b) == 0.0:
            continue
        if np.min(np.abs(a.as_array() - b.as_array())) < 1e-3:
            continue
        assert np.max(np.abs(iou_grad(a, b) - _fd_iou(a, b))) < 1e-4
        checked += 1


def test_iou_grad_sign_enlarging_past_optimum():
    b = B(0, 0, 1, 1)
    a = B(0, 0, 1 + 1e-6, 1)  # right edge just past b's
    assert iou_grad(a, b)[2] < 0.0


def test_iou_grad_sign_growing_toward_overlap():
    g = iou_grad(B(0, 0, 2, 2), B(1, 1, 3, 3))
    assert g[2] > 0.0  # growing x1 increases the intersection


def test_iou_grad_disjoint_is_zero():
    assert np.array_equal(iou_grad(B(0, 0, 1, 1), B(5, 5, 6, 6)), np.zeros(4))


def test_encode_identity_is_zero_delta():
    b = B(2, 3, 7, 9)
    d = encode_delta(b, b)
    assert (d.dx, d.dy, d.dw, d.dh) == (0.0, 0.0, 0.0, 0.0)


def test_decode_hand_example():
    out = decode_delta(B(0, 0, 2, 2), BoxDelta(0.5, 0.0, 0.0, 0.0))
    assert (out.x0, out.y0, out.x1, out.y1) == (1.0, 0.0, 3.0, 2.0)


@given(boxes(), boxes())
@settings(max_examples=300, deadline=None)
def test_delta_roundtrip(src, dst):
    restored = decode_delta(src, encode_delta(src, dst))
    scale = np.maximum(1.0, np.abs(dst.as_array()))
    assert np.max(np.abs(restored.as_array() - dst.as_array()) / scale) < 1e-9


def test_encode_degenerate_dst_raises():
    with pytest.raises(DegenerateBoxError):
        encode_delta(B(0, 0, 1, 1), B(1, 1, 1, 2))


def test_scale_gradient_by_axis():
    out = scale_gradient(np.ones(4), B(0, 0, 2, 4))
    assert np.array_equal(out, [2.0, 4.0, 2.0, 4.0])


def test_scale_gradient_zero_and_unit_box():
    assert np.array_equal(scale_gradient(np.zeros(4), B(0, 0, 2, 4)), np.zeros(4))
    g = np.array([0.1, -0.2, 0.3, -0.4])
    assert np.array_equal(scale_gradient(g, B(1, 1, 2, 2)), g)
