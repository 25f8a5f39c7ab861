import numpy as np
import pytest

from ioupost.errors import IouPostError
from ioupost.featmap import (
    FeatureMap,
    from_prfm_bytes,
    interp_coeff,
    sample,
    sample_grid,
    to_prfm_bytes,
)


@pytest.fixture
def small_map():
    return FeatureMap(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])


def test_interp_coeff_grid_point():
    assert interp_coeff(3.0, 2.0, 2, 3) == 1.0


def test_interp_coeff_outside_support():
    assert interp_coeff(4.0, 2.0, 2, 3) == 0.0
    assert interp_coeff(3.0, 3.5, 2, 3) == 0.0


def test_interp_coeff_cell_center():
    assert interp_coeff(3.5, 2.5, 2, 3) == 0.25


def test_partition_of_unity():
    rng = np.random.default_rng(0)
    h, w = 5, 7
    for _ in range(50):
        x = rng.uniform(0, w - 1)
        y = rng.uniform(0, h - 1)
        total = sum(interp_coeff(x, y, i, j) for i in range(h) for j in range(w))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_sample_constant_interior():
    fm = FeatureMap(np.full((4, 4, 2), 3.25))
    assert sample(fm, (1.3, 2.7), 1) == pytest.approx(3.25, abs=1e-12)


def test_sample_exact_grid_point():
    rng = np.random.default_rng(1)
    fm = FeatureMap(rng.normal(size=(4, 5, 3)))
    assert sample(fm, (3.0, 2.0), 1) == fm.values[2, 3, 1]


def test_sample_cell_center(small_map):
    assert sample(small_map, (0.5, 0.5), 0) == 2.5


def test_sample_zero_padding():
    fm = FeatureMap(np.ones((2, 2, 1)))
    assert sample(fm, (5.0, 0.0), 0) == 0.0
    assert sample(fm, (-0.5, 0.0), 0) == pytest.approx(0.5)
    assert sample(fm, (1.5, 1.5), 0) == pytest.approx(0.25)  # corner overhang


def test_sample_linear_in_features():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(4, 4, 1))
    g = rng.normal(size=(4, 4, 1))
    combo = FeatureMap(2.0 * f - 0.5 * g)
    fa, fb = FeatureMap(f), FeatureMap(g)
    for _ in range(20):
        x, y = rng.uniform(-0.5, 3.5, 2)
        lhs = sample(combo, (x, y), 0)
        rhs = 2.0 * sample(fa, (x, y), 0) - 0.5 * sample(fb, (x, y), 0)
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_sample_continuous_across_cell_border():
    rng = np.random.default_rng(3)
    fm = FeatureMap(rng.normal(size=(4, 4, 1)))
    left = sample(fm, (1.0 - 1e-9, 1.7), 0)
    right = sample(fm, (1.0 + 1e-9, 1.7), 0)
    assert abs(left - right) < 1e-8


def test_sample_affine_within_cell():
    rng = np.random.default_rng(4)
    fm = FeatureMap(rng.normal(size=(4, 4, 1)))
    xs = np.linspace(1.1, 1.9, 9)
    vals = [sample(fm, (x, 2.3), 0) for x in xs]
    second_diff = np.diff(vals, n=2)
    assert np.max(np.abs(second_diff)) < 1e-12


def test_sample_grid_matches_pointwise():
    rng = np.random.default_rng(5)
    fm = FeatureMap(rng.normal(size=(6, 5, 2)))
    xs = rng.uniform(-1.5, 6.0, 11)
    ys = rng.uniform(-1.5, 7.0, 9)
    grid = sample_grid(fm, xs, ys, 1)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            assert grid[i, j] == pytest.approx(sample(fm, (x, y), 1), abs=1e-12)


def test_invalid_channel_raises(small_map):
    with pytest.raises(IouPostError):
        sample(small_map, (0.5, 0.5), 1)
    with pytest.raises(IouPostError):
        small_map.channel(-1)


def test_featmap_requires_finite_values():
    bad = np.ones((2, 2, 1))
    bad[0, 0, 0] = np.nan
    with pytest.raises(IouPostError):
        FeatureMap(bad)


def test_featmap_values_immutable(small_map):
    with pytest.raises(ValueError):
        small_map.values[0, 0, 0] = 9.0


def test_prfm_roundtrip_exact():
    rng = np.random.default_rng(6)
    values = rng.normal(size=(3, 4, 2)).astype(np.float32).astype(float)
    fm = FeatureMap(values)
    restored = from_prfm_bytes(to_prfm_bytes(fm))
    assert restored == fm


def test_prfm_header_layout():
    fm = FeatureMap(np.zeros((2, 3, 1)))
    data = to_prfm_bytes(fm)
    assert data[:4] == b"PRFM"
    assert data[4:6] == (1).to_bytes(2, "little")
    assert data[6:10] == (2).to_bytes(4, "little")   # H
    assert data[10:14] == (3).to_bytes(4, "little")  # W
    assert data[14:18] == (1).to_bytes(4, "little")  # C
    assert len(data) == 18 + 2 * 3 * 1 * 4


def test_prfm_float_encoding_little_endian():
    fm = FeatureMap(np.array([[[1.5]]]))
    data = to_prfm_bytes(fm)
    assert data[18:22] == np.float32(1.5).tobytes()


def test_prfm_rejects_bad_magic():
    with pytest.raises(IouPostError):
        from_prfm_bytes(b"NOPE" + bytes(20))


def test_prfm_rejects_size_mismatch():
    fm = FeatureMap(np.zeros((2, 2, 1)))
    data = to_prfm_bytes(fm)
    with pytest.raises(IouPostError):
        from_prfm_bytes(data[:-4])


def test_prfm_rejects_unknown_version():
    fm = FeatureMap(np.zeros((2, 2, 1)))
    data = bytearray(to_prfm_bytes(fm))
    data[4] = 9
    with pytest.raises(IouPostError):
        from_prfm_bytes(bytes(data))
