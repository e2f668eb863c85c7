import numpy as np
import pytest

from stvis.sampling import bilinear_sample, sample_maps
from stvis.tensor import Tensor

from conftest import autodiff, fd_grad, rel_err


def loop_bilinear(fmap, x, y):
    """Reference: explicit four-corner interpolation with zero padding."""
    c, h, w = fmap.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(c)
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            wt = (1 - abs(x - cx)) * (1 - abs(y - cy))
            if 0 <= cx < w and 0 <= cy < h:
                out += wt * fmap[:, cy, cx]
    return out


def test_integer_location_returns_pixel(rng):
    fmap = rng.normal(size=(3, 4, 5))
    assert np.array_equal(bilinear_sample(fmap, (1.0, 2.0)).data, fmap[:, 2, 1])


def test_midpoint_interpolates_linearly():
    fmap = np.array([[[0.0, 1.0]]])
    assert bilinear_sample(fmap, (0.5, 0.0)).data[0] == 0.5


def test_outside_location_is_zero(rng):
    fmap = rng.normal(size=(2, 3, 3))
    assert np.array_equal(bilinear_sample(fmap, (10.0, -7.0)).data, np.zeros(2))
    assert np.array_equal(bilinear_sample(fmap, (-1.0, 1.0)).data, np.zeros(2))


def test_random_locations_match_loop_oracle(rng):
    fmap = rng.normal(size=(3, 5, 6))
    for _ in range(200):
        x, y = rng.uniform(-1.5, 6.5), rng.uniform(-1.5, 5.5)
        assert np.allclose(bilinear_sample(fmap, (x, y)).data, loop_bilinear(fmap, x, y), atol=1e-13)


def test_linear_along_each_axis_between_integers(rng):
    fmap = rng.normal(size=(2, 4, 4))
    a = bilinear_sample(fmap, (1.0, 2.0)).data
    b = bilinear_sample(fmap, (2.0, 2.0)).data
    for s in np.linspace(0, 1, 7):
        assert np.allclose(bilinear_sample(fmap, (1.0 + s, 2.0)).data, (1 - s) * a + s * b, atol=1e-14)


def test_gradients_vs_fd(rng):
    fmap = rng.normal(size=(3, 4, 5))
    loc = np.array([1.3, 2.6])
    w = rng.normal(size=3)
    g_map, g_loc = autodiff(lambda m, p: (bilinear_sample(m, p) * w).sum(), fmap, loc)
    fd_loc = fd_grad(lambda p: float((bilinear_sample(fmap, p).data * w).sum()), loc)
    fd_map = fd_grad(lambda m: float((bilinear_sample(m, loc).data * w).sum()), fmap)
    assert rel_err(g_loc, fd_loc) < 1e-7
    assert rel_err(g_map, fd_map) < 1e-7


def test_batched_sampler_matches_per_group(rng):
    value = rng.normal(size=(2, 4, 5, 3))
    xy = rng.uniform(-1, 5, size=(2, 6, 2))
    out = sample_maps(value, xy).data
    for g in range(2):
        for p in range(6):
            expected = loop_bilinear(np.transpose(value[g], (2, 0, 1)), *xy[g, p])
            assert np.allclose(out[g, p], expected, atol=1e-13)


def test_sample_maps_shape_validation():
    with pytest.raises(ValueError):
        sample_maps(np.zeros((1, 2, 2, 1)), np.zeros((2, 3, 2)))
