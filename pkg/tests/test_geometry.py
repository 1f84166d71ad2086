import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invoxel.geometry import (Aabb, Ray, intersect_boxes, line_sample, ray_aabb_intersect,
                              sphere_sample, stratified_from_uniform, stratified_sample)


def test_ray_validation():
    with pytest.raises(ValueError, match="unit"):
        Ray([0, 0, 0], [1, 1, 0])
    with pytest.raises(ValueError, match="near"):
        Ray([0, 0, 0], [1, 0, 0], near=2.0, far=1.0)
    with pytest.raises(ValueError):
        Aabb([0, 0, 1], [1, 1, 0])


def test_axis_aligned_hit_and_miss():
    box = Aabb([-1, -1, -1], [1, 1, 1])
    assert ray_aabb_intersect(Ray([-5, 0, 0], [1, 0, 0]), box) == pytest.approx((4.0, 6.0))
    assert ray_aabb_intersect(Ray([-5, 2, 0], [1, 0, 0]), box) is None
    # origin inside: entry clamps to near
    assert ray_aabb_intersect(Ray([0, 0, 0], [0, 0, 1], near=0.25), box) == pytest.approx((0.25, 1.0))


def test_zero_direction_component_does_not_divide():
    with np.errstate(all="raise"):
        a, b, hit = intersect_boxes(np.array([[0.5, 0.2, -3.0]]), np.array([[0.0, 0.0, 1.0]]),
                                    0.0, 10.0, np.zeros(3), np.ones(3))
    assert hit[0] and a[0] == pytest.approx(3.0) and b[0] == pytest.approx(4.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_slab_matches_point_membership(o, d):
    d = np.asarray(d)
    if np.linalg.norm(d) < 1e-3:
        return
    d = d / np.linalg.norm(d)
    lo, hi = np.array([-1.0, -0.5, -0.75]), np.array([0.5, 1.0, 0.25])
    a, b, hit = intersect_boxes(np.asarray(o)[None], d[None], 0.0, 20.0, lo, hi)
    t = np.linspace(0, 20, 4001)
    p = np.asarray(o) + t[:, None] * d
    inside = np.all((p >= lo) & (p <= hi), axis=1)
    if hit[0]:
        mid = np.asarray(o) + 0.5 * (a[0] + b[0]) * d
        assert np.all((mid >= lo - 1e-9) & (mid <= hi + 1e-9))
    else:
        # a miss may still graze within one marching step
        assert inside.sum() <= 1


def test_sphere_samples_inside_ball_and_roughly_uniform(rng):
    c = np.array([[1.0, 2.0, 3.0]])
    pts = sphere_sample(c, 0.5, 20000, rng)
    assert pts.shape == (1, 20000, 3)
    r = np.linalg.norm(pts[0] - c[0], axis=-1)
    assert r.max() <= 0.5
    # uniform in volume: P(r < R/2) = 1/8
    assert np.mean(r < 0.25) == pytest.approx(0.125, abs=0.01)
    assert np.abs(pts[0].mean(axis=0) - c[0]).max() < 0.01


def test_sphere_sample_batch_shape(rng):
    assert sphere_sample(np.zeros((4, 5, 3)), 1.0, 9, rng).shape == (4, 5, 9, 3)
    with pytest.raises(ValueError):
        sphere_sample(np.zeros(3), -1.0, 3, rng)


def test_line_sample_on_segment_sorted(rng):
    a, b = np.array([0.0, 0, 0]), np.array([1.0, 2, 3])
    s = line_sample(a, b, 50, rng)
    assert np.all(np.diff(s.t_values) >= 0)
    assert np.all((s.t_values >= 0) & (s.t_values <= 1))
    np.testing.assert_allclose(s.points, s.t_values[:, None] * b, atol=1e-12)


def test_stratified_one_per_bin(rng):
    t = stratified_sample(np.array([2.0, 0.0]), np.array([6.0, 1.0]), 8, rng)
    for row, (lo, hi) in zip(t, [(2.0, 6.0), (0.0, 1.0)]):
        w = (hi - lo) / 8
        bins = np.floor((row - lo) / w)
        np.testing.assert_array_equal(bins, np.arange(8))
    mid = stratified_sample(0.0, 1.0, 4)
    np.testing.assert_allclose(mid, [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(stratified_from_uniform(0.0, 1.0, np.full(4, 0.5)), mid)
