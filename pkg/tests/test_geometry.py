import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import grid_extremes
from vfcert.errors import DomainError, UnsupportedError
from vfcert.geometry import (
    INF,
    AttackBudget,
    PixelBounds,
    bounds_map,
    candidates_inf,
    candidates_l1,
    candidates_l2,
    extremal_witness,
    field_violation,
    parse_norm,
    pixel_candidates,
    pixel_interval,
    realize_value,
    reachable_regions,
    shrink_into_ball,
)
from vfcert.imaging import Image, VectorField, bilinear_coeffs, interpolate

NORMS = (1, 2, INF)


def rand_image(seed, w=6, c=1):
    return Image(np.random.default_rng(seed).uniform(size=(w, w, c)))


def lp_norm(p, d):
    a, b = abs(float(d[0])), abs(float(d[1]))
    return max(a, b) if p == INF else (a + b if p == 1 else math.hypot(a, b))


def test_parse_norm_and_budget_validation():
    assert parse_norm("inf") == INF and parse_norm(2.0) == 2 and parse_norm("1") == 1
    with pytest.raises(DomainError):
        parse_norm(3)
    with pytest.raises(DomainError):
        AttackBudget(2, -0.1)
    with pytest.raises(DomainError):
        AttackBudget(2, 0.5, -1.0)
    assert AttackBudget("inf", 1, "inf").to_json() == {"norm": "inf", "delta": 1.0, "gamma": "inf"}


def test_zero_delta_gives_exact_pixels():
    img = rand_image(0, c=2)
    for p in NORMS:
        b = bounds_map(img, AttackBudget(p, 0.0))
        np.testing.assert_array_equal(b.lower, img.pixels)
        np.testing.assert_array_equal(b.upper, img.pixels)


def test_constant_image_has_zero_width():
    img = Image(np.full((5, 5), 0.37))
    for p in NORMS:
        b = bounds_map(img, AttackBudget(p, 1.3))
        np.testing.assert_allclose(b.lower, 0.37, atol=1e-15)
        np.testing.assert_allclose(b.upper, 0.37, atol=1e-15)


@pytest.mark.parametrize("p", NORMS)
@pytest.mark.parametrize("delta", [0.3, 0.7, 1.2, 2.5])
def test_bounds_sound_against_dense_grid(p, delta):
    for seed in range(3):
        img = rand_image(seed, c=2)
        b = bounds_map(img, AttackBudget(p, delta))
        lo, hi = grid_extremes(img, p, delta)
        assert np.all(hi <= b.upper + 1e-12)
        assert np.all(lo >= b.lower - 1e-12)
        # the grid is dense enough to come close to the exact extremes
        assert np.max(b.upper - hi) < 0.05 and np.max(lo - b.lower) < 0.05


@pytest.mark.parametrize("p", NORMS)
def test_extremal_witness_attains_bound(p):
    img = rand_image(7)
    budget = AttackBudget(p, 0.8)
    b = bounds_map(img, budget)
    for i in range(1, 7):
        for j in range(1, 7):
            for sense, target in (("max", b.upper), ("min", b.lower)):
                d = extremal_witness(img, i, j, budget, sense)
                assert lp_norm(p, d) <= 0.8
                assert 1 <= i + d[0] <= 6 and 1 <= j + d[1] <= 6
                assert interpolate(img, (i + d[0], j + d[1]))[0] == pytest.approx(target[i - 1, j - 1, 0], abs=1e-9)


def test_extremal_witness_needs_single_channel():
    with pytest.raises(UnsupportedError):
        extremal_witness(rand_image(0, c=3), 1, 1, AttackBudget(2, 0.5))


def test_bounds_nested_in_norm_and_delta():
    img = rand_image(3)
    prev = None
    for delta in (0.2, 0.6, 1.0, 1.7):
        by_p = {p: bounds_map(img, AttackBudget(p, delta)) for p in NORMS}
        # B_1 is inside B_2 is inside B_inf
        for small, big in ((1, 2), (2, INF)):
            assert np.all(by_p[small].lower >= by_p[big].lower - 1e-12)
            assert np.all(by_p[small].upper <= by_p[big].upper + 1e-12)
        if prev is not None:
            assert np.all(by_p[2].lower <= prev.lower + 1e-12) and np.all(by_p[2].upper >= prev.upper - 1e-12)
        prev = by_p[2]
        assert by_p[2].contains(img)


def test_inf_fast_path_matches_candidate_path():
    img = rand_image(11, w=7, c=2)
    for delta in (0.25, 1.0, 1.5, 3.0):
        budget = AttackBudget(INF, delta)
        fast = bounds_map(img, budget)
        for i in range(1, 8):
            for j in range(1, 8):
                lo, hi = pixel_interval(img, i, j, budget)
                np.testing.assert_allclose(fast.lower[i - 1, j - 1], lo, atol=1e-14)
                np.testing.assert_allclose(fast.upper[i - 1, j - 1], hi, atol=1e-14)


def test_l1_diagonal_stationary_point():
    # on region (1, 1) of a 2x2 image the interpolant is A + Bv + Cw + Dvw; a pure
    # saddle f = (v - 1)(w - 1) peaks inside the diagonal edge v + w = const
    img = Image(np.array([[0.0, 0.0], [0.0, 1.0]]))
    rc = bilinear_coeffs(img, 0, 1, 1)
    pts = candidates_l1(1, 1, 1.0, (1, 1), rc)
    assert any(np.allclose(pt, (1.5, 1.5)) for pt in pts)
    b = bounds_map(img, AttackBudget(1, 1.0))
    assert b.upper[0, 0, 0] == pytest.approx(0.25, abs=1e-12)


def test_l2_arc_stationary_point():
    img = Image(np.array([[0.0, 0.0], [0.0, 1.0]]))
    rc = bilinear_coeffs(img, 0, 1, 1)
    pts = candidates_l2(1, 1, 1.0, (1, 1), rc)
    s = 1.0 / math.sqrt(2.0)
    assert any(np.allclose(pt, (1 + s, 1 + s), atol=1e-9) for pt in pts)
    b = bounds_map(img, AttackBudget(2, 1.0))
    assert b.upper[0, 0, 0] == pytest.approx(0.5, abs=1e-12)


def test_inf_candidates_are_box_corners():
    pts = candidates_inf(3, 3, 0.5, (2, 3))
    assert sorted(map(tuple, pts)) == [(2.5, 3.0), (2.5, 3.5), (3.0, 3.0), (3.0, 3.5)]
    with pytest.raises(DomainError):
        candidates_inf(3, 3, -1.0, (2, 3))


def test_reachable_regions_respect_image_and_ball():
    assert reachable_regions(1, 1, AttackBudget(2, 0.5), 5) == [(1, 1)]
    assert len(reachable_regions(3, 3, AttackBudget(INF, 0.5), 5)) == 4
    # the closed l1 ball of radius 1 also touches 8 further cells at single points
    assert len(reachable_regions(3, 3, AttackBudget(1, 0.9), 5)) == 4
    assert len(reachable_regions(3, 3, AttackBudget(1, 1.0), 5)) == 12


def test_pixel_candidates_outside_image():
    with pytest.raises(DomainError):
        pixel_candidates(rand_image(0), 0, 1, AttackBudget(2, 0.5))


def test_realize_value_hits_targets():
    img = rand_image(5)
    budget = AttackBudget(2, 0.9)
    b = bounds_map(img, budget)
    rng = np.random.default_rng(0)
    for _ in range(30):
        i, j = rng.integers(1, 7, size=2)
        lo, hi = b.lower[i - 1, j - 1, 0], b.upper[i - 1, j - 1, 0]
        target = rng.uniform(lo, hi)
        d = realize_value(img, i, j, budget, target)
        assert lp_norm(2, d) <= 0.9
        assert interpolate(img, (i + d[0], j + d[1]))[0] == pytest.approx(target, abs=1e-9)


@given(st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(NORMS), st.floats(0, 2))
@settings(max_examples=200, deadline=None)
def test_shrink_into_ball_property(a, b, p, delta):
    d = shrink_into_ball(np.array([a, b]), p, delta)
    assert lp_norm(p, d) <= delta
    if lp_norm(p, np.array([a, b])) <= delta * (1 - 1e-12):
        np.testing.assert_array_equal(d, [a, b])


def test_field_violation():
    budget = AttackBudget(INF, 0.5, 0.2)
    assert field_violation(VectorField.zeros(4), budget) == 0.0
    dx = np.zeros((4, 4))
    dx[1, 1] = 0.45
    assert field_violation(VectorField(dx, np.zeros((4, 4))), budget) == pytest.approx(0.25)
    dx[1, 1] = 0.15
    assert field_violation(VectorField(dx, np.zeros((4, 4))), budget) == 0.0
    dx = np.zeros((4, 4))
    dx[0, 0] = -0.1
    assert field_violation(VectorField(dx, np.zeros((4, 4))), budget) == pytest.approx(0.1)


def test_pixel_bounds_json_round_trip():
    b = bounds_map(rand_image(1, c=3), AttackBudget(2, 0.7))
    back = PixelBounds.from_json(b.to_json())
    np.testing.assert_array_equal(back.lower, b.lower)
    np.testing.assert_array_equal(back.upper, b.upper)


@given(st.integers(0, 10_000), st.sampled_from(NORMS), st.floats(0.05, 2.0))
@settings(max_examples=40, deadline=None)
def test_random_fields_stay_inside_bounds(seed, p, delta):
    img = rand_image(seed % 50, w=4)
    budget = AttackBudget(p, delta)
    b = bounds_map(img, budget)
    rng = np.random.default_rng(seed)
    for i in range(1, 5):
        for j in range(1, 5):
            ang = rng.uniform(0, 2 * math.pi)
            d = np.array([math.cos(ang), math.sin(ang)]) * rng.uniform(0, delta) * 2
            d = shrink_into_ball(d, p, delta)
            x, y = i + d[0], j + d[1]
            if not (1 <= x <= 4 and 1 <= y <= 4):
                continue
            v = interpolate(img, (x, y))[0]
            assert b.lower[i - 1, j - 1, 0] - 1e-12 <= v <= b.upper[i - 1, j - 1, 0] + 1e-12
