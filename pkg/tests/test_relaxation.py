import json

import numpy as np
import pytest

from netfactory import random_dense_net, random_image
from oracles import ball_samples
from vfcert.errors import ContractError, FormatError
from vfcert.geometry import INF, AttackBudget, bounds_map
from vfcert.imaging import Image, interpolate_many
from vfcert.relaxation import (
    BoundingPlanes,
    FlowGraph,
    InputRelaxation,
    build_tightening_lp,
    concretize,
    select_pixels,
    displacement_box,
    fit_planes,
    image_relaxation,
    plane_eval,
    planes_map,
    repair_plane,
)
from vfcert.verifier import DeepPoly, predict


@pytest.mark.parametrize("delta", [0.3, 0.8, 1.5])
def test_planes_sound_on_dense_samples(delta):
    img = random_image(4, width=5, channels=2, smooth=False)
    planes = planes_map(img, delta)
    offs = ball_samples(INF, delta, grid=41)
    w = img.width
    for i in range(1, w + 1):
        for j in range(1, w + 1):
            x, y = i + offs[:, 0], j + offs[:, 1]
            ok = (x >= 1) & (x <= w) & (y >= 1) & (y <= w)
            vals = interpolate_many(img.pixels, x[ok], y[ok])
            for ch in range(2):
                lo = plane_eval(planes.lower[i - 1, j - 1, ch], offs[ok, 0], offs[ok, 1])
                up = plane_eval(planes.upper[i - 1, j - 1, ch], offs[ok, 0], offs[ok, 1])
                assert np.all(lo <= vals[:, ch] + 1e-12)
                assert np.all(vals[:, ch] <= up + 1e-12)


def test_planes_pass_through_clean_value_region():
    # lower plane never exceeds and upper never undercuts the undeformed pixel
    img = random_image(1)
    planes = planes_map(img, 0.5)
    c = img.pixels
    assert np.all(planes.lower[..., 0] <= c + 1e-12)
    assert np.all(planes.upper[..., 0] >= c - 1e-12)


def test_constant_image_planes_are_flat():
    lo, up = fit_planes(Image(np.full((4, 4), 0.25)), 2, 3, 0.7)
    # flat up to the rounding allowance
    np.testing.assert_allclose(lo, [[0.25, 0.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(up, [[0.25, 0.0, 0.0]], atol=1e-15)
    assert lo[0, 0] <= 0.25 <= up[0, 0]


def test_linear_image_planes_are_exact():
    # v -> value is affine in the interior, so both planes equal it
    px = np.add.outer(0.1 * np.arange(6), 0.05 * np.arange(6))
    lo, up = fit_planes(Image(px), 3, 3, 0.8)
    np.testing.assert_allclose(lo[0], [px[2, 2], 0.1, 0.05], atol=1e-9)
    np.testing.assert_allclose(up[0], [px[2, 2], 0.1, 0.05], atol=1e-9)


def test_repair_shifts_by_exact_violation():
    offsets = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    values = np.array([0.0, 1.0, 0.0])
    plane = np.array([1e-9, 1.0, 0.0])
    fixed = repair_plane(plane, offsets, values, "lower")
    assert np.all(plane_eval(fixed, offsets[:, 0], offsets[:, 1]) <= values)
    assert abs(fixed[0]) <= 1e-15
    up = repair_plane(np.array([-0.5, 1.0, 0.0]), offsets, values, "upper")
    assert np.all(plane_eval(up, offsets[:, 0], offsets[:, 1]) >= values)
    assert up[0] == pytest.approx(0.0, abs=1e-15)
    sound = np.array([-1.0, 0.0, 0.0])
    np.testing.assert_array_equal(repair_plane(sound, offsets, values, "lower"), sound)
    with pytest.raises(ContractError):
        repair_plane(plane, offsets, values, "middle")


def test_planes_json_round_trip(tmp_path):
    planes = planes_map(random_image(2, width=4, channels=3), 0.6)
    planes.save(tmp_path / "p.json")
    back = BoundingPlanes.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.lower, planes.lower)
    np.testing.assert_array_equal(back.upper, planes.upper)
    with pytest.raises(FormatError):
        BoundingPlanes.from_json({"shape": [2], "planes": [[0, 1, 2]]})


def test_flow_graph_grid():
    g = FlowGraph.grid(3)
    assert len(g.edges) == 12
    assert all(p < q for p, q in g.edges)
    assert g.neighbours(4) == [1, 3, 5, 7]
    assert g.restricted([0, 1, 4]) == [(0, 1), (1, 4)]


def test_displacement_box_clipped_to_image():
    box = displacement_box(4, 1.5).reshape(4, 4, 2, 2)
    np.testing.assert_array_equal(box[0, 0], [[0.0, 1.5], [0.0, 1.5]])
    np.testing.assert_array_equal(box[3, 1], [[-1.5, 0.0], [-1.0, 1.5]])


def test_tightening_lp_on_worked_example(data_dir):
    with open(data_dir / "toy_relaxation.json") as fh:
        obj = json.load(fh)
    # objective x0 - x1: the box gives -0.75, planes tie both values to (v0, v1)
    box = concretize([1.0, -1.0], 0.0, InputRelaxation.from_json(obj), "min", use_lp=False)
    assert box == pytest.approx(-0.75)
    loose = concretize([1.0, -1.0], 0.0, InputRelaxation.from_json(obj, INF))
    tight = concretize([1.0, -1.0], 0.0, InputRelaxation.from_json(obj, 0.25))
    # x0 >= 0.5 v0, x1 <= 0.5 + 0.5 v1, so x0 - x1 >= 0.5 (v0 - v1) - 0.5
    assert loose == pytest.approx(-0.75)
    assert tight == pytest.approx(-0.625)
    with pytest.raises(ContractError):
        build_tightening_lp([1.0], 0.0, InputRelaxation.from_json(obj))


def test_relaxation_json_round_trip_and_errors(data_dir):
    with open(data_dir / "toy_relaxation.json") as fh:
        obj = json.load(fh)
    relax = InputRelaxation.from_json(obj, 0.25)
    again = InputRelaxation.from_json(json.loads(json.dumps(relax.to_json())), 0.25)
    np.testing.assert_array_equal(again.planes_lower, relax.planes_lower)
    assert again.flow.edges == relax.flow.edges and again.gamma == 0.25
    with pytest.raises(FormatError):
        InputRelaxation.from_json({"lower": [1.0], "upper": [0.0]})
    with pytest.raises(FormatError):
        InputRelaxation.from_json({"lower": [0.0]})


def test_flow_lp_tightens_monotonically_in_gamma():
    for seed in range(3):
        img = random_image(seed)
        net = random_dense_net(seed)
        label = predict(net, img)
        planes = planes_map(img, 0.5)
        prev = None
        for gamma in (INF, 1.0, 0.25, 0.05, 0.0):
            budget = AttackBudget(INF, 0.5, gamma)
            relax = image_relaxation(img, budget, bounds_map(img, budget), planes)
            m = min(DeepPoly(net, relax).margins(label).values())
            if prev is not None:
                assert m >= prev - 1e-9
            prev = m


def test_flow_lp_is_sound_for_smooth_fields():
    from vfcert.imaging import deform
    from vfcert.oracle import sample_field, sample_rng

    img = random_image(5)
    budget = AttackBudget(INF, 0.5, 0.1)
    relax = image_relaxation(img, budget, bounds_map(img, budget), planes_map(img, 0.5))
    rng = np.random.default_rng(0)
    coeffs = rng.normal(size=relax.size)
    lo = concretize(coeffs, 0.0, relax, "min")
    hi = concretize(coeffs, 0.0, relax, "max")
    for k in range(300):
        val = coeffs @ deform(img, sample_field(6, budget, sample_rng(0, k))).flat()
        assert lo - 1e-9 <= val <= hi + 1e-9


def test_pixel_cap_keeps_bounds_sound():
    from vfcert.relaxation import build_tightening_lp
    from vfcert.linsolve import lp_solve

    img = random_image(6)
    budget = AttackBudget(INF, 0.5, 0.1)
    relax = image_relaxation(img, budget, bounds_map(img, budget), planes_map(img, 0.5))
    rng = np.random.default_rng(1)
    coeffs = rng.normal(size=relax.size)
    box = concretize(coeffs, 0.0, relax, "min", use_lp=False)
    full = lp_solve(build_tightening_lp(coeffs, 0.0, relax, "min", max_pixels=None).program).objective
    prev = box
    for cap in (0, 4, 12, 36):
        capped = lp_solve(build_tightening_lp(coeffs, 0.0, relax, "min", max_pixels=cap).program).objective \
            if cap else box
        # more LP pixels never loosen the bound, and the cap never beats the full LP
        assert box - 1e-9 <= capped <= full + 1e-9
        assert capped >= prev - 1e-9
        prev = capped
    assert prev == pytest.approx(full, abs=1e-9)
    keep = select_pixels(relax, np.abs(coeffs) * (relax.upper - relax.lower), 5)
    assert len(keep) == 5 and keep == sorted(keep)
