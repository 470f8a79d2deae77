import json

import numpy as np
import pytest
import scipy.sparse as sp

from netfactory import random_dense_net, random_image
from oracles import naive_forward, phase_enumeration_margin
from vfcert.errors import ContractError, FormatError
from vfcert.geometry import INF, AttackBudget, bounds_map
from vfcert.imaging import Image
from vfcert.relaxation import InputRelaxation, image_relaxation, planes_map
from vfcert.verifier.network import lower_conv2d
from vfcert.verifier import (
    CertificationReport,
    DeepPoly,
    Network,
    certify_image,
    certify_relaxation,
    deeppoly_certify,
    encode_network,
    forward,
    forward_all,
    interval_margins,
    interval_propagate,
    load_network_json,

    milp_certify,
    predict,
    relu_relaxation,
    resolve_method,
)

@pytest.fixture
def toy(data_dir):
    with open(data_dir / "toy_relaxation.json") as fh:
        obj = json.load(fh)
    return (load_network_json(data_dir / "toy_network.json"), load_network_json(data_dir / "toy_network_shifted.json"), obj)

# ---------------------------------------------------------------------------
# worked example
# ---------------------------------------------------------------------------

def test_toy_interval_bounds(toy):
    net, _, obj = toy
    relax = InputRelaxation.from_json(obj)
    lo, hi = interval_propagate(net, relax.lower, relax.upper, all_nodes=True)
    np.testing.assert_allclose(lo[1], [-0.5, 0.125], atol=1e-9)
    np.testing.assert_allclose(hi[1], [0.5, 0.875], atol=1e-9)
    np.testing.assert_allclose(lo[2], [0.0, 0.125], atol=1e-9)
    np.testing.assert_allclose(hi[2], [0.5, 0.875], atol=1e-9)
    np.testing.assert_allclose(lo[3], [-1.0, -0.375], atol=1e-9)
    np.testing.assert_allclose(hi[3], [0.0, 0.875], atol=1e-9)

def test_toy_relu_relaxation(toy):
    net, _, obj = toy
    dp = DeepPoly(net, InputRelaxation.from_json(obj))
    rr = dp.result.relus[2]
    assert rr.slope[0] == pytest.approx(0.5) and rr.intercept[0] == pytest.approx(0.25)
    assert rr.lam[0] == 0.0
    # stable active neuron passes through exactly
    assert rr.lam[1] == 1.0 and rr.slope[1] == 1.0 and rr.intercept[1] == 0.0

def test_toy_backsubstitution(toy):
    net, shifted, obj = toy
    assert forward(net, [0.0, 0.5]) == pytest.approx([0.0, 0.625])
    m = DeepPoly(net, InputRelaxation.from_json(obj, INF)).margins(1)
    assert m[0] == pytest.approx(0.125, abs=1e-9)
    m = DeepPoly(shifted, InputRelaxation.from_json(obj, INF)).margins(1)
    assert m[0] == pytest.approx(-0.125, abs=1e-9)
    m = DeepPoly(shifted, InputRelaxation.from_json(obj, 0.25)).margins(1)
    assert m[0] == pytest.approx(0.0625, abs=1e-9)

def test_toy_milp(toy):
    net, shifted, obj = toy
    # by hand: min relu(2a - b + 1/4) + (b - a + 1/8) over the box is 3/8 at (0, 1/4)
    margins, status, _ = milp_certify(net, InputRelaxation.from_json(obj, INF), 1)
    assert status == "certified"
    assert margins[0] == pytest.approx(0.375, abs=1e-9)
    for gamma in (INF, 0.25):
        relax = InputRelaxation.from_json(obj, gamma)
        dp = DeepPoly(shifted, relax)
        margins, _, _ = milp_certify(shifted, relax, 1, analysis=dp)
        ref, _ = phase_enumeration_margin(shifted, relax, 1, 0, dp.result.lower, dp.result.upper)
        assert margins[0] == pytest.approx(ref, abs=1e-9)
        assert margins[0] >= dp.margins(1)[0] - 1e-12

def test_toy_certify_relaxation(toy):
    net, shifted, obj = toy
    rep = certify_relaxation(shifted, InputRelaxation.from_json(obj), AttackBudget(INF, 0.5, 0.25), "deeppoly")
    assert rep.method == "deeppoly+flow" and rep.status == "certified"
    rep = certify_relaxation(shifted, InputRelaxation.from_json(obj), AttackBudget(INF, 0.5, INF), "deeppoly")
    assert rep.status == "unknown"

# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def naive_conv(x, K, b, stride, pad):
    h, w, cin = x.shape
    xp = np.pad(x, ((pad[0], pad[0]), (pad[1], pad[1]), (0, 0)))
    cout, _, kh, kw = K.shape
    oh = (h + 2 * pad[0] - kh) // stride[0] + 1
    ow = (w + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((oh, ow, cout))
    for o in range(cout):
        for r in range(oh):
            for s in range(ow):
                patch = xp[r * stride[0]:r * stride[0] + kh, s * stride[1]:s * stride[1] + kw, :]
                out[r, s, o] = b[o] + sum(K[o, ci] .ravel() @ patch[:, :, ci].ravel() for ci in range(cin))
    return out

@pytest.mark.parametrize("stride,pad", [((1, 1), (0, 0)), ((2, 2), (1, 1)), ((1, 2), (0, 1))])
def test_conv_lowering_matches_naive(stride, pad):
    rng = np.random.default_rng(0)
    K = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    x = rng.normal(size=(7, 7, 2))
    mat, bias, shape = lower_conv2d(K, b, (7, 7, 2), stride, pad)
    assert sp.issparse(mat)
    ref = naive_conv(x, K, b, stride, pad)
    assert shape == ref.shape
    np.testing.assert_allclose(mat @ x.ravel() + bias, ref.ravel(), atol=1e-12)

def test_dense_forward_matches_naive():
    for seed in range(5):
        net = random_dense_net(seed)
        spec = net.to_json()["layers"]
        x = np.random.default_rng(seed).uniform(size=36)
        np.testing.assert_allclose(forward(net, x), naive_forward(spec, x), atol=1e-12)

def conv_net():
    rng = np.random.default_rng(1)
    return Network([
        {"kind": "conv2d", "kernels": rng.normal(size=(2, 1, 3, 3)).tolist(), "bias": [0.1, -0.1], "stride": 1, "padding": 1},
        {"kind": "relu"},
        {"kind": "conv2d", "kernels": (0.5 * rng.normal(size=(2, 2, 3, 3))).tolist(), "bias": [0.0, 0.05], "padding": 1},
        {"kind": "residual_add", "from": 1},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "dense", "weights": (0.3 * rng.normal(size=(3, 72))).tolist(), "bias": [0.0, 0.1, -0.1]},
    ], input_shape=(6, 6, 1))

def test_residual_and_json_round_trip(tmp_path):
    net = conv_net()
    x = np.random.default_rng(2).uniform(size=36)
    vals = forward_all(net, x)
    np.testing.assert_allclose(vals[4], vals[3] + vals[2])
    net.save(tmp_path / "n.json")
    back = load_network_json(tmp_path / "n.json")
    np.testing.assert_array_equal(forward(back, x), forward(net, x))
    assert back.to_json() == net.to_json()

@pytest.mark.parametrize("obj,msg", [
    ({"layers": []}, "no layers"),
    ({"layers": [{"kind": "relu"}]}, "input_shape"),
    ({"layers": [{"kind": "dense", "weights": [[1, 2]], "bias": [0]}, {"kind": "dense", "weights": [[1, 2]], "bias": [0]}]}, "layer 1"),
    ({"layers": [{"kind": "dense", "weights": [[1]], "bias": [0]}, {"kind": "pool"}]}, "unknown kind"),
    ({"layers": [{"kind": "dense", "weights": [[1]], "bias": [0]}, {"kind": "residual_add", "from": 4}]}, "residual"),
    ({"input_shape": [4], "layers": [{"kind": "conv2d", "kernels": [[[[1]]]]}]}, "HWC"),
])
def test_network_format_errors(obj, msg):
    with pytest.raises(FormatError, match=msg):
        Network.from_json(obj)

def test_bad_json_file(tmp_path):
    (tmp_path / "x.json").write_text("[")
    with pytest.raises(FormatError):
        load_network_json(tmp_path / "x.json")
    with pytest.raises(ContractError):
        forward(random_dense_net(0), np.zeros(5))

# ---------------------------------------------------------------------------
# soundness by sampling
# ---------------------------------------------------------------------------

def sample_box(rng, relax, n):
    return rng.uniform(relax.lower, relax.upper, size=(n, relax.size))

@pytest.mark.parametrize("seed", range(4))
def test_interval_and_deeppoly_bounds_contain_samples(seed):
    net = conv_net() if seed % 2 else random_dense_net(seed)
    img = random_image(seed)
    budget = AttackBudget(2, 0.6)
    relax = image_relaxation(img, budget, bounds_map(img, budget))
    ilo, ihi = interval_propagate(net, relax.lower, relax.upper, all_nodes=True)
    dp = DeepPoly(net, relax)
    rng = np.random.default_rng(seed)
    for x in sample_box(rng, relax, 300):
        vals = forward_all(net, x)
        for t, v in enumerate(vals):
            assert np.all(v >= ilo[t] - 1e-9) and np.all(v <= ihi[t] + 1e-9)
            assert np.all(v >= dp.result.lower[t] - 1e-9) and np.all(v <= dp.result.upper[t] + 1e-9)
            assert np.all(dp.result.lower[t] >= ilo[t] - 1e-12) and np.all(dp.result.upper[t] <= ihi[t] + 1e-12)
    label = predict(net, img)
    dm = dp.margins(label)
    for x in sample_box(rng, relax, 300):
        out = forward(net, x)
        for t, m in dm.items():
            assert out[label] - out[t] >= m - 1e-9

def test_relu_relaxation_cases():
    rr = relu_relaxation(np.array([-2.0, 1.0, -1.0, -1.0]), np.array([-1.0, 2.0, 3.0, 0.5]))
    assert list(rr.lam) == [0.0, 1.0, 1.0, 0.0]
    assert rr.slope[0] == 0.0 and rr.intercept[0] == 0.0
    assert rr.slope[2] == pytest.approx(0.75) and rr.intercept[2] == pytest.approx(0.75)
    # the tie u = -l picks the zero lower bound
    assert relu_relaxation(np.array([-1.0]), np.array([1.0])).lam[0] == 0.0

# ---------------------------------------------------------------------------
# MILP exactness against phase enumeration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed,gamma", [(0, INF), (2, INF), (4, 0.25), (8, 0.05)])
def test_milp_matches_phase_enumeration(seed, gamma):
    net = random_dense_net(seed)
    img = random_image(seed)
    budget = AttackBudget(INF, 0.3, gamma)
    planes = planes_map(img, 0.3) if gamma != INF else None
    relax = image_relaxation(img, budget, bounds_map(img, budget), planes)
    label = predict(net, img)
    dp = DeepPoly(net, relax)
    margins, _, _ = milp_certify(net, relax, label, analysis=dp)
    enc = encode_network(net, relax, dp.result.lower, dp.result.upper)
    assert enc.unstable <= 10
    for t, m in margins.items():
        ref, _ = phase_enumeration_margin(net, relax, label, t, dp.result.lower, dp.result.upper)
        assert m == pytest.approx(ref, abs=1e-7)

def test_gamma_zero_flow_lp_is_accepted():
    img = random_image(3)
    budget = AttackBudget(INF, 0.3, 0.0)
    relax = image_relaxation(img, budget, bounds_map(img, budget), planes_map(img, 0.3))
    net = random_dense_net(3)
    m0, _, _ = deeppoly_certify(net, relax, predict(net, img))
    relax_inf = image_relaxation(img, AttackBudget(INF, 0.3), bounds_map(img, budget))
    m1, _, _ = deeppoly_certify(net, relax_inf, predict(net, img))
    assert all(m0[t] >= m1[t] - 1e-9 for t in m0)

def test_flow_without_planes_is_rejected():
    img = random_image(0)
    budget = AttackBudget(INF, 0.3, 0.1)
    relax = image_relaxation(img, budget, bounds_map(img, budget))
    with pytest.raises(ContractError):
        deeppoly_certify(random_dense_net(0), relax, 0)

# ---------------------------------------------------------------------------
# reports and orchestration
# ---------------------------------------------------------------------------

def test_resolve_method():
    assert resolve_method("deeppoly", AttackBudget(2, 1, 0.1)) == "deeppoly+flow"
    assert resolve_method("milp", AttackBudget(2, 1)) == "milp"
    assert resolve_method("interval", AttackBudget(2, 1, 0.1)) == "interval"
    with pytest.raises(ContractError):
        resolve_method("crown", AttackBudget(2, 1))

def test_zero_delta_certifies_correct_prediction():
    net = random_dense_net(1)
    img = random_image(1)
    for method in ("interval", "deeppoly", "milp"):
        rep = certify_image(net, img, AttackBudget(INF, 0.0), method)
        assert rep.status == "certified"
        out = forward(net, img)
        for t, m in rep.margins.items():
            assert m == pytest.approx(out[rep.label] - out[t], abs=1e-9)

def test_misclassified_image_is_reported():
    net = random_dense_net(1)
    img = random_image(1)
    wrong = (predict(net, img) + 1) % 3
    rep = certify_image(net, img, AttackBudget(INF, 0.3), "deeppoly", label=wrong)
    assert rep.status == "unknown" and "misclassified" in rep.note

def test_report_json_round_trip():
    net = random_dense_net(0)
    img = random_image(0)
    rep = certify_image(net, img, AttackBudget(INF, 0.3), "milp", timeout=30, image_id=7)
    assert rep.status == "falsified" and rep.witness is not None
    back = CertificationReport.from_json(json.loads(rep.to_line()))
    assert back.to_json() == rep.to_json()
    with pytest.raises(FormatError):
        CertificationReport.from_json({"status": "maybe"})

def test_milp_witness_is_admissible_and_flips():
    from vfcert.geometry import field_violation
    from vfcert.imaging import deform

    net = random_dense_net(2)
    img = random_image(2)
    budget = AttackBudget(INF, 0.3)
    rep = certify_image(net, img, budget, "milp", timeout=30)
    assert rep.status == "falsified"
    assert field_violation(rep.witness, budget) == 0.0
    out = forward(net, deform(img, rep.witness))
    assert out[rep.label] - out[rep.adversarial_label] < 0
