import numpy as np
import pytest

from flowvip import geom
from flowvip import tensor as T
from flowvip.tensor import Tensor

from oracles import conv2d_loop, mod_deform_conv_loop, warp_loop


def _rand_params(rng, h, w, k, g, offset_scale=0.0, logit=0.0):
    offsets = Tensor(rng.uniform(-1, 1, (h, w, k * k * g * 2)) * offset_scale, requires_grad=True)
    logits = Tensor(np.full((h, w, k * k * g), float(logit)), requires_grad=True)
    return geom.DeformParams(offsets, logits)


def test_zero_flow_is_identity_bit_for_bit(rng):
    src = Tensor(rng.standard_normal((5, 6, 3)))
    flow = Tensor(np.zeros((5, 6, 2)))
    out = geom.bilinear_warp(src, flow)
    assert np.array_equal(out.data, src.data)


def test_integer_shift_replicates_edge():
    src = Tensor(np.arange(12.0).reshape(3, 4, 1))
    flow = np.zeros((3, 4, 2))
    flow[..., 0] = 1.0  # dx = 1
    out = geom.bilinear_warp(src, Tensor(flow))
    expected = src.data[:, [1, 2, 3, 3]]
    assert np.array_equal(out.data, expected)


def test_fractional_shift_hand_case():
    src = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
    flow = np.zeros((2, 2, 2))
    flow[..., 0] = 0.5
    out = geom.bilinear_warp(src, Tensor(flow))
    assert abs(out.data[0, 0, 0] - 0.5) < 1e-10
    assert abs(out.data[1, 0, 0] - 2.5) < 1e-10


def test_warp_matches_scalar_loop(rng):
    src = rng.standard_normal((7, 5, 4))
    flow = rng.uniform(-2, 2, (7, 5, 2))
    out = geom.bilinear_warp(Tensor(src), Tensor(flow))
    assert np.abs(out.data - warp_loop(src, flow)).max() < 1e-12


def test_warp_linear_in_src(rng):
    a = rng.standard_normal((6, 6, 2))
    b = rng.standard_normal((6, 6, 2))
    flow = Tensor(rng.uniform(-1.5, 1.5, (6, 6, 2)))
    lhs = geom.bilinear_warp(Tensor(2.0 * a + 3.0 * b), flow).data
    rhs = 2.0 * geom.bilinear_warp(Tensor(a), flow).data + 3.0 * geom.bilinear_warp(Tensor(b), flow).data
    assert np.abs(lhs - rhs).max() < 1e-10


def test_warp_batched_leading_dims(rng):
    src = rng.standard_normal((3, 5, 5, 2))
    flow = rng.uniform(-1, 1, (3, 5, 5, 2))
    out = geom.bilinear_warp(Tensor(src), Tensor(flow))
    for i in range(3):
        assert np.abs(out.data[i] - warp_loop(src[i], flow[i])).max() < 1e-12


def test_warp_shape_mismatch():
    with pytest.raises(T.GraphError, match="incompatible"):
        geom.bilinear_warp(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((5, 4, 2))))


def test_warp_gradcheck_away_from_integer_coords(rng):
    src = Tensor(rng.standard_normal((4, 4, 2)), requires_grad=True)
    # fractional parts kept well away from 0/1 so the interpolation is smooth
    flow_vals = rng.uniform(0.3, 0.7, (4, 4, 2)) * np.where(rng.random((4, 4, 2)) < 0.5, -1, 1)
    flow = Tensor(flow_vals, requires_grad=True)
    proj = Tensor(rng.standard_normal((4, 4, 2)))

    def f(src, flow):
        return (geom.bilinear_warp(src, flow) * proj).sum()

    report = T.gradcheck(f, [src, flow], max_samples=None)
    assert report.passed, str(report)


def test_dcn_saturated_mask_equals_direct_conv(rng):
    h, w, cin, cout, k, g = 6, 5, 4, 4, 3, 2
    x = rng.standard_normal((h, w, cin))
    weight = rng.standard_normal((g, k, k, cin // g, cout // g))
    bias = rng.standard_normal(cout)
    params = _rand_params(rng, h, w, k, g, offset_scale=0.0, logit=20.0)
    out = geom.mod_deform_conv(Tensor(x), Tensor(weight), Tensor(bias), None, params, g)

    # equivalent dense block-diagonal kernel on an edge-replicated canvas
    # (the deformable kernel clamps out-of-bounds samples to the edge)
    cin_g, cout_g = cin // g, cout // g
    wfull = np.zeros((k, k, cin, cout))
    for gi in range(g):
        wfull[:, :, gi * cin_g : (gi + 1) * cin_g, gi * cout_g : (gi + 1) * cout_g] = weight[gi]
    xe = np.pad(x, ((k // 2, k // 2), (k // 2, k // 2), (0, 0)), mode="edge")
    ref = conv2d_loop(xe, wfull, bias, stride=1, pad=0)
    assert np.abs(out.data - ref).max() < 1e-5


def test_dcn_dead_mask_leaves_bias(rng):
    h, w, cin, k, g = 4, 4, 4, 3, 2
    x = rng.standard_normal((h, w, cin))
    weight = rng.standard_normal((g, k, k, 2, 2))
    bias = rng.standard_normal(4)
    params = _rand_params(rng, h, w, k, g, logit=-40.0)
    out = geom.mod_deform_conv(Tensor(x), Tensor(weight), Tensor(bias), None, params, g)
    assert np.abs(out.data - bias).max() < 1e-8


def test_dcn_matches_gather_oracle(rng):
    h, w, cin, k, g = 5, 5, 2, 3, 1
    x = rng.standard_normal((h, w, cin))
    weight = rng.standard_normal((g, k, k, 2, 2))
    bias = rng.standard_normal(2)
    offsets = rng.uniform(-1, 1, (h, w, k * k * g * 2))
    logits = rng.standard_normal((h, w, k * k * g))
    flow = rng.uniform(-1, 1, (h, w, 2))
    params = geom.DeformParams(Tensor(offsets), Tensor(logits))
    out = geom.mod_deform_conv(Tensor(x), Tensor(weight), Tensor(bias), Tensor(flow), params, g)
    ref = mod_deform_conv_loop(x, weight, bias, flow, offsets, logits, g)
    assert np.abs(out.data - ref).max() < 1e-6


def test_dcn_matches_gather_oracle_grouped(rng):
    h, w, cin, k, g = 4, 6, 6, 3, 3
    x = rng.standard_normal((h, w, cin))
    weight = rng.standard_normal((g, k, k, cin // g, 2))
    bias = rng.standard_normal(g * 2)
    offsets = rng.uniform(-1.2, 1.2, (h, w, k * k * g * 2))
    logits = rng.standard_normal((h, w, k * k * g))
    params = geom.DeformParams(Tensor(offsets), Tensor(logits))
    out = geom.mod_deform_conv(Tensor(x), Tensor(weight), Tensor(bias), None, params, g)
    ref = mod_deform_conv_loop(x, weight, bias, None, offsets, logits, g)
    assert np.abs(out.data - ref).max() < 1e-6


def test_dcn_group_relabeling_invariance(rng):
    h, w, cin, k, g = 4, 4, 6, 3, 3
    x = rng.standard_normal((h, w, cin))
    weight = rng.standard_normal((g, k, k, 2, 2))
    bias = rng.standard_normal(6)
    offsets = rng.uniform(-1, 1, (h, w, g, k * k, 2))
    logits = rng.standard_normal((h, w, g, k * k))
    perm = np.array([2, 0, 1])

    def run(w_, b_, off, lg, chan_view):
        params = geom.DeformParams(
            Tensor(off.reshape(h, w, -1)), Tensor(lg.reshape(h, w, -1))
        )
        out = geom.mod_deform_conv(Tensor(chan_view), Tensor(w_), Tensor(b_), None, params, g)
        return out.data

    base = run(weight, bias, offsets, logits, x)
    xg = x.reshape(h, w, g, 2)[:, :, perm].reshape(h, w, cin)
    bg = bias.reshape(g, 2)[perm].reshape(-1)
    out_perm = run(weight[perm], bg, offsets[:, :, perm], logits[:, :, perm], xg)
    assert np.allclose(out_perm.reshape(h, w, g, 2)[:, :, np.argsort(perm)].reshape(h, w, cin), base)


def test_dcn_gradcheck_all_inputs(rng):
    h, w, cin, k, g = 4, 4, 4, 3, 2
    x = Tensor(rng.standard_normal((h, w, cin)), requires_grad=True)
    weight = Tensor(rng.standard_normal((g, k, k, 2, 2)) * 0.5, requires_grad=True)
    bias = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    # offsets with fractional parts away from integers (bilinear kink)
    off = rng.uniform(0.25, 0.45, (h, w, k * k * g * 2)) * np.where(
        rng.random((h, w, k * k * g * 2)) < 0.5, -1, 1
    )
    offsets = Tensor(off, requires_grad=True)
    logits = Tensor(rng.uniform(-1, 1, (h, w, k * k * g)), requires_grad=True)
    flow = Tensor(rng.uniform(0.3, 0.4, (h, w, 2)), requires_grad=True)
    proj = Tensor(rng.standard_normal((h, w, 4)))

    def f(x, weight, bias, offsets, logits, flow):
        out = geom.mod_deform_conv(x, weight, bias, flow, geom.DeformParams(offsets, logits), g)
        return (out * proj).sum()

    report = T.gradcheck(f, [x, weight, bias, offsets, logits, flow], max_samples=24)
    assert report.passed, str(report)


def test_dcn_broken_backward_hook_fails_gradcheck(rng):
    h, w, cin, k, g = 3, 3, 2, 3, 1
    weight = Tensor(rng.standard_normal((g, k, k, 2, 2)), requires_grad=True)
    x = Tensor(rng.standard_normal((h, w, cin)))
    bias = Tensor(np.zeros(2), requires_grad=True)
    params = _rand_params(rng, h, w, k, g)

    def f(weight, bias):
        return geom.mod_deform_conv(x, weight, bias, None, params, g).sum()

    geom.set_broken_dcn_backward(True)
    try:
        report = T.gradcheck(f, [weight, bias], max_samples=12)
    finally:
        geom.set_broken_dcn_backward(False)
    assert not report.passed


def test_dcn_validation_errors(rng):
    x = Tensor(np.zeros((4, 4, 5)))
    weight = Tensor(np.zeros((2, 3, 3, 2, 2)))
    params = _rand_params(rng, 4, 4, 3, 2)
    with pytest.raises(ValueError, match="divisible"):
        geom.mod_deform_conv(x, weight, Tensor(np.zeros(4)), None, params, 2)
    weight_even = Tensor(np.zeros((2, 2, 2, 2, 2)))
    x_ok = Tensor(np.zeros((4, 4, 4)))
    params_even = geom.DeformParams(Tensor(np.zeros((4, 4, 16))), Tensor(np.zeros((4, 4, 8))))
    with pytest.raises(ValueError, match="odd"):
        geom.mod_deform_conv(x_ok, weight_even, Tensor(np.zeros(4)), None, params_even, 2)


def test_flow_sanity():
    geom.flow_sanity(Tensor(np.ones((3, 3, 2))), max_flow=2.0)
    with pytest.raises(Exception, match="exceeds"):
        geom.flow_sanity(Tensor(np.full((3, 3, 2), 9.0)), max_flow=2.0)
