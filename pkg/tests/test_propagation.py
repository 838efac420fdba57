import numpy as np
import pytest

from flowvip import flowcomp, propagation
from flowvip import tensor as T
from flowvip.tensor import Tensor

C, K, G = 8, 3, 2


def _cell(rng):
    return propagation.PropagationCell(rng, C, K, G)


def test_single_frame_is_identity(rng):
    cell = _cell(rng)
    feats = Tensor(rng.standard_normal((1, 6, 6, C)))
    flows = Tensor(np.zeros((0, 6, 6, 2)))
    out = propagation.propagate_backward(feats, flows, cell)
    assert np.array_equal(out.data, feats.data)
    out = propagation.propagate_forward(feats, flows, cell)
    assert np.array_equal(out.data, feats.data)


def test_shape_contract(rng):
    cell = _cell(rng)
    feats = Tensor(rng.standard_normal((5, 6, 7, C)))
    flows = Tensor(rng.uniform(-0.5, 0.5, (4, 6, 7, 2)))
    out = propagation.propagate_backward(feats, flows, cell)
    assert out.shape == (5, 6, 7, C)


def test_flow_count_mismatch(rng):
    cell = _cell(rng)
    feats = Tensor(rng.standard_normal((4, 6, 6, C)))
    flows = Tensor(np.zeros((2, 6, 6, 2)))
    with pytest.raises(ValueError, match="flow maps"):
        propagation.propagate_backward(feats, flows, cell)


def _make_identity_cell(rng):
    """Constructed weights: alignment and merge become exact identity maps."""
    cell = _cell(rng)
    # offset net already zero-inits to zero offsets / logit 0; push the mask
    # logits to +40 so every tap weight saturates to 1
    taps = K * K * G
    bias = np.zeros(3 * taps)
    bias[2 * taps :] = 40.0
    cell.offset_conv3.weight.data[:] = 0.0
    cell.offset_conv3.bias.data = bias
    # deformable kernel: center tap, per-group identity
    wd = np.zeros((G, K, K, C // G, C // G))
    for g in range(G):
        wd[g, K // 2, K // 2] = np.eye(C // G)
    cell.deform_weight.data = wd
    cell.deform_bias.data[:] = 0.0
    # merge: first conv picks the first C channels (the current feature) at the
    # center tap; second conv is another center-tap identity. Positive inputs
    # keep the interleaved LeakyReLU transparent.
    w1 = np.zeros((3, 3, 2 * C, C))
    w1[1, 1, :C] = np.eye(C)
    cell.merge_conv1.weight.data = w1
    cell.merge_conv1.bias.data[:] = 0.0
    w2 = np.zeros((3, 3, C, C))
    w2[1, 1] = np.eye(C)
    cell.merge_conv2.weight.data = w2
    cell.merge_conv2.bias.data[:] = 0.0
    return cell


def test_identity_weight_construction_static_video(rng):
    cell = _make_identity_cell(rng)
    frame = rng.uniform(0.1, 1.0, (6, 6, C))  # positive: LeakyReLU is transparent
    feats = Tensor(np.stack([frame] * 4))
    flows = Tensor(np.zeros((3, 6, 6, 2)))
    out = propagation.propagate_backward(feats, flows, cell)
    assert np.abs(out.data - feats.data).max() < 1e-5


def test_mirror_symmetry_between_directions(rng):
    cell = _cell(rng)
    feats_np = rng.standard_normal((4, 6, 6, C))
    flows_np = rng.uniform(-0.8, 0.8, (3, 6, 6, 2))
    fwd = propagation.propagate_forward(Tensor(feats_np), Tensor(flows_np), cell)
    bwd_rev = propagation.propagate_backward(
        Tensor(feats_np[::-1].copy()), Tensor(flows_np[::-1].copy()), cell
    )
    assert np.allclose(fwd.data, bwd_rev.data[::-1], atol=1e-12)


def test_backward_causality(rng):
    """Backward output at frame t only sees features with index >= t."""
    cell = _cell(rng)
    feats_np = rng.standard_normal((4, 6, 6, C))
    flows = Tensor(rng.uniform(-0.5, 0.5, (3, 6, 6, 2)))
    base = propagation.propagate_backward(Tensor(feats_np), flows, cell)
    corrupted = feats_np.copy()
    corrupted[:2] = 0.0  # frames strictly before t = 2
    out = propagation.propagate_backward(Tensor(corrupted), flows, cell)
    assert np.array_equal(out.data[2:], base.data[2:])
    assert not np.allclose(out.data[1], base.data[1])


def test_mask_values_strictly_inside_unit_interval(rng):
    cell = _cell(rng)
    # non-trivial offset net so logits are not all zero
    cell.offset_conv3.weight.data = rng.standard_normal(cell.offset_conv3.weight.shape) * 0.5
    feat = Tensor(rng.standard_normal((6, 6, C)))
    warped = Tensor(rng.standard_normal((6, 6, C)))
    flow = Tensor(rng.uniform(-1, 1, (6, 6, 2)))
    params = cell.deform_params(feat, warped, flow)
    masks = 1.0 / (1.0 + np.exp(-params.mask_logits.data))
    assert np.all(masks > 0.0) and np.all(masks < 1.0)


def test_fusion_constructed_weights(rng):
    prop = propagation.BidirectionalPropagation(rng, C, K, G)
    a = Tensor(rng.standard_normal((1, 5, 5, C)))
    b = Tensor(rng.standard_normal((1, 5, 5, C)))
    w = np.zeros((1, 1, 2 * C, C))
    w[0, 0, :C] = np.eye(C) * 0.5
    w[0, 0, C:] = np.eye(C) * 0.5
    prop.fusion.weight.data = w
    prop.fusion.bias.data[:] = 0.0
    out = prop.fuse(a, b)
    assert np.abs(out.data - 0.5 * (a.data + b.data)).max() < 1e-12

    prop.fusion.weight.data[:] = 0.0
    prop.fusion.bias.data[:] = 0.7
    assert np.allclose(prop.fuse(a, b).data, 0.7)


def test_fusion_matches_scalar_oracle(rng):
    prop = propagation.BidirectionalPropagation(rng, C, K, G)
    a = rng.standard_normal((1, 4, 4, C))
    b = rng.standard_normal((1, 4, 4, C))
    out = prop.fuse(Tensor(a), Tensor(b)).data
    w = prop.fusion.weight.data[0, 0]  # (2C, C)
    ref = np.concatenate([a, b], axis=-1) @ w + prop.fusion.bias.data
    assert np.abs(out - ref).max() < 1e-6

    with pytest.raises(ValueError, match="mismatch"):
        prop.fuse(Tensor(np.zeros((1, 4, 4, C))), Tensor(np.zeros((1, 5, 4, C))))


def test_two_frame_chain_gradcheck(rng):
    prop = propagation.BidirectionalPropagation(rng, 4, 3, 2)
    feats = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    flow_vals = rng.uniform(0.25, 0.45, (1, 4, 4, 2))
    proj = Tensor(rng.standard_normal((2, 4, 4, 4)))

    def f(feats):
        flows = flowcomp.BidirectionalFlows(Tensor(flow_vals), Tensor(-flow_vals))
        return (prop(feats, flows) * proj).sum()

    report = T.gradcheck(f, [feats], max_samples=24)
    assert report.passed, str(report)

    params = [p for _, p in prop.named_parameters()]

    def g(*params):
        flows = flowcomp.BidirectionalFlows(Tensor(flow_vals), Tensor(-flow_vals))
        return (prop(feats, flows) * proj).sum()

    report = T.gradcheck(g, params, max_samples=4)
    assert report.passed, str(report)
