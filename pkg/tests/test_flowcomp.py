import numpy as np
import pytest

from flowvip import flowcomp, nn
from flowvip import tensor as T
from flowvip.tensor import Tensor


def _smooth_texture(rng, h, w):
    """Band-limited random texture: low-res noise, bilinearly upsampled twice."""
    coarse = rng.random((h // 4, w // 4, 3))
    x = Tensor(coarse[None])
    x = nn.upsample2x_bilinear(x)
    x = nn.upsample2x_bilinear(x)
    return x.data[0]


def test_downsample_constant_and_checkerboard():
    const = Tensor(np.full((2, 8, 8, 3), 0.37))
    out = flowcomp.downsample_quarter(const)
    assert out.shape == (2, 2, 2, 3)
    assert np.allclose(out.data, 0.37)

    board = np.indices((4, 4)).sum(axis=0) % 2
    frames = Tensor(board.astype(float).reshape(1, 4, 4, 1))
    out = flowcomp.downsample_quarter(frames)
    assert out.shape == (1, 1, 1, 1)
    assert np.allclose(out.data, 0.5)


def test_downsample_shape_contract_and_error(rng):
    out = flowcomp.downsample_quarter(Tensor(rng.random((1, 64, 64, 3))))
    assert out.shape == (1, 16, 16, 3)
    with pytest.raises(ValueError, match="divisible"):
        flowcomp.downsample_quarter(Tensor(np.zeros((1, 66, 64, 3))))


def test_zero_init_net_predicts_exactly_zero(rng):
    net = flowcomp.FlowPyramidNet(rng)
    frames = Tensor(rng.random((3, 16, 16, 3)))
    flows = flowcomp.estimate_bidirectional(frames, net)
    assert flows.count == 2
    assert np.array_equal(flows.forward.data, np.zeros((2, 16, 16, 2)))
    assert np.array_equal(flows.backward.data, np.zeros((2, 16, 16, 2)))


def test_flow_counts(rng):
    net = flowcomp.FlowPyramidNet(rng)
    frames = Tensor(rng.random((5, 16, 16, 3)))
    flows = flowcomp.estimate_bidirectional(frames, net)
    assert flows.forward.shape[0] == 4 and flows.backward.shape[0] == 4


def test_degenerate_single_frame(rng):
    net = flowcomp.FlowPyramidNet(rng)
    flows = flowcomp.estimate_bidirectional(Tensor(rng.random((1, 16, 16, 3))), net)
    assert flows.count == 0
    assert flowcomp.flow_loss(flows, flows).item() == 0.0


def test_single_feed_forward_pass(rng):
    net = flowcomp.FlowPyramidNet(rng)
    # give the net non-zero output so the count isn't trivial
    frames = Tensor(rng.random((4, 16, 16, 3)))
    net.forward_calls = 0
    flowcomp.estimate_bidirectional(frames, net)
    assert net.forward_calls == 1


def test_argument_swap_symmetry(rng):
    net = flowcomp.FlowPyramidNet(rng)
    for stack in net.stacks:
        stack.convs[-1].weight.data = rng.standard_normal(stack.convs[-1].weight.shape) * 0.01
    frames_np = rng.random((4, 16, 16, 3))
    fwd = flowcomp.estimate_bidirectional(Tensor(frames_np), net)
    rev = flowcomp.estimate_bidirectional(Tensor(frames_np[::-1].copy()), net)
    # pair (t, t+1) of the reversed clip is pair (T-1-t, T-2-t) of the original
    assert np.array_equal(rev.forward.data, fwd.backward.data[::-1])
    assert np.array_equal(rev.backward.data, fwd.forward.data[::-1])


def test_flow_loss_cases(rng):
    h = w = 8
    f = Tensor(rng.standard_normal((3, h, w, 2)))
    b = Tensor(rng.standard_normal((3, h, w, 2)))
    flows = flowcomp.BidirectionalFlows(f, b)
    assert flowcomp.flow_loss(flows, flows).item() == 0.0

    shifted = flowcomp.BidirectionalFlows(f + 1.0, b + 1.0)
    assert abs(flowcomp.flow_loss(shifted, flows).item() - 2.0) < 1e-12

    other = flowcomp.BidirectionalFlows(
        Tensor(rng.standard_normal((3, h, w, 2))), Tensor(rng.standard_normal((3, h, w, 2)))
    )
    loss = flowcomp.flow_loss(other, flows).item()
    ref = np.abs(other.forward.data - f.data).mean() + np.abs(other.backward.data - b.data).mean()
    assert abs(loss - ref) < 1e-8
    assert loss >= 0.0

    bad = flowcomp.BidirectionalFlows(Tensor(np.zeros((2, h, w, 2))), Tensor(np.zeros((2, h, w, 2))))
    with pytest.raises(ValueError, match="mismatch"):
        flowcomp.flow_loss(bad, flows)


def test_trains_to_recover_known_translation(rng):
    h, w, shift = 16, 16, 2
    tex = _smooth_texture(rng, h, w + 2 * shift)
    f1 = tex[:, shift : shift + w]
    f2 = tex[:, 0:w]
    # brightness constancy sanity: f1(p) == f2(p + (shift, 0))
    gt = np.zeros((1, h, w, 2))
    gt[..., 0] = shift
    frames = Tensor(np.stack([f1, f2]))
    gt_flows = flowcomp.BidirectionalFlows(Tensor(gt), Tensor(-gt))

    net = flowcomp.FlowPyramidNet(rng)
    opt = nn.Adam(list(net.named_parameters()), lr=2e-3, beta1=0.0, beta2=0.99)
    pred = flowcomp.estimate_bidirectional(frames, net)
    initial = flowcomp.endpoint_error(pred, gt_flows)
    assert abs(initial - shift) < 1e-6  # zero prediction in both directions

    for _ in range(320):
        opt.zero_grad()
        pred = flowcomp.estimate_bidirectional(frames, net)
        loss = flowcomp.flow_loss(pred, gt_flows)
        loss.backward()
        opt.step()
    with T.no_grad():
        pred = flowcomp.estimate_bidirectional(frames, net)
    final = flowcomp.endpoint_error(pred, gt_flows)
    assert final < 1.0, f"endpoint error {final:.3f} after training"
