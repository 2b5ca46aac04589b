import numpy as np
import pytest

from hollowconv.blocks import conv_lstm_cell, generated_kernel_conv, same_conv2d, temporal_conv
from hollowconv.configs import CONFIGS, TABLE_COLUMNS, ConvLSTMSpec, TemporalConvSpec, get_config
from hollowconv.gradcheck import check_gradients
from hollowconv.losses import combined_loss
from hollowconv.networks import (
    BiConvLSTM, TinyUNet, bilstm_block, build_network, forward_spatiotemporal, tiny_unet_forward,
)
from hollowconv.ops import conv2d
from hollowconv.tensor import Tensor, no_grad
from hollowconv.train import hollow_masks


def make(name, width=0.125, seed=0, **kw):
    cfg = get_config(name, width=width, **kw)
    return build_network(cfg, hollow_masks(cfg, None), seed=seed)


def image(n=2, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, 1, size, size)).astype(np.float32))


# recorded at first build: width 0.25, annulus masks, seed 0
PARAMETER_COUNTS = {
    "UNet": 524555, "UNetBaseline": 524555, "UNetDilated": 524555, "UNetProgDilated": 524555,
    "A1-1.1": 536795, "A1-1.1-L1": 536795, "A1-1.1-L2": 536795, "A1-1.1-L3": 536803,
    "A2-1.1": 525731, "A2-2.1": 556195, "A2-2.2": 632995, "A2-2.3": 556195,
    "A2-3.1": 742563, "A2-3.2": 3891363, "A2-3.3": 742563,
}


def test_parameter_counts_are_stable():
    assert set(PARAMETER_COUNTS) == set(CONFIGS)
    for name, count in PARAMETER_COUNTS.items():
        assert make(name, width=0.25).count_parameters() == count, name


@pytest.mark.parametrize("name", TABLE_COLUMNS)
def test_forward_shapes_and_range(name):
    net = make(name)
    with no_grad():
        y = net(image())
    assert y.shape == (2, 3, 32, 32)
    assert np.all((y.data > 0) & (y.data < 1))


def test_first_layer_uses_table_parameters():
    net = make("A2-2.1", width=0.25)
    conv = net.encoder[1][0].conv
    assert conv.weight.shape == (32, 8, 10, 10)
    assert (conv.stride, conv.dilation) == (2, 2)
    assert net.encoder[0][0].conv.weight.shape == (8, 1, 10, 10)


def test_missing_mask_rejected():
    with pytest.raises(ValueError, match="needs a 10x10 mask"):
        build_network(get_config("A2-2.1", width=0.125), {})


def test_hollow_layers_start_on_their_bands():
    net = make("A2-3.1")
    params = dict(net.named_parameters())
    assert len(net.masks) == 3
    for name, mask in net.masks.items():
        assert np.all(params[name].data[~mask] == 0)
    assert sorted(net.parameter_masks()) == sorted(
        i for i, (n, _) in enumerate(net.named_parameters()) if n in net.masks)


def test_tiny_unet_output_shape():
    tiny = TinyUNet(32, np.random.default_rng(0))
    assert tiny_unet_forward(tiny, image(1, 20), 20).shape == (1, 32, 1, 20, 20)
    with pytest.raises(ValueError, match="20"):
        tiny_unet_forward(tiny, image(1, 24), 20)


def test_tiny_unet_zero_input_gives_constant_maps():
    tiny = TinyUNet(32, np.random.default_rng(1))
    for _, p in tiny.named_parameters():
        if p.ndim == 1:
            p.data[:] = 0
    out = tiny_unet_forward(tiny, Tensor(np.zeros((1, 1, 20, 20), dtype=np.float32)), 20).data
    assert np.all(out == out[:, :, :, :1, :1])


def test_main_loss_reaches_tiny_unet(f64):
    net = make("A1-1.1", width=0.125)
    net.eval()
    x = image(1, 32).data.astype(np.float64)
    y = (np.random.default_rng(2).random((1, 3, 32, 32)) < 0.3).astype(np.float64)
    loss = combined_loss(y, net(Tensor(x)))
    loss.backward()
    tiny = dict(net.tiny.named_parameters())
    assert all(np.any(p.grad != 0) for p in tiny.values())
    # finite-difference spot check on one Tiny U-Net weight
    w = tiny["head.weight"]
    idx = (3, 2, 0, 0)
    h = 1e-6
    orig = w.data[idx]
    w.data[idx] = orig + h
    up = combined_loss(y, net(Tensor(x))).item()
    w.data[idx] = orig - h
    down = combined_loss(y, net(Tensor(x))).item()
    w.data[idx] = orig
    numeric = (up - down) / (2 * h)
    assert abs(numeric - w.grad[idx]) <= 1e-4 * max(abs(numeric), 1e-7)


def test_generated_conv_gradients_reach_both_operands(f64):
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4, 1, 3, 3)), requires_grad=True)
    generated_kernel_conv(x, w).sum().backward()
    assert np.any(x.grad != 0) and np.any(w.grad != 0)
    assert check_gradients(lambda: (generated_kernel_conv(x, w) ** 2.0).sum(), [x, w]) < 1e-4


def test_generated_conv_detached_equals_conv2d():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 2, 9, 9)).astype(np.float32))
    w = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
    with no_grad():
        detached = generated_kernel_conv(x, Tensor(w), stride=2, dilation=2).data
    assert np.array_equal(detached, same_conv2d(x, Tensor(w), stride=2, dilation=2).data)
    per_image = generated_kernel_conv(x, Tensor(w[None]), stride=2, dilation=2).data
    assert np.array_equal(per_image, detached)
    with pytest.raises(ValueError, match="per-image"):
        generated_kernel_conv(x, Tensor(np.zeros((2, 3, 2, 4, 4))))


def test_generated_conv_delta_kernel_passes_gradient(f64):
    x = Tensor(np.random.default_rng(5).normal(size=(1, 1, 6, 6)), requires_grad=True)
    w = np.zeros((1, 1, 1, 3, 3))
    w[0, 0, 0, 1, 1] = 1.0
    g = np.random.default_rng(6).normal(size=(1, 1, 6, 6))
    generated_kernel_conv(x, Tensor(w, requires_grad=True)).backward(g)
    assert np.array_equal(x.grad, g)


def test_temporal_identity_and_padding(f64):
    x = Tensor(np.random.default_rng(7).normal(size=(2, 12, 1, 5, 5)))
    y = temporal_conv(x, Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(y.data, x.data)
    for kernel in [(5, 3, 3), (7, 5, 5), (9, 1, 1)]:
        spec = TemporalConvSpec(c_out=4, kernel=kernel)
        w = Tensor(np.random.default_rng(8).normal(size=(4, 1) + kernel))
        assert temporal_conv(x, w, spec=spec).shape == (2, 12, 4, 5, 5)
    with pytest.raises(ValueError, match="odd"):
        temporal_conv(x, Tensor(np.ones((1, 1, 2, 3, 3))))
    with pytest.raises(ValueError, match="spec"):
        temporal_conv(x, Tensor(np.ones((1, 1, 5, 3, 3))), spec=TemporalConvSpec(kernel=(7, 3, 3)))


def test_temporal_block_keeps_slices():
    for layers in (1, 2):
        net = make("UNet", temporal=TemporalConvSpec(c_out=4, layers=layers))
        with no_grad():
            assert net(image(12, 16)).shape == (12, 3, 16, 16)


def lstm_params(rng, cin, ch, k=3, scale=0.3):
    return (Tensor(rng.normal(size=(4 * ch, cin + ch, k, k)) * scale, requires_grad=True),
            Tensor(rng.normal(size=4 * ch) * scale, requires_grad=True))


def test_conv_lstm_zero_fixed_point(f64):
    w, _ = lstm_params(np.random.default_rng(9), 2, 3)
    z = Tensor(np.zeros((1, 3, 4, 4)))
    h, c = conv_lstm_cell(Tensor(np.zeros((1, 2, 4, 4))), z, z, w, Tensor(np.zeros(12)))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_conv_lstm_gate_saturation(f64):
    rng = np.random.default_rng(10)
    w, _ = lstm_params(rng, 2, 3)
    b = np.zeros(12)
    b[0:3] = -1e3    # input gate closed
    b[3:6] = 1e3     # forget gate open
    c_prev = Tensor(rng.normal(size=(1, 3, 4, 4)))
    h_prev = Tensor(rng.normal(size=(1, 3, 4, 4)))
    _, c = conv_lstm_cell(Tensor(rng.normal(size=(1, 2, 4, 4))), h_prev, c_prev, w, Tensor(b))
    assert np.array_equal(c.data, c_prev.data)


def test_conv_lstm_three_step_gradient(f64):
    rng = np.random.default_rng(11)
    w, b = lstm_params(rng, 2, 2)
    xs = [Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True) for _ in range(3)]

    def f():
        h = c = Tensor(np.zeros((1, 2, 4, 4)))
        for x in xs:
            h, c = conv_lstm_cell(x, h, c, w, b)
        return (h * h).sum()

    assert check_gradients(f, [w, b] + xs) < 1e-4


def test_conv_lstm_shape_errors():
    z = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError, match="spatial"):
        conv_lstm_cell(Tensor(np.zeros((1, 2, 5, 5))), z, z, Tensor(np.zeros((8, 4, 3, 3))), Tensor(np.zeros(8)))
    with pytest.raises(ValueError, match="gate kernel"):
        conv_lstm_cell(z, z, z, Tensor(np.zeros((8, 3, 3, 3))), Tensor(np.zeros(8)))


def reversal_check(block, feats):
    forward = bilstm_block(block, feats).data
    block.swapped_directions()
    mirrored = bilstm_block(block, Tensor(feats.data[::-1].copy())).data
    block.swapped_directions()
    return forward, mirrored[::-1]


def test_bilstm_time_reversal_is_exact():
    rng = np.random.default_rng(12)
    for layers in (1, 2):
        block = BiConvLSTM(ConvLSTMSpec(hidden=4, layers=layers), 6, rng)
        feats = Tensor(rng.normal(size=(7, 6, 5, 5)).astype(np.float32))
        a, b = reversal_check(block, feats)
        assert a.tobytes() == b.tobytes()


def test_bilstm_single_frame_sees_same_input():
    rng = np.random.default_rng(13)
    block = BiConvLSTM(ConvLSTMSpec(hidden=4), 6, rng)
    feats = Tensor(rng.normal(size=(1, 6, 5, 5)).astype(np.float32))
    fwd, bwd, bias = block.layers[0]
    expected = conv2d(fwd.run([feats])[0], fwd.proj) + conv2d(bwd.run([feats])[0], bwd.proj) + bias.reshape(1, -1, 1, 1)
    assert np.array_equal(bilstm_block(block, feats).data, expected.data)


def test_bilstm_shape_contract():
    block = BiConvLSTM(ConvLSTMSpec(hidden=8), 32, np.random.default_rng(14))
    feats = Tensor(np.random.default_rng(15).normal(size=(12, 32, 8, 8)).astype(np.float32))
    with no_grad():
        assert bilstm_block(block, feats).shape == (12, 32, 8, 8)
    with pytest.raises(ValueError, match="T >= 1"):
        bilstm_block(block, Tensor(np.zeros((0, 32, 8, 8), dtype=np.float32)))
    uni = BiConvLSTM(ConvLSTMSpec(hidden=4, bidirectional=False), 32, np.random.default_rng(0))
    with pytest.raises(ValueError, match="unidirectional"):
        uni.swapped_directions()


def test_spatiotemporal_forward_contract():
    net = make("UNetDilated", bilstm=ConvLSTMSpec(hidden=4))
    with no_grad():
        y = forward_spatiotemporal(net, image(12, 64))
    assert y.shape == (12, 3, 64, 64)
    assert np.all((y.data > 0) & (y.data < 1))
    with pytest.raises(ValueError):
        forward_spatiotemporal(net, Tensor(np.zeros((12, 64, 64), dtype=np.float32)))


def test_without_bilstm_slices_are_independent():
    net = make("UNetDilated").eval()
    stack = image(4, 32)
    with no_grad():
        joint = forward_spatiotemporal(net, stack).data
        single = np.concatenate([net(Tensor(stack.data[t:t + 1])).data for t in range(4)])
    assert np.abs(joint - single).max() < 1e-6


def test_forward_is_deterministic():
    a = make("A2-2.1", seed=3)
    b = make("A2-2.1", seed=3)
    with no_grad():
        assert a(image()).data.tobytes() == b(image()).data.tobytes()
    assert not np.array_equal(make("A2-2.1", seed=4).state_dict()["param.head.weight"],
                              a.state_dict()["param.head.weight"])


def test_state_dict_round_trip():
    a, b = make("A1-1.1-L3", seed=1), make("A1-1.1-L3", seed=2)
    b.load_state_dict(a.state_dict())
    for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert x.tobytes() == y.tobytes(), k
    state = a.state_dict()
    state.pop("param.head.bias")
    with pytest.raises(KeyError, match="missing"):
        b.load_state_dict(state)
