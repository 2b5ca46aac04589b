"""Network modules: the main U-Net family, the kernel-generating Tiny U-Net,
the temporal block and the bidirectional ConvLSTM block."""

from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy import ndimage

from .blocks import conv_lstm_cell, generated_kernel_conv, same_conv2d, temporal_conv, zero_state
from .configs import BOTTLENECK_CHANNELS, ConvLSTMSpec, LayerSpec, NetworkConfig, TemporalConvSpec
from .hollow import HollowMask, init_hollow_kernel, rescale_mask
from .ops import batchnorm2d, conv2d, maxpool2d, prelu, upsample_nearest
from .tensor import Tensor, concat, default_dtype, relu, sigmoid


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=default_dtype()), requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=default_dtype())
        self._buffers[name] = arr
        return arr

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for name, mod in self._children.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def count_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for mod in self._children.values():
            mod.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param.{k}": t.data for k, t in self.named_parameters()}
        state.update({f"buffer.{k}": v for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {f"param.{k}": t.data for k, t in self.named_parameters()}
        targets.update({f"buffer.{k}": v for k, v in self.named_buffers()})
        missing = sorted(set(targets) - set(state))
        if missing:
            raise KeyError(f"state is missing {len(missing)} entries, e.g. {missing[:3]}")
        for key, arr in targets.items():
            if state[key].shape != arr.shape:
                raise ValueError(f"{key}: stored shape {state[key].shape} != model shape {arr.shape}")
            arr[...] = state[key]


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Same-padded convolution; hollow kernels carry their band mask."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, bias: bool = True, mask: HollowMask | None = None):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.mask = None
        if mask is not None:
            if mask.size != k:
                raise ValueError(f"hollow mask is {mask.size}x{mask.size} but the layer kernel is {k}")
            self.mask = mask.grid.astype(bool)
            self.weight = self.param("weight", init_hollow_kernel(mask, (cout, cin), rng, dtype=np.float64))
        else:
            self.weight = self.param("weight", _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.param("bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return same_conv2d(x, self.weight, self.bias, self.stride, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.running_mean = self.buffer("running_mean", np.zeros(channels))
        self.running_var = self.buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride=1, dilation=1, mask=None):
        super().__init__()
        self.conv = self.child("conv", Conv2d(cin, cout, k, rng, stride, dilation, bias=False, mask=mask))
        self.bn = self.child("bn", BatchNorm2d(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class TinyUNet(Module):
    """Two-level encoder-decoder emitting one K x K kernel map per output channel."""

    def __init__(self, out_maps: int, rng: np.random.Generator, widths: tuple[int, int] = (16, 32)):
        super().__init__()
        c1, c2 = widths
        self.enc1 = self.child("enc1", Conv2d(1, c1, 3, rng))
        self.enc2 = self.child("enc2", Conv2d(c1, c2, 3, rng))
        self.dec = self.child("dec", Conv2d(c1 + c2, c1, 3, rng))
        self.head = self.child("head", Conv2d(c1, out_maps, 1, rng))

    def __call__(self, x: Tensor) -> Tensor:
        e1 = relu(self.enc1(x))
        e2 = relu(self.enc2(maxpool2d(e1)))
        up = upsample_nearest(e2, 2)[:, :, : e1.shape[2], : e1.shape[3]]
        return self.head(relu(self.dec(concat([up, e1], axis=1))))


def resize_image(x: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (N, C, H, W) images to size x size (no gradient)."""
    n, c, h, w = x.shape
    return ndimage.zoom(x, (1, 1, size / h, size / w), order=1, grid_mode=True, mode="grid-constant")


def tiny_unet_forward(tiny: TinyUNet, image: Tensor, k: int) -> Tensor:
    """Kernel banks (N, maps, 1, K, K) generated from K x K images."""
    if image.ndim != 4 or image.shape[2:] != (k, k):
        raise ValueError(f"Tiny U-Net input must be (N, 1, {k}, {k}), got {image.shape}")
    maps = tiny(image)
    return maps.reshape(maps.shape[0], maps.shape[1], 1, k, k)


class TemporalBlock(Module):
    def __init__(self, spec: TemporalConvSpec, cin: int, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        k1, k2, k3 = spec.kernel
        self.weights, self.biases = [], []
        c = cin
        for i in range(spec.layers):
            fan_in = c * k1 * k2 * k3
            self.weights.append(self.param(f"w{i}", _kaiming_uniform(rng, (spec.c_out, c, k1, k2, k3), fan_in)))
            self.biases.append(self.param(f"b{i}", np.zeros(spec.c_out)))
            c = spec.c_out
        if spec.layers == 2:
            self.bn = self.child("bn", BatchNorm2d(spec.c_out))
            self.slope = self.param("prelu", np.full(spec.c_out, 0.25))

    def __call__(self, feats: Tensor) -> Tensor:
        """(T, C, H, W) features of one stack -> (T, c_out, H, W)."""
        T = feats.shape[0]
        y = temporal_conv(feats.reshape(1, *feats.shape), self.weights[0], self.biases[0], self.spec)
        if self.spec.layers == 2:
            flat = y.reshape(T, *y.shape[2:])
            flat = prelu(self.bn(flat), self.slope)
            y = temporal_conv(flat.reshape(1, *flat.shape), self.weights[1], self.biases[1], self.spec)
        return y.reshape(T, *y.shape[2:])


class ConvLSTMDirection(Module):
    """One direction of one layer: gate convolution plus its half of the 1x1 projection."""

    def __init__(self, cin: int, hidden: int, k: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.w = self.param("w", _kaiming_uniform(rng, (4 * hidden, cin + hidden, k, k), (cin + hidden) * k * k))
        self.b = self.param("b", np.zeros(4 * hidden))
        self.proj = self.param("proj", _kaiming_uniform(rng, (cout, hidden, 1, 1), 2 * hidden))

    def run(self, frames: list[Tensor]) -> list[Tensor]:
        h, c = zero_state(frames[0], self.hidden)
        out = []
        for x in frames:
            h, c = conv_lstm_cell(x, h, c, self.w, self.b)
            out.append(h)
        return out


class BiConvLSTM(Module):
    def __init__(self, spec: ConvLSTMSpec, channels: int, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.layers: list[tuple[ConvLSTMDirection, ConvLSTMDirection | None, Tensor]] = []
        for i in range(spec.layers):
            fwd = self.child(f"l{i}.fwd", ConvLSTMDirection(channels, spec.hidden, spec.kernel_size, channels, rng))
            bwd = None
            if spec.bidirectional:
                bwd = self.child(f"l{i}.bwd", ConvLSTMDirection(channels, spec.hidden, spec.kernel_size, channels, rng))
            bias = self.param(f"l{i}.bias", np.zeros(channels))
            self.layers.append((fwd, bwd, bias))

    def swapped_directions(self) -> None:
        """Exchange forward and backward parameter sets in place."""
        for fwd, bwd, _ in self.layers:
            if bwd is None:
                raise ValueError("a unidirectional block has nothing to swap")
            for name in fwd._params:
                fwd._params[name].data, bwd._params[name].data = bwd._params[name].data, fwd._params[name].data

    def __call__(self, feats: Tensor) -> Tensor:
        """(T, C, H, W) -> (T, C, H, W)."""
        if feats.ndim != 4 or feats.shape[0] < 1:
            raise ValueError(f"Bi-LSTM block expects (T, C, H, W) with T >= 1, got {feats.shape}")
        frames = [feats[t:t + 1] for t in range(feats.shape[0])]
        for fwd, bwd, bias in self.layers:
            hf = fwd.run(frames)
            if bwd is None:
                frames = [conv2d(h, fwd.proj, bias) for h in hf]
                continue
            hb = bwd.run(frames[::-1])[::-1]
            frames = [
                conv2d(a, fwd.proj) + conv2d(b, bwd.proj) + bias.reshape(1, -1, 1, 1)
                for a, b in zip(hf, hb)
            ]
        return frames[0] if len(frames) == 1 else concat(frames, axis=0)


def bilstm_block(block: BiConvLSTM, feats: Tensor) -> Tensor:
    return block(feats)


class Network(Module):
    """Encoder of three configured blocks, a bottleneck, a mirrored decoder with
    skip concatenations, optional temporal / Bi-LSTM block and a sigmoid head."""

    def __init__(self, config: NetworkConfig, masks: dict | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        masks = masks or {}
        self.masks: dict[str, np.ndarray] = {}
        self.generated_kernels: Tensor | None = None
        self.tiny: TinyUNet | None = None
        sc = config.scaled

        self.encoder: list[list[Module]] = []
        for b in range(3):
            block = []
            for spec in config.layers[2 * b:2 * b + 2]:
                cin = 1 if spec.name == "conv1.1" else sc(spec.channels_in)
                cout = sc(spec.channels_out)
                block.append(self._make_layer(spec, cin, cout, rng, masks))
            self.encoder.append(block)

        enc_out = [sc(config.layers[2 * b + 1].channels_out) for b in range(3)]
        mid = sc(BOTTLENECK_CHANNELS)
        stride = 2 if config.downsample == "stride" else 1
        self.bottleneck = [
            self.child("bottleneck.0", ConvBNReLU(enc_out[2], mid, 3, rng, stride=stride)),
            self.child("bottleneck.1", ConvBNReLU(mid, mid, 3, rng)),
        ]
        # each decoder level: nearest upsampling and a 3x3 convolution, skip
        # concatenation, two 3x3 convolutions
        self.decoder = []
        below = mid
        for b in (2, 1, 0):
            c = enc_out[b]
            self.decoder.append([
                self.child(f"dec{b + 1}.up", Conv2d(below, c, 3, rng)),
                self.child(f"dec{b + 1}.0", ConvBNReLU(2 * c, c, 3, rng)),
                self.child(f"dec{b + 1}.1", ConvBNReLU(c, c, 3, rng)),
            ])
            below = c
        self.feature_channels = below

        self.temporal = None
        self.bilstm = None
        head_in = below
        if config.temporal is not None:
            self.temporal = self.child("temporal", TemporalBlock(config.temporal, below, rng))
            head_in = config.temporal.c_out
        if config.bilstm is not None:
            self.bilstm = self.child("bilstm", BiConvLSTM(config.bilstm, below, rng))
        self.head = self.child("head", Conv2d(head_in, config.num_classes, 1, rng))
        if config.loss_mode == "L3":
            self.channel_logits = self.param("channel_logits", np.zeros(sc(config.layers[0].channels_out)))
        else:
            self.channel_logits = None

    def _make_layer(self, spec: LayerSpec, cin: int, cout: int, rng, masks) -> Module:
        mask = None
        if spec.kernel_kind == "hollow":
            mask = masks.get(spec.name, masks.get(spec.kernel_size))
            if mask is None:
                raise ValueError(
                    f"{self.config.name}: hollow layer {spec.name} needs a {spec.kernel_size}x{spec.kernel_size} mask"
                )
            if mask.size < spec.kernel_size:
                raise ValueError(f"{spec.name}: mask is {mask.size}px but the kernel needs {spec.kernel_size}px")
            mask = rescale_mask(mask, spec.kernel_size)
        if spec.kernel_kind == "generated":
            self.tiny = self.child("tiny", TinyUNet(cout, rng))
            self.generated_spec = spec
            bn = self.child(f"{spec.name}.bn", BatchNorm2d(cout))
            return bn
        stride = spec.stride
        if spec.name in ("conv2.1", "conv3.1") and self.config.downsample == "maxpool":
            stride = 1
        layer = self.child(spec.name, ConvBNReLU(cin, cout, spec.kernel_size, rng, stride, spec.dilation, mask))
        if mask is not None:
            self.masks[f"{spec.name}.conv.weight"] = np.broadcast_to(layer.conv.mask, layer.conv.weight.shape)
        return layer

    def parameter_masks(self) -> dict[int, np.ndarray]:
        """Optimizer mask table: parameter index -> band mask."""
        names = [n for n, _ in self.named_parameters()]
        return {names.index(n): m for n, m in self.masks.items()}

    def hollow_weights(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        params = dict(self.named_parameters())
        return {n: (params[n].data, m) for n, m in self.masks.items()}

    def _first_layer(self, x: Tensor) -> Tensor:
        if self.tiny is None:
            return self.encoder[0][0](x)
        spec = self.generated_spec
        k = spec.kernel_size
        small = Tensor(resize_image(x.data, k).astype(x.dtype))
        kernels = tiny_unet_forward(self.tiny, small, k)
        self.generated_kernels = kernels.reshape(kernels.shape[0], kernels.shape[1], k, k)
        y = generated_kernel_conv(x, kernels, None, spec.stride, spec.dilation)
        return relu(self.encoder[0][0](y))

    def features(self, x: Tensor) -> Tensor:
        """Penultimate per-slice feature maps (N, Cf, H, W)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"network input must be (N, 1, H, W), got {x.shape}")
        skips = []
        h = x
        for b, (first, second) in enumerate(self.encoder):
            if b > 0 and self.config.downsample == "maxpool":
                h = maxpool2d(h)
            h = self._first_layer(h) if b == 0 else first(h)
            h = second(h)
            skips.append(h)
        if self.config.downsample == "maxpool":
            h = maxpool2d(h)
        for layer in self.bottleneck:
            h = layer(h)
        for (up_proj, c1, c2), skip in zip(self.decoder, reversed(skips)):
            up = upsample_nearest(h, 2)[:, :, : skip.shape[2], : skip.shape[3]]
            up = relu(up_proj(up))
            h = c2(c1(concat([up, skip], axis=1)))
        return h

    def __call__(self, x: Tensor) -> Tensor:
        """Per-slice probabilities (N, C, H, W); a temporal or Bi-LSTM block
        treats the batch axis as the slice axis of one stack."""
        feats = self.features(x)
        if self.temporal is not None:
            feats = self.temporal(feats)
        if self.bilstm is not None:
            feats = self.bilstm(feats)
        return sigmoid(self.head(feats))


def forward_spatiotemporal(net: Network, stack: Tensor) -> Tensor:
    """(T, 1, H, W) stack -> (T, C, H, W) probabilities."""
    if stack.ndim != 4:
        raise ValueError(f"expected one (T, 1, H, W) stack, got {stack.shape}")
    return net(stack)


def build_network(config: NetworkConfig, masks: dict | None = None, seed: int = 0) -> Network:
    """Instantiate ``config``; ``masks`` maps a layer name or kernel size to a HollowMask."""
    return Network(config, masks, seed)
