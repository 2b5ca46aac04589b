"""Declarative layer tables for every named network variant.

Only the first three encoder blocks (two convolutions each) differ between
variants; bottleneck and decoder are shared and built in ``networks``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

KERNEL_KINDS = ("dense", "hollow", "generated")
LAYER_NAMES = ("conv1.1", "conv1.2", "conv2.1", "conv2.2", "conv3.1", "conv3.2")
BASE_CHANNELS = ((1, 32), (32, 32), (32, 128), (128, 128), (128, 256), (256, 256))
BOTTLENECK_CHANNELS = 512
NUM_CLASSES = 3


@dataclass(frozen=True)
class LayerSpec:
    name: str
    channels_in: int
    channels_out: int
    kernel_size: int
    dilation: int = 1
    stride: int = 1
    kernel_kind: str = "dense"
    activation: str = "relu"
    normalization: bool = True

    def __post_init__(self):
        if self.kernel_kind not in KERNEL_KINDS:
            raise ValueError(f"{self.name}: unknown kernel kind {self.kernel_kind!r}")
        for key in ("channels_in", "channels_out", "kernel_size", "dilation", "stride"):
            if getattr(self, key) < 1:
                raise ValueError(f"{self.name}: {key} must be >= 1")


@dataclass(frozen=True)
class TemporalConvSpec:
    """3-D convolution over (slice, height, width); paddings keep T, H, W."""
    c_out: int = 32
    kernel: tuple[int, int, int] = (5, 3, 3)
    layers: int = 1

    def __post_init__(self):
        k1, k2, k3 = self.kernel
        if k1 not in (5, 7, 9):
            raise ValueError(f"temporal kernel K1 must be one of 5, 7, 9, got {k1}")
        if k2 != k3 or k2 not in (1, 3, 5):
            raise ValueError(f"temporal kernel needs K2 == K3 in (1, 3, 5), got {self.kernel}")
        if self.layers not in (1, 2):
            raise ValueError(f"temporal block has 1 or 2 layers, got {self.layers}")

    @property
    def padding(self) -> tuple[int, int, int]:
        return tuple((k - 1) // 2 for k in self.kernel)


@dataclass(frozen=True)
class ConvLSTMSpec:
    hidden: int = 32
    kernel_size: int = 3
    layers: int = 1
    bidirectional: bool = True

    def __post_init__(self):
        if self.kernel_size not in (3, 5):
            raise ValueError(f"ConvLSTM gate kernel must be 3 or 5, got {self.kernel_size}")
        if self.layers not in (1, 2, 3):
            raise ValueError(f"ConvLSTM layer count must be 1..3, got {self.layers}")
        if self.hidden < 1:
            raise ValueError("ConvLSTM needs at least one hidden channel")


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    layers: tuple[LayerSpec, ...]
    downsample: str = "maxpool"          # "maxpool" | "stride"
    loss_mode: str = "combined"          # A1 variants use L1 / L2 / L3
    temporal: TemporalConvSpec | None = None
    bilstm: ConvLSTMSpec | None = None
    width: float = 1.0
    num_classes: int = NUM_CLASSES
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.downsample not in ("maxpool", "stride"):
            raise ValueError(f"unknown downsampling {self.downsample!r}")
        if self.width <= 0:
            raise ValueError(f"width multiplier must be positive, got {self.width}")
        if self.temporal is not None and self.bilstm is not None:
            raise ValueError("choose either a temporal block or a Bi-LSTM block, not both")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width)))

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def hollow_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(s for s in self.layers if s.kernel_kind == "hollow")

    @property
    def generated_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(s for s in self.layers if s.kernel_kind == "generated")

    def hollow_sizes(self) -> tuple[int, ...]:
        return tuple(sorted({s.kernel_size for s in self.hollow_layers}))


def _rows(kernels, dilations, strides, kinds=None) -> tuple[LayerSpec, ...]:
    kinds = kinds or ("dense",) * 6
    return tuple(
        LayerSpec(name, cin, cout, k, d, s, kind)
        for name, (cin, cout), k, d, s, kind in zip(LAYER_NAMES, BASE_CHANNELS, kernels, dilations, strides, kinds)
    )


_PLAIN_STRIDES = (1,) * 6
_DOWN_STRIDES = (1, 1, 2, 1, 2, 1)


def _a2(conv21: tuple[int, int], conv31: tuple[int, int], n_hollow: int) -> tuple[LayerSpec, ...]:
    """A2 column: hollow first conv in each of the first ``n_hollow`` blocks."""
    conv22 = (3, 2) if n_hollow == 1 else (4, 3)
    kernels = (10, 4, conv21[0], conv22[0], conv31[0], 3)
    dilations = (1, 3, conv21[1], conv22[1], conv31[1], 4)
    kinds = tuple("hollow" if i % 2 == 0 and i // 2 < n_hollow else "dense" for i in range(6))
    return _rows(kernels, dilations, _DOWN_STRIDES, kinds)


def _build_named() -> dict[str, NetworkConfig]:
    out: dict[str, NetworkConfig] = {}

    def add(name, layers, downsample, **kw):
        out[name] = NetworkConfig(name, layers, downsample, **kw)

    add("UNet", _rows((3,) * 6, (1,) * 6, _PLAIN_STRIDES), "maxpool")
    add("UNetBaseline", _rows((3,) * 6, (1,) * 6, _DOWN_STRIDES), "stride")
    add("UNetDilated", _rows((3,) * 6, (1, 1, 2, 2, 4, 4), _DOWN_STRIDES), "stride")
    add("UNetProgDilated", _rows((3,) * 6, (1, 2, 2, 4, 4, 8), _DOWN_STRIDES), "stride")
    a1 = _rows((20, 4, 3, 3, 3, 3), (1,) * 6, _PLAIN_STRIDES, ("generated",) + ("dense",) * 5)
    add("A1-1.1", a1, "maxpool", loss_mode="L1")
    for mode in ("L1", "L2", "L3"):
        add(f"A1-1.1-{mode}", a1, "maxpool", loss_mode=mode)
    a2 = {
        "1.1": ((3, 2), (3, 4), 1),
        "2.1": ((10, 2), (3, 4), 2),
        "2.2": ((20, 1), (3, 4), 2),
        "2.3": ((10, 1), (3, 4), 2),
        "3.1": ((10, 2), (10, 4), 3),
        "3.2": ((20, 1), (40, 1), 3),
        "3.3": ((10, 1), (10, 1), 3),
    }
    for tag, args in a2.items():
        add(f"A2-{tag}", _a2(*args), "stride")
    return out


CONFIGS: dict[str, NetworkConfig] = _build_named()
# columns of the published layer table, in its order
TABLE_COLUMNS = ("UNet", "A1-1.1", "UNetDilated", "A2-1.1", "A2-2.1", "A2-2.2", "A2-2.3", "A2-3.1", "A2-3.2", "A2-3.3")


def get_config(name: str, width: float = 1.0, temporal: TemporalConvSpec | None = None,
               bilstm: ConvLSTMSpec | None = None) -> NetworkConfig:
    if name not in CONFIGS:
        raise KeyError(f"unknown model {name!r}; valid: {', '.join(CONFIGS)}")
    return replace(CONFIGS[name], width=width, temporal=temporal, bilstm=bilstm)


def describe(config: NetworkConfig, names=LAYER_NAMES) -> str:
    """Layer table in row/column form: one block per conv, one line per field."""
    lines = [f"model {config.name}  (width x{config.width:g}, downsample {config.downsample})"]
    for spec in config.layers:
        if spec.name not in names:
            continue
        marker = f"  [{spec.kernel_kind}]" if spec.kernel_kind != "dense" else ""
        lines.append(
            f"{spec.name}: in {spec.channels_in}, out {spec.channels_out}, kernel {spec.kernel_size}, "
            f"dilation {spec.dilation}, stride {spec.stride}{marker}"
        )
    return "\n".join(lines)
