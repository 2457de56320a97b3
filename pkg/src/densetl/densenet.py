"""DenseNet backbones, the stacked-dense classification head, freezing and counting.

A :class:`Model` is a flat list of top-level layers. Dense-block units and
transitions are composite layers so they can be frozen or inspected as one
unit; everything with parameters bottoms out in :class:`Conv2d`,
:class:`BatchNorm` or :class:`Dense`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import nn
from .tensor import DTYPE, ShapeError, Tensor, concat_channels

MASK64 = (1 << 64) - 1
GOLDEN64 = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN64) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def layer_seed(global_seed: int, index: int) -> int:
    """Seed for the ``index``-th parameterized layer: the index-th splitmix64 output."""
    return splitmix64((int(global_seed) + index * GOLDEN64) & MASK64)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenseNetConfig:
    block_layers: tuple[int, ...] = (6, 12, 48, 32)
    growth_rate: int = 32
    bottleneck_width: Optional[int] = None  # defaults to 4 * growth_rate
    compression: float = 0.5
    stem_channels: int = 64
    input_size: tuple[int, int, int] = (224, 224, 3)

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(b) for b in self.block_layers))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.bottleneck_width is None:
            object.__setattr__(self, "bottleneck_width", 4 * self.growth_rate)

    @classmethod
    def densenet201(cls, input_size: int = 224) -> "DenseNetConfig":
        return cls(input_size=(input_size, input_size, 3))

    @classmethod
    def toy(cls, input_size: int = 32) -> "DenseNetConfig":
        return cls(block_layers=(2, 2), growth_rate=8, stem_channels=16,
                   input_size=(input_size, input_size, 3))

    def validate(self) -> None:
        if not self.block_layers or any(b < 1 for b in self.block_layers):
            raise ConfigError(f"block_layers must be a non-empty list of positive ints, got {self.block_layers}")
        if self.growth_rate < 1 or self.bottleneck_width < 1 or self.stem_channels < 1:
            raise ConfigError("growth_rate, bottleneck_width and stem_channels must be positive")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must lie in (0, 1], got {self.compression}")
        h, w, c = self.input_size
        if min(h, w, c) < 1:
            raise ConfigError(f"input_size must be positive, got {self.input_size}")


@dataclass(frozen=True)
class HeadConfig:
    neurons: int = 512
    dropout: float = 0.1
    activation: str = "relu"
    n_classes: int = 3

    def validate(self) -> None:
        if self.neurons < 2 or self.neurons % 2:
            raise ConfigError(f"head neurons must be even and >= 2, got {self.neurons}")
        try:
            nn.check_dropout_rate(self.dropout)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.activation != "relu":
            raise ConfigError(f"unsupported head activation {self.activation!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")

    def widths(self) -> list[int]:
        n = self.neurons
        return [3 * n, n, 2 * n, n, n // 2, self.n_classes]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class ForwardContext:
    train: bool = False
    rng: Optional[np.random.Generator] = None


class Layer:
    kind = "layer"

    def __init__(self):
        self.trainable = True

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def init(self, rng: np.random.Generator) -> None:
        pass

    def attrs(self) -> dict:
        return {}

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for _, p in self.parameters():
            p.requires_grad = flag
        for _, child in self.children():
            child.set_trainable(flag)

    def leaves(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        kids = self.children()
        if not kids:
            yield prefix, self
        for name, child in kids:
            yield from child.leaves(f"{prefix}.{name}" if prefix else name)

    def describe(self) -> dict:
        d = {"kind": self.kind, "trainable": self.trainable, **self.attrs()}
        if self.children():
            d["children"] = {name: c.describe() for name, c in self.children()}
        return d


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0):
        super().__init__()
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)

    def forward(self, x, ctx):
        return nn.conv2d(x, self.weight, self.stride, self.pad)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ShapeError(f"conv2d expects {self.cin} channels, got {c}")
        if self.k > h + 2 * self.pad or self.k > w + 2 * self.pad:
            raise ShapeError(f"conv2d kernel {self.k} exceeds input {h}x{w}")
        return (self.cout,
                nn.conv_output_size(h, self.k, self.stride, self.pad),
                nn.conv_output_size(w, self.k, self.stride, self.pad))

    def parameters(self):
        return [("weight", self.weight)]

    def init(self, rng):
        self.weight.data = _uniform_init(rng, self.weight.shape, self.cin * self.k * self.k)

    def attrs(self):
        return {"cin": self.cin, "cout": self.cout, "k": self.k, "stride": self.stride, "pad": self.pad}


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, channels: int):
        super().__init__()
        self.state = nn.BatchNormState.create(channels)

    def forward(self, x, ctx):
        return nn.batch_norm(x, self.state, train=ctx.train and self.trainable)

    def output_shape(self, shape):
        if shape[0] != self.state.channels:
            raise ShapeError(f"batch_norm expects {self.state.channels} channels, got {shape[0]}")
        return shape

    def parameters(self):
        return [("gamma", self.state.gamma), ("beta", self.state.beta)]

    def buffers(self):
        return [("running_mean", self.state.running_mean), ("running_var", self.state.running_var)]

    def attrs(self):
        return {"channels": self.state.channels}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        return nn.relu(x)


class Pool(Layer):
    kind = "pool"

    def __init__(self, mode: str, k: int, stride: int, pad: int = 0):
        super().__init__()
        self.mode, self.k, self.stride, self.pad = mode, k, stride, pad

    def forward(self, x, ctx):
        return nn.pool2d(x, self.mode, self.k, self.stride, self.pad)

    def output_shape(self, shape):
        c, h, w = shape
        if self.k > h + 2 * self.pad or self.k > w + 2 * self.pad:
            raise ShapeError(f"{self.mode} pool window {self.k} exceeds input {h}x{w}")
        return (c,
                nn.conv_output_size(h, self.k, self.stride, self.pad),
                nn.conv_output_size(w, self.k, self.stride, self.pad))

    def attrs(self):
        return {"mode": self.mode, "k": self.k, "stride": self.stride, "pad": self.pad}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x, ctx):
        return nn.global_avg_pool(x)

    def output_shape(self, shape):
        return (shape[0],)


class Dense(Layer):
    kind = "dense"

    def __init__(self, cin: int, cout: int, activation: Optional[str] = None):
        super().__init__()
        self.cin, self.cout, self.activation = cin, cout, activation
        self.weight = Tensor(np.zeros((cin, cout)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x, ctx):
        y = nn.dense(x, self.weight, self.bias)
        return nn.relu(y) if self.activation == "relu" else y

    def output_shape(self, shape):
        if shape != (self.cin,):
            raise ShapeError(f"dense expects ({self.cin},) features, got {shape}")
        return (self.cout,)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def init(self, rng):
        self.weight.data = _uniform_init(rng, self.weight.shape, self.cin)
        self.bias.data = np.zeros(self.cout, dtype=DTYPE)

    def attrs(self):
        return {"cin": self.cin, "cout": self.cout, "activation": self.activation}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        self.rate = nn.check_dropout_rate(rate)

    def forward(self, x, ctx):
        return nn.dropout(x, self.rate, train=ctx.train, rng=ctx.rng)

    def attrs(self):
        return {"rate": self.rate}


class DenseUnit(Layer):
    """BN-ReLU-conv1x1 bottleneck, BN-ReLU-conv3x3, concatenated onto the input."""

    kind = "dense_unit"

    def __init__(self, cin: int, growth_rate: int, bottleneck_width: int):
        super().__init__()
        self.cin, self.growth_rate = cin, growth_rate
        self.bn1 = BatchNorm(cin)
        self.conv1 = Conv2d(cin, bottleneck_width, 1)
        self.bn2 = BatchNorm(bottleneck_width)
        self.conv2 = Conv2d(bottleneck_width, growth_rate, 3, pad=1)

    def children(self):
        return [("bn1", self.bn1), ("conv1", self.conv1), ("bn2", self.bn2), ("conv2", self.conv2)]

    def forward(self, x, ctx):
        y = self.conv1.forward(nn.relu(self.bn1.forward(x, ctx)), ctx)
        y = self.conv2.forward(nn.relu(self.bn2.forward(y, ctx)), ctx)
        return concat_channels([x, y])

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ShapeError(f"dense unit expects {self.cin} channels, got {c}")
        return (c + self.growth_rate, h, w)

    def attrs(self):
        return {"cin": self.cin, "growth_rate": self.growth_rate}


class Transition(Layer):
    """BN-ReLU-conv1x1 compression followed by 2x2 average pooling, stride 2."""

    kind = "transition"

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.bn = BatchNorm(cin)
        self.conv = Conv2d(cin, cout, 1)
        self.pool = Pool("avg", 2, 2)

    def children(self):
        return [("bn", self.bn), ("conv", self.conv), ("pool", self.pool)]

    def forward(self, x, ctx):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"transition cannot halve odd spatial size {x.shape[2]}x{x.shape[3]}")
        y = self.conv.forward(nn.relu(self.bn.forward(x, ctx)), ctx)
        return self.pool.forward(y, ctx)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ShapeError(f"transition expects {self.cin} channels, got {c}")
        if h % 2 or w % 2:
            raise ShapeError(f"transition cannot halve odd spatial size {h}x{w}")
        return (self.cout, h // 2, w // 2)

    def attrs(self):
        return {"cin": self.cin, "cout": self.cout}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model:
    def __init__(
        self,
        layers: list[Layer],
        backbone_len: int,
        config: DenseNetConfig,
        head: Optional[HeadConfig] = None,
        seed: int = 0,
        class_names: Optional[Sequence[str]] = None,
        trace: Optional[list[dict]] = None,
    ):
        self.layers = layers
        self.backbone_len = backbone_len
        self.config = config
        self.head = head
        self.seed = seed
        self.class_names = list(class_names) if class_names else None
        self.trace = trace or []
        self.metadata: dict = {}

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None,
                stop: Optional[int] = None) -> Tensor:
        ctx = ForwardContext(train=train, rng=rng)
        for i, layer in enumerate(self.layers[:stop]):
            try:
                x = layer.forward(x, ctx)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return x

    __call__ = forward

    def features(self, x: Tensor) -> Tensor:
        return self.forward(x, train=False, stop=self.backbone_len)

    def leaves(self) -> Iterator[tuple[str, Layer]]:
        for i, layer in enumerate(self.layers):
            yield from layer.leaves(str(i))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{name}.{pname}", p) for name, leaf in self.leaves() for pname, p in leaf.parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{name}.{bname}", b) for name, leaf in self.leaves() for bname, b in leaf.buffers()]

    def state_arrays(self) -> list[tuple[str, np.ndarray, bool]]:
        """Every stored tensor in declaration order: (name, array, trainable)."""
        out = []
        for name, leaf in self.leaves():
            for pname, p in leaf.parameters():
                out.append((f"{name}.{pname}", p.data, p.requires_grad))
            for bname, b in leaf.buffers():
                out.append((f"{name}.{bname}", b, False))
        return out

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def channel_trace(self) -> list[int]:
        """Channels after the stem and after every block and transition."""
        return [s["channels"] for s in self.trace
                if s["stage"] == "stem" or s["stage"].startswith(("block", "transition"))]

    def spatial_trace(self) -> list[int]:
        """Distinct successive spatial sizes from the input to the last block."""
        sizes = [s["size"][0] for s in self.trace if s["stage"] != "gap"]
        return [s for i, s in enumerate(sizes) if i == 0 or s != sizes[i - 1]]


def build_dense_block(c_in: int, n_layers: int, growth_rate: int,
                      bottleneck_width: Optional[int] = None) -> tuple[list[DenseUnit], int]:
    if min(c_in, n_layers, growth_rate) < 1:
        raise ConfigError("dense block needs c_in, layer count and growth rate >= 1")
    bw = bottleneck_width or 4 * growth_rate
    units = [DenseUnit(c_in + i * growth_rate, growth_rate, bw) for i in range(n_layers)]
    return units, c_in + n_layers * growth_rate


def build_transition(c_in: int, compression: float) -> tuple[Transition, int]:
    c_out = math.floor(compression * c_in)
    if c_out < 1:
        raise ConfigError(f"compression {compression} leaves no channels from {c_in}")
    return Transition(c_in, c_out), c_out


def build_head(c_in: int, head: HeadConfig) -> list[Layer]:
    """GAP features -> five ReLU dense layers each followed by dropout -> class logits."""
    head.validate()
    layers: list[Layer] = []
    widths = head.widths()
    for width in widths[:-1]:
        layers.append(Dense(c_in, width, activation=head.activation))
        layers.append(Dropout(head.dropout))
        c_in = width
    layers.append(Dense(c_in, widths[-1]))
    return layers


def _backbone_layers(config: DenseNetConfig) -> tuple[list[Layer], list[dict], int]:
    config.validate()
    h, w, c = config.input_size
    trace = [{"stage": "input", "channels": c, "size": [h, w]}]
    layers: list[Layer] = []

    def push(layer: Layer, shape: tuple, stage: Optional[str] = None) -> tuple:
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ConfigError(f"layer {len(layers)} ({layer.kind}): {exc}") from None
        layers.append(layer)
        if stage:
            trace.append({"stage": stage, "channels": shape[0], "size": list(shape[1:])})
        return shape

    shape = (c, h, w)
    shape = push(Conv2d(c, config.stem_channels, 7, stride=2, pad=3), shape, "stem_conv")
    shape = push(BatchNorm(config.stem_channels), shape)
    shape = push(ReLU(), shape)
    shape = push(Pool("max", 3, 2, pad=1), shape, "stem")
    channels = config.stem_channels
    for b, n_layers in enumerate(config.block_layers, start=1):
        units, channels = build_dense_block(channels, n_layers, config.growth_rate, config.bottleneck_width)
        for u in units:
            shape = push(u, shape)
        trace.append({"stage": f"block{b}", "channels": shape[0], "size": list(shape[1:])})
        if b < len(config.block_layers):
            trans, channels = build_transition(channels, config.compression)
            shape = push(trans, shape, f"transition{b}")
    shape = push(BatchNorm(channels), shape)
    shape = push(ReLU(), shape)
    shape = push(GlobalAvgPool(), shape)
    trace.append({"stage": "gap", "channels": shape[0], "size": [1, 1]})
    return layers, trace, channels


def _initialize(model: Model) -> None:
    index = 0
    for _, leaf in model.leaves():
        if leaf.parameters():
            leaf.init(np.random.default_rng(layer_seed(model.seed, index)))
            index += 1


def build_backbone(config: DenseNetConfig, seed: int = 0) -> Model:
    layers, trace, _ = _backbone_layers(config)
    model = Model(layers, len(layers), config, seed=seed, trace=trace)
    _initialize(model)
    return model


def build_model(config: DenseNetConfig, head: HeadConfig, seed: int = 0,
                class_names: Optional[Sequence[str]] = None) -> Model:
    layers, trace, channels = _backbone_layers(config)
    head_layers = build_head(channels, head)
    if class_names is not None and len(class_names) != head.n_classes:
        raise ConfigError(f"{len(class_names)} class names for a {head.n_classes}-class head")
    model = Model(layers + head_layers, len(layers), config, head, seed, class_names, trace)
    _initialize(model)
    return model


def freeze_base(model: Model, frozen: Optional[range | slice] = None) -> Model:
    """Mark layers non-trainable (default: the whole backbone).

    Frozen parameters stop requiring gradients and frozen batch-norm layers
    run on their running statistics even during training.
    """
    if not model.layers:
        raise ValueError("freeze_base: model has no layers")
    if frozen is None:
        frozen = range(model.backbone_len)
    elif isinstance(frozen, slice):
        frozen = range(*frozen.indices(len(model.layers)))
    if len(frozen) and (frozen[0] < 0 or frozen[-1] >= len(model.layers)):
        raise ValueError(f"freeze_base: {frozen} outside model of {len(model.layers)} layers")
    for i in frozen:
        model.layers[i].set_trainable(False)
    return model


def param_count(model: Model) -> tuple[int, int]:
    """(trainable, total) element counts; totals include batch-norm running stats."""
    trainable = sum(p.size for _, p in model.named_parameters() if p.requires_grad)
    total = sum(arr.size for _, arr, _ in model.state_arrays())
    return trainable, total


def config_to_dict(config: DenseNetConfig) -> dict:
    d = asdict(config)
    d["block_layers"] = list(d["block_layers"])
    d["input_size"] = list(d["input_size"])
    return d
