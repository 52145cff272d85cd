"""Executable densely-connected model realizing the planned architecture.

Within a dense block, unit n consumes the concatenation of the block
input and all n-1 prior unit outputs; the backward pass splits each
upstream gradient back onto those sources exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .builder import (
    BOTTLENECK_FACTOR,
    DenseNetConfig,
    block_input_channels,
    plan_architecture,
    transition_output_channels,
)
from .exceptions import ShapeError
from .layers import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    GlobalAvgPool,
    Linear,
    ReLU,
    concat_channels,
    split_channels,
)


def _collect(children, attr):
    merged = {}
    for prefix, child in children:
        for key, value in getattr(child, attr)().items():
            merged[f"{prefix}.{key}"] = value
    return merged


class DenseUnit:
    """One dense-block layer: BN -> ReLU -> 3x3 conv (pad 1) producing
    growth_rate maps, preceded in the BC variant by BN -> ReLU -> 1x1
    conv producing 4 * growth_rate maps."""

    def __init__(self, in_channels: int, growth_rate: int, bottleneck: bool, rng, dtype):
        self.in_channels = in_channels
        self.bottleneck = bottleneck
        if bottleneck:
            squeeze = BOTTLENECK_FACTOR * growth_rate
            self.bn1 = BatchNorm(in_channels, dtype=dtype)
            self.relu1 = ReLU()
            self.conv1x1 = Conv2d(in_channels, squeeze, 1, rng=rng, dtype=dtype)
            self.bn2 = BatchNorm(squeeze, dtype=dtype)
            self.relu2 = ReLU()
            self.conv3x3 = Conv2d(squeeze, growth_rate, 3, pad=1, rng=rng, dtype=dtype)
        else:
            self.bn1 = BatchNorm(in_channels, dtype=dtype)
            self.relu1 = ReLU()
            self.conv3x3 = Conv2d(in_channels, growth_rate, 3, pad=1, rng=rng, dtype=dtype)

    def _children(self):
        if self.bottleneck:
            return [("bn1", self.bn1), ("conv1x1", self.conv1x1),
                    ("bn2", self.bn2), ("conv3x3", self.conv3x3)]
        return [("bn1", self.bn1), ("conv3x3", self.conv3x3)]

    def forward(self, x, train=False):
        h = self.relu1.forward(self.bn1.forward(x, train))
        if self.bottleneck:
            h = self.conv1x1.forward(h)
            h = self.relu2.forward(self.bn2.forward(h, train))
        return self.conv3x3.forward(h)

    def backward(self, dout):
        d = self.conv3x3.backward(dout)
        if self.bottleneck:
            d = self.bn2.backward(self.relu2.backward(d))
            d = self.conv1x1.backward(d)
        return self.bn1.backward(self.relu1.backward(d))

    def params(self):
        return _collect(self._children(), "params")

    def grads(self):
        return _collect(self._children(), "grads")

    def state(self):
        return _collect(self._children(), "state")


class DenseBlock:
    """Stack of dense units with full concatenation wiring."""

    def __init__(self, in_channels: int, growth_rate: int, num_units: int,
                 bottleneck: bool, rng, dtype):
        self.in_channels = in_channels
        self.growth_rate = growth_rate
        self.units = [
            DenseUnit(block_input_channels(in_channels, growth_rate, n),
                      growth_rate, bottleneck, rng, dtype)
            for n in range(1, num_units + 1)
        ]
        # unit n concatenates feature 0 (the block input) and features 1..n-1
        self.sources = [list(range(n)) for n in range(1, num_units + 1)]
        self._feature_sizes = [in_channels] + [growth_rate] * num_units

    @property
    def out_channels(self) -> int:
        return self.in_channels + len(self.units) * self.growth_rate

    def wiring_edge_count(self) -> int:
        return sum(len(s) for s in self.sources)

    def forward(self, x, train=False):
        features = [x]
        for unit, sources in zip(self.units, self.sources):
            joined = concat_channels([features[i] for i in sources])
            features.append(unit.forward(joined, train))
        return concat_channels(features)

    def backward(self, dout):
        sizes = self._feature_sizes
        accum = [g.copy() for g in split_channels(dout, sizes)]
        for n in range(len(self.units), 0, -1):
            din = self.units[n - 1].backward(accum[n])
            for i, part in zip(self.sources[n - 1], split_channels(din, sizes[:n])):
                accum[i] += part
        return accum[0]

    def _children(self):
        return [(f"layer{n}", unit) for n, unit in enumerate(self.units, 1)]

    def params(self):
        return _collect(self._children(), "params")

    def grads(self):
        return _collect(self._children(), "grads")

    def state(self):
        return _collect(self._children(), "state")


class Transition:
    """BN -> ReLU -> 1x1 conv to the compressed width -> 2x2 avg pool."""

    def __init__(self, in_channels: int, out_channels: int, rng, dtype):
        self.bn = BatchNorm(in_channels, dtype=dtype)
        self.relu = ReLU()
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.pool = AvgPool2d()

    def forward(self, x, train=False):
        h = self.conv.forward(self.relu.forward(self.bn.forward(x, train)))
        return self.pool.forward(h)

    def backward(self, dout):
        d = self.conv.backward(self.pool.backward(dout))
        return self.bn.backward(self.relu.backward(d))

    def _children(self):
        return [("bn", self.bn), ("conv", self.conv)]

    def params(self):
        return _collect(self._children(), "params")

    def grads(self):
        return _collect(self._children(), "grads")

    def state(self):
        return _collect(self._children(), "state")


class ClassifierHead:
    """BN -> ReLU -> global average pool -> fully-connected logits."""

    def __init__(self, in_channels: int, num_classes: int, rng, dtype):
        self.bn = BatchNorm(in_channels, dtype=dtype)
        self.relu = ReLU()
        self.pool = GlobalAvgPool()
        self.fc = Linear(in_channels, num_classes, rng=rng, dtype=dtype)
        self._pooled_shape = None

    def forward(self, x, train=False):
        h = self.pool.forward(self.relu.forward(self.bn.forward(x, train)))
        self._pooled_shape = h.shape
        return self.fc.forward(h.reshape(h.shape[0], -1))

    def backward(self, dout):
        d = self.fc.backward(dout).reshape(self._pooled_shape)
        return self.bn.backward(self.relu.backward(self.pool.backward(d)))

    def _children(self):
        return [("bn", self.bn), ("fc", self.fc)]

    def params(self):
        return _collect(self._children(), "params")

    def grads(self):
        return _collect(self._children(), "grads")

    def state(self):
        return _collect(self._children(), "state")


class Model:
    """Ordered parameterized layer graph with dense-block wiring.

    Infer-mode forwards are side-effect free; train-mode forwards update
    the batchnorm running statistics, so callers must serialize them.
    """

    def __init__(self, config: DenseNetConfig, seed: int, dtype=np.float32):
        config.validate()
        plan_architecture(config)  # reject collapsing geometries up front
        self.config = config
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        units = config.units_per_block()

        stages: list[tuple[str, object]] = []
        stages.append(("initial_conv",
                       Conv2d(config.input_channels, config.first_conv_channels, 3,
                              rng=rng, dtype=dtype)))
        channels = config.first_conv_channels
        self.blocks: list[DenseBlock] = []
        for b in range(1, config.blocks + 1):
            block = DenseBlock(channels, config.growth_rate, units,
                               config.bottleneck, rng, dtype)
            self.blocks.append(block)
            stages.append((f"block{b}", block))
            channels = block.out_channels
            if b < config.blocks:
                reduced = transition_output_channels(channels, config.compression)
                stages.append((f"transition{b}", Transition(channels, reduced, rng, dtype)))
                channels = reduced
        stages.append(("classifier", ClassifierHead(channels, config.num_classes, rng, dtype)))
        self._stages = stages

    def stages(self) -> list[tuple[str, object]]:
        return list(self._stages)

    def _check_input(self, x):
        expected = (self.config.input_channels, self.config.input_height,
                    self.config.input_width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(
                f"model expects (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}"
            )

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        for _, stage in self._stages:
            x = stage.forward(x, train)
        return x

    def forward_trace(self, x: np.ndarray, train: bool = False) -> list[tuple[str, tuple]]:
        """Forward pass recording each stage's realized output shape."""
        self._check_input(x)
        trace = []
        for name, stage in self._stages:
            x = stage.forward(x, train)
            trace.append((name, x.shape))
        return trace

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for _, stage in reversed(self._stages):
            d = stage.backward(d)
        return d

    def named_params(self) -> dict[str, np.ndarray]:
        return _collect(self._stages, "params")

    def named_grads(self) -> dict[str, np.ndarray]:
        return _collect(self._stages, "grads")

    def named_state(self) -> dict[str, np.ndarray]:
        return _collect(self._stages, "state")

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Parameters plus running statistics, in a stable order."""
        return {**self.named_params(), **self.named_state()}


@dataclass(frozen=True)
class ParameterCount:
    per_stage: dict[str, int]
    total: int


def build_model(config: DenseNetConfig, seed: int, dtype=np.float32) -> Model:
    """Construct a model; identical seed and config give bitwise-identical
    parameters."""
    return Model(config, seed, dtype=dtype)


def count_parameters(model: Model) -> ParameterCount:
    """Per-stage and total trainable parameter counts from walking the
    realized graph (running statistics excluded)."""
    per_stage = {}
    for name, stage in model.stages():
        per_stage[name] = int(sum(p.size for p in stage.params().values()))
    return ParameterCount(per_stage=per_stage, total=sum(per_stage.values()))
