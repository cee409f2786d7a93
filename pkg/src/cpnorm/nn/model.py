"""Sequential models, the LeNet-/AlexNet-like presets and parameter counting."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from ..cp import cp_als, cp_power, random_cp, renormalize
from .layers import (
    Conv2d,
    CpNormWeight,
    DenseWeight,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    WeightNormWeight,
    _WeightLayer,
)

logger = logging.getLogger(__name__)

KINDS = ("conv2d", "linear", "maxpool", "relu", "dropout", "flatten")
NORMALIZATIONS = ("none", "weight", "cp")
CP_INITS = ("power", "als", "kaiming_normal", "kaiming_uniform")

# Tensor ranks estimated right after initialisation, keyed by layer name.
LENET_RANKS = {"conv1": 11, "conv2": 270, "fc1": 128, "fc2": 10}
ALEXNET_RANKS = {
    "conv1": 36, "conv2": 571, "conv3": 1626, "conv4": 1948, "conv5": 1644,
    "fc1": 1024, "fc2": 512, "fc3": 10,
}
INPUT_SHAPES = {"lenet": (1, 28, 28), "alexnet": (3, 32, 32)}


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    keep_prob: float = 1.0
    normalization: str = "none"
    rank: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.kind == "conv2d" and min(self.in_channels, self.out_channels, self.kernel_size) < 1:
            raise ValueError(f"{self.name}: conv dimensions must be positive")
        if self.kind == "linear" and min(self.in_features, self.out_features) < 1:
            raise ValueError(f"{self.name}: linear dimensions must be positive")
        if self.has_weight and self.normalization == "cp" and self.rank < 1:
            raise ValueError(f"{self.name}: cp normalization needs rank >= 1")

    @property
    def has_weight(self) -> bool:
        return self.kind in ("conv2d", "linear")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        """Internal weight layout: (out, in, kh, kw) or (out, in)."""
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        return ()

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def table_shape(spec: LayerSpec) -> str:
    """Layer size as tabulated: in x out (x k x k)."""
    s = spec.weight_shape
    return "x".join(str(d) for d in (s[1], s[0]) + tuple(s[2:]))


def _conv(name, cin, cout, padding=0):
    return LayerSpec("conv2d", name, in_channels=cin, out_channels=cout, kernel_size=3, padding=padding)


def _fc(name, fin, fout):
    return LayerSpec("linear", name, in_features=fin, out_features=fout)


def lenet_specs() -> list[LayerSpec]:
    return [
        _conv("conv1", 1, 32), LayerSpec("relu", "relu1"),
        _conv("conv2", 32, 64), LayerSpec("relu", "relu2"),
        LayerSpec("maxpool", "pool1"),
        LayerSpec("flatten", "flatten"),
        _fc("fc1", 9216, 128), LayerSpec("relu", "relu3"),
        LayerSpec("dropout", "drop1", keep_prob=0.5),
        _fc("fc2", 128, 10),
    ]


def alexnet_specs() -> list[LayerSpec]:
    return [
        _conv("conv1", 3, 64, 1), LayerSpec("relu", "relu1"), LayerSpec("maxpool", "pool1"),
        _conv("conv2", 64, 192, 1), LayerSpec("relu", "relu2"), LayerSpec("maxpool", "pool2"),
        _conv("conv3", 192, 384, 1), LayerSpec("relu", "relu3"),
        _conv("conv4", 384, 256, 1), LayerSpec("relu", "relu4"),
        _conv("conv5", 256, 256, 1), LayerSpec("relu", "relu5"), LayerSpec("maxpool", "pool3"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dropout", "drop1", keep_prob=0.5),
        _fc("fc1", 4096, 1024), LayerSpec("relu", "relu6"),
        LayerSpec("dropout", "drop2", keep_prob=0.5),
        _fc("fc2", 1024, 512), LayerSpec("relu", "relu7"),
        _fc("fc3", 512, 10),
    ]


ARCHITECTURES = {"lenet": (lenet_specs, LENET_RANKS), "alexnet": (alexnet_specs, ALEXNET_RANKS)}


def architecture_specs(
    arch: str, normalization: str = "none", ranks: dict[str, int] | None = None
) -> list[LayerSpec]:
    """Layer specs of a preset with ``normalization`` on every weight layer."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    make, table = ARCHITECTURES[arch]
    ranks = {**table, **(ranks or {})}
    out = []
    for s in make():
        if s.has_weight:
            s = replace(s, normalization=normalization,
                        rank=ranks[s.name] if normalization == "cp" else 0)
        out.append(s)
    return out


class Model:
    """Ordered layers plus the per-sample input shape they were built for."""

    def __init__(self, layers: list[Layer], input_shape: Sequence[int], specs: list[LayerSpec] | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.specs = specs
        self.output_shape(self.input_shape)
        if layers and isinstance(layers[0], Conv2d):
            layers[0].need_input_grad = False

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        """Propagate a per-sample shape; raises ShapeError naming the first incompatible layer."""
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def weight_layers(self) -> list[_WeightLayer]:
        return [l for l in self.layers if isinstance(l, _WeightLayer)]

    def cp_layers(self) -> list[_WeightLayer]:
        return [l for l in self.weight_layers() if l.normalization == "cp"]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{l.name}.{k}", v) for l in self.layers for k, v in l.params.items()]

    def gradients(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{l.name}.{k}", l.grads[k]) for l in self.layers for k in l.params]

    def renormalize(self) -> None:
        for l in self.cp_layers():
            l.param.renormalize(l.name)

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for l in self.layers:
            if isinstance(l, Dropout):
                l.rng = rng

    def current_specs(self) -> list[LayerSpec]:
        """Specs reflecting current ranks (they shrink under truncation)."""
        specs = []
        for s in self.specs:
            if s.has_weight and s.normalization == "cp":
                s = replace(s, rank=self.layer(s.name).param.rank)
            specs.append(s)
        return specs


def param_count(model: Model, include_bias: bool = False) -> int:
    """Trainable scalars: dense elements, CP ``sum_k d_k R + R + 1``, weight-norm elements + 1."""
    total = 0
    for l in model.weight_layers():
        total += l.weight_count()
        if include_bias:
            total += l.bias_count()
    return total


def spec_param_count(specs: Iterable[LayerSpec], include_bias: bool = False) -> int:
    """Closed-form count from specs alone (no allocation)."""
    total = 0
    for s in specs:
        if not s.has_weight:
            continue
        shape = s.weight_shape
        if s.normalization == "cp":
            total += s.rank * sum(shape) + s.rank + 1
        elif s.normalization == "weight":
            total += int(np.prod(shape)) + 1
        else:
            total += int(np.prod(shape))
        if include_bias and s.bias:
            total += shape[0]
    return total


def dense_init(spec: LayerSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Default weight/bias initialisation: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(spec.fan_in)
    w = rng.uniform(-bound, bound, size=spec.weight_shape)
    b = rng.uniform(-bound, bound, size=spec.weight_shape[0])
    return w, b


def make_cp_param(
    spec: LayerSpec,
    dense_w: np.ndarray,
    init: str,
    lambda_init: str,
    seed,
):
    """Initial CP form (unit columns) for one layer."""
    if init == "power":
        cp, rep = cp_power(dense_w, spec.rank, inner_iters=10, seed=seed)
        logger.info("%s: power init rank %d fit %.4f", spec.name, spec.rank, rep.fit)
    elif init == "als":
        cp, rep = cp_als(dense_w, spec.rank, seed=seed)
        logger.info("%s: als init rank %d fit %.4f", spec.name, spec.rank, rep.fit)
    elif init in ("kaiming_normal", "kaiming_uniform"):
        cp = random_cp(dense_w.shape, spec.rank, init, lambda_init, seed=seed)
    else:
        raise ValueError(f"unknown cp init {init!r}; choose from {CP_INITS}")
    return renormalize(cp)


def build_model(
    specs: list[LayerSpec],
    input_shape: Sequence[int],
    init: str = "kaiming_normal",
    lambda_init: str = "ones",
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    """Instantiate layers from specs.

    Every weight layer first receives a dense initialisation; weight-norm
    layers start with ``g = |v|`` and CP layers derive their form from it
    (power/ALS) or draw it directly (Kaiming), with ``sigma = 1``.
    """
    seqs = np.random.SeedSequence(seed).spawn(len(specs) + 1)
    layers: list[Layer] = []
    for spec, ss in zip(specs, seqs):
        rng = np.random.default_rng(ss)
        if spec.has_weight:
            w, b = dense_init(spec, rng)
            if spec.normalization == "none":
                param = DenseWeight(w.astype(dtype))
            elif spec.normalization == "weight":
                param = WeightNormWeight(w.astype(dtype), float(np.linalg.norm(w.ravel())))
            else:
                cp = make_cp_param(spec, w, init, lambda_init, int(rng.integers(2**31)))
                param = CpNormWeight(cp.astype(dtype), 1.0)
            bias = b.astype(dtype) if spec.bias else None
            if spec.kind == "conv2d":
                layers.append(Conv2d(spec.name, param, bias, spec.stride, spec.padding))
            else:
                layers.append(Linear(spec.name, param, bias))
        elif spec.kind == "maxpool":
            layers.append(MaxPool2d(spec.name, 2))
        elif spec.kind == "relu":
            layers.append(ReLU(spec.name))
        elif spec.kind == "dropout":
            layers.append(Dropout(spec.name, spec.keep_prob))
        elif spec.kind == "flatten":
            layers.append(Flatten(spec.name))
    model = Model(layers, input_shape, list(specs))
    model.set_dropout_rng(np.random.default_rng(seqs[-1]))
    return model


def build_architecture(
    arch: str,
    normalization: str = "none",
    ranks: dict[str, int] | None = None,
    init: str = "kaiming_normal",
    lambda_init: str = "ones",
    seed: int = 0,
    dtype=np.float32,
) -> Model:
    specs = architecture_specs(arch, normalization, ranks)
    return build_model(specs, INPUT_SHAPES[arch], init, lambda_init, seed, dtype)


def check_input(model: Model, sample_shape: Sequence[int]) -> None:
    """Raise :class:`ShapeError` naming the first layer incompatible with ``sample_shape``."""
    model.output_shape(tuple(sample_shape))


__all__ = [
    "LayerSpec", "Model", "build_model", "build_architecture", "architecture_specs",
    "param_count", "spec_param_count", "table_shape", "LENET_RANKS", "ALEXNET_RANKS",
    "INPUT_SHAPES", "check_input",
]
