"""Layer objects with a uniform forward/backward contract.

Weight-bearing layers delegate their weight to a parametrization
(:class:`DenseWeight`, :class:`WeightNormWeight` or :class:`CpNormWeight`).
Every trainable array lives in a layer's ``params`` dict and is updated in
place by the optimizers; ``grads`` mirrors it after ``backward``.
"""

from __future__ import annotations

import numpy as np

from ..cp import CpForm, renormalize
from . import functional as F
from .reparam import (
    CpNormParam,
    WeightNormParam,
    cpnorm_backward,
    cpnorm_weight,
    weightnorm_backward,
    weightnorm_weight,
)


class DenseWeight:
    kind = "none"

    def __init__(self, weight: np.ndarray):
        self.params = {"weight": weight}

    @property
    def shape(self):
        return self.params["weight"].shape

    def weight(self, layer=None) -> np.ndarray:
        return self.params["weight"]

    def backward(self, grad_w, layer=None) -> dict[str, np.ndarray]:
        return {"weight": grad_w}

    def count(self) -> int:
        return int(self.params["weight"].size)


class WeightNormWeight:
    kind = "weight"

    def __init__(self, v: np.ndarray, g: float):
        self.params = {"v": v, "g": np.array([g], dtype=v.dtype)}

    @property
    def shape(self):
        return self.params["v"].shape

    def as_param(self) -> WeightNormParam:
        return WeightNormParam(self.params["v"], float(self.params["g"][0]))

    def weight(self, layer=None):
        return weightnorm_weight(self.as_param())

    def backward(self, grad_w, layer=None):
        gg, gv = weightnorm_backward(self.as_param(), grad_w)
        return {"v": gv, "g": np.array([gg], dtype=grad_w.dtype)}

    def count(self) -> int:
        return int(self.params["v"].size) + 1


class CpNormWeight:
    kind = "cp"

    def __init__(self, cp: CpForm, sigma: float = 1.0):
        dtype = cp.lambdas.dtype
        self.params = {"sigma": np.array([sigma], dtype=dtype), "lambdas": cp.lambdas}
        for k, f in enumerate(cp.factors):
            self.params[f"factor_{k}"] = f
        self.order = cp.order

    @property
    def shape(self):
        return tuple(self.params[f"factor_{k}"].shape[0] for k in range(self.order))

    @property
    def rank(self) -> int:
        return self.params["lambdas"].size

    def as_param(self) -> CpNormParam:
        cp = CpForm([self.params[f"factor_{k}"] for k in range(self.order)], self.params["lambdas"])
        return CpNormParam(cp, float(self.params["sigma"][0]))

    def set_param(self, p: CpNormParam) -> None:
        dtype = self.params["lambdas"].dtype
        self.params["sigma"] = np.array([p.sigma], dtype=dtype)
        self.params["lambdas"] = p.cp.lambdas.astype(dtype, copy=True)
        for k, f in enumerate(p.cp.factors):
            self.params[f"factor_{k}"] = f.astype(dtype, copy=True)
        self.order = p.cp.order

    def weight(self, layer=None):
        return cpnorm_weight(self.as_param(), layer)

    def backward(self, grad_w, layer=None):
        g = cpnorm_backward(self.as_param(), grad_w, layer)
        dtype = grad_w.dtype
        out = {"sigma": np.array([g.sigma], dtype=dtype), "lambdas": g.lambdas.astype(dtype)}
        for k, gf in enumerate(g.factors):
            out[f"factor_{k}"] = gf.astype(dtype)
        return out

    def renormalize(self, layer=None) -> None:
        """Project every factor column back to unit length, in place."""
        cp = renormalize(self.as_param().cp, layer=layer)
        for k, f in enumerate(cp.factors):
            self.params[f"factor_{k}"][...] = f

    def count(self) -> int:
        return sum(d * self.rank for d in self.shape) + self.rank + 1


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.grads: dict[str, np.ndarray] = {}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape


class _WeightLayer(Layer):
    def __init__(self, name, param, bias):
        super().__init__(name)
        self.param = param
        self.bias = bias

    @property
    def normalization(self) -> str:
        return self.param.kind

    @property
    def params(self):
        out = dict(self.param.params)
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def _store_grads(self, grad_w, grad_b):
        self.grads = self.param.backward(grad_w, self.name)
        if grad_b is not None:
            self.grads["bias"] = grad_b

    def weight_count(self) -> int:
        return self.param.count()

    def bias_count(self) -> int:
        return 0 if self.bias is None else int(self.bias.size)


class Conv2d(_WeightLayer):
    kind = "conv2d"

    def __init__(self, name, param, bias=None, stride: int = 1, padding: int = 0):
        super().__init__(name, param, bias)
        self.stride = stride
        self.padding = padding
        # the first layer of a model has no consumer for its input gradient
        self.need_input_grad = True
        self._cache = None

    def forward(self, x, train=False):
        w = self.param.weight(self.name)
        out, self._cache = F.conv2d_forward(x, w, self.bias, self.stride, self.padding)
        return out

    def backward(self, grad):
        gx, gw, gb = F.conv2d_backward(grad, self._cache, self.need_input_grad)
        self._store_grads(gw, gb)
        return gx

    def out_shape(self, in_shape):
        o, c, kh, kw = self.param.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise F.ShapeError(f"layer {self.name!r}: expects input (C={c}, H, W), got {in_shape}")
        h = F.conv_output_size(in_shape[1], kh, self.stride, self.padding)
        w = F.conv_output_size(in_shape[2], kw, self.stride, self.padding)
        if h < 1 or w < 1:
            raise F.ShapeError(f"layer {self.name!r}: kernel does not fit input {in_shape}")
        return (o, h, w)


class Linear(_WeightLayer):
    kind = "linear"

    def __init__(self, name, param, bias=None):
        super().__init__(name, param, bias)
        self._cache = None

    def forward(self, x, train=False):
        w = self.param.weight(self.name)
        out, self._cache = F.linear_forward(x, w, self.bias)
        return out

    def backward(self, grad):
        gx, gw, gb = F.linear_backward(grad, self._cache)
        self._store_grads(gw, gb)
        return gx

    def out_shape(self, in_shape):
        o, i = self.param.shape
        if in_shape != (i,):
            raise F.ShapeError(f"layer {self.name!r}: expects input ({i},), got {in_shape}")
        return (o,)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, name, k: int = 2):
        super().__init__(name)
        self.k = k
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = F.maxpool2d_forward(x, self.k)
        return out

    def backward(self, grad):
        return F.maxpool2d_backward(grad, self._cache)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < self.k or in_shape[2] < self.k:
            raise F.ShapeError(f"layer {self.name!r}: cannot pool input {in_shape}")
        return (in_shape[0], in_shape[1] // self.k, in_shape[2] // self.k)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, grad):
        return F.relu_backward(grad, self._mask)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, keep_prob: float = 0.5, rng: np.random.Generator | None = None):
        super().__init__(name)
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        self.keep_prob = keep_prob
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, train=False):
        out, self._mask = F.dropout_forward(x, self.keep_prob, train, self.rng)
        return out

    def backward(self, grad):
        return F.dropout_backward(grad, self._mask)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)
