"""Layer objects wrapping the kernels with parameters and forward caches."""
from __future__ import annotations

import numpy as np

from . import kernels as K
from .kernels import ShapeError


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"
    # affine in inference mode (DeepLIFT uses the linear rule)
    linear = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def input_grad(self, grad: np.ndarray, in_shape: tuple) -> np.ndarray:
        """Transpose of the inference-mode linear part (linear layers only).

        ``in_shape`` is the per-sample input shape of the layer.
        """
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, cin, cout, kernel, padding="same", use_bias=False, rng=None):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel = tuple(kernel)
        self.padding = padding
        self.use_bias = use_bias
        kh, kw = self.kernel
        rng = rng or np.random.default_rng(0)
        self.params["w"] = he_uniform(rng, (cout, cin, kh, kw), cin * kh * kw)
        if use_bias:
            self.params["b"] = np.zeros(cout)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.cin:
            raise ShapeError(f"conv2d expects {self.cin} input channels, got {c}")
        kh, kw = self.kernel
        if self.padding == "same":
            return (self.cout, h, w)
        if kh > h or kw > w:
            raise ShapeError(f"conv2d kernel {self.kernel} exceeds input ({h},{w})")
        return (self.cout, h - kh + 1, w - kw + 1)

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return K.conv2d(x, self.params["w"], self.params.get("b"), self.padding)

    def backward(self, grad, need_input_grad=True):
        dx, dw, db = K.conv2d_backward(self._cache, self.params["w"], grad, self.padding, need_input_grad)
        self.grads["w"] = dw
        if self.use_bias:
            self.grads["b"] = db
        return dx

    def input_grad(self, grad, in_shape):
        return K.conv2d_input_grad(grad, self.params["w"], in_shape[1:], self.padding)

    def spec(self):
        return {"kind": self.kind, "cin": self.cin, "cout": self.cout, "kernel": list(self.kernel),
                "padding": self.padding, "use_bias": self.use_bias}


class DepthwiseConv2D(Layer):
    kind = "depthwise"

    def __init__(self, channels, multiplier, kernel, padding="valid", rng=None):
        super().__init__()
        if multiplier < 1:
            raise ValueError("depth multiplier must be >= 1")
        self.channels, self.multiplier = channels, multiplier
        self.kernel = tuple(kernel)
        self.padding = padding
        kh, kw = self.kernel
        rng = rng or np.random.default_rng(0)
        self.params["w"] = he_uniform(rng, (channels, multiplier, kh, kw), kh * kw)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.channels:
            raise ShapeError(f"depthwise expects {self.channels} channels, got {c}")
        kh, kw = self.kernel
        out_c = c * self.multiplier
        if self.padding == "same":
            return (out_c, h, w)
        if kh > h or kw > w:
            raise ShapeError(f"depthwise kernel {self.kernel} exceeds input ({h},{w})")
        return (out_c, h - kh + 1, w - kw + 1)

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return K.depthwise_conv2d(x, self.params["w"], self.padding)

    def backward(self, grad, need_input_grad=True):
        dx, dw = K.depthwise_conv2d_backward(self._cache, self.params["w"], grad, self.padding,
                                             need_input_grad)
        self.grads["w"] = dw
        return dx

    def input_grad(self, grad, in_shape):
        return K.depthwise_input_grad(grad, self.params["w"], in_shape[1:], self.padding)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "multiplier": self.multiplier,
                "kernel": list(self.kernel), "padding": self.padding}


class SeparableConv2D(Layer):
    kind = "separable"

    def __init__(self, channels, cout, kernel, padding="same", rng=None):
        super().__init__()
        self.channels, self.cout = channels, cout
        self.kernel = tuple(kernel)
        self.padding = padding
        kh, kw = self.kernel
        rng = rng or np.random.default_rng(0)
        self.params["depth"] = he_uniform(rng, (channels, 1, kh, kw), kh * kw)
        self.params["point"] = he_uniform(rng, (cout, channels, 1, 1), channels)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.channels:
            raise ShapeError(f"separable conv expects {self.channels} channels, got {c}")
        kh, kw = self.kernel
        if self.padding == "same":
            return (self.cout, h, w)
        if kh > h or kw > w:
            raise ShapeError(f"separable kernel {self.kernel} exceeds input ({h},{w})")
        return (self.cout, h - kh + 1, w - kw + 1)

    def forward(self, x, train=False, rng=None):
        mid = K.depthwise_conv2d(x, self.params["depth"], self.padding)
        self._cache = (x, mid)
        return K.conv2d(mid, self.params["point"], None, "valid")

    def backward(self, grad, need_input_grad=True):
        x, mid = self._cache
        dmid, dpoint, _ = K.conv2d_backward(mid, self.params["point"], grad, "valid")
        dx, ddepth = K.depthwise_conv2d_backward(x, self.params["depth"], dmid, self.padding,
                                                 need_input_grad)
        self.grads["depth"] = ddepth
        self.grads["point"] = dpoint
        return dx

    def input_grad(self, grad, in_shape):
        dmid = K.conv2d_input_grad(grad, self.params["point"], grad.shape[2:], "valid")
        return K.depthwise_input_grad(dmid, self.params["depth"], in_shape[1:], self.padding)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "cout": self.cout,
                "kernel": list(self.kernel), "padding": self.padding}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, channels, momentum=K.BN_MOMENTUM, eps=K.BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.params["scale"] = np.ones(channels)
        self.params["shift"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.update_running = True

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"batch norm expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, train=False, rng=None):
        p, b = self.params, self.buffers
        if train:
            y, cache, rm, rv = K.batch_norm_train(x, p["scale"], p["shift"], b["running_mean"],
                                                  b["running_var"], self.momentum, self.eps)
            if self.update_running:
                b["running_mean"], b["running_var"] = rm, rv
            self._cache = ("train", cache)
            return y
        self._cache = ("infer", x)
        return K.batch_norm_infer(x, p["scale"], p["shift"], b["running_mean"], b["running_var"], self.eps)

    def backward(self, grad, need_input_grad=True):
        mode, cache = self._cache
        if mode == "train":
            dx, dscale, dshift = K.batch_norm_train_backward(grad, cache, self.params["scale"])
        else:
            dx, dscale, dshift = K.batch_norm_infer_backward(grad, cache, self.params["scale"],
                                                             self.buffers["running_mean"],
                                                             self.buffers["running_var"], self.eps)
        self.grads["scale"] = dscale
        self.grads["shift"] = dshift
        return dx

    def input_grad(self, grad, in_shape):
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        gain = (self.params["scale"] * inv_std).reshape((1, -1) + (1,) * (grad.ndim - 2))
        return grad * gain

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class ELU(Layer):
    kind = "elu"
    linear = False

    def forward(self, x, train=False, rng=None):
        y = K.elu(x)
        self._cache = (x, y)
        return y

    def backward(self, grad, need_input_grad=True):
        x, y = self._cache
        return grad * K.elu_grad(x, y)


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, pool):
        super().__init__()
        self.pool = tuple(pool)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        try:
            ho, wo = K.pool_output_hw(h, w, self.pool)
        except ShapeError as err:
            raise ShapeError(f"avg pool {self.pool} on ({c},{h},{w}): {err}") from None
        return (c, ho, wo)

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return K.avg_pool2d(x, self.pool)

    def backward(self, grad, need_input_grad=True):
        return K.avg_pool2d_backward(grad, self._cache, self.pool)

    def input_grad(self, grad, in_shape):
        return K.avg_pool2d_backward(grad, in_shape, self.pool)

    def spec(self):
        return {"kind": self.kind, "pool": list(self.pool)}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0 or rng is None:
            self._cache = None
            return x
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad, need_input_grad=True):
        return grad if self._cache is None else grad * self._cache

    def input_grad(self, grad, in_shape):
        return grad

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        return grad.reshape(self._cache)

    def input_grad(self, grad, in_shape):
        return grad.reshape((grad.shape[0],) + tuple(in_shape))


class Dense(Layer):
    kind = "dense"

    def __init__(self, din, dout, rng=None):
        super().__init__()
        self.din, self.dout = din, dout
        rng = rng or np.random.default_rng(0)
        self.params["w"] = he_uniform(rng, (din, dout), din)
        self.params["b"] = np.zeros(dout)

    def output_shape(self, in_shape):
        if in_shape != (self.din,):
            raise ShapeError(f"dense expects input ({self.din},), got {in_shape}")
        return (self.dout,)

    def forward(self, x, train=False, rng=None):
        self._cache = x
        return K.dense(x, self.params["w"], self.params["b"])

    def backward(self, grad, need_input_grad=True):
        dx, dw, db = K.dense_backward(self._cache, self.params["w"], grad)
        self.grads["w"] = dw
        self.grads["b"] = db
        return dx

    def input_grad(self, grad, in_shape):
        return grad @ self.params["w"].T

    def spec(self):
        return {"kind": self.kind, "din": self.din, "dout": self.dout}


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, DepthwiseConv2D, SeparableConv2D, BatchNorm, ELU, AvgPool, Dropout, Flatten, Dense)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    cls = LAYER_TYPES[kind]
    if kind in ("elu", "flatten"):
        return cls()
    return cls(**spec)


def trace_shapes(layers, input_shape) -> list[tuple]:
    """Per-sample shape after every layer; a mismatch raises with the dimension trace so far."""
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        try:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        except ShapeError as err:
            trace = " -> ".join(str(s) for s in shapes)
            raise ShapeError(f"layer {i} ({layer!r}) rejects shape {shapes[-1]}: {err}; "
                             f"trace: {trace}") from None
    return shapes


class Model:
    """Ordered layer stack mapping a (17, 87) AU matrix to a single logit.

    Adjacent layer shapes are validated on construction.
    """

    def __init__(self, layers: list[Layer], input_shape=(1, 17, 87), config: dict | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.config = dict(config or {})
        self.trained = False
        self.shapes = self._trace_shapes()
        if self.shapes[-1] != (1,):
            raise ShapeError(f"model must end in a single logit, final shape {self.shapes[-1]}")

    def _trace_shapes(self) -> list[tuple]:
        return trace_shapes(self.layers, self.input_shape)

    # -- parameters --------------------------------------------------------
    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"{i}.{name}", layer, name, arr

    def n_params(self) -> int:
        return sum(arr.size for *_, arr in self.named_params())

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in {**layer.params, **layer.buffers}.items():
                out[f"{i}.{name}"] = arr.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    arr = np.asarray(state[f"{i}.{name}"], dtype=np.float64)
                    if arr.shape != store[name].shape:
                        raise ShapeError(f"state {i}.{name} has shape {arr.shape}, "
                                         f"expected {store[name].shape}")
                    store[name] = arr.copy()

    # -- computation -------------------------------------------------------
    def _prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        c, h, w = self.input_shape
        if X.shape[-2:] != (h, w):
            raise ShapeError(f"expected trials shaped ({h}, {w}), got {X.shape}")
        if X.ndim == 2:
            X = X[None]
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4 or X.shape[1] != c:
            raise ShapeError(f"expected batch (N, {h}, {w}), got {X.shape}")
        return X

    def forward(self, X, train: bool = False, rng=None, keep: bool = False):
        """Logits for a batch (N, 17, 87).

        With ``keep=True`` also returns the list of per-layer inputs.
        """
        a = self._prepare(X)
        inputs = []
        for layer in self.layers:
            if keep:
                inputs.append(a)
            a = layer.forward(a, train=train, rng=rng)
        logits = a[:, 0]
        if keep:
            return logits, inputs
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        """Backpropagate d(loss)/d(logit); fills ``layer.grads``."""
        g = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            # the first layer's input gradient is never needed
            g = self.layers[i].backward(g, need_input_grad=i > 0)

    def predict_proba(self, X, batch_size: int = 512) -> np.ndarray:
        X = self._prepare(X)
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], batch_size):
            out[s:s + batch_size] = K.sigmoid(self.forward(X[s:s + batch_size], train=False))
        return out

    def describe(self) -> str:
        rows = [f"input {self.input_shape}"]
        for layer, shape in zip(self.layers, self.shapes[1:]):
            n = sum(a.size for a in layer.params.values())
            rows.append(f"{layer!r:60s} -> {shape}  params={n}")
        rows.append(f"total params {self.n_params()}")
        return "\n".join(rows)
