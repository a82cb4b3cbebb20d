"""Layers and the sequential fully convolutional model.

Activations are NHWC arrays. Every layer supports two padding modes:
``"reflect"`` keeps the spatial size by reflection-padding each convolution, and
``"valid"`` shrinks the output by ``kernel - 1`` per convolution. Both give the
same values wherever the receptive field stays inside the input, which lets
training on patches skip the border work that cannot reach the center pixel.
"""

from __future__ import annotations

import numpy as np

from ..grid import iterate_tiles

POWER_EPS = 1e-6


def reflect_pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect")


def reflect_pad_adjoint(g, p):
    """Fold the gradient of a reflection-padded array back onto the interior."""
    if p == 0:
        return g
    h = g.shape[1] - 2 * p
    w = g.shape[2] - 2 * p
    rows = g[:, p:p + h].copy()
    for i in range(1, p + 1):
        rows[:, i] += g[:, p - i]
        rows[:, h - 1 - i] += g[:, p + h - 1 + i]
    out = rows[:, :, p:p + w].copy()
    for i in range(1, p + 1):
        out[:, :, i] += rows[:, :, p - i]
        out[:, :, w - 1 - i] += rows[:, :, p + w - 1 + i]
    return out


class Layer:
    kind = "layer"
    # number of pixels lost per side in valid mode
    shrink = 0

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.grads = {}
        self._cache = None
        return self

    def config(self):
        return {"kind": self.kind}


class Conv2D(Layer):
    """Stride-1 convolution (3x3 or 1x1) with a fused activation."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, activation="relu", rng=None, dtype=np.float32):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.kernel = kernel
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.activation = activation
        self.shrink = kernel // 2
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = kernel * kernel * in_ch
        gain = 2.0 if activation == "relu" else 1.0
        w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(kernel, kernel, in_ch, out_ch))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_ch, dtype=dtype)}

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "activation": self.activation}

    def forward(self, x, padding="reflect"):
        if x.shape[-1] != self.in_ch:
            raise ValueError(f"channel mismatch: layer expects {self.in_ch}, got {x.shape[-1]}")
        k = self.kernel
        p = k // 2
        xp = reflect_pad(x, p) if padding == "reflect" else x
        n, hp, wp, c = xp.shape
        ho, wo = hp - k + 1, wp - k + 1
        if ho < 1 or wo < 1:
            raise ValueError("input smaller than kernel")
        if k == 1:
            cols = xp.reshape(-1, c)
        else:
            cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
            cols = cols.reshape(-1, k * k * c)
        w = self.params["weight"]
        z = cols @ w.reshape(-1, self.out_ch) + self.params["bias"]
        out = np.maximum(z, 0) if self.activation == "relu" else z
        self._cache = (cols, z, xp.shape, padding)
        return out.reshape(n, ho, wo, self.out_ch)

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        cols, z, pshape, padding = self._cache
        k, c = self.kernel, self.in_ch
        g2 = g.reshape(-1, self.out_ch)
        if self.activation == "relu":
            g2 = g2 * (z > 0)
        w = self.params["weight"]
        self.grads["weight"] = self.grads.get("weight", 0) + (cols.T @ g2).reshape(w.shape)
        self.grads["bias"] = self.grads.get("bias", 0) + g2.sum(axis=0)
        gcols = g2 @ w.reshape(-1, self.out_ch).T
        n, hp, wp, _ = pshape
        ho, wo = hp - k + 1, wp - k + 1
        if k == 1:
            gx = gcols.reshape(n, hp, wp, c)
        else:
            gcols = gcols.reshape(n, ho, wo, k, k, c)
            gx = np.zeros(pshape, dtype=gcols.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
        if padding == "reflect":
            gx = reflect_pad_adjoint(gx, k // 2)
        return gx


class ResidualBlock(Layer):
    """``x + conv_b(relu(conv_a(x)))`` with two 3x3 convolutions of equal width."""

    kind = "residual"
    shrink = 2

    def __init__(self, width, rng=None, dtype=np.float32):
        super().__init__()
        self.width = width
        self.conv_a = Conv2D(width, width, 3, "relu", rng, dtype)
        self.conv_b = Conv2D(width, width, 3, "identity", rng, dtype)
        # the residual branch starts small so deep stacks begin near identity
        self.conv_b.params["weight"] *= 0.1
        self._sync_params()

    def _sync_params(self):
        self.params = {f"a.{k}": v for k, v in self.conv_a.params.items()}
        self.params.update({f"b.{k}": v for k, v in self.conv_b.params.items()})

    def _push_params(self):
        self.conv_a.params = {k[2:]: v for k, v in self.params.items() if k.startswith("a.")}
        self.conv_b.params = {k[2:]: v for k, v in self.params.items() if k.startswith("b.")}

    def astype(self, dtype):
        super().astype(dtype)
        self._push_params()
        return self

    def config(self):
        return {"kind": self.kind, "width": self.width}

    def forward(self, x, padding="reflect"):
        self._push_params()
        y = self.conv_b.forward(self.conv_a.forward(x, padding), padding)
        skip = x if padding == "reflect" else x[:, 2:-2, 2:-2, :]
        self._cache = (x.shape, padding)
        return skip + y

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        xshape, padding = self._cache
        self.conv_a.grads, self.conv_b.grads = {}, {}
        gx = self.conv_a.backward(self.conv_b.backward(g))
        if padding == "reflect":
            gx = gx + g
        else:
            gx = gx.copy()
            gx[:, 2:-2, 2:-2, :] += g
        for name, sub in (("a", self.conv_a), ("b", self.conv_b)):
            for k, v in sub.grads.items():
                key = f"{name}.{k}"
                self.grads[key] = self.grads.get(key, 0) + v
        return gx


class PowerLaw(Layer):
    """Elementwise ``a * max(x, eps) ** b`` with trainable positive ``a`` and ``b``."""

    kind = "powerlaw"

    def __init__(self, a=1.0, b=1.0, dtype=np.float32):
        super().__init__()
        self.params = {"a": np.array([a], dtype=dtype), "b": np.array([b], dtype=dtype)}

    def forward(self, x, padding="reflect"):
        a, b = self.params["a"][0], self.params["b"][0]
        xc = np.maximum(x, POWER_EPS)
        xb = xc ** b
        self._cache = (x, xc, xb)
        return a * xb

    def backward(self, g):
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        x, xc, xb = self._cache
        a, b = self.params["a"][0], self.params["b"][0]
        ga = np.sum(g * xb, dtype=np.float64)
        gb = np.sum(g * a * xb * np.log(xc), dtype=np.float64)
        dt = self.params["a"].dtype
        self.grads["a"] = self.grads.get("a", 0) + np.array([ga], dtype=dt)
        self.grads["b"] = self.grads.get("b", 0) + np.array([gb], dtype=dt)
        return g * (a * b * xc ** (b - 1)) * (x > POWER_EPS)

    def project(self):
        for k in ("a", "b"):
            np.maximum(self.params[k], 1e-4, out=self.params[k])


def build_layer(cfg, dtype=np.float32):
    kind = cfg["kind"]
    if kind == "conv":
        return Conv2D(cfg["in_ch"], cfg["out_ch"], cfg["kernel"], cfg["activation"], dtype=dtype)
    if kind == "residual":
        return ResidualBlock(cfg["width"], dtype=dtype)
    if kind == "powerlaw":
        return PowerLaw(dtype=dtype)
    raise ValueError(f"unknown layer kind {kind!r}")


class Model:
    """Ordered layer stack with fixed input/output standardization.

    The network works in standardized units: inputs are ``(x - input_shift) *
    input_scale`` per channel and the first output head is de-standardized as
    ``y * output_scale + output_shift``. With a ``log_variance`` head the second
    output channel is the log-variance in standardized units.
    """

    def __init__(self, layers, heads=("mean",), input_shift=None, input_scale=None,
                 output_shift=0.0, output_scale=1.0):
        self.layers = list(layers)
        self.heads = tuple(heads)
        if self.heads not in (("mean",), ("mean", "log_variance")):
            raise ValueError(f"unsupported heads {heads}")
        n_in = self.in_channels
        self.input_shift = np.zeros(n_in) if input_shift is None else np.asarray(input_shift, dtype=np.float64)
        self.input_scale = np.ones(n_in) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
        self.output_shift = float(output_shift)
        self.output_scale = float(output_scale)
        self._forwarded = False

    @property
    def in_channels(self):
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                return layer.in_ch
            if isinstance(layer, ResidualBlock):
                return layer.width
        return 1

    @property
    def receptive_field(self):
        n3 = 0
        for layer in self.layers:
            if isinstance(layer, Conv2D) and layer.kernel == 3:
                n3 += 1
            elif isinstance(layer, ResidualBlock):
                n3 += 2
        return 1 + 2 * n3

    @property
    def shrink(self):
        return sum(layer.shrink for layer in self.layers)

    @property
    def dtype(self):
        for layer in self.layers:
            for v in layer.params.values():
                return v.dtype
        return np.dtype(np.float32)

    def parameters(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def set_parameters(self, params):
        for i, layer in enumerate(self.layers):
            for k in list(layer.params):
                layer.params[k] = np.array(params[f"{i}.{k}"], dtype=layer.params[k].dtype)
            if isinstance(layer, ResidualBlock):
                layer._push_params()

    def copy_parameters(self):
        return {k: v.copy() for k, v in self.parameters().items()}

    def n_parameters(self):
        return sum(v.size for v in self.parameters().values())

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self._forwarded = False
        return self

    def normalize(self, x):
        return ((x - self.input_shift) * self.input_scale).astype(self.dtype)

    def forward(self, x, padding="reflect"):
        """Forward pass on standardized input; caches activations for backward."""
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, padding)
        self._forwarded = True
        return x

    def backward(self, upstream):
        """Reverse-mode pass; returns gradients keyed like :meth:`parameters`."""
        if not self._forwarded:
            raise RuntimeError("backward called without a cached forward pass")
        for layer in self.layers:
            layer.grads = {}
        g = np.asarray(upstream, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        grads = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                gk = layer.grads.get(k)
                grads[f"{i}.{k}"] = np.zeros_like(v) if gk is None else np.asarray(gk, dtype=v.dtype).reshape(v.shape)
        return grads

    def project(self):
        for layer in self.layers:
            if isinstance(layer, PowerLaw):
                layer.project()

    def denormalize(self, out):
        """Map raw network output (..., heads) to physical mean and variance."""
        out = out.astype(np.float64)
        mean = out[..., 0] * self.output_scale + self.output_shift
        if len(self.heads) == 1:
            return mean, None
        var = np.exp(out[..., 1]) * self.output_scale ** 2
        return mean, var

    def predict_array(self, x, tile=256, overlap=None, dtype=np.float64):
        """Dense inference on an ``(H, W, C)`` array in physical units.

        Runs window by window (see :func:`hcsmap.grid.iterate_tiles`) in reflect
        mode. ``overlap`` must cover the receptive-field radius for the result to
        be independent of the tiling. Returns ``(mean, variance or None)``.
        """
        radius = self.receptive_field // 2
        overlap = radius if overlap is None else overlap
        if overlap < radius:
            raise ValueError(f"overlap {overlap} below receptive-field radius {radius}")
        h, w, c = x.shape
        if c != self.in_channels:
            raise ValueError(f"band mismatch: model expects {self.in_channels}, got {c}")
        saved = self.dtype
        self.astype(dtype)
        try:
            xn = self.normalize(x)
            out = np.zeros((h, w, len(self.heads)), dtype=np.float64)
            for win in iterate_tiles((h, w), max(tile, 2 * overlap + 1), overlap):
                y = self.forward(xn[None, win.row0:win.row1, win.col0:win.col1, :])[0]
                rs, cs = win.core_in_window
                out[win.core_row0:win.core_row1, win.core_col0:win.core_col1] = y[rs, cs]
        finally:
            self.astype(saved)
        return self.denormalize(out)


def canopy_net(in_bands=12, width=64, blocks=8, seed=0, dtype=np.float32):
    """Stem 3x3 conv, ``blocks`` residual blocks, 1x1 regression head."""
    rng = np.random.default_rng(seed)
    layers = [Conv2D(in_bands, width, 3, "relu", rng, dtype)]
    layers += [ResidualBlock(width, rng, dtype) for _ in range(blocks)]
    layers.append(Conv2D(width, 1, 1, "identity", rng, dtype))
    return Model(layers, ("mean",))


def carbon_net(width=32, depth=7, power_law=False, seed=0, dtype=np.float32):
    """``depth`` 3x3 relu convolutions and a 1x1 mean/log-variance head."""
    rng = np.random.default_rng(seed)
    layers = [PowerLaw(dtype=dtype)] if power_law else []
    layers.append(Conv2D(1, width, 3, "relu", rng, dtype))
    layers += [Conv2D(width, width, 3, "relu", rng, dtype) for _ in range(depth - 1)]
    layers.append(Conv2D(width, 2, 1, "identity", rng, dtype))
    return Model(layers, ("mean", "log_variance"))
