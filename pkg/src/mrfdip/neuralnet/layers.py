"""Layers with hand-written forward/backward passes.

Tensors are numpy arrays shaped ``(1, channels, *spatial)`` with 2 or 3
spatial dims.  ``forward`` caches what ``backward`` needs; ``backward``
takes the gradient of a scalar with respect to the output, accumulates
parameter gradients into ``Parameter.grad`` and returns the gradient with
respect to the input.  Caches are released after ``backward``.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Parameter:
    """A named trainable array with a gradient buffer of the same shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Module:
    """Base class; subclasses list their parameters and children."""

    name = ""

    def parameters(self) -> list[Parameter]:
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _cached(self, attr: str):
        val = getattr(self, attr, None)
        if val is None:
            raise RuntimeError(f"{type(self).__name__} {self.name!r}: backward called without stored "
                               "activations (run forward first)")
        setattr(self, attr, None)
        return val


def _spatial(x) -> tuple[int, ...]:
    if x.ndim not in (4, 5) or x.shape[0] != 1:
        raise ValueError(f"expected a (1, C, *spatial) tensor with 2 or 3 spatial dims, got {x.shape}")
    return x.shape[2:]


def kaiming_uniform(rng, shape, fan_in: int, dtype, a: float = np.sqrt(5.0)) -> np.ndarray:
    """Kaiming-uniform with leaky slope ``a``; the default gives ``bound = 1 / sqrt(fan_in)``."""
    bound = np.sqrt(6.0 / ((1 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Module):
    """Cross-correlation with kernel ``k`` per axis, stride and zero padding.

    ``padding=None`` means ``(k - 1) // 2`` (size preserving for odd k at
    stride 1).  The weight is ``(c_out, c_in, *[k] * d)``.
    """

    def __init__(self, c_in: int, c_out: int, ndim: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, bias: bool = True, rng=None, dtype=np.float32,
                 name: str = "conv"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.c_in, self.c_out, self.ndim = c_in, c_out, ndim
        self.kernel, self.stride = kernel, stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = c_in * kernel**ndim
        self.weight = Parameter(f"{name}.weight",
                                kaiming_uniform(rng, (c_out, c_in) + (kernel,) * ndim, fan_in, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype)) if bias else None
        self._patches = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def _out_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x):
        sp = _spatial(x)
        if x.shape[1] != self.c_in or len(sp) != self.ndim:
            raise ValueError(f"{self.name}: expected {self.c_in} channels and {self.ndim} spatial dims, "
                             f"got {x.shape}")
        d, k, s, p = self.ndim, self.kernel, self.stride, self.padding
        xp = np.pad(x[0], [(0, 0)] + [(p, p)] * d) if p else x[0]
        win = sliding_window_view(xp, (k,) * d, axis=tuple(range(1, d + 1)))
        win = win[(slice(None),) + (slice(None, None, s),) * d]           # (Cin, *So, *k)
        out_sp = win.shape[1:1 + d]
        order = tuple(range(1, d + 1)) + (0,) + tuple(range(d + 1, 2 * d + 1))
        patches = np.ascontiguousarray(win.transpose(order)).reshape(int(np.prod(out_sp)), -1)
        out = patches @ self.weight.value.reshape(self.c_out, -1).T       # (No, Cout)
        if self.bias is not None:
            out += self.bias.value
        self._patches = patches
        self._in_shape = x.shape
        self._out_sp = out_sp
        return out.T.reshape((1, self.c_out) + out_sp)

    def backward(self, g):
        patches = self._cached("_patches")
        d, k, s, p = self.ndim, self.kernel, self.stride, self.padding
        gm = g[0].reshape(self.c_out, -1)                                  # (Cout, No)
        self.weight.grad += (gm @ patches).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += gm.sum(axis=1)
        gp = (gm.T @ self.weight.value.reshape(self.c_out, -1))           # (No, Cin*k^d)
        gp = gp.reshape(self._out_sp + (self.c_in,) + (k,) * d)
        in_sp = self._in_shape[2:]
        gx = np.zeros((self.c_in,) + tuple(n + 2 * p for n in in_sp), dtype=g.dtype)
        for off in itertools.product(range(k), repeat=d):
            dst = (slice(None),) + tuple(slice(o, o + s * (n - 1) + 1, s) for o, n in zip(off, self._out_sp))
            gx[dst] += np.moveaxis(gp[(slice(None),) * (d + 1) + off], d, 0)
        if p:
            gx = gx[(slice(None),) + (slice(p, -p),) * d]
        return gx[None]


class ConvTranspose(Module):
    """Transposed convolution with kernel = stride (non-overlapping taps).

    Weight ``(c_in, c_out, *[k] * d)``; each input voxel paints a ``k^d``
    block of the output.
    """

    def __init__(self, c_in: int, c_out: int, ndim: int, kernel: int = 2, bias: bool = True, rng=None,
                 dtype=np.float32, name: str = "convT"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.c_in, self.c_out, self.ndim, self.kernel = c_in, c_out, ndim, kernel
        self.weight = Parameter(f"{name}.weight",
                                kaiming_uniform(rng, (c_in, c_out) + (kernel,) * ndim, c_in, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype)) if bias else None
        self._x = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        sp = _spatial(x)
        if x.shape[1] != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {x.shape[1]}")
        d, k = self.ndim, self.kernel
        blocks = self.weight.value.reshape(self.c_in, -1).T @ x[0].reshape(self.c_in, -1)
        blocks = blocks.reshape((self.c_out,) + (k,) * d + sp)               # (Co, *k, *S)
        # interleave: axis order (Co, S0, k0, S1, k1, ...)
        order = (0,) + tuple(a for i in range(d) for a in (1 + d + i, 1 + i))
        out = blocks.transpose(order).reshape((self.c_out,) + tuple(n * k for n in sp))
        if self.bias is not None:
            out = out + self.bias.value.reshape((-1,) + (1,) * d)
        self._x = x
        return out[None]

    def backward(self, g):
        x = self._cached("_x")
        d, k = self.ndim, self.kernel
        sp = x.shape[2:]
        gb = g[0].reshape((self.c_out,) + tuple(a for n in sp for a in (n, k)))
        order = (0,) + tuple(2 + 2 * i for i in range(d)) + tuple(1 + 2 * i for i in range(d))
        gb = gb.transpose(order).reshape(self.c_out * k**d, -1)            # (Co*k^d, N)
        xm = x[0].reshape(self.c_in, -1)
        self.weight.grad += (xm @ gb.T).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += g[0].reshape(self.c_out, -1).sum(axis=1)
        gx = self.weight.value.reshape(self.c_in, -1) @ gb
        return gx.reshape(x.shape)


class ReLU(Module):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._cached("_mask"), g, 0).astype(g.dtype, copy=False)


def _linear_up_axis(x, axis):
    """2x linear upsampling along one axis, half-pixel centers, edge replicate."""
    n = x.shape[axis]
    idx = np.arange(n)
    prev = np.take(x, np.maximum(idx - 1, 0), axis=axis)
    nxt = np.take(x, np.minimum(idx + 1, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(x.dtype, copy=False)


def _linear_up_axis_adjoint(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * (ge + go)
    # prev (i-1 clamped) received 0.25 * ge[i]; next (i+1 clamped) received 0.25 * go[i]
    sl = lambda a, b: tuple([slice(None)] * axis + [slice(a, b)])
    out[sl(0, n - 1)] += 0.25 * ge[sl(1, n)]
    out[sl(0, 1)] += 0.25 * np.take(ge, [0], axis=axis)
    out[sl(1, n)] += 0.25 * go[sl(0, n - 1)]
    out[sl(n - 1, n)] += 0.25 * np.take(go, [n - 1], axis=axis)
    return out.astype(g.dtype, copy=False)


class Upsample(Module):
    """2x upsampling, ``mode`` in {"nearest", "linear"}.

    "linear" is bilinear in 2-D and trilinear in 3-D (separable, half-pixel
    aligned, replicate boundary), so affine inputs are reproduced exactly
    away from the border.
    """

    def __init__(self, mode: str = "linear", name: str = "up"):
        if mode in ("bilinear", "trilinear"):
            mode = "linear"
        if mode not in ("nearest", "linear"):
            raise ValueError(f"unknown upsampling mode {mode!r}")
        self.mode = mode
        self.name = name
        self._shape = None

    def forward(self, x):
        sp = _spatial(x)
        self._shape = x.shape
        out = x
        for ax in range(2, 2 + len(sp)):
            out = np.repeat(out, 2, axis=ax) if self.mode == "nearest" else _linear_up_axis(out, ax)
        return out

    def backward(self, g):
        shape = self._cached("_shape")
        for ax in range(2, len(shape)):
            if self.mode == "nearest":
                s = list(g.shape)
                s[ax:ax + 1] = [s[ax] // 2, 2]
                g = g.reshape(s).sum(axis=ax + 1)
            else:
                g = _linear_up_axis_adjoint(g, ax)
        return g


class Sequential(Module):
    def __init__(self, *layers, name: str = "seq"):
        self.layers = list(layers)
        self.name = name

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class ResBlock(Module):
    """``x + conv(relu(conv(x)))``."""

    def __init__(self, channels: int, ndim: int, bias: bool = True, rng=None, dtype=np.float32,
                 name: str = "res"):
        self.name = name
        self.body = Sequential(Conv(channels, channels, ndim, bias=bias, rng=rng, dtype=dtype, name=f"{name}.conv1"),
                               ReLU(f"{name}.relu"),
                               Conv(channels, channels, ndim, bias=bias, rng=rng, dtype=dtype, name=f"{name}.conv2"),
                               name=name)

    def parameters(self):
        return self.body.parameters()

    def forward(self, x):
        return x + self.body.forward(x)

    def backward(self, g):
        return g + self.body.backward(g)
