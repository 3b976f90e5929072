"""Generator architectures: DRUNet (residual U-Net) and the DIP hourglass U-Net.

Both map ``(1, 2K, *grid)`` to the same shape.  A network keeps an
architecture descriptor (plain ``key = value`` text) so runs can record
and rebuild it.
"""

from __future__ import annotations

import os

import numpy as np

from .. import datastore
from .layers import Conv, ConvTranspose, Module, Parameter, ReLU, ResBlock, Sequential, Upsample


class Network(Module):
    """A generator plus its descriptor; subclasses build ``self`` fields."""

    descriptor: dict

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def descriptor_text(self) -> str:
        return datastore.format_config(self.descriptor)

    def check_input(self, x):
        c = self.descriptor["in_channels"]
        if x.ndim != 2 + self.descriptor["ndim"] or x.shape[:2] != (1, c):
            raise ValueError(f"network expects (1, {c}, *grid) with {self.descriptor['ndim']} spatial dims, "
                             f"got {x.shape}")
        check_divisible(x.shape[2:], self.descriptor["factor"])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:3]}")
        for name, p in params.items():
            val = np.asarray(state[name])
            if val.shape != p.shape:
                raise ValueError(f"{name}: shape {val.shape} != {p.shape}")
            p.value[...] = val


def check_divisible(grid, factor: int):
    for n in grid:
        if n % factor:
            raise ValueError(f"spatial dims {tuple(grid)} not divisible by {factor}")


def _check_channels(channels):
    channels = [int(c) for c in channels]
    if not channels or any(c < 1 for c in channels):
        raise ValueError("channels must be a nonempty list of positive ints")
    if any(b <= a for a, b in zip(channels, channels[1:])):
        raise ValueError(f"channels must be increasing, got {channels}")
    return channels


class DRUNet(Network):
    """Residual U-Net.

    Encoder: per scale ``n_res`` residual blocks then a 2x2(x2) stride-2
    convolution; body: ``n_res`` residual blocks; decoder: 2x transposed
    convolution then ``n_res`` residual blocks, with additive skips from the
    matching encoder scale.  3x3(x3) head and tail convolutions map between
    the 2K data channels and ``channels[0]``.
    """

    def __init__(self, in_channels: int, channels=(16, 32, 64, 128), n_res: int = 2, bias: bool = True,
                 ndim: int = 2, seed: int = 0, dtype=np.float32):
        channels = _check_channels(channels)
        if n_res < 0:
            raise ValueError("n_res must be >= 0")
        rng = np.random.default_rng(seed)
        kw = dict(rng=rng, dtype=dtype)
        self.name = "drunet"
        self.descriptor = {"arch": "drunet", "in_channels": in_channels, "channels": ",".join(map(str, channels)),
                           "n_res": n_res, "bias": int(bias), "ndim": ndim, "down": "conv2x2_stride2",
                           "up": "convT2x2_stride2", "factor": 2 ** (len(channels) - 1), "seed": seed}
        self.head = Conv(in_channels, channels[0], ndim, bias=bias, name="head", **kw)
        self.down = []
        for i in range(len(channels) - 1):
            blocks = [ResBlock(channels[i], ndim, bias, name=f"down{i}.res{j}", **kw) for j in range(n_res)]
            blocks.append(Conv(channels[i], channels[i + 1], ndim, kernel=2, stride=2, padding=0, bias=bias,
                               name=f"down{i}.conv", **kw))
            self.down.append(Sequential(*blocks, name=f"down{i}"))
        self.body = Sequential(*[ResBlock(channels[-1], ndim, bias, name=f"body.res{j}", **kw)
                                 for j in range(n_res)], name="body")
        self.up = []
        for i in reversed(range(len(channels) - 1)):
            blocks = [ConvTranspose(channels[i + 1], channels[i], ndim, bias=bias, name=f"up{i}.convT", **kw)]
            blocks += [ResBlock(channels[i], ndim, bias, name=f"up{i}.res{j}", **kw) for j in range(n_res)]
            self.up.append(Sequential(*blocks, name=f"up{i}"))
        self.tail = Conv(channels[0], in_channels, ndim, bias=bias, name="tail", **kw)

    def parameters(self):
        mods = [self.head, *self.down, self.body, *self.up, self.tail]
        return [p for m in mods for p in m.parameters()]

    def forward(self, x):
        self.check_input(x)
        h = self.head.forward(x)
        skips = [h]
        for m in self.down:
            h = m.forward(h)
            skips.append(h)
        h = self.body.forward(h)
        for m, s in zip(self.up, reversed(skips[1:])):
            h = m.forward(h + s)
        return self.tail.forward(h + skips[0])

    def backward(self, g):
        n = len(self.down)
        g = self.tail.backward(g)
        g_head = g                                   # skip from the head output into the tail
        if n == 0:
            return self.head.backward(g_head + self.body.backward(g))
        g_down = [None] * n                          # gradients w.r.t. each encoder output
        for j in reversed(range(n)):
            g = self.up[j].backward(g)               # up[j] consumed (previous + encoder output n-1-j)
            g_down[n - 1 - j] = g
        g_down[n - 1] = g_down[n - 1] + self.body.backward(g)
        for i in reversed(range(n)):
            g_prev = self.down[i].backward(g_down[i])
            if i:
                g_down[i - 1] = g_down[i - 1] + g_prev
            else:
                g_head = g_head + g_prev
        return self.head.backward(g_head)


class DIPUNet(Network):
    """Hourglass U-Net of the deep-image-prior kind (no residual units).

    Per scale: a 1x1 skip branch (``skip_channels``) from the scale input,
    and a stride-2 3x3 conv + ReLU, 3x3 conv + ReLU going down.  Going up:
    2x upsampling, concatenation with the skip, 3x3 conv + ReLU, 1x1 conv +
    ReLU.  A final 1x1 conv (no activation) maps to the data channels.
    """

    def __init__(self, in_channels: int, channels=(16, 32, 64, 128), upsample: str = "linear",
                 skip_channels: int = 4, bias: bool = True, ndim: int = 2, seed: int = 0, dtype=np.float32):
        channels = _check_channels(channels)
        rng = np.random.default_rng(seed)
        kw = dict(rng=rng, dtype=dtype, bias=bias)
        self.name = "dipunet"
        self.descriptor = {"arch": "dipunet", "in_channels": in_channels, "channels": ",".join(map(str, channels)),
                           "upsample": upsample, "skip_channels": skip_channels, "bias": int(bias), "ndim": ndim,
                           "factor": 2 ** len(channels), "seed": seed}
        self.skips, self.down, self.up = [], [], []
        c_prev = in_channels
        for i, c in enumerate(channels):
            self.skips.append(Sequential(Conv(c_prev, skip_channels, ndim, kernel=1, name=f"skip{i}", **kw),
                                         ReLU(), name=f"skip{i}"))
            self.down.append(Sequential(Conv(c_prev, c, ndim, stride=2, name=f"down{i}.conv1", **kw), ReLU(),
                                        Conv(c, c, ndim, name=f"down{i}.conv2", **kw), ReLU(), name=f"down{i}"))
            c_prev = c
        self.ups = []
        for i in reversed(range(len(channels))):
            c_deep = channels[i] if i == len(channels) - 1 else channels[i + 1]
            self.ups.append(Upsample(upsample, name=f"up{i}.resample"))
            self.up.append(Sequential(Conv(c_deep + skip_channels, channels[i], ndim, name=f"up{i}.conv1", **kw),
                                      ReLU(), Conv(channels[i], channels[i], ndim, kernel=1, name=f"up{i}.conv2", **kw),
                                      ReLU(), name=f"up{i}"))
        self.out = Conv(channels[0], in_channels, ndim, kernel=1, name="out", **kw)

    def parameters(self):
        mods = [*self.skips, *self.down, *self.up, self.out]
        return [p for m in mods for p in m.parameters()]

    def forward(self, x):
        self.check_input(x)
        h = x
        skip_out = []
        for sk, dn in zip(self.skips, self.down):
            skip_out.append(sk.forward(h))
            h = dn.forward(h)
        self._deep_channels = []
        for j, (rs, upm) in enumerate(zip(self.ups, self.up)):
            h = rs.forward(h)
            self._deep_channels.append(h.shape[1])
            h = upm.forward(np.concatenate([h, skip_out[len(self.down) - 1 - j]], axis=1))
        return self.out.forward(h)

    def backward(self, g):
        n = len(self.down)
        g = self.out.backward(g)
        g_skip = [None] * n
        for j in reversed(range(n)):
            g = self.up[j].backward(g)
            c = self._deep_channels[j]
            g_skip[n - 1 - j] = g[:, c:]
            g = self.ups[j].backward(np.ascontiguousarray(g[:, :c]))
        for i in reversed(range(n)):
            g = self.down[i].backward(g) + self.skips[i].backward(g_skip[i])
        return g


def build_drunet(in_channels: int, channels=(16, 32, 64, 128), n_res: int = 2, bias: bool = True,
                 ndim: int = 2, seed: int = 0, dtype=np.float32) -> DRUNet:
    return DRUNet(in_channels, channels, n_res, bias, ndim, seed, dtype)


def build_dipunet(in_channels: int, channels=(16, 32, 64, 128), upsample: str = "trilinear",
                  skip_channels: int = 4, bias: bool = True, ndim: int = 2, seed: int = 0,
                  dtype=np.float32) -> DIPUNet:
    return DIPUNet(in_channels, channels, upsample, skip_channels, bias, ndim, seed, dtype)


def build_network(descriptor: dict, dtype=np.float32) -> Network:
    """Rebuild a network from its descriptor (values may be strings)."""
    arch = str(descriptor["arch"])
    chans = [int(c) for c in str(descriptor["channels"]).split(",")]
    common = dict(bias=bool(int(descriptor.get("bias", 1))), ndim=int(descriptor["ndim"]),
                  seed=int(descriptor.get("seed", 0)), dtype=dtype)
    if arch == "drunet":
        return DRUNet(int(descriptor["in_channels"]), chans, int(descriptor.get("n_res", 2)), **common)
    if arch == "dipunet":
        return DIPUNet(int(descriptor["in_channels"]), chans, str(descriptor.get("upsample", "linear")),
                       int(descriptor.get("skip_channels", 4)), **common)
    raise ValueError(f"unknown architecture {arch!r} (expected drunet or dipunet)")


def save_network(net: Network, directory):
    """Descriptor as ``network.txt`` plus one tensor file per parameter."""
    os.makedirs(directory, exist_ok=True)
    datastore.write_config(os.path.join(directory, "network.txt"), net.descriptor)
    for name, p in net.named_parameters().items():
        datastore.write_tensor(os.path.join(directory, f"{name}.mrft"), p.value)


def load_network(directory, dtype=np.float32) -> Network:
    net = build_network(datastore.read_config(os.path.join(directory, "network.txt")), dtype)
    net.load_state_dict({name: datastore.read_tensor(os.path.join(directory, f"{name}.mrft"))
                         for name in net.named_parameters()})
    return net
