"""Reverse-mode differentiable convolutional generators in plain numpy."""

from .layers import Conv, ConvTranspose, Module, Parameter, ReLU, ResBlock, Sequential, Upsample
from .networks import (DIPUNet, DRUNet, Network, build_dipunet, build_drunet, build_network,
                       check_divisible, load_network, save_network)
from .optim import Adam, NonFiniteGradientError
from .penalties import tv_penalty

__all__ = ["Adam", "Conv", "ConvTranspose", "DIPUNet", "DRUNet", "Module", "Network", "NonFiniteGradientError",
           "Parameter", "ReLU", "ResBlock", "Sequential", "Upsample", "build_dipunet", "build_drunet",
           "build_network", "check_divisible", "load_network", "save_network", "tv_penalty"]
