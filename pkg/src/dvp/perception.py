"""CNN1 perception network: image -> latent vector."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module

DEFAULT_CHANNELS = (64, 128, 256, 256, 512, 512)


def channel_plan(channels_scale=1.0, n_blocks=6, base=DEFAULT_CHANNELS):
    """Scaled channel plan; blocks past the base plan repeat its last width."""
    widths = list(base[:n_blocks]) + [base[-1]] * max(0, n_blocks - len(base))
    return tuple(max(1, int(round(c * channels_scale))) for c in widths)


class ConvBlock(Module):
    """conv3x3 -> GELU -> avgpool2 -> batch-norm."""

    def __init__(self, c_in, c_out, rng):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x, layout="NCHW"):
        return self.bn(T.avg_pool2d(T.gelu(self.conv(x, layout)), layout), layout)


class Perception(Module):
    def __init__(self, rng, channels=DEFAULT_CHANNELS, latent_dim=256, in_channels=3, image_size=64):
        n = len(channels)
        if image_size != 2**n:
            raise ValueError(f"{n} blocks need a {2**n}x{2**n} input, got image_size={image_size}")
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.image_size = image_size
        c_in = in_channels
        for i, c in enumerate(channels):
            setattr(self, f"block{i}", ConvBlock(c_in, c, rng))
            c_in = c
        self.head = Conv2d(c_in, latent_dim, 1, rng)

    @classmethod
    def from_config(cls, rng, channels_scale=1.0, image_size=64, latent_dim=256):
        n = int(round(np.log2(image_size)))
        return cls(rng, channel_plan(channels_scale, n), latent_dim=latent_dim, image_size=image_size)

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(len(self.channels))]

    def __call__(self, img):
        return cnn1_forward(self, img)


def cnn1_forward(p: Perception, img):
    """``[B, 3, H, W]`` -> ``[B, latent_dim, 1, 1]``; the 1x1 read-out has no activation."""
    x = T.as_tensor(img)
    if x.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] input, got {x.shape}")
    c_in = p.blocks[0].conv.weight.shape[1]
    if x.shape[1] != c_in:
        raise ValueError(f"expected {c_in} input channels, got {x.shape}")
    # channels-last inside the stack
    x = T.transpose(x, (0, 2, 3, 1))
    for blk in p.blocks:
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ValueError(f"spatial size {x.shape[1:3]} not divisible by 2")
        x = blk(x, "NHWC")
    return T.transpose(p.head(x, "NHWC"), (0, 3, 1, 2))


def perceive(p: Perception, img):
    """Latent ``[B, latent_dim]``."""
    y = cnn1_forward(p, img)
    return T.reshape(y, (y.shape[0], -1))
