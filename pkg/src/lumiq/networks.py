"""Toy encoder/decoder/discriminator built from the tensor engine.

The encoder halves resolution n_down times and maps to the code
dimension.  The decoder mirrors it with nearest-neighbor upsampling,
fusing the matching encoder skip at every stage through a learned
affine (alpha * F_d + beta).  Prompt injection, when a prompt pyramid is
supplied, happens right after each fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class NetworkConfig:
    base_channels: int = 16
    n_down: int = 2
    code_dim: int = 32
    image_channels: int = 3
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.n_down < 1:
            raise ValueError(f"n_down must be >= 1, got {self.n_down}")
        if min(self.base_channels, self.code_dim, self.image_channels) < 1:
            raise ValueError("channel counts must be positive")


class Conv:
    """3x3 (or kxk) conv layer with fan-in-scaled uniform init."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, pad: int | None = None):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class ResnetBlock:
    """F + conv(act(conv(F))) with channel-preserving 3x3 convs."""

    def __init__(self, rng: np.random.Generator, channels: int, negative_slope: float = 0.2):
        self.conv1 = Conv(rng, channels, channels, 3)
        self.conv2 = Conv(rng, channels, channels, 3)
        self.negative_slope = negative_slope

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.conv1(x), self.negative_slope)
        return ad.add(x, self.conv2(h))

    def named_params(self, prefix: str):
        return self.conv1.named_params(f"{prefix}.conv1") + self.conv2.named_params(f"{prefix}.conv2")


def resnet_block(F: Tensor, params: ResnetBlock) -> Tensor:
    return params(F)


class SkipFusion:
    """Affine skip modulation: alpha, beta from one 3x3 conv over [F_d, F_e].

    The conv starts as the identity affine (alpha = 1, beta = 0) so an
    untrained fusion passes decoder features through unchanged.
    """

    def __init__(self, rng: np.random.Generator, channels: int):
        self.channels = channels
        self.conv = Conv(rng, 2 * channels, 2 * channels, 3)
        self.conv.weight.data[:] = 0.0
        self.conv.bias.data[:channels] = 1.0
        self.conv.bias.data[channels:] = 0.0

    def __call__(self, F_d: Tensor, F_e: Tensor) -> Tensor:
        if F_d.data.shape != F_e.data.shape:
            raise ShapeError(f"skip_fusion: shapes {F_d.data.shape} and {F_e.data.shape} differ")
        both = self.conv(ad.concat_channels(F_d, F_e))
        alpha = ad.slice_channels(both, 0, self.channels)
        beta = ad.slice_channels(both, self.channels, 2 * self.channels)
        return ad.add(ad.mul(alpha, F_d), beta)

    def named_params(self, prefix: str):
        return self.conv.named_params(f"{prefix}.conv")


def skip_fusion(F_d: Tensor, F_e: Tensor, params: SkipFusion) -> Tensor:
    return params(F_d, F_e)


def _set_requires(params, flag: bool) -> None:
    for _, t in params:
        t.requires_grad = flag


class Encoder:
    """n_down stages of (stride-2 conv, leaky-relu, resnet block), then a
    3x3 conv to the code dimension.  Returns per-stage skip features."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.downs: list[Conv] = []
        self.blocks: list[ResnetBlock] = []
        c_in = cfg.image_channels
        for i in range(cfg.n_down):
            c_out = cfg.base_channels * (2 ** i)
            self.downs.append(Conv(rng, c_in, c_out, 3, stride=2))
            self.blocks.append(ResnetBlock(rng, c_out, cfg.negative_slope))
            c_in = c_out
        self.to_code = Conv(rng, c_in, cfg.code_dim, 3)
        self.frozen = False

    def forward(self, I: Tensor) -> tuple[Tensor, list[Tensor]]:
        if I.data.ndim != 4 or I.data.shape[1] != self.cfg.image_channels:
            raise ShapeError(f"encoder expects (b, {self.cfg.image_channels}, h, w), got {I.data.shape}")
        factor = 2 ** self.cfg.n_down
        if I.data.shape[2] % factor or I.data.shape[3] % factor:
            raise ShapeError(f"encoder: spatial dims of {I.data.shape} not divisible by {factor}")
        x = I
        skips = []
        for down, block in zip(self.downs, self.blocks):
            x = ad.leaky_relu(down(x), self.cfg.negative_slope)
            x = block(x)
            skips.append(x)
        return self.to_code(x), skips

    def named_params(self, prefix: str = "encoder"):
        out = []
        for i, (down, block) in enumerate(zip(self.downs, self.blocks)):
            out += down.named_params(f"{prefix}.down{i}")
            out += block.named_params(f"{prefix}.block{i}")
        out += self.to_code.named_params(f"{prefix}.to_code")
        return out

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        _set_requires(self.named_params(), not flag)


class Decoder:
    """Mirror of the encoder with skip fusion at every stage.

    Core parameters (from_code, blocks, upsample convs, final conv) can
    be frozen independently of the fusion convs, which keep training
    after the core is locked.
    """

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        deepest = cfg.base_channels * (2 ** (cfg.n_down - 1))
        self.from_code = Conv(rng, cfg.code_dim, deepest, 3)
        self.fusions: list[SkipFusion] = []
        self.blocks: list[ResnetBlock] = []
        self.ups: list[Conv] = []
        for j in range(cfg.n_down):
            ch = cfg.base_channels * (2 ** j)
            ch_next = cfg.base_channels * (2 ** (j - 1)) if j > 0 else cfg.base_channels
            self.fusions.append(SkipFusion(rng, ch))
            self.blocks.append(ResnetBlock(rng, ch, cfg.negative_slope))
            self.ups.append(Conv(rng, ch, ch_next, 3))
        self.final = Conv(rng, cfg.base_channels, cfg.image_channels, 3)
        self.frozen = False

    def forward(self, Z_q: Tensor, skips: list[Tensor], prompts=None) -> Tensor:
        if Z_q.data.ndim != 4 or Z_q.data.shape[1] != self.cfg.code_dim:
            raise ShapeError(f"decoder expects code dim {self.cfg.code_dim}, got {Z_q.data.shape}")
        if len(skips) != self.cfg.n_down:
            raise ShapeError(f"decoder needs {self.cfg.n_down} skips, got {len(skips)}")
        x = ad.leaky_relu(self.from_code(Z_q), self.cfg.negative_slope)
        for j in range(self.cfg.n_down - 1, -1, -1):
            x = self.fusions[j](x, skips[j])
            if prompts is not None:
                x = prompts.apply(j, x, skips[j])
            x = self.blocks[j](x)
            x = ad.upsample_nearest(x, 2)
            x = ad.leaky_relu(self.ups[j](x), self.cfg.negative_slope)
        return ad.sigmoid(self.final(x))

    def core_named_params(self, prefix: str = "decoder"):
        out = self.from_code.named_params(f"{prefix}.from_code")
        for j in range(self.cfg.n_down):
            out += self.blocks[j].named_params(f"{prefix}.block{j}")
            out += self.ups[j].named_params(f"{prefix}.up{j}")
        out += self.final.named_params(f"{prefix}.final")
        return out

    def fusion_named_params(self, prefix: str = "decoder"):
        out = []
        for j in range(self.cfg.n_down):
            out += self.fusions[j].named_params(f"{prefix}.fusion{j}")
        return out

    def named_params(self, prefix: str = "decoder"):
        return self.core_named_params(prefix) + self.fusion_named_params(prefix)

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        _set_requires(self.named_params(), not flag)

    def set_core_frozen(self, flag: bool) -> None:
        _set_requires(self.core_named_params(), not flag)


class Discriminator:
    """3-layer strided patch discriminator emitting a logit map."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = max(cfg.base_channels // 2, 4)
        self.conv1 = Conv(rng, cfg.image_channels, c, 3, stride=2)
        self.conv2 = Conv(rng, c, 2 * c, 3, stride=2)
        self.conv3 = Conv(rng, 2 * c, 1, 3, stride=1)
        self.frozen = False

    def forward(self, I: Tensor) -> Tensor:
        s = self.cfg.negative_slope
        h = ad.leaky_relu(self.conv1(I), s)
        h = ad.leaky_relu(self.conv2(h), s)
        return self.conv3(h)

    def named_params(self, prefix: str = "disc"):
        return (
            self.conv1.named_params(f"{prefix}.conv1")
            + self.conv2.named_params(f"{prefix}.conv2")
            + self.conv3.named_params(f"{prefix}.conv3")
        )

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        _set_requires(self.named_params(), not flag)


def encode(I: Tensor, enc: Encoder) -> tuple[Tensor, list[Tensor]]:
    return enc.forward(I)


def decode(Z_q: Tensor, skips: list[Tensor], dec: Decoder, prompts=None) -> Tensor:
    return dec.forward(Z_q, skips, prompts)


def discriminate(I: Tensor, disc: Discriminator) -> Tensor:
    return disc.forward(I)
