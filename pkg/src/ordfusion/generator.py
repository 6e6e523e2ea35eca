"""Separation-fusion module and generation networks.

The final encoder map F^(4) is split by two per-position linear extractors
into a structural block of floor(tau * C) channels and a categorical block of
the remaining channels, then recombined across images: the fused map
concatenates the reference image's categorical block with the main image's
structural block, categorical first (the same order the reconstruction
concat uses, so both losses see one consistent layout). Two
generation networks turn the fused map back into a [0, 1] image of the input
size: a UNet-style chain of four stride-2 up-samplings whose first block also
consumes F^(4) of the main image and whose later blocks take the main image's
earlier pyramid stages as skips, and a lightweight decoder that tiles the
token sequence four times, applies one attention block, and projects tokens
to pixel patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import BackboneConfig, FeaturePyramid, _AttentionBlock

GENERATOR_KINDS = ("unet", "light_decoder")

# Spatial growth of the light decoder's token tiling: 4x tokens = 2x per axis.
TILE_FACTOR = 4


@dataclass(frozen=True)
class ChannelSplit:
    """Channel budget of the structural/categorical extractors.

    structural gets floor(tau * C) channels and categorical the remaining
    C - floor(tau * C); both must be nonzero.
    """

    tau: float
    c_structural: int
    c_categorical: int

    @property
    def channels(self) -> int:
        return self.c_structural + self.c_categorical


def split_channels(channels: int, tau: float) -> ChannelSplit:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    c_structural = int(tau * channels)
    c_categorical = channels - c_structural
    if c_structural < 1 or c_categorical < 1:
        raise ValueError(
            f"degenerate split for C={channels}, tau={tau}: "
            f"({c_structural}, {c_categorical})"
        )
    return ChannelSplit(tau=tau, c_structural=c_structural, c_categorical=c_categorical)


@dataclass
class SeparatedFeatures:
    """Outputs of the categorical (h_c) and structural (h_s) extractors."""

    categorical: Tensor
    structural: Tensor


class FeatureSeparator(nn.Module):
    """Two 1x1 convolutions splitting F^(4) into categorical/structural blocks.

    1x1 convolutions act per position, which for token-shaped features is the
    same as a per-token affine map.
    """

    def __init__(self, channels: int, tau: float):
        super().__init__()
        self.split = split_channels(channels, tau)
        self.h_c = nn.Conv2d(channels, self.split.c_categorical, 1)
        self.h_s = nn.Conv2d(channels, self.split.c_structural, 1)

    def forward(self, f4: Tensor) -> SeparatedFeatures:
        if f4.shape[-3] != self.split.channels:
            raise ValueError(
                f"feature map has {f4.shape[-3]} channels, separator expects "
                f"{self.split.channels}"
            )
        return SeparatedFeatures(categorical=self.h_c(f4), structural=self.h_s(f4))

    @torch.no_grad()
    def load_identity(self) -> None:
        """Set channel-selection weights: h_c picks the first c_categorical
        channels, h_s the rest, so concat[h_c(F), h_s(F)] == F exactly."""
        c_cat, c_str = self.split.c_categorical, self.split.c_structural
        self.h_c.weight.zero_()
        self.h_c.bias.zero_()
        self.h_s.weight.zero_()
        self.h_s.bias.zero_()
        for i in range(c_cat):
            self.h_c.weight[i, i, 0, 0] = 1.0
        for i in range(c_str):
            self.h_s.weight[i, c_cat + i, 0, 0] = 1.0


def fuse(main: SeparatedFeatures, ref: SeparatedFeatures) -> Tensor:
    """Fused map: reference categorical block, then main structural block."""
    if main.structural.shape[-2:] != ref.categorical.shape[-2:]:
        raise ValueError(
            f"spatial mismatch: main {tuple(main.structural.shape[-2:])} vs "
            f"ref {tuple(ref.categorical.shape[-2:])}"
        )
    dim = 0 if main.structural.ndim == 3 else 1
    return torch.cat([ref.categorical, main.structural], dim=dim)


def reconstruction_concat(separated: SeparatedFeatures) -> Tensor:
    """concat[h_c(F), h_s(F)] of one image, the reconstruction-loss operand."""
    dim = 0 if separated.categorical.ndim == 3 else 1
    return torch.cat([separated.categorical, separated.structural], dim=dim)


def direct_add_fusion(f4_main: Tensor, f4_ref: Tensor) -> Tensor:
    """Ablation fusion: plain elementwise sum of the two feature maps."""
    if f4_main.shape != f4_ref.shape:
        raise ValueError(
            f"shape mismatch: {tuple(f4_main.shape)} vs {tuple(f4_ref.shape)}"
        )
    return f4_main + f4_ref


class _UpBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        self.refine = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.refine(self.act(self.up(x))))


class UNetGenerator(nn.Module):
    """Four stride-2 up-sampling blocks from F^(4) resolution to the image.

    The first block consumes the fused map concatenated with the main image's
    F^(4); the three following blocks take the main image's stages F^(3),
    F^(2), F^(1) as skip inputs. A 3x3 head plus logistic squashing maps to
    [0, 1] pixels.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        widths = tuple(max(4, w) for w in (c4 // 2, c4 // 4, c4 // 8, c4 // 8))
        self.blocks = nn.ModuleList(
            [
                _UpBlock(2 * c4, widths[0]),
                _UpBlock(widths[0] + c3, widths[1]),
                _UpBlock(widths[1] + c2, widths[2]),
                _UpBlock(widths[2] + c1, widths[3]),
            ]
        )
        self.head = nn.Conv2d(widths[3], cfg.in_channels, 3, padding=1)

    def forward(self, fused: Tensor, pyramid_main: FeaturePyramid) -> Tensor:
        f1, f2, f3, f4 = pyramid_main.stages
        if fused.shape != f4.shape:
            raise ValueError(
                f"fused map shape {tuple(fused.shape)} != F4 shape {tuple(f4.shape)}"
            )
        x = self.blocks[0](torch.cat([fused, f4], dim=1))
        for block, skip in zip(self.blocks[1:], (f3, f2, f1)):
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


class LightDecoderGenerator(nn.Module):
    """One attention block over the 4x-tiled token sequence, then per-token
    projection to pixel patches.

    The fused map's T = H4*W4 tokens are repeated to 4T (a 2x2 token grid
    upsampling); after the attention block each token emits one patch of
    (input_size / (2*H4))^2 pixels per channel, recovering the input size.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.grid = cfg.f4_size
        self.tokens = self.grid * self.grid
        self.patch = cfg.input_size // (2 * self.grid)
        self.pos_embed = nn.Parameter(torch.zeros(1, TILE_FACTOR * self.tokens, c))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.block = _AttentionBlock(c, heads=max(1, c // 8))
        self.proj = nn.Linear(c, self.patch * self.patch * cfg.in_channels)

    def forward(self, fused: Tensor) -> Tensor:
        b, c, h, w = fused.shape
        if (h, w) != (self.grid, self.grid) or c != self.cfg.channels:
            raise ValueError(
                f"fused map shape {tuple(fused.shape[1:])} incompatible with "
                f"({self.cfg.channels}, {self.grid}, {self.grid})"
            )
        tokens = fused.flatten(2).transpose(1, 2)  # (B, T, C)
        tokens = tokens.repeat(1, TILE_FACTOR, 1) + self.pos_embed
        tokens = self.block(tokens)
        patches = self.proj(tokens)  # (B, 4T, p*p*C_img)
        # 4T tokens laid out as a (2H4, 2W4) grid of (p, p) patches
        g, p, ch = 2 * self.grid, self.patch, self.cfg.in_channels
        patches = patches.reshape(b, g, g, p, p, ch)
        image = patches.permute(0, 5, 1, 3, 2, 4).reshape(b, ch, g * p, g * p)
        return torch.sigmoid(image)


def build_generator(kind: str, cfg: BackboneConfig) -> nn.Module:
    if kind == "unet":
        return UNetGenerator(cfg)
    if kind == "light_decoder":
        return LightDecoderGenerator(cfg)
    raise ValueError(f"unknown generator kind {kind!r}; expected one of {GENERATOR_KINDS}")


def generate(kind: str, generator: nn.Module, fused: Tensor, pyramid_main: FeaturePyramid | None = None) -> Tensor:
    """Run the generation network of the given kind on a fused feature map."""
    if kind == "unet":
        if pyramid_main is None:
            raise ValueError("unet generation requires the main image's pyramid")
        return generator(fused, pyramid_main)
    if kind == "light_decoder":
        return generator(fused)
    raise ValueError(f"unknown generator kind {kind!r}; expected one of {GENERATOR_KINDS}")
