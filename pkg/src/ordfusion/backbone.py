"""Desk-scale image encoders producing a four-stage feature pyramid.

Two stand-in architectures share one contract: four stages, each halving the
spatial size, with channel counts doubling up to the configured final width C.
``small_cnn`` stacks strided convolutions; ``small_transformer`` interleaves
strided patch embeddings with single attention blocks. Only the last map
F^(4) feeds separation-fusion; earlier stages serve as skip inputs for the
UNet-style generator. A single fully-connected head over globally pooled
F^(4) produces un-normalized class scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

ARCHS = ("small_cnn", "small_transformer")

N_STAGES = 4
STAGE_STRIDE = 2
TOTAL_STRIDE = STAGE_STRIDE**N_STAGES  # input_size -> input_size / 16 at F^(4)


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture hyperparameters for encoder plus classifier head."""

    arch: str = "small_cnn"
    channels: int = 32
    input_size: int = 32
    in_channels: int = 1
    num_classes: int = 5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.channels % 8 != 0 or self.channels < 8:
            raise ValueError(f"channels must be a positive multiple of 8, got {self.channels}")
        if self.input_size % TOTAL_STRIDE != 0:
            raise ValueError(
                f"input_size must be divisible by {TOTAL_STRIDE}, got {self.input_size}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        # doubling up to C, floored so narrow configs keep a few live
        # filters per stage (images are nonnegative, so ReLU-style stages
        # with one filter can die at init)
        c = self.channels
        s1 = max(4, c // 8)
        s2 = max(s1, c // 4)
        s3 = max(s2, c // 2)
        return (s1, s2, s3, c)

    @property
    def f4_size(self) -> int:
        return self.input_size // TOTAL_STRIDE

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "channels": self.channels,
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class FeaturePyramid:
    """Ordered feature maps F^(1)..F^(4), each (B, C_i, H_i, W_i)."""

    stages: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if len(self.stages) != N_STAGES:
            raise ValueError(f"expected {N_STAGES} stages, got {len(self.stages)}")
        sizes = [s.shape[-1] for s in self.stages]
        if any(sizes[i] < sizes[i + 1] for i in range(len(sizes) - 1)):
            raise ValueError(f"spatial sizes must be non-increasing, got {sizes}")

    @property
    def f4(self) -> Tensor:
        return self.stages[-1]

    def detached(self) -> "FeaturePyramid":
        return FeaturePyramid([s.detach() for s in self.stages])


class SmallCnnEncoder(nn.Module):
    """Four stride-2 conv stages; channels double each stage up to C.

    No normalization layers: keeps forward passes per-sample independent and
    preserves absolute intensity information.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.stage_channels
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=STAGE_STRIDE, padding=1),
                nn.LeakyReLU(0.1),
            )
            for i in range(N_STAGES)
        )
        for stage in self.stages:
            nn.init.kaiming_normal_(stage[0].weight, a=0.1, nonlinearity="leaky_relu")

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_input(x, self.cfg)
        stages = []
        for stage in self.stages:
            x = stage(x)
            stages.append(x)
        return FeaturePyramid(stages)


class _AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + feed-forward over token maps."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        h = self.norm1(tokens)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        tokens = tokens + attn_out
        return tokens + self.mlp(self.norm2(tokens))


class SmallTransformerEncoder(nn.Module):
    """Strided patch embedding followed by one shallow attention block per stage."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.stage_channels
        self.embeds = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=STAGE_STRIDE, padding=1)
            for i in range(N_STAGES)
        )
        self.blocks = nn.ModuleList(
            _AttentionBlock(c, heads=max(1, c // 8)) for c in cfg.stage_channels
        )

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_input(x, self.cfg)
        stages = []
        for embed, block in zip(self.embeds, self.blocks):
            x = embed(x)
            b, c, h, w = x.shape
            tokens = x.flatten(2).transpose(1, 2)  # (B, H*W, C)
            tokens = block(tokens)
            x = tokens.transpose(1, 2).reshape(b, c, h, w)
            stages.append(x)
        return FeaturePyramid(stages)


class ClassifierHead(nn.Module):
    """Global average pooling then one affine map to K un-normalized scores."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.channels = cfg.channels
        self.fc = nn.Linear(cfg.channels, cfg.num_classes)

    def forward(self, f4: Tensor) -> Tensor:
        if f4.shape[-3] != self.channels:
            raise ValueError(
                f"feature map has {f4.shape[-3]} channels, head expects {self.channels}"
            )
        pooled = f4.mean(dim=(-2, -1))
        return self.fc(pooled)


class EncoderClassifier(nn.Module):
    """Shared encoder plus classification head over F^(4)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.arch == "small_cnn":
            self.encoder = SmallCnnEncoder(cfg)
        else:
            self.encoder = SmallTransformerEncoder(cfg)
        self.head = ClassifierHead(cfg)

    def encode(self, x: Tensor) -> FeaturePyramid:
        return self.encoder(x)

    def classify(self, f4: Tensor) -> Tensor:
        return self.head(f4)

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.encode(x).f4)


def _check_input(x: Tensor, cfg: BackboneConfig) -> None:
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(
            f"expected input of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
            f"got {tuple(x.shape)}"
        )
