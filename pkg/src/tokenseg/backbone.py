"""Plain convolutional encoder-decoder backbone.

The encoder is a stack of stride-2 stages (two conv-norm-act blocks each); the
decoder walks back up with nearest-neighbor upsampling and skip concatenation,
stopping at stride 4 where the dynamic head operates. The deepest feature map
is handed to the token interaction block in between, so the decoder consumes
``token_dim`` channels rather than the encoder's deepest width.

GroupNorm and GELU throughout: batch-size independent, no running statistics,
and smooth enough for finite-difference gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

__all__ = ["EncoderConfig", "ConvEncoder", "ConvDecoder", "group_count"]


@dataclass
class EncoderConfig:
    """Backbone geometry. Stage count is len(stage_channels); stage k halves
    the grid, so input_size must be divisible by 2**n_stages (32 at the
    default depth). The shallow tap (style statistics, decoder output grid)
    sits at stage 2 (stride 4); the deep tap is the last stage."""

    input_size: int = 64
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    token_dim: int = 128
    decoder_channels: int = 32

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 3:
            raise ValueError("need at least 3 encoder stages")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError("stage channels must be positive")
        stride = 2 ** len(self.stage_channels)
        # deepest grid must stay at least 2x2: normalization needs more than
        # one value per group and a 1x1 positional table is vacuous
        if self.input_size % stride != 0 or self.input_size < 2 * stride:
            raise ValueError(
                f"input_size {self.input_size} must be a multiple of {stride} "
                f"and at least {2 * stride} for {len(self.stage_channels)} "
                f"stride-2 stages"
            )
        if self.token_dim < 1 or self.decoder_channels < 1:
            raise ValueError("token_dim and decoder_channels must be positive")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def deep_grid(self) -> int:
        """Side length of the deepest feature map."""
        return self.input_size // (2 ** self.n_stages)

    @property
    def shallow_channels(self) -> int:
        return self.stage_channels[1]

    @property
    def deep_channels(self) -> int:
        return self.stage_channels[-1]


def group_count(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(group_count(c_out), c_out),
        nn.GELU(),
    )


class ConvEncoder(nn.Module):
    """Stride-2 stage stack; forward returns every stage's output feature map."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        stages = []
        c_prev = config.in_channels
        for c in config.stage_channels:
            stages.append(
                nn.Sequential(_conv_block(c_prev, c, stride=2), _conv_block(c, c))
            )
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected input of shape (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        h, w = int(x.shape[2]), int(x.shape[3])
        stride = 2 ** cfg.n_stages
        if h != w or h % stride != 0 or h < 2 * stride:
            raise ValueError(
                f"input grid {h}x{w} must be square and divisible by {stride}, "
                f"minimum {2 * stride}"
            )
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ConvDecoder(nn.Module):
    """Nearest-upsample + skip-concat decoder from the deepest grid to stride 4.

    Input channels are ``token_dim`` (the refined deep feature); output is the
    stride-4 map with ``decoder_channels`` channels that the mask heads read.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        n_steps = config.n_stages - 2  # stride 2**n -> stride 4
        blocks = []
        c_prev = config.token_dim
        for i in range(n_steps):
            skip_c = config.stage_channels[config.n_stages - 2 - i]
            c_out = config.decoder_channels * (2 ** (n_steps - 1 - i))
            blocks.append(_conv_block(c_prev + skip_c, c_out))
            c_prev = c_out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, deep: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        cfg = self.config
        if deep.shape[1] != cfg.token_dim:
            raise ValueError(
                f"decoder expects {cfg.token_dim} input channels, got {deep.shape[1]}"
            )
        x = deep
        for i, block in enumerate(self.blocks):
            skip = skips[cfg.n_stages - 2 - i]
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(
                    f"skip grid {tuple(skip.shape[-2:])} does not match upsampled "
                    f"grid {tuple(x.shape[-2:])} at decoder step {i}"
                )
            x = block(torch.cat([x, skip], dim=1))
        return x
