"""Mask heads: per-sample dynamic kernels generated from token context.

The dynamic head pools the decoded stride-4 feature map into an image query,
reads each token family through single-query cross-attention (a disabled
family contributes a zero vector so the generator's input width never
changes), and emits per-sample conv kernels for a foreground and a background
logit map. The two maps are independent sigmoids, not a softmax pair; the
binary prediction is their pointwise argmax.

With depth > 1 the generated stack is a residual cascade
``z_l = conv(D, W_l) + gelu(z_{l-1})``; every layer reads all decoder channels
and emits one channel, so the generated parameter count is always
``depth * 2 * (C * k^2 + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .tokens import MultiheadCrossAttention

__all__ = [
    "DynamicKernels",
    "DynamicMaskHead",
    "StaticMaskHead",
    "kernel_param_count",
    "predict_binary",
]


def kernel_param_count(channels: int, kernel_size: int, depth: int) -> int:
    """Total scalars the generator must emit for both classes."""
    return depth * 2 * (channels * kernel_size**2 + 1)


@dataclass
class DynamicKernels:
    """Per-sample conv stacks for the two classes.

    weight_*: (B, depth, channels, k, k); bias_*: (B, depth).
    """

    weight_fg: torch.Tensor
    bias_fg: torch.Tensor
    weight_bg: torch.Tensor
    bias_bg: torch.Tensor
    kernel_size: int
    depth: int


def _run_cascade(
    feat: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, k: int
) -> torch.Tensor:
    """Apply a per-sample single-channel conv cascade over a shared feature map."""
    b, c, h, w = feat.shape
    depth = weight.shape[1]
    grouped = feat.reshape(1, b * c, h, w)
    z = None
    for layer in range(depth):
        w_l = weight[:, layer].reshape(b, c, k, k)
        out = nn.functional.conv2d(grouped, w_l, padding=k // 2, groups=b)
        out = out.reshape(b, 1, h, w) + bias[:, layer].reshape(b, 1, 1, 1)
        z = out if z is None else out + nn.functional.gelu(z)
    return z


class DynamicMaskHead(nn.Module):
    """Aggregate token context, generate kernels, convolve the decoded map."""

    def __init__(
        self,
        decoder_channels: int,
        dim: int,
        heads: int = 4,
        kernel_size: int = 1,
        depth: int = 1,
    ):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.dim = dim
        self.decoder_channels = decoder_channels
        self.kernel_size = kernel_size
        self.depth = depth
        self.query_proj = nn.Linear(decoder_channels, dim)
        self.geo_attn = MultiheadCrossAttention(dim, heads)
        self.sem_attn = MultiheadCrossAttention(dim, heads)
        n_out = kernel_param_count(decoder_channels, kernel_size, depth)
        self.generator = nn.Sequential(
            nn.Linear(3 * dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, n_out)
        )

    def aggregate(
        self,
        dec_feat: torch.Tensor,
        geo_tokens: torch.Tensor | None,
        sem_tokens: torch.Tensor | None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Image query plus one context vector per family (zeros when absent)."""
        query = self.query_proj(dec_feat.mean(dim=(2, 3)))
        q = query.unsqueeze(1)
        zero = torch.zeros_like(query)
        geo_ctx = self.geo_attn(q, geo_tokens).squeeze(1) if geo_tokens is not None else zero
        sem_ctx = self.sem_attn(q, sem_tokens).squeeze(1) if sem_tokens is not None else zero
        return geo_ctx, sem_ctx, query

    def generate_kernels(
        self, geo_ctx: torch.Tensor, sem_ctx: torch.Tensor, query: torch.Tensor
    ) -> DynamicKernels:
        b = query.shape[0]
        c, k, depth = self.decoder_channels, self.kernel_size, self.depth
        flat = self.generator(torch.cat([geo_ctx, sem_ctx, query], dim=1))
        per_layer = c * k * k + 1
        flat = flat.reshape(b, 2, depth, per_layer)
        weights = flat[..., :-1].reshape(b, 2, depth, c, k, k)
        biases = flat[..., -1]
        return DynamicKernels(
            weight_fg=weights[:, 0],
            bias_fg=biases[:, 0],
            weight_bg=weights[:, 1],
            bias_bg=biases[:, 1],
            kernel_size=k,
            depth=depth,
        )

    def apply_kernels(
        self, dec_feat: torch.Tensor, kernels: DynamicKernels
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Logit maps (B, 1, h, w) for foreground and background."""
        k = kernels.kernel_size
        logit_fg = _run_cascade(dec_feat, kernels.weight_fg, kernels.bias_fg, k)
        logit_bg = _run_cascade(dec_feat, kernels.weight_bg, kernels.bias_bg, k)
        return logit_fg, logit_bg

    def forward(
        self,
        dec_feat: torch.Tensor,
        geo_tokens: torch.Tensor | None,
        sem_tokens: torch.Tensor | None,
        out_size: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Full-resolution probability maps (B, H, W) for the two classes."""
        geo_ctx, sem_ctx, query = self.aggregate(dec_feat, geo_tokens, sem_tokens)
        kernels = self.generate_kernels(geo_ctx, sem_ctx, query)
        logit_fg, logit_bg = self.apply_kernels(dec_feat, kernels)
        return _to_probability(logit_fg, out_size), _to_probability(logit_bg, out_size)


class StaticMaskHead(nn.Module):
    """Ablation head: one shared 1x1 conv pair instead of generated kernels."""

    def __init__(self, decoder_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(decoder_channels, 2, kernel_size=1)

    def forward(self, dec_feat: torch.Tensor, out_size: int):
        logits = self.conv(dec_feat)
        return (
            _to_probability(logits[:, 0:1], out_size),
            _to_probability(logits[:, 1:2], out_size),
        )


def _to_probability(logits: torch.Tensor, out_size: int) -> torch.Tensor:
    """Upsample logits to the output grid, then squash. Returns (B, H, W)."""
    if logits.shape[-1] != out_size:
        logits = nn.functional.interpolate(
            logits, size=(out_size, out_size), mode="bilinear", align_corners=False
        )
    return torch.sigmoid(logits.squeeze(1))


def predict_binary(p_fg: torch.Tensor, p_bg: torch.Tensor) -> torch.Tensor:
    """Pointwise argmax over the two probability maps; ties go to background.

    Invariant under any common monotone rescaling of the underlying logits.
    """
    return (p_fg > p_bg).to(torch.uint8)
