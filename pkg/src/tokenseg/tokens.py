"""Learnable concept tokens and their interaction with image features.

Two disentangled token families: geometry tokens (one per shape-property
block, regressed against the mask's geometry descriptor) and semantic tokens
(one per diagnostic dimension, aligned with text-embedding rows). A fused
style-content vector describing the input modality is injected into the
semantic family only; geometry tokens never see it, which is what keeps the
two factors separated.

The interaction block alternates token-from-image and image-from-token
cross-attention with pre-norm residuals:

    T' = T + MCA(LN(T), F, F);   T  = T' + FFN(LN(T'))
    F' = F + MCA(LN(F), T, T);   F  = F' + FFN(LN(F'))
"""

from __future__ import annotations

import torch
from torch import nn

__all__ = [
    "ConceptTokens",
    "GeometryRegressor",
    "MultiheadCrossAttention",
    "SemanticProjector",
    "StyleContentFusion",
    "TokenImageInteraction",
    "inject_modality",
]

from .geometry import GEO_BLOCKS, GEO_VECTOR_SIZE

_INIT_STD = 0.02


class ConceptTokens(nn.Module):
    """Learnable token banks, truncated-normal initialized (std 0.02)."""

    def __init__(self, n_geo: int, n_sem: int, dim: int):
        super().__init__()
        if n_geo < 0 or n_sem < 0 or n_geo + n_sem < 1:
            raise ValueError("need at least one token")
        self.n_geo = n_geo
        self.n_sem = n_sem
        self.dim = dim
        self.geo = nn.Parameter(torch.empty(n_geo, dim)) if n_geo else None
        self.sem = nn.Parameter(torch.empty(n_sem, dim)) if n_sem else None
        for p in (self.geo, self.sem):
            if p is not None:
                nn.init.trunc_normal_(p, std=_INIT_STD)

    def geo_batch(self, batch: int) -> torch.Tensor:
        assert self.geo is not None
        return self.geo.unsqueeze(0).expand(batch, -1, -1)

    def sem_batch(self, batch: int) -> torch.Tensor:
        assert self.sem is not None
        return self.sem.unsqueeze(0).expand(batch, -1, -1)


def inject_modality(sem_tokens: torch.Tensor, modality: torch.Tensor) -> torch.Tensor:
    """Add the modality vector to every semantic token.

    Takes (B, N_sem, d) tokens and a (B, d) modality embedding; geometry
    tokens are not an input on purpose.
    """
    if sem_tokens.shape[-1] != modality.shape[-1]:
        raise ValueError("token dim and modality dim differ")
    return sem_tokens + modality.unsqueeze(1)


class StyleContentFusion(nn.Module):
    """Fuse shallow style statistics with deep content into a modality vector.

    Style is per-channel mean and std of the shallow feature map; content is
    the pooled deep map. Both project to the token width, then a gated tanh
    unit produces the embedding: out(sigmoid(Wg z) * tanh(Wv z)), z = [s; c].
    """

    def __init__(self, shallow_channels: int, deep_channels: int, dim: int):
        super().__init__()
        self.style_proj = nn.Linear(2 * shallow_channels, dim)
        self.content_proj = nn.Linear(deep_channels, dim)
        self.gate = nn.Linear(2 * dim, dim)
        self.value = nn.Linear(2 * dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, shallow: torch.Tensor, deep: torch.Tensor) -> torch.Tensor:
        mean = shallow.mean(dim=(2, 3))
        var = shallow.var(dim=(2, 3), unbiased=False)
        std = torch.sqrt(torch.clamp(var, min=0.0))
        style = self.style_proj(torch.cat([mean, std], dim=1))
        content = self.content_proj(deep.mean(dim=(2, 3)))
        z = torch.cat([style, content], dim=1)
        fused = torch.sigmoid(self.gate(z)) * torch.tanh(self.value(z))
        return self.out(fused)


class MultiheadCrossAttention(nn.Module):
    """Standard multi-head attention with separate query and key/value inputs."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, keyvalue: torch.Tensor) -> torch.Tensor:
        b, nq, d = query.shape
        nk = keyvalue.shape[1]
        h, hd = self.heads, self.head_dim
        q = self.q_proj(query).view(b, nq, h, hd).transpose(1, 2)
        k = self.k_proj(keyvalue).view(b, nk, h, hd).transpose(1, 2)
        v = self.v_proj(keyvalue).view(b, nk, h, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / hd**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out)


def _ffn(dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))


class _InteractionLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.token_norm = nn.LayerNorm(dim)
        self.token_attn = MultiheadCrossAttention(dim, heads)
        self.token_ffn_norm = nn.LayerNorm(dim)
        self.token_ffn = _ffn(dim)
        self.image_norm = nn.LayerNorm(dim)
        self.image_attn = MultiheadCrossAttention(dim, heads)
        self.image_ffn_norm = nn.LayerNorm(dim)
        self.image_ffn = _ffn(dim)

    def forward(self, tokens: torch.Tensor, feats: torch.Tensor):
        tokens = tokens + self.token_attn(self.token_norm(tokens), feats)
        tokens = tokens + self.token_ffn(self.token_ffn_norm(tokens))
        feats = feats + self.image_attn(self.image_norm(feats), tokens)
        feats = feats + self.image_ffn(self.image_ffn_norm(feats))
        return tokens, feats


class TokenImageInteraction(nn.Module):
    """Project the deep feature map to token width and run the layer stack.

    The learnable 2-D positional table is stored at the configured deep grid
    and bilinearly resampled when the runtime grid differs; it is added once,
    before the first layer. With zero layers the block is the identity on both
    streams (after projection).
    """

    def __init__(
        self,
        deep_channels: int,
        dim: int,
        grid: int,
        layers: int = 2,
        heads: int = 4,
        use_positional_encoding: bool = True,
    ):
        super().__init__()
        self.dim = dim
        self.use_positional_encoding = use_positional_encoding
        self.input_proj = nn.Linear(deep_channels, dim)
        self.pos_table = nn.Parameter(torch.empty(1, dim, grid, grid))
        nn.init.trunc_normal_(self.pos_table, std=_INIT_STD)
        self.layers = nn.ModuleList(_InteractionLayer(dim, heads) for _ in range(layers))

    def prepare(self, deep: torch.Tensor) -> torch.Tensor:
        """Flatten (B, C, h, w) to (B, h*w, dim) with the positional bias added."""
        b, _, hh, ww = deep.shape
        feats = self.input_proj(deep.flatten(2).transpose(1, 2))
        if self.use_positional_encoding:
            table = self.pos_table
            if table.shape[-2:] != (hh, ww):
                table = nn.functional.interpolate(
                    table, size=(hh, ww), mode="bilinear", align_corners=False
                )
            feats = feats + table.flatten(2).transpose(1, 2)
        return feats

    def interact(self, tokens: torch.Tensor, feats: torch.Tensor):
        for layer in self.layers:
            tokens, feats = layer(tokens, feats)
        return tokens, feats

    def forward(self, tokens: torch.Tensor, deep: torch.Tensor):
        """Returns refined tokens, refined features (B, h*w, dim), and the grid."""
        feats = self.prepare(deep)
        tokens, feats = self.interact(tokens, feats)
        return tokens, feats, deep.shape[-2:]


class GeometryRegressor(nn.Module):
    """Per-token two-layer MLP heads emitting the 13 geometry scalars.

    Token ``i`` owns property block ``i`` (area, centroid, bbox, ...); each
    head ends in a sigmoid because every target lives in [0, 1]. Outputs are
    concatenated in the canonical block order.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.heads = nn.ModuleList(
            nn.Sequential(
                nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, sl.stop - sl.start)
            )
            for _, sl in GEO_BLOCKS
        )

    def forward(self, geo_tokens: torch.Tensor) -> torch.Tensor:
        if geo_tokens.shape[1] != len(self.heads):
            raise ValueError(
                f"expected {len(self.heads)} geometry tokens, got {geo_tokens.shape[1]}"
            )
        parts = [head(geo_tokens[:, i]) for i, head in enumerate(self.heads)]
        out = torch.sigmoid(torch.cat(parts, dim=1))
        assert out.shape[1] == GEO_VECTOR_SIZE
        return out


class SemanticProjector(nn.Module):
    """Shared linear map from token width to the text-embedding width."""

    def __init__(self, dim: int, text_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, text_dim)

    def forward(self, sem_tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(sem_tokens)
