"""Full segmentation network: backbone + concept tokens + mask heads.

Ablation switches are part of the architecture config because they decide
which modules exist: either token family can be dropped (its losses and its
context branch in the dynamic head go with it), and the dynamic head can be
swapped for a shared static conv pair. The decoder always consumes the
token-width feature map, so every variant shares the same downstream shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import ConvDecoder, ConvEncoder, EncoderConfig
from .dynamic_head import DynamicMaskHead, StaticMaskHead, predict_binary
from .geometry import GEO_BLOCKS
from .semantics import REPORT_FIELDS, TEXT_EMBED_DIM
from .tokens import (
    ConceptTokens,
    GeometryRegressor,
    SemanticProjector,
    StyleContentFusion,
    TokenImageInteraction,
    inject_modality,
)

__all__ = ["ModelConfig", "ModelOutput", "SegmentationModel", "build_model"]

N_GEO_TOKENS = len(GEO_BLOCKS)
N_SEM_TOKENS = len(REPORT_FIELDS)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text_dim: int = TEXT_EMBED_DIM
    interaction_layers: int = 2
    attention_heads: int = 4
    kernel_size: int = 1
    kernel_depth: int = 1
    use_positional_encoding: bool = True
    use_geo_tokens: bool = True
    use_sem_tokens: bool = True
    use_dynamic_head: bool = True

    def __post_init__(self):
        if self.interaction_layers < 0:
            raise ValueError("interaction_layers must be >= 0")
        if self.text_dim < 1:
            raise ValueError("text_dim must be positive")


@dataclass
class ModelOutput:
    """Per-sample predictions; token outputs are None for disabled families."""

    p_fg: torch.Tensor                 # (B, H, W) foreground probability
    p_bg: torch.Tensor                 # (B, H, W) background probability
    geo_pred: torch.Tensor | None      # (B, 13) regressed geometry
    sem_proj: torch.Tensor | None      # (B, 9, text_dim) projected semantics
    modality: torch.Tensor | None      # (B, d) fused style-content vector

    def binary_mask(self) -> torch.Tensor:
        return predict_binary(self.p_fg, self.p_bg)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.encoder = ConvEncoder(enc)
        self.decoder = ConvDecoder(enc)

        self.any_tokens = config.use_geo_tokens or config.use_sem_tokens
        self.interaction = TokenImageInteraction(
            deep_channels=enc.deep_channels,
            dim=enc.token_dim,
            grid=enc.deep_grid,
            layers=config.interaction_layers if self.any_tokens else 0,
            heads=config.attention_heads,
            use_positional_encoding=config.use_positional_encoding,
        )
        if self.any_tokens:
            self.tokens = ConceptTokens(
                n_geo=N_GEO_TOKENS if config.use_geo_tokens else 0,
                n_sem=N_SEM_TOKENS if config.use_sem_tokens else 0,
                dim=enc.token_dim,
            )
        if config.use_sem_tokens:
            self.fusion = StyleContentFusion(
                enc.shallow_channels, enc.deep_channels, enc.token_dim
            )
            self.sem_projector = SemanticProjector(enc.token_dim, config.text_dim)
        if config.use_geo_tokens:
            self.geo_regressor = GeometryRegressor(enc.token_dim)
        if config.use_dynamic_head:
            self.head = DynamicMaskHead(
                enc.decoder_channels,
                enc.token_dim,
                heads=config.attention_heads,
                kernel_size=config.kernel_size,
                depth=config.kernel_depth,
            )
        else:
            self.head = StaticMaskHead(enc.decoder_channels)

    def assemble_tokens(self, shallow: torch.Tensor, deep: torch.Tensor):
        """Input token banks for one batch: (geo, sem, modality), None when off.

        The modality vector touches the semantic family only; geometry tokens
        are returned exactly as stored.
        """
        cfg = self.config
        b = deep.shape[0]
        geo = self.tokens.geo_batch(b) if cfg.use_geo_tokens else None
        sem = None
        modality = None
        if cfg.use_sem_tokens:
            modality = self.fusion(shallow, deep)
            sem = inject_modality(self.tokens.sem_batch(b), modality)
        return geo, sem, modality

    def forward(self, x: torch.Tensor) -> ModelOutput:
        cfg = self.config
        feats = self.encoder(x)
        shallow, deep = feats[1], feats[-1]
        out_size = int(x.shape[-1])

        geo_out = sem_out = modality = None
        if self.any_tokens:
            geo_in, sem_in, modality = self.assemble_tokens(shallow, deep)
            token_list = [t for t in (geo_in, sem_in) if t is not None]
            tokens_in = torch.cat(token_list, dim=1)
            tokens_out, feats_out, (hh, ww) = self.interaction(tokens_in, deep)
            n_geo = geo_in.shape[1] if geo_in is not None else 0
            if cfg.use_geo_tokens:
                geo_out = tokens_out[:, :n_geo]
            if cfg.use_sem_tokens:
                sem_out = tokens_out[:, n_geo:]
            dec_in = feats_out.transpose(1, 2).reshape(
                feats_out.shape[0], -1, hh, ww
            )
        else:
            prepared = self.interaction.prepare(deep)
            hh, ww = deep.shape[-2:]
            dec_in = prepared.transpose(1, 2).reshape(prepared.shape[0], -1, hh, ww)

        dec_feat = self.decoder(dec_in, feats)

        if cfg.use_dynamic_head:
            p_fg, p_bg = self.head(dec_feat, geo_out, sem_out, out_size)
        else:
            p_fg, p_bg = self.head(dec_feat, out_size)

        return ModelOutput(
            p_fg=p_fg,
            p_bg=p_bg,
            geo_pred=self.geo_regressor(geo_out) if cfg.use_geo_tokens else None,
            sem_proj=self.sem_projector(sem_out) if cfg.use_sem_tokens else None,
            modality=modality,
        )


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationModel:
    """Construct with a seeded initializer so runs are reproducible."""
    torch.manual_seed(seed)
    return SegmentationModel(config)


def make_predict_fn(model: SegmentationModel):
    """Single-image callable for consensus: image (H, W) float -> (p_fg, a, c).

    Returns the foreground probability map as float64 numpy, the regressed
    area fraction, and the regressed centroid. Requires geometry tokens.
    """
    if not model.config.use_geo_tokens:
        raise ValueError("geometry-aware prediction requires geometry tokens")

    def predict(image: np.ndarray):
        model.eval()
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
            x = x.unsqueeze(0).unsqueeze(0)
            out = model(x)
            p_fg = out.p_fg[0].double().numpy()
            geo = out.geo_pred[0].double().numpy()
        return p_fg, float(geo[0]), (float(geo[1]), float(geo[2]))

    return predict
