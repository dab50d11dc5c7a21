"""
ScaleDepth network: convolutional encoder, top-down pixel decoder and the
masked-attention query decoder that feeds the bin head and the scale head.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from arde import (AttentionMaskSet, BinHead, BinPartition, SimilarityVolume, all_allow_masks,
                  compute_similarity, generate_masks, relative_depth)
from depth_types import DepthKind, DepthMap
from errors import ConfigError
from sasp import SceneLogits, ScaleHead, synthesize_metric

logger = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)
SIZE_MULTIPLE = 32
# Layer i attends to level MEMORY_LEVELS[i % 3]: stride 32, then 16, then 8.
MEMORY_LEVELS = (3, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    num_bins: int = 64
    num_scale_queries: int = 8
    num_heads: int = 4
    num_blocks: int = 3
    layers_per_block: int = 3
    text_dim: int = 64
    encoder_widths: Tuple[int, ...] = (32, 64, 128, 256)
    ffn_dim: int = 256
    tau_init: float = 0.07
    # "toy": one conv per stage; "large": extra residual blocks per stage
    variant: str = "toy"
    use_masks: bool = True
    # "predicted" or "fixed" (M = fixed_scale * R)
    scale_mode: str = "predicted"
    fixed_scale: float = 10.0
    scale_init: float = 1.0
    aux_layer_weight: float = 0.0
    encoder_weights: str = ""

    def __post_init__(self):
        if min(self.width, self.num_bins, self.num_scale_queries, self.num_heads,
               self.num_blocks, self.layers_per_block, self.text_dim, self.ffn_dim) < 1:
            raise ConfigError("model sizes and counts must be >= 1")
        if self.width % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} must divide width {self.width}")
        if self.width % 2:
            raise ConfigError("width must be even for the sine position encoding")
        if len(self.encoder_widths) != len(STRIDES) or min(self.encoder_widths) < 1:
            raise ConfigError(f"encoder_widths needs {len(STRIDES)} positive entries")
        if self.variant not in ("toy", "large"):
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.scale_mode not in ("predicted", "fixed"):
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")
        if self.tau_init <= 0 or self.fixed_scale <= 0 or self.scale_init <= 0:
            raise ConfigError("tau_init, fixed_scale and scale_init must be positive")
        if self.aux_layer_weight < 0:
            raise ConfigError("aux_layer_weight must be >= 0")

    @property
    def num_layers(self) -> int:
        return self.num_blocks * self.layers_per_block


class FeaturePyramid(NamedTuple):
    """Four B x C x H/s x W/s maps at strides 4, 8, 16, 32."""

    levels: Tuple[torch.Tensor, ...]

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(level.shape[1] for level in self.levels)

    @property
    def sizes(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(tuple(level.shape[-2:]) for level in self.levels)


class QuerySet(NamedTuple):
    """Bin queries B x N x D and scale queries B x M x D."""

    bin_queries: torch.Tensor
    scale_queries: torch.Tensor


class LayerTrace(NamedTuple):
    level: int
    queries: QuerySet
    masks_consumed: AttentionMaskSet
    partition: BinPartition
    similarity: SimilarityVolume
    masks_generated: Optional[AttentionMaskSet]


class DecoderResult(NamedTuple):
    queries: QuerySet
    partition: BinPartition
    similarity: SimilarityVolume
    layers: List[LayerTrace]


class ModelOutput(NamedTuple):
    metric: torch.Tensor
    relative: torch.Tensor
    scale: torch.Tensor
    scene: Optional[SceneLogits]
    decoder: Optional[DecoderResult] = None


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(1, channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)

    def forward(self, x):
        y = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(x + self.norm2(self.conv2(y)))


class Encoder(nn.Module):
    """Strided convolutional encoder: a 4x4 patch stem then three 2x downsamples."""

    def __init__(self, widths: Tuple[int, ...], variant: str = "toy"):
        super().__init__()
        depth = 1 if variant == "toy" else 2
        stages = []
        in_channels = 3
        for i, out_channels in enumerate(widths):
            kernel = 4 if i == 0 else 2
            layers = [nn.Conv2d(in_channels, out_channels, kernel, stride=kernel), _norm(out_channels), nn.GELU()]
            layers += [ResidualBlock(out_channels) for _ in range(depth)]
            stages.append(nn.Sequential(*layers))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        height, width = image.shape[-2:]
        if height % SIZE_MULTIPLE or width % SIZE_MULTIPLE:
            raise ValueError(f"input size {height}x{width} is not divisible by {SIZE_MULTIPLE}")
        levels = []
        x = image
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(tuple(levels))


class PixelDecoder(nn.Module):
    """1x1 lateral projections to width D with coarse-to-fine additive fusion."""

    def __init__(self, in_widths: Tuple[int, ...], width: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_widths)
        self.output = nn.ModuleList(nn.Conv2d(width, width, 1) for _ in in_widths)

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        if len(pyramid.levels) != len(self.lateral):
            raise ValueError(f"expected {len(self.lateral)} pyramid levels, got {len(pyramid.levels)}")
        fused = [None] * len(pyramid.levels)
        top = None
        for i in reversed(range(len(pyramid.levels))):
            x = self.lateral[i](pyramid.levels[i])
            if top is not None:
                x = x + F.interpolate(top, size=x.shape[-2:], mode="bilinear", align_corners=False)
            top = x
            fused[i] = self.output[i](x)
        return FeaturePyramid(tuple(fused))


def sine_position_encoding(height: int, width: int, dim: int, dtype=torch.float32,
                           device=None, temperature: float = 10000.0) -> torch.Tensor:
    """Normalized 2-D sine/cosine encoding, (height * width) x dim."""
    half = dim // 2
    y = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height * 2 * math.pi
    x = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width * 2 * math.pi
    freqs = temperature ** (2 * (torch.arange(half, dtype=dtype, device=device) // 2) / half)
    pos_y = y[:, None] / freqs
    pos_x = x[:, None] / freqs
    pos_y = torch.cat([pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()], dim=1)
    pos_x = torch.cat([pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()], dim=1)
    grid_y = pos_y[:, None, :].expand(height, width, -1)
    grid_x = pos_x[None, :, :].expand(height, width, -1)
    return torch.cat([grid_y, grid_x], dim=-1).reshape(height * width, dim)


class DecoderLayer(nn.Module):
    """Masked cross-attention, then self-attention, then a feed-forward sublayer (post-norm)."""

    def __init__(self, width: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.cross_attn = nn.MultiheadAttention(width, num_heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, num_heads, batch_first=True)
        self.norm_self = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, width))
        self.norm_ffn = nn.LayerNorm(width)

    def forward(self, queries, query_pos, memory, memory_pos, blocked):
        attended, _ = self.cross_attn(queries + query_pos, memory + memory_pos, memory,
                                      attn_mask=blocked, need_weights=False)
        queries = self.norm_cross(queries + attended)
        q = queries + query_pos
        attended, _ = self.self_attn(q, q, queries, need_weights=False)
        queries = self.norm_self(queries + attended)
        return self.norm_ffn(queries + self.ffn(queries))


class QueryDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n_queries = cfg.num_bins + cfg.num_scale_queries
        self.query_feat = nn.Embedding(n_queries, cfg.width)
        self.query_pos = nn.Embedding(n_queries, cfg.width)
        self.level_embed = nn.Embedding(len(MEMORY_LEVELS), cfg.width)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.width, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_layers)
        )
        self.norm = nn.LayerNorm(cfg.width)
        self.bin_head = BinHead(cfg.width)

    @staticmethod
    def memory_level(layer_index: int) -> int:
        return MEMORY_LEVELS[layer_index % len(MEMORY_LEVELS)]

    def _bins(self, queries: torch.Tensor, pixel_features: torch.Tensor):
        normed = self.norm(queries)
        n = self.cfg.num_bins
        partition, bin_features = self.bin_head(normed[:, :n])
        similarity = compute_similarity(bin_features, pixel_features)
        return QuerySet(normed[:, :n], normed[:, n:]), partition, similarity

    def forward(self, pyramid: FeaturePyramid) -> DecoderResult:
        cfg = self.cfg
        pixel_features = pyramid.levels[0]
        batch = pixel_features.shape[0]
        dtype, device = pixel_features.dtype, pixel_features.device
        n, m = cfg.num_bins, cfg.num_scale_queries

        queries = self.query_feat.weight[None].expand(batch, -1, -1)
        query_pos = self.query_pos.weight[None].expand(batch, -1, -1)

        first_hw = pyramid.sizes[self.memory_level(0)]
        masks = all_allow_masks(batch, n, cfg.num_heads, first_hw, device=device)
        layers: List[LayerTrace] = []
        for i, layer in enumerate(self.layers):
            level = self.memory_level(i)
            feats = pyramid.levels[level]
            height, width = feats.shape[-2:]
            if masks.resolution != (height, width):
                raise RuntimeError(f"mask resolution {masks.resolution} != level {level} size {(height, width)}")
            memory = feats.flatten(2).transpose(1, 2) + self.level_embed.weight[MEMORY_LEVELS.index(level)]
            memory_pos = sine_position_encoding(height, width, cfg.width, dtype=dtype, device=device)[None]

            blocked = torch.zeros(batch * cfg.num_heads, n + m, height * width, dtype=torch.bool, device=device)
            blocked[:, :n] = masks.blocked_for_attention()

            queries = layer(queries, query_pos, memory, memory_pos, blocked)
            state, partition, similarity = self._bins(queries, pixel_features)

            next_masks = None
            if i + 1 < len(self.layers):
                next_hw = pyramid.sizes[self.memory_level(i + 1)]
                if cfg.use_masks:
                    next_masks = generate_masks(similarity, next_hw, cfg.num_heads)
                else:
                    next_masks = all_allow_masks(batch, n, cfg.num_heads, next_hw, device=device)
            layers.append(LayerTrace(level, state, masks, partition, similarity, next_masks))
            masks = next_masks

        final = layers[-1]
        return DecoderResult(final.queries, final.partition, final.similarity, layers)


class ScaleDepthModel(nn.Module):
    """Image -> (metric depth, relative depth, scene scale, optional scene logits)."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_widths, cfg.variant)
        self.pixel_decoder = PixelDecoder(cfg.encoder_widths, cfg.width)
        self.decoder = QueryDecoder(cfg)
        self.scale_head = ScaleHead(cfg.width, cfg.num_scale_queries, cfg.text_dim,
                                    tau_init=cfg.tau_init, scale_init=cfg.scale_init)

    def encode(self, image: torch.Tensor) -> FeaturePyramid:
        return self.encoder(image)

    def pixel_decode(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        return self.pixel_decoder(pyramid)

    def decode_queries(self, pyramid: FeaturePyramid) -> DecoderResult:
        return self.decoder(pyramid)

    def relative_from(self, partition: BinPartition, similarity: SimilarityVolume,
                      size: Tuple[int, int]) -> torch.Tensor:
        """Relative depth at the similarity resolution, bilinearly resized to `size`."""
        rel = relative_depth(partition, similarity)
        if tuple(rel.shape[-2:]) != tuple(size):
            rel = F.interpolate(rel[:, None], size=tuple(size), mode="bilinear", align_corners=False)[:, 0]
        return rel

    def forward(self, image: torch.Tensor, text_embeddings: Optional[torch.Tensor] = None,
                return_decoder: bool = False) -> ModelOutput:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W images, got {tuple(image.shape)}")
        pyramid = self.pixel_decode(self.encode(image))
        result = self.decode_queries(pyramid)
        relative = self.relative_from(result.partition, result.similarity, image.shape[-2:])

        scale_queries = result.queries.scale_queries
        if self.cfg.scale_mode == "fixed":
            scale = torch.full((image.shape[0],), self.cfg.fixed_scale, dtype=relative.dtype, device=relative.device)
        else:
            scale = self.scale_head.predict_scale(scale_queries)
        scene = None
        if text_embeddings is not None:
            scene = self.scale_head.similarity(scale_queries, text_embeddings.to(scale_queries.dtype))
        metric = synthesize_metric(scale, relative)
        return ModelOutput(metric, relative, scale, scene, result if return_decoder else None)

    def layer_relative_depths(self, result: DecoderResult, size: Tuple[int, int]) -> List[torch.Tensor]:
        """Relative maps of every layer but the last, for auxiliary supervision."""
        return [self.relative_from(t.partition, t.similarity, size) for t in result.layers[:-1]]

    def encoder_parameters(self):
        return self.encoder.parameters()

    def non_encoder_parameters(self):
        encoder_ids = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in encoder_ids]


class Prediction(NamedTuple):
    metric: DepthMap
    relative: DepthMap
    scale: float
    scene: Optional[np.ndarray]
    # Unmasked M as produced by the network, for evaluation with clamping
    raw_metric: Optional[np.ndarray] = None


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 1 x 3 x H x W tensor."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)[None]


def to_prediction(output: ModelOutput, index: int = 0) -> Prediction:
    """Per-image DepthMaps from a batched model output."""
    relative = output.relative[index].detach().double().cpu().numpy()
    scale = float(output.scale[index].detach())
    metric = output.metric[index].detach().double().cpu().numpy()
    scene = None if output.scene is None else output.scene.probs[index].detach().double().cpu().numpy()
    metric_ok = np.isfinite(metric) & (metric > 0)
    relative_ok = np.isfinite(relative) & (relative > 0) & (relative < 1)
    if not (metric_ok.all() and relative_ok.all()):
        logger.warning("Masked %d metric and %d relative pixels that left the valid range",
                       int((~metric_ok).sum()), int((~relative_ok).sum()))
    return Prediction(DepthMap(metric, metric_ok, DepthKind.METRIC),
                      DepthMap(relative, relative_ok, DepthKind.RELATIVE), scale, scene, metric)


@torch.no_grad()
def predict(model: ScaleDepthModel, image: np.ndarray,
            text_embeddings: Optional[torch.Tensor] = None) -> Prediction:
    """Single-image inference; the similarity branch runs only when a table is given."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        device = next(model.parameters()).device
        output = model(image_to_tensor(image, dtype).to(device), text_embeddings)
    finally:
        model.train(was_training)
    return to_prediction(output)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
