"""
Adaptive relative depth estimation.

Bin queries are turned into a per-image partition of the unit depth interval
and bin features; bin features dotted with pixel features classify every pixel
over the bins, and the relative depth is the probability-weighted bin center.
The same similarity volume, binarized, masks the next decoder layer.
"""

import logging
from typing import NamedTuple, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

LENGTH_FLOOR = 1e-8

# B x N x H x W logits, P[b, i, h, w] = <E_i, F_hw>
SimilarityVolume = torch.Tensor
# B x N x D
BinFeatures = torch.Tensor


class BinPartition(NamedTuple):
    """Normalized bin lengths and centers, both B x N."""

    lengths: torch.Tensor
    centers: torch.Tensor


class AttentionMaskSet(NamedTuple):
    """B x N x K x h x w, True where a bin query may attend."""

    allow: torch.Tensor

    @property
    def resolution(self) -> Tuple[int, int]:
        return tuple(self.allow.shape[-2:])

    def blocked_for_attention(self) -> torch.Tensor:
        """(B*K) x N x (h*w) boolean, True = blocked, the layout nn.MultiheadAttention expects."""
        b, n, k, h, w = self.allow.shape
        return (~self.allow).permute(0, 2, 1, 3, 4).reshape(b * k, n, h * w)


def normalize_lengths(raw: torch.Tensor) -> torch.Tensor:
    """Softplus to strict positivity, floor, then divide by the sum over bins."""
    positive = F.softplus(raw).clamp_min(LENGTH_FLOOR)
    return positive / positive.sum(dim=-1, keepdim=True)


def bin_centers(lengths: torch.Tensor) -> torch.Tensor:
    """theta_i = L_i / 2 + sum_{j<i} L_j along the last dim."""
    preceding = F.pad(torch.cumsum(lengths, dim=-1)[..., :-1], (1, 0))
    return preceding + 0.5 * lengths


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))


class BinHead(nn.Module):
    """Two independent heads over bin queries: raw lengths and bin features."""

    def __init__(self, width: int):
        super().__init__()
        self.length_mlp = _mlp(width, width, 1)
        self.feature_mlp = _mlp(width, width, width)

    def forward(self, bin_queries: torch.Tensor) -> Tuple[BinPartition, BinFeatures]:
        return self.predict_bins(bin_queries)

    def predict_bins(self, bin_queries: torch.Tensor) -> Tuple[BinPartition, BinFeatures]:
        """B x N x D queries -> (partition, B x N x D bin features)."""
        if not torch.isfinite(bin_queries).all():
            raise ValueError("bin queries contain non-finite values")
        raw = self.length_mlp(bin_queries).squeeze(-1)
        lengths = normalize_lengths(raw)
        return BinPartition(lengths, bin_centers(lengths)), self.feature_mlp(bin_queries)


def compute_similarity(bin_features: BinFeatures, pixel_features: torch.Tensor) -> SimilarityVolume:
    """Dot products of B x N x D bin features with B x D x H x W pixel features."""
    if bin_features.shape[-1] != pixel_features.shape[1]:
        raise ValueError(
            f"feature width mismatch: bins have {bin_features.shape[-1]}, pixels have {pixel_features.shape[1]}"
        )
    return torch.einsum("bnd,bdhw->bnhw", bin_features, pixel_features)


def generate_masks(similarity: SimilarityVolume, target_hw: Tuple[int, int], num_heads: int) -> AttentionMaskSet:
    """Resize sigmoid(P), repeat over heads and threshold at 0.5.

    A query whose mask would block everything is given an all-allow mask.
    """
    with torch.no_grad():
        prob = torch.sigmoid(similarity)
        if tuple(prob.shape[-2:]) != tuple(target_hw):
            prob = F.interpolate(prob, size=tuple(target_hw), mode="bilinear", align_corners=False)
        allow = prob >= 0.5
        empty = ~allow.flatten(2).any(dim=-1)
        if empty.any():
            allow = allow | empty[..., None, None]
        allow = allow.unsqueeze(2).expand(-1, -1, num_heads, -1, -1).contiguous()
    return AttentionMaskSet(allow)


def all_allow_masks(batch: int, num_bins: int, num_heads: int, target_hw: Tuple[int, int],
                    device=None) -> AttentionMaskSet:
    return AttentionMaskSet(torch.ones(batch, num_bins, num_heads, *target_hw, dtype=torch.bool, device=device))


def relative_depth(partition: BinPartition, similarity: SimilarityVolume) -> torch.Tensor:
    """R = theta^T softmax_bins(P), B x H x W in (min theta, max theta)."""
    centers = partition.centers
    if centers.shape[-1] != similarity.shape[1]:
        raise ValueError(f"{centers.shape[-1]} bin centers for {similarity.shape[1]} similarity channels")
    probs = torch.softmax(similarity, dim=1)
    return torch.einsum("bn,bnhw->bhw", centers, probs)


def uniform_partition(batch: int, num_bins: int, dtype=torch.float64) -> BinPartition:
    """Equal-width bins, the fixed-discretization reference."""
    lengths = torch.full((batch, num_bins), 1.0 / num_bins, dtype=dtype)
    return BinPartition(lengths, bin_centers(lengths))
