"""
Training objectives: the scale-invariant log loss on relative and metric depth,
the text-image cross-entropy on scene logits, and their weighted total.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from depth_types import DepthMap
from errors import ConfigError, InvalidDepthError, NonFiniteLossError
from sasp import SceneLogits

logger = logging.getLogger(__name__)

# Substituted for exact zeros inside logs
UNDERFLOW_EPS = 1e-6

DepthInput = Union[torch.Tensor, DepthMap]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    lam: float = 0.15
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("loss.alpha must be > 0")
        if not 0 <= self.lam <= 1:
            raise ConfigError("loss.lam must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigError("loss.beta must be >= 0")


@dataclass
class LossBreakdown:
    si: torch.Tensor
    ti: torch.Tensor
    total: torch.Tensor
    valid_pixel_count: int
    aux: Optional[torch.Tensor] = None

    def as_record(self) -> Dict[str, float]:
        record = {
            "si": float(self.si.detach()),
            "ti": float(self.ti.detach()),
            "total": float(self.total.detach()),
            "valid_pixel_count": self.valid_pixel_count,
        }
        if self.aux is not None:
            record["aux"] = float(self.aux.detach())
        return record


def _to_tensor(depth: DepthInput) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    if isinstance(depth, DepthMap):
        return (torch.from_numpy(np.array(depth.values)),
                torch.from_numpy(np.array(depth.valid)))
    return depth, None


def _safe_log(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    if (values[valid] < 0).any():
        raise InvalidDepthError("negative depth on a valid pixel")
    underflow = valid & (values == 0)
    if underflow.any():
        logger.warning("%d valid depth values underflowed to zero", int(underflow.sum()))
    return torch.log(torch.where(valid & (values > 0), values, torch.full_like(values, UNDERFLOW_EPS)))


def si_loss(relative: DepthInput, metric: DepthInput, gt: DepthInput,
            cfg: LossConfig = LossConfig(), valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """alpha * sqrt(Var[log gt - log R] + lam * mean(log gt - log M)^2), averaged over images.

    Accepts DepthMaps or H x W / B x H x W tensors; for tensors `valid` defaults to gt > 0.
    """
    rel, rel_valid = _to_tensor(relative)
    met, met_valid = _to_tensor(metric)
    ref, gt_valid = _to_tensor(gt)
    if not (rel.shape == met.shape == ref.shape):
        raise ValueError(f"shape mismatch: R {tuple(rel.shape)}, M {tuple(met.shape)}, gt {tuple(ref.shape)}")

    if valid is None:
        valid = gt_valid if gt_valid is not None else ref > 0
        for extra in (rel_valid, met_valid):
            if extra is not None:
                valid = valid & extra
    valid = valid.to(torch.bool)

    squeeze = rel.dim() == 2
    if squeeze:
        rel, met, ref, valid = rel[None], met[None], ref[None], valid[None]

    counts = valid.flatten(1).sum(dim=1)
    if (counts < 2).any():
        raise ValueError(f"si_loss needs at least 2 valid pixels per image, got {counts.tolist()}")

    mask = valid.to(rel.dtype)
    n = counts.to(rel.dtype)
    log_gt = _safe_log(ref, valid)
    delta = (log_gt - _safe_log(rel, valid)) * mask
    eps = (log_gt - _safe_log(met, valid)) * mask

    delta_mean = delta.flatten(1).sum(dim=1) / n
    variance = (((delta - delta_mean[:, None, None]) * mask) ** 2).flatten(1).sum(dim=1) / n
    eps_mean = eps.flatten(1).sum(dim=1) / n
    per_image = cfg.alpha * torch.sqrt(variance + cfg.lam * eps_mean ** 2)
    return per_image.mean()


def ti_loss(scene: Union[SceneLogits, torch.Tensor], labels: Union[int, torch.Tensor]) -> torch.Tensor:
    """Mean over the batch of -log T_label; `scene` may be SceneLogits or B x C log-probabilities."""
    log_probs = scene.log_probs if isinstance(scene, SceneLogits) else scene
    if log_probs.dim() == 1:
        log_probs = log_probs[None]
    labels = torch.as_tensor(labels, dtype=torch.long, device=log_probs.device).reshape(-1)
    if labels.numel() != log_probs.shape[0]:
        raise ValueError(f"{labels.numel()} labels for {log_probs.shape[0]} logit rows")
    num_categories = log_probs.shape[1]
    if (labels < 0).any() or (labels >= num_categories).any():
        raise ValueError(f"labels {labels.tolist()} out of range [0, {num_categories})")
    return -log_probs.gather(1, labels[:, None]).squeeze(1).mean()


def total_loss(si: torch.Tensor, ti: Optional[torch.Tensor], cfg: LossConfig = LossConfig(),
               valid_pixel_count: int = 1, aux: Optional[torch.Tensor] = None,
               aux_weight: float = 0.0) -> LossBreakdown:
    """total = si + beta * ti (+ aux_weight * aux). A missing TI branch contributes nothing."""
    si = torch.as_tensor(si)
    if ti is None or cfg.beta == 0:
        total = si
    else:
        total = si + cfg.beta * ti
    if aux is not None and aux_weight > 0:
        total = total + aux_weight * aux
    ti_value = torch.zeros_like(si) if ti is None else torch.as_tensor(ti)

    parts = [si, ti_value, total] + ([aux] if aux is not None else [])
    if not all(torch.isfinite(p.detach()).all() for p in parts):
        raise NonFiniteLossError(f"non-finite loss: si={float(si.detach())}, ti={float(ti_value.detach())}")
    if valid_pixel_count < 1:
        raise ValueError("valid_pixel_count must be >= 1")
    return LossBreakdown(si, ti_value, total, int(valid_pixel_count), aux)
