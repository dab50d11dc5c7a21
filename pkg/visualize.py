"""
Colormapped renderings: rainbow for depth, coolwarm for signed error and a
grid of per-bin similarity maps.
"""

import math
from typing import Optional

import matplotlib
import numpy as np

from depth_types import DepthMap


def _apply(cmap_name: str, normalized: np.ndarray) -> np.ndarray:
    cmap = matplotlib.colormaps[cmap_name]
    return cmap(np.clip(normalized, 0.0, 1.0))[..., :3].astype(np.float32)


def colorize_depth(depth: DepthMap, vmin: Optional[float] = None, vmax: Optional[float] = None) -> np.ndarray:
    """H x W x 3 rainbow rendering; invalid pixels are black."""
    values = depth.values
    picked = values[depth.valid]
    if picked.size == 0:
        return np.zeros(depth.shape + (3,), dtype=np.float32)
    lo = float(picked.min()) if vmin is None else vmin
    hi = float(picked.max()) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    rgb = _apply("rainbow", (values - lo) / span)
    rgb[~depth.valid] = 0.0
    return rgb


def colorize_error(pred: DepthMap, gt: DepthMap, limit: Optional[float] = None) -> np.ndarray:
    """Signed error pred - gt on a diverging map centered at zero."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = pred.valid & gt.valid
    error = np.where(valid, pred.values - gt.values, 0.0)
    if limit is None:
        limit = float(np.abs(error[valid]).max()) if valid.any() else 1.0
    limit = limit if limit > 0 else 1.0
    rgb = _apply("coolwarm", 0.5 + 0.5 * error / limit)
    rgb[~valid] = 0.0
    return rgb


def similarity_grid(probs: np.ndarray, columns: Optional[int] = None, pad: int = 1) -> np.ndarray:
    """Tile N x h x w maps in [0, 1] into one rainbow image."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"expected N x h x w maps, got shape {probs.shape}")
    n, h, w = probs.shape
    columns = columns or int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / columns))
    grid = np.ones((rows * (h + pad) - pad, columns * (w + pad) - pad, 3), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, columns)
        grid[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = _apply("rainbow", probs[i])
    return grid
