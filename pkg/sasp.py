"""
Semantic-aware scale prediction.

Scale queries are pooled into one feature compared by cosine similarity against
per-category text embeddings (training-time supervision only) and projected to
a single positive scene scale S. Metric depth is S times relative depth.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import requests
import torch
import torch.nn as nn
import torch.nn.functional as F
from pybreaker import CircuitBreaker, CircuitBreakerError
from requests.exceptions import RequestException, Timeout
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from depth_types import DepthKind, DepthMap
from errors import DepthIOError, EmbeddingTableError

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATES = (
    "a low resolution photo of a [class].",
    "a bad photo of the [class].",
    "a cropped photo of the [class].",
    "a bright photo of a [class].",
    "a photo of a clean [class].",
    "a photo of the dirty [class].",
    "a good photo of the [class].",
    "a photo of one [class].",
    "a photo of a large [class].",
)

# Circuit breaker for remote embedding table downloads
embedding_breaker = CircuitBreaker(fail_max=5, reset_timeout=60)


@dataclass(frozen=True)
class SceneEmbeddingTable:
    """C category names with their C x D_t text embeddings."""

    names: Tuple[str, ...]
    embeddings: np.ndarray
    source: str = "pseudo"

    def __post_init__(self):
        names = tuple(self.names)
        emb = np.array(self.embeddings, dtype=np.float64)
        if len(names) < 1:
            raise EmbeddingTableError("embedding table needs at least one category")
        if len(set(names)) != len(names):
            raise EmbeddingTableError("category names must be unique")
        if emb.ndim != 2 or emb.shape[0] != len(names):
            raise EmbeddingTableError(f"expected {len(names)} x D_t embeddings, got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise EmbeddingTableError("embeddings must be finite")
        if np.any(np.linalg.norm(emb, axis=1) == 0):
            raise EmbeddingTableError("embedding rows must be non-zero")
        if self.source not in ("pseudo", "file", "url"):
            raise EmbeddingTableError(f"unknown table source {self.source!r}")
        emb.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "embeddings", emb)

    @property
    def num_categories(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise EmbeddingTableError(f"category {name!r} not in embedding table")

    def as_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(np.array(self.embeddings), dtype=dtype, device=device)


class SceneLogits(NamedTuple):
    """Per-category probabilities T (B x C), their logs, and the temperature used."""

    probs: torch.Tensor
    log_probs: torch.Tensor
    tau: torch.Tensor


def text_image_similarity(pooled: torch.Tensor, text_embeddings: torch.Tensor,
                          tau: Union[float, torch.Tensor]) -> SceneLogits:
    """T_i = softmax_i(cos(F_t^i, F_c) / tau) for B x D_t pooled features."""
    if pooled.shape[-1] != text_embeddings.shape[-1]:
        raise ValueError(f"pooled width {pooled.shape[-1]} != embedding width {text_embeddings.shape[-1]}")
    if (pooled.norm(dim=-1) == 0).any():
        raise ValueError("cosine similarity undefined for a zero pooled feature")
    if (text_embeddings.norm(dim=-1) == 0).any():
        raise ValueError("cosine similarity undefined for a zero embedding row")
    tau = torch.as_tensor(tau, dtype=pooled.dtype, device=pooled.device)
    if (tau <= 0).any():
        raise ValueError("temperature must be positive")
    cosine = F.normalize(pooled, dim=-1) @ F.normalize(text_embeddings, dim=-1).t()
    logits = cosine / tau
    log_probs = torch.log_softmax(logits, dim=-1)
    return SceneLogits(log_probs.exp(), log_probs, tau)


class ScaleHead(nn.Module):
    """Pools M scale queries for text similarity and regresses log-scale."""

    def __init__(self, width: int, num_queries: int, text_dim: int,
                 tau_init: float = 0.07, scale_init: float = 1.0):
        super().__init__()
        if num_queries < 1:
            raise ValueError("need at least one scale query")
        self.num_queries = num_queries
        self.pool = nn.Linear(num_queries * width, text_dim)
        self.scale_mlp = nn.Sequential(
            nn.Linear(num_queries * width, width),
            nn.GELU(),
            nn.Linear(width, 1),
        )
        nn.init.constant_(self.scale_mlp[-1].bias, math.log(scale_init))
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def undecayed_parameters(self) -> List[nn.Parameter]:
        """Temperature and log-scale bias, trained without weight decay."""
        return [self.log_tau, self.scale_mlp[-1].bias]

    def pool_scale_queries(self, scale_queries: torch.Tensor) -> torch.Tensor:
        """B x M x D -> B x D_t, concatenation then linear projection."""
        return self.pool(scale_queries.flatten(1))

    def predict_scale(self, scale_queries: torch.Tensor) -> torch.Tensor:
        """B x M x D -> B positive scales, S = exp(mlp(concat(queries)))."""
        if not torch.isfinite(scale_queries).all():
            raise ValueError("scale queries contain non-finite values")
        return self.scale_mlp(scale_queries.flatten(1)).squeeze(-1).exp()

    def similarity(self, scale_queries: torch.Tensor, text_embeddings: torch.Tensor) -> SceneLogits:
        return text_image_similarity(self.pool_scale_queries(scale_queries), text_embeddings, self.tau)


def synthesize_metric(scale: torch.Tensor, relative: torch.Tensor) -> torch.Tensor:
    """M = S * R per pixel for B scales and B x H x W relative maps."""
    return scale.view(-1, *([1] * (relative.dim() - 1))) * relative


def synthesize_metric_map(scale: float, relative: DepthMap) -> DepthMap:
    if relative.kind is not DepthKind.RELATIVE:
        raise ValueError("synthesize_metric_map expects a relative depth map")
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError(f"scale must be positive and finite, got {scale}")
    return DepthMap(scale * relative.values, relative.valid, DepthKind.METRIC)


def build_prompts(templates: Sequence[str], names: Sequence[str]) -> List[List[str]]:
    """C x T grid of prompts with [class] replaced by each category name."""
    return [[template.replace("[class]", name) for template in templates] for name in names]


def parse_embedding_table(text: str, source: str = "file") -> SceneEmbeddingTable:
    """Header `C D_t` (or `C T D_t` for per-template rows), matrix rows, then C names."""
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise EmbeddingTableError("empty embedding table")
    try:
        header = [int(tok) for tok in lines[0].split()]
    except ValueError:
        raise EmbeddingTableError(f"bad header line {lines[0]!r}")
    if len(header) == 2:
        categories, templates, dim = header[0], 1, header[1]
    elif len(header) == 3:
        categories, templates, dim = header
    else:
        raise EmbeddingTableError("header must be `C D_t` or `C T D_t`")
    if min(categories, templates, dim) < 1:
        raise EmbeddingTableError(f"header sizes must be positive, got {header}")

    n_rows = categories * templates
    expected = 1 + n_rows + categories
    if len(lines) != expected:
        raise EmbeddingTableError(f"expected {expected} non-empty lines, found {len(lines)}")
    try:
        rows = np.array([[float(tok) for tok in line.split()] for line in lines[1:1 + n_rows]])
    except ValueError as e:
        raise EmbeddingTableError(f"non-numeric embedding row: {e}")
    if rows.shape != (n_rows, dim):
        raise EmbeddingTableError(f"embedding rows have shape {rows.shape}, header says {(n_rows, dim)}")

    if templates > 1:
        mean = rows.reshape(categories, templates, dim).mean(axis=1)
        norms = np.linalg.norm(mean, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise EmbeddingTableError("a category's template average is zero")
        rows = mean / norms
    names = tuple(lines[1 + n_rows:])
    return SceneEmbeddingTable(names, rows, source)


def format_embedding_table(table: SceneEmbeddingTable) -> str:
    lines = [f"{table.num_categories} {table.dim}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in table.embeddings)
    lines.extend(table.names)
    return "\n".join(lines) + "\n"


def save_embedding_table(table: SceneEmbeddingTable, path: Union[str, Path]) -> None:
    for name in table.names:
        if "\n" in name or not name.strip():
            raise EmbeddingTableError(f"category name {name!r} cannot be stored one per line")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(format_embedding_table(table), encoding="utf-8")
    except OSError as e:
        raise DepthIOError(f"cannot write {path}: {e}")
    logger.info("Saved %d x %d embedding table to %s", table.num_categories, table.dim, path)


@embedding_breaker
@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
    retry=retry_if_exception_type((RequestException, Timeout)),
    reraise=True,
)
def _fetch_table_text(url: str, timeout: float) -> str:
    """Download a table with retries and circuit breaker protection."""
    logger.info("Fetching embedding table from %s (timeout %ss)", url, timeout)
    response = requests.get(url, timeout=timeout, headers={"User-Agent": "scaledepth/1.0"})
    logger.info("Embedding table response status: %s", response.status_code)
    response.raise_for_status()
    return response.text


def load_embedding_table(source: Union[str, Path], timeout: float = 10.0) -> SceneEmbeddingTable:
    """Read a table from a file path or an http(s) URL."""
    source = str(source)
    if source.startswith(("http://", "https://")):
        try:
            text = _fetch_table_text(source, timeout)
        except CircuitBreakerError:
            logger.error("Circuit breaker is OPEN - embedding table host unavailable")
            raise EmbeddingTableError(f"embedding host unavailable (circuit open): {source}")
        except RequestException as e:
            logger.error("Failed to fetch embedding table: %s", str(e))
            raise EmbeddingTableError(f"cannot fetch embedding table {source}: {e}")
        return parse_embedding_table(text, source="url")

    path = Path(source)
    if not path.is_file():
        raise EmbeddingTableError(f"embedding table not found: {path}")
    table = parse_embedding_table(path.read_text(encoding="utf-8"), source="file")
    logger.info("Loaded %d x %d embedding table from %s", table.num_categories, table.dim, path)
    return table


def check_table_covers(table: SceneEmbeddingTable, categories: Iterable[str]) -> None:
    missing = [name for name in categories if name not in table.names]
    if missing:
        raise EmbeddingTableError(f"embedding table lacks categories: {', '.join(missing)}")
