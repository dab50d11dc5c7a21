"""
Procedural scenes for training and evaluation.

Each scene is a back wall, an optional floor and a few fronto-parallel boxes,
laid out in relative depth and multiplied by the category's scale family. The
image shades surfaces by relative depth (nearer is brighter) and colors them
by category, so the relative map is visible in the image and the scale has to
be inferred from what kind of scene it is.
"""

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt
from torch.utils.data import DataLoader, Dataset, Sampler, default_collate

from depth_types import (DepthKind, DepthMap, default_intrinsics, load_depth_png, load_rgb_png,
                         save_depth_png, save_rgb_png)
from errors import DepthIOError, EmbeddingRejectionError
from sasp import SceneEmbeddingTable

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = ("kitchen", "bedroom", "office", "street", "highway", "forest")
DEFAULT_SCALE_FAMILIES = (10.0, 10.0, 10.0, 80.0, 80.0, 80.0)

DEPTH_DIVISOR = 256.0
WALL_DEPTH = 0.9
BOX_DEPTH_RANGE = (0.05, 0.85)
MAX_EMBEDDING_DRAWS = 200
SEPARATION_BOUND = 0.5

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SceneSpec:
    category: str
    scale_family: float
    layout_seed: int
    image_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not self.category or any(ch.isspace() for ch in self.category):
            raise ValueError(f"category name {self.category!r} must be non-empty without whitespace")
        if not self.scale_family > 0:
            raise ValueError(f"scale_family must be positive, got {self.scale_family}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ValueError(f"bad image size {self.image_size}")
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    depth: DepthMap
    category_index: int
    spec: Optional[SceneSpec] = None

    def __post_init__(self):
        if self.image.shape != self.depth.shape + (3,):
            raise ValueError(f"image shape {self.image.shape} does not match depth {self.depth.shape}")
        if self.category_index < 0:
            raise ValueError("category_index must be >= 0")


@dataclass(frozen=True)
class Box:
    """Fronto-parallel rectangle; extents are image fractions, depth is relative."""

    depth: float
    left: float
    right: float
    top: float
    bottom: float
    pattern: int = 0


@dataclass(frozen=True)
class Layout:
    boxes: Tuple[Box, ...] = ()
    # Camera height above the floor in relative units; None means no floor
    floor_height: Optional[float] = None


def sample_layout(seed: int) -> Layout:
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(int(rng.integers(1, 5))):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        half_w, half_h = rng.uniform(0.08, 0.25, size=2)
        boxes.append(Box(
            depth=float(rng.uniform(*BOX_DEPTH_RANGE)),
            left=float(cx - half_w), right=float(cx + half_w),
            top=float(cy - half_h), bottom=float(cy + half_h),
            pattern=int(rng.integers(0, 3)),
        ))
    floor = float(rng.uniform(0.15, 0.35)) if rng.random() < 0.7 else None
    return Layout(tuple(boxes), floor)


def render_layout(layout: Layout, image_size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Z-buffer a layout: (relative depth, surface id) with 0 = wall, 1 = floor, 2+ = boxes."""
    height, width = image_size
    K = default_intrinsics(height, width)
    rows = (np.arange(height) + 0.5)[:, None] * np.ones((1, width))
    cols = np.ones((height, 1)) * (np.arange(width) + 0.5)[None, :]

    depth = np.full((height, width), WALL_DEPTH)
    surface = np.zeros((height, width), dtype=np.int64)

    if layout.floor_height is not None:
        ray_y = (rows - K.cy) / K.fy
        below = ray_y > 0
        floor_z = np.where(below, layout.floor_height / np.where(below, ray_y, 1.0), np.inf)
        hit = floor_z < depth
        depth = np.where(hit, floor_z, depth)
        surface[hit] = 1

    for i, box in enumerate(layout.boxes):
        inside = ((cols >= box.left * width) & (cols < box.right * width)
                  & (rows >= box.top * height) & (rows < box.bottom * height))
        hit = inside & (box.depth < depth)
        depth = np.where(hit, box.depth, depth)
        surface[hit] = 2 + i
    return depth, surface


def category_albedo(category: str) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(category.encode("utf-8")))
    return rng.uniform(0.35, 1.0, size=3)


def shade(relative: np.ndarray, surface: np.ndarray, layout: Layout, category: str) -> np.ndarray:
    """RGB in [0, 1]: category albedo times depth shading times a per-surface pattern."""
    height, width = relative.shape
    albedo = category_albedo(category)
    rows, cols = np.mgrid[0:height, 0:width]
    pattern = np.ones_like(relative)

    patterns = {0: 0, 1: 1}
    patterns.update({2 + i: box.pattern for i, box in enumerate(layout.boxes)})
    for sid in np.unique(surface):
        region = surface == sid
        kind = patterns[int(sid)]
        if kind == 1:
            stripes = ((rows // 4 + cols // 4) % 2).astype(np.float64)
            pattern[region] = 0.85 + 0.15 * stripes[region]
        elif kind == 2:
            pattern[region] = 0.8 + 0.2 * ((cols[region] // 3) % 2)
        else:
            pattern[region] = 0.9 + 0.05 * (sid % 3)

    brightness = 1.0 - 0.75 * relative
    image = brightness[..., None] * pattern[..., None] * albedo[None, None, :]
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate(spec: SceneSpec, categories: Sequence[str] = DEFAULT_CATEGORIES) -> Sample:
    """Render one sample; a pure function of the spec."""
    if spec.category not in categories:
        raise ValueError(f"category {spec.category!r} not in {list(categories)}")
    layout = sample_layout(spec.layout_seed)
    relative, surface = render_layout(layout, spec.image_size)
    image = shade(relative, surface, layout, spec.category)
    depth = DepthMap.dense(relative * spec.scale_family, DepthKind.METRIC)
    return Sample(image, depth, list(categories).index(spec.category), spec)


def sparsify(sample: Sample, keep_fraction: float, seed: int) -> Sample:
    """Keep a uniformly random subset of valid pixels."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if keep_fraction == 1:
        return sample
    rng = np.random.default_rng(seed)
    keep = rng.random(sample.depth.shape) < keep_fraction
    depth = DepthMap(sample.depth.values, sample.depth.valid & keep, sample.depth.kind)
    return Sample(sample.image, depth, sample.category_index, sample.spec)


def build_pseudo_embeddings(names: Sequence[str], dim: int, seed: int) -> SceneEmbeddingTable:
    """Per-name seeded unit vectors with pairwise |cos| below 0.5, by rejection."""
    names = list(names)
    if len(set(names)) != len(names):
        raise ValueError("category names must be unique")
    if dim < 1:
        raise ValueError("embedding dimension must be >= 1")

    rows: List[np.ndarray] = []
    for name in names:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])

        @retry(stop=stop_after_attempt(MAX_EMBEDDING_DRAWS),
               retry=retry_if_exception_type(EmbeddingRejectionError), reraise=True)
        def draw() -> np.ndarray:
            v = rng.standard_normal(dim)
            v = v / np.linalg.norm(v)
            if rows and np.max(np.abs(np.stack(rows) @ v)) >= SEPARATION_BOUND:
                raise EmbeddingRejectionError(
                    f"no embedding for {name!r} within |cos| < {SEPARATION_BOUND} after {MAX_EMBEDDING_DRAWS} draws"
                )
            return v

        rows.append(draw())
    logger.debug("Built %d pseudo embeddings of width %d (seed %s)", len(names), dim, seed)
    return SceneEmbeddingTable(tuple(names), np.stack(rows), source="pseudo")


@dataclass(frozen=True)
class DatasetManifest:
    train: Tuple[SceneSpec, ...]
    val: Tuple[SceneSpec, ...]

    def split(self, name: str) -> Tuple[SceneSpec, ...]:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def make_split(n_train: int, n_val: int, categories: Sequence[str], scale_map: Dict[str, float],
               seed: int, image_size: Tuple[int, int] = (64, 64)) -> DatasetManifest:
    """Disjoint seeded train/val specs with categories balanced to within one sample."""
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    missing = [c for c in categories if c not in scale_map]
    if missing:
        raise ValueError(f"no scale family for categories {missing}")

    rng = np.random.default_rng(seed)
    layout_seeds = rng.choice(2 ** 31, size=n_train + n_val, replace=False)

    def specs(count: int, offset: int) -> Tuple[SceneSpec, ...]:
        order = rng.permutation([categories[i % len(categories)] for i in range(count)])
        return tuple(
            SceneSpec(str(cat), float(scale_map[cat]), int(layout_seeds[offset + i]), tuple(image_size))
            for i, cat in enumerate(order)
        )

    return DatasetManifest(specs(n_train, 0), specs(n_val, n_train))


def _format_scale(scale: float) -> str:
    short = f"{scale:g}"
    return short if float(short) == scale else repr(scale)


def format_manifest(specs: Sequence[SceneSpec]) -> str:
    return "".join(
        f"{s.category} {_format_scale(s.scale_family)} {s.layout_seed} {s.image_size[0]} {s.image_size[1]}\n"
        for s in specs
    )


def parse_manifest(text: str) -> Tuple[SceneSpec, ...]:
    specs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DepthIOError(f"manifest line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            specs.append(SceneSpec(parts[0], float(parts[1]), int(parts[2]), (int(parts[3]), int(parts[4]))))
        except ValueError as e:
            raise DepthIOError(f"manifest line {lineno}: {e}")
    return tuple(specs)


def save_manifest(manifest: DatasetManifest, data_dir: PathLike) -> None:
    data_dir = Path(data_dir)
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val"):
            (data_dir / f"{name}.txt").write_text(format_manifest(manifest.split(name)), encoding="utf-8")
    except OSError as e:
        raise DepthIOError(f"cannot write manifest under {data_dir}: {e}")


def load_manifest(data_dir: PathLike) -> DatasetManifest:
    data_dir = Path(data_dir)
    splits = {}
    for name in ("train", "val"):
        path = data_dir / f"{name}.txt"
        if not path.is_file():
            raise DepthIOError(f"manifest not found: {path}")
        splits[name] = parse_manifest(path.read_text(encoding="utf-8"))
    return DatasetManifest(**splits)


def sample_paths(data_dir: PathLike, split: str, index: int, spec: SceneSpec) -> Tuple[Path, Path]:
    stem = Path(data_dir) / split / f"{index:05d}_{spec.category}"
    return stem.with_name(stem.name + "_rgb.png"), stem.with_name(stem.name + "_depth.png")


def materialize(manifest: DatasetManifest, data_dir: PathLike, categories: Sequence[str] = DEFAULT_CATEGORIES,
                keep_fraction: float = 1.0, seed: int = 0) -> int:
    """Write manifests and RGB/depth PNG pairs; training depth is sparsified by keep_fraction."""
    save_manifest(manifest, data_dir)
    written = 0
    for split in ("train", "val"):
        for index, spec in enumerate(manifest.split(split)):
            sample = generate(spec, categories)
            if split == "train":
                sample = sparsify(sample, keep_fraction, seed + index)
            rgb_path, depth_path = sample_paths(data_dir, split, index, spec)
            save_rgb_png(sample.image, rgb_path)
            save_depth_png(sample.depth, depth_path, DEPTH_DIVISOR)
            written += 1
    logger.info("Materialized %d samples under %s", written, data_dir)
    return written


def load_split(data_dir: PathLike, split: str, categories: Sequence[str] = DEFAULT_CATEGORIES) -> List[Sample]:
    """Read a materialized split back as samples (8-bit images, quantized depth)."""
    manifest = load_manifest(data_dir)
    samples = []
    for index, spec in enumerate(manifest.split(split)):
        if spec.category not in categories:
            raise DepthIOError(f"manifest category {spec.category!r} is not configured")
        rgb_path, depth_path = sample_paths(data_dir, split, index, spec)
        image = load_rgb_png(rgb_path)
        depth = load_depth_png(depth_path, DEPTH_DIVISOR)
        if depth.shape != tuple(spec.image_size):
            raise DepthIOError(f"{depth_path} has shape {depth.shape}, manifest says {spec.image_size}")
        samples.append(Sample(image, depth, list(categories).index(spec.category), spec))
    return samples


# (index, top, left, height, width); a bare index means the whole sample
CropKey = Union[int, Tuple[int, int, int, int, int]]


@dataclass
class Batch:
    image: torch.Tensor
    depth: torch.Tensor
    valid: torch.Tensor
    labels: torch.Tensor
    scale_family: torch.Tensor

    def to(self, device) -> "Batch":
        return Batch(self.image.to(device), self.depth.to(device), self.valid.to(device),
                     self.labels.to(device), self.scale_family.to(device))


def collate_batch(items: Sequence[Dict[str, torch.Tensor]]) -> Batch:
    return Batch(**default_collate(list(items)))


class RandomCropSampler(Sampler):
    """Yields crop keys drawn from `generator`: sample indices, then a crop window per sample.

    With `indices` the samples are taken in that order; otherwise `num_samples` are drawn,
    without replacement unless the dataset is smaller than that.
    """

    def __init__(self, dataset: "SceneDataset", crop_size: Optional[Tuple[int, int]] = None,
                 generator: Optional[torch.Generator] = None, indices: Optional[Sequence[int]] = None,
                 num_samples: Optional[int] = None):
        if indices is None and num_samples is None:
            raise ValueError("give either indices or num_samples")
        self.dataset = dataset
        self.crop_size = crop_size
        self.generator = generator
        self.indices = None if indices is None else [int(i) for i in indices]
        self.num_samples = len(self.indices) if self.indices is not None else int(num_samples)

    def __len__(self) -> int:
        return self.num_samples

    def _draw(self, high: int) -> int:
        if self.generator is None or high <= 1:
            return 0
        return int(torch.randint(high, (1,), generator=self.generator))

    def _indices(self) -> List[int]:
        if self.indices is not None:
            return self.indices
        total = len(self.dataset)
        if total < self.num_samples:
            return torch.randint(total, (self.num_samples,), generator=self.generator).tolist()
        return torch.randperm(total, generator=self.generator)[:self.num_samples].tolist()

    def __iter__(self) -> Iterator[CropKey]:
        for index in self._indices():
            height, width = self.dataset.samples[index].depth.shape
            ch, cw = self.crop_size or (height, width)
            if ch > height or cw > width:
                raise ValueError(f"crop {self.crop_size} larger than sample {height}x{width}")
            yield index, self._draw(height - ch + 1), self._draw(width - cw + 1), ch, cw


class SceneDataset(Dataset):
    """Samples as tensors; keys from RandomCropSampler select a crop window."""

    def __init__(self, samples: Optional[Sequence[Sample]] = None, dtype: torch.dtype = torch.float32):
        self.samples: List[Sample] = list(samples or [])
        self.dtype = dtype

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, key: CropKey) -> Dict[str, torch.Tensor]:
        if isinstance(key, tuple):
            index, top, left, ch, cw = key
        else:
            index, top, left = int(key), 0, 0
            ch, cw = self.samples[index].depth.shape
        sample = self.samples[index]
        window = (slice(top, top + ch), slice(left, left + cw))
        depth = np.where(sample.depth.valid, sample.depth.values, 0.0)[window]
        return {
            "image": torch.from_numpy(np.ascontiguousarray(sample.image[window].transpose(2, 0, 1))).to(self.dtype),
            "depth": torch.from_numpy(np.ascontiguousarray(depth)).to(self.dtype),
            "valid": torch.from_numpy(np.ascontiguousarray(sample.depth.valid[window])),
            "labels": torch.tensor(sample.category_index, dtype=torch.long),
            "scale_family": torch.tensor(sample.spec.scale_family if sample.spec is not None else float("nan"),
                                         dtype=torch.float64),
        }

    @classmethod
    def from_directory(cls, data_dir: PathLike, split: str,
                       categories: Sequence[str] = DEFAULT_CATEGORIES) -> "SceneDataset":
        return cls(load_split(data_dir, split, categories))

    @classmethod
    def from_manifest(cls, specs: Sequence[SceneSpec],
                      categories: Sequence[str] = DEFAULT_CATEGORIES) -> "SceneDataset":
        return cls([generate(spec, categories) for spec in specs])

    def loader(self, sampler: RandomCropSampler) -> DataLoader:
        return DataLoader(self, batch_size=len(sampler), sampler=sampler, collate_fn=collate_batch)
