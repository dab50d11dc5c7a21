"""
Configuration module for ScaleDepth.
Manages environment-specific settings, run configuration files and presets.
"""

import configparser
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from dotenv import load_dotenv

from depth_types import POLICIES, ValidityPolicy
from errors import ConfigError
from losses import LossConfig
from network import ModelConfig

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Environment configuration."""

    # Reproducibility
    SEED = os.environ.get("SCALEDEPTH_SEED")

    # Paths
    DATA_DIR = os.environ.get("SCALEDEPTH_DATA_DIR", "data")
    RUN_DIR = os.environ.get("SCALEDEPTH_RUN_DIR", "runs")

    # Compute
    DEVICE = os.environ.get("SCALEDEPTH_DEVICE", "cpu")

    # Remote embedding tables
    EMBEDDINGS_URL = os.environ.get("EMBEDDINGS_URL")
    FETCH_TIMEOUT = int(os.environ.get("FETCH_TIMEOUT", "10"))

    # Logging
    LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")

    @classmethod
    def seed_override(cls) -> Optional[int]:
        """Seed from SCALEDEPTH_SEED, read at call time so late exports apply."""
        raw = os.environ.get("SCALEDEPTH_SEED", cls.SEED)
        if raw is None or raw.strip() == "":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"SCALEDEPTH_SEED must be an integer, got {raw!r}")

    @classmethod
    def is_gpu(cls) -> bool:
        """Check if a CUDA device was requested."""
        return cls.DEVICE.lower().startswith("cuda")

    @classmethod
    def validate(cls) -> Dict[str, Any]:
        """Validate configuration and return status."""
        status = {
            "valid": True,
            "errors": [],
            "warnings": [],
            "device": cls.DEVICE,
            "data_dir": cls.DATA_DIR,
            "run_dir": cls.RUN_DIR,
        }

        try:
            seed = cls.seed_override()
            status["seed_override"] = seed
        except ConfigError as e:
            status["errors"].append(str(e))
            status["valid"] = False

        if not isinstance(logging.getLevelName(cls.LOG_LEVEL.upper()), int):
            status["errors"].append(f"LOG_LEVEL {cls.LOG_LEVEL!r} is not a logging level")
            status["valid"] = False

        if cls.is_gpu():
            status["warnings"].append("CUDA kernels are not bitwise deterministic; runs may not repeat exactly")

        if cls.EMBEDDINGS_URL and not cls.EMBEDDINGS_URL.startswith(("http://", "https://")):
            status["errors"].append("EMBEDDINGS_URL must be an http(s) URL")
            status["valid"] = False

        return status


def configure_logging(level: Optional[str] = None) -> None:
    """Apply LOG_LEVEL to the root logger."""
    logging.basicConfig(
        level=(level or Config.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    encoder_lr_scale: float = 0.1

    def __post_init__(self):
        if self.kind != "adamw":
            raise ConfigError(f"unsupported optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("optimizer.lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.encoder_lr_scale <= 0:
            raise ConfigError("weight_decay must be >= 0 and encoder_lr_scale > 0")


@dataclass(frozen=True)
class DataConfig:
    data_dir: str = Config.DATA_DIR
    categories: Tuple[str, ...] = ("kitchen", "bedroom", "office", "street", "highway", "forest")
    scale_families: Tuple[float, ...] = (10.0, 10.0, 10.0, 80.0, 80.0, 80.0)
    image_size: Tuple[int, int] = (64, 64)
    n_train: int = 64
    n_val: int = 16
    split_seed: int = 7
    keep_fraction: float = 1.0
    # "pseudo", "none", a table file path or an http(s) URL
    embeddings: str = Config.EMBEDDINGS_URL or "pseudo"
    embedding_seed: int = 0

    def __post_init__(self):
        if len(self.categories) != len(self.scale_families):
            raise ConfigError("data.categories and data.scale_families must have equal length")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigError("data.categories must be unique")
        if any(s <= 0 for s in self.scale_families):
            raise ConfigError("data.scale_families must be positive")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("data.n_train and data.n_val must be >= 1")
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError("data.keep_fraction must lie in (0, 1]")

    @property
    def scale_map(self) -> Dict[str, float]:
        return dict(zip(self.categories, self.scale_families))


@dataclass(frozen=True)
class EvalConfig:
    min_depth: float = 0.001
    max_depth: float = 255.0
    # "range" scores [min_depth, max_depth]; "nyu" / "kitti" select the standard caps
    policy: str = "range"

    def __post_init__(self):
        if self.policy != "range" and self.policy not in POLICIES:
            raise ConfigError(f"eval.policy must be 'range' or one of {', '.join(sorted(POLICIES))}")
        if self.policy == "range" and not 0 < self.min_depth < self.max_depth:
            raise ConfigError(f"eval needs 0 < min_depth < max_depth, got ({self.min_depth}, {self.max_depth})")

    def validity_policy(self) -> ValidityPolicy:
        if self.policy == "range":
            return ValidityPolicy(self.min_depth, self.max_depth)
        return POLICIES[self.policy]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    iterations: int = 2000
    batch_size: int = 8
    crop_size: Tuple[int, int] = (64, 64)
    seed: int = 0
    # "text": TI supervision through the embedding table; "image": SASP without it
    scale_condition: str = "text"
    log_every: int = 50
    eval_every: int = 500
    checkpoint_every: int = 500
    run_dir: str = f"{Config.RUN_DIR}/default"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("train.iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if any(c <= 0 or c % 32 for c in self.crop_size):
            raise ConfigError(f"train.crop_size {self.crop_size} must be positive multiples of 32")
        if self.scale_condition not in ("text", "image"):
            raise ConfigError("train.scale_condition must be 'text' or 'image'")
        if self.scale_condition == "text" and self.data.embeddings == "none":
            raise ConfigError("scale_condition 'text' needs an embedding table (data.embeddings)")
        if self.model.text_dim <= 0:
            raise ConfigError("model.text_dim must be positive")

    @property
    def uses_text(self) -> bool:
        return self.scale_condition == "text"


def config_hash(record: Any) -> str:
    """SHA-256 over the canonical JSON form of a config dataclass."""
    payload = json.dumps(dataclasses.asdict(record), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _coerce(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(item) for item in items)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(default).__name__}")


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_from(parser: configparser.ConfigParser, name: str, base: Any) -> Any:
    if not parser.has_section(name):
        return base
    values = {}
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        values[key] = _coerce(raw, known[key], f"[{name}] {key}")
    return dataclasses.replace(base, **values)


def parse_train_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse an INI-style run configuration on top of `base` (or a preset)."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}")

    if base is None:
        preset = parser.get("train", "preset", fallback="toy")
        base = preset_config(preset)

    for name in parser.sections():
        if name not in _SECTIONS and name != "train":
            raise ConfigError(f"unknown section [{name}]")

    sections = {name: _section_from(parser, name, getattr(base, name)) for name in _SECTIONS}
    top = {}
    if parser.has_section("train"):
        scalar_fields = {f.name: getattr(base, f.name) for f in dataclasses.fields(base) if f.name not in _SECTIONS}
        for key, raw in parser.items("train"):
            if key == "preset":
                continue
            if key not in scalar_fields:
                raise ConfigError(f"unknown key [train] {key}")
            top[key] = _coerce(raw, scalar_fields[key], f"[train] {key}")
    return dataclasses.replace(base, **sections, **top)


def load_train_config(path: str) -> TrainConfig:
    """Load a run configuration; SCALEDEPTH_SEED overrides its seed."""
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return with_seed_override(parse_train_config(config_path.read_text(encoding="utf-8")))


def with_seed_override(cfg: TrainConfig) -> TrainConfig:
    seed = Config.seed_override()
    if seed is not None and seed != cfg.seed:
        logger.info("SCALEDEPTH_SEED overrides config seed %s -> %s", cfg.seed, seed)
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def dump_train_config(cfg: TrainConfig) -> str:
    """Render a configuration back into the INI-style file format."""
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    lines.append("[train]")
    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def save_train_config(cfg: TrainConfig, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_train_config(cfg), encoding="utf-8")


def _toy() -> TrainConfig:
    return TrainConfig()


def _overfit() -> TrainConfig:
    return TrainConfig(
        data=DataConfig(n_train=8, n_val=8),
        optimizer=OptimizerConfig(lr=1e-3),
        iterations=2000,
        batch_size=8,
        eval_every=1000,
        checkpoint_every=1000,
        run_dir=f"{Config.RUN_DIR}/overfit",
    )


def _scale_separation() -> TrainConfig:
    return TrainConfig(
        model=ModelConfig(scale_init=28.0),
        data=DataConfig(n_train=128, n_val=32),
        optimizer=OptimizerConfig(lr=5e-4),
        iterations=5000,
        batch_size=8,
        eval_every=1000,
        checkpoint_every=1000,
        run_dir=f"{Config.RUN_DIR}/scale-separation",
    )


def _gradcheck() -> TrainConfig:
    return TrainConfig(
        model=ModelConfig(
            width=8, num_bins=4, num_scale_queries=2, num_heads=2, num_blocks=1,
            layers_per_block=2, text_dim=8, encoder_widths=(4, 8, 8, 8), ffn_dim=16,
        ),
        data=DataConfig(image_size=(32, 32), n_train=2, n_val=1),
        iterations=1,
        batch_size=2,
        crop_size=(32, 32),
        run_dir=f"{Config.RUN_DIR}/gradcheck",
    )


def _full_size(crop: Tuple[int, int], batch: int, name: str, policy: str = "range") -> Callable[[], TrainConfig]:
    def build() -> TrainConfig:
        return TrainConfig(
            model=ModelConfig(variant="large", width=256),
            data=DataConfig(image_size=crop),
            eval=EvalConfig(policy=policy),
            iterations=40000,
            batch_size=batch,
            crop_size=crop,
            run_dir=f"{Config.RUN_DIR}/{name}",
        )
    return build


PRESETS: Dict[str, Callable[[], TrainConfig]] = {
    "toy": _toy,
    "overfit": _overfit,
    "scale-separation": _scale_separation,
    "gradcheck": _gradcheck,
    # Full-size NYU / KITTI protocol values; far too large for CPU runs.
    "full-nyu": _full_size((480, 480), 24, "full-nyu", "nyu"),
    "full-kitti": _full_size((352, 1120), 24, "full-kitti", "kitti"),
    "full-nk": _full_size((352, 512), 32, "full-nk"),
}


def preset_config(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    return PRESETS[name]()


def print_config_status():
    """Print current configuration status."""
    print("🔧 Configuration Status")
    print("=" * 40)

    status = Config.validate()

    print(f"Device: {status['device']}")
    print(f"Data dir: {status['data_dir']}")
    print(f"Run dir: {status['run_dir']}")
    print(f"Seed override: {status.get('seed_override')}")
    print(f"Valid: {'✅ Yes' if status['valid'] else '❌ No'}")

    if status['errors']:
        print("\n❌ Errors:")
        for error in status['errors']:
            print(f"   - {error}")

    if status['warnings']:
        print("\n⚠️  Warnings:")
        for warning in status['warnings']:
            print(f"   - {warning}")

    if status['valid']:
        print("\n✅ Configuration is valid!")
    else:
        print("\n❌ Configuration has errors. Please fix them before proceeding.")


if __name__ == "__main__":
    print_config_status()
