"""
Checkpoint persistence: one archive holding the run configuration, its hash,
model parameters, optimizer state and the iteration counter.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from config import TrainConfig, config_hash, dump_train_config, parse_train_config
from errors import CheckpointMismatchError, DepthIOError
from network import ScaleDepthModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    config_hash: str
    model_hash: str
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]]
    iteration: int
    categories: Tuple[str, ...]


def save_checkpoint(path: PathLike, cfg: TrainConfig, model: ScaleDepthModel,
                    optimizer: Optional[torch.optim.Optimizer], iteration: int) -> Path:
    path = Path(path)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": dump_train_config(cfg),
        "config_hash": config_hash(cfg),
        "model_hash": config_hash(cfg.model),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "categories": list(cfg.data.categories),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise DepthIOError(f"cannot write checkpoint {path}: {e}")
    logger.info("Saved checkpoint %s (iteration %d)", path, iteration)
    return path


def load_checkpoint(path: PathLike, expected: Optional[TrainConfig] = None,
                    map_location: str = "cpu") -> Checkpoint:
    """Read a checkpoint; with `expected`, refuse one whose model configuration differs."""
    path = Path(path)
    if not path.is_file():
        raise DepthIOError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise DepthIOError(f"cannot read checkpoint {path}: {e}")

    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(f"{path} has unsupported format {payload.get('format_version')!r}")
    cfg = parse_train_config(payload["config"], base=TrainConfig())
    if config_hash(cfg) != payload["config_hash"]:
        raise CheckpointMismatchError(f"{path}: stored configuration does not match its hash")
    if expected is not None and config_hash(expected.model) != payload["model_hash"]:
        raise CheckpointMismatchError(
            f"{path} was trained with a different model configuration "
            f"(hash {payload['model_hash'][:12]} vs {config_hash(expected.model)[:12]})"
        )
    return Checkpoint(
        config=cfg,
        config_hash=payload["config_hash"],
        model_hash=payload["model_hash"],
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        iteration=int(payload["iteration"]),
        categories=tuple(payload["categories"]),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> ScaleDepthModel:
    # Pretrained encoder weights are already part of the saved state
    model = ScaleDepthModel(dataclasses.replace(ckpt.config.model, encoder_weights=""))
    model.load_state_dict(ckpt.model_state, strict=True)
    model.eval()
    return model


def load_encoder_weights(model: ScaleDepthModel, path: PathLike) -> None:
    """Load an encoder-only state dict, e.g. from a pretrained run."""
    path = Path(path)
    if not path.is_file():
        raise DepthIOError(f"encoder weights not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "model" in state and isinstance(state["model"], dict):
        state = {k[len("encoder."):]: v for k, v in state["model"].items() if k.startswith("encoder.")}
    try:
        model.encoder.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointMismatchError(f"encoder weights {path} do not fit this model: {e}")
    logger.info("Loaded encoder weights from %s", path)


def checkpoint_path(run_dir: PathLike, iteration: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"iter_{iteration:06d}.pt"


def latest_checkpoint(run_dir: PathLike) -> Optional[Path]:
    candidates = sorted((Path(run_dir) / "checkpoints").glob("iter_*.pt"))
    return candidates[-1] if candidates else None
