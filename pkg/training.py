"""
Training loop, validation and dataset/embedding resolution for a run.

Batches and crops for iteration i are drawn from a generator seeded with
(seed, i), so a resumed run sees exactly the batches the original would have.
"""

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pybreaker import CircuitBreaker, CircuitBreakerError
from tqdm import tqdm

from checkpoint import checkpoint_path, load_checkpoint, load_encoder_weights, save_checkpoint
from config import Config, TrainConfig, config_hash, save_train_config
from depth_types import PathLike, ValidityPolicy, apply_validity, save_rgb_png
from errors import ConfigError, DepthIOError, NonFiniteLossError, TrainingDivergedError
from losses import LossBreakdown, si_loss, ti_loss, total_loss
from metrics import MetricReport, aggregate, aggregate_by, evaluate, report_to_dict
from network import ModelOutput, ScaleDepthModel, image_to_tensor, to_prediction
from sasp import SceneEmbeddingTable, check_table_covers, load_embedding_table, synthesize_metric
from synthscenes import (Batch, RandomCropSampler, SceneDataset, Sample, build_pseudo_embeddings,
                         load_manifest)
from visualize import colorize_error

logger = logging.getLogger(__name__)

# Consecutive non-finite steps tolerated before a run is aborted
MAX_BAD_STEPS = 5


@dataclass
class EvaluationResult:
    per_image: Dict[str, MetricReport]
    failures: Dict[str, str]
    summary: Optional[MetricReport]
    per_family: Dict[float, MetricReport]
    mean_scale: Dict[float, float]
    scene_accuracy: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "summary": report_to_dict(self.summary) if self.summary else None,
            "per_family": {f"{k:g}": report_to_dict(v) for k, v in self.per_family.items()},
            "mean_scale": {f"{k:g}": v for k, v in self.mean_scale.items()},
            "scene_accuracy": self.scene_accuracy,
            "failures": dict(self.failures),
        }


@dataclass
class RunRecord:
    config_hash: str
    run_dir: Path
    losses: List[Dict[str, float]] = field(default_factory=list)
    validations: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    skipped_steps: int = 0
    model: Optional[ScaleDepthModel] = field(default=None, repr=False)

    @property
    def loss_log(self) -> Path:
        return self.run_dir / "losses.jsonl"

    @property
    def validation_log(self) -> Path:
        return self.run_dir / "validation.jsonl"


def _append_jsonl(path: Path, entry: Dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def resolve_embeddings(cfg: TrainConfig) -> Optional[SceneEmbeddingTable]:
    """The run's scene embedding table: pseudo, a file, a URL, or None."""
    source = cfg.data.embeddings
    if source == "none":
        return None
    if source == "pseudo":
        table = build_pseudo_embeddings(cfg.data.categories, cfg.model.text_dim, cfg.data.embedding_seed)
    else:
        table = load_embedding_table(source, timeout=Config.FETCH_TIMEOUT)
        check_table_covers(table, cfg.data.categories)
    if table.dim != cfg.model.text_dim:
        raise ConfigError(f"embedding width {table.dim} != model.text_dim {cfg.model.text_dim}")
    return table


def table_labels(table: SceneEmbeddingTable, categories: Sequence[str]) -> torch.Tensor:
    """Row of the table for each dataset category index."""
    return torch.tensor([table.index(name) for name in categories], dtype=torch.long)


def load_datasets(cfg: TrainConfig) -> Tuple[SceneDataset, SceneDataset]:
    data_dir = Path(cfg.data.data_dir)
    if not (data_dir / "train.txt").is_file():
        raise DepthIOError(f"no dataset under {data_dir}; run gen-data first")
    manifest = load_manifest(data_dir)
    for spec in manifest.train + manifest.val:
        if spec.category not in cfg.data.categories:
            raise ConfigError(f"dataset category {spec.category!r} is not in data.categories")
        if spec.image_size[0] < cfg.crop_size[0] or spec.image_size[1] < cfg.crop_size[1]:
            raise ConfigError(f"dataset images {spec.image_size} are smaller than crop {cfg.crop_size}")
    train_set = SceneDataset.from_directory(data_dir, "train", cfg.data.categories)
    val_set = SceneDataset.from_directory(data_dir, "val", cfg.data.categories)
    logger.info("Loaded %d train / %d val samples from %s", len(train_set), len(val_set), data_dir)
    return train_set, val_set


def build_model(cfg: TrainConfig) -> ScaleDepthModel:
    torch.manual_seed(cfg.seed)
    model = ScaleDepthModel(cfg.model)
    if cfg.model.encoder_weights:
        load_encoder_weights(model, cfg.model.encoder_weights)
    return model


def build_optimizer(model: ScaleDepthModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW; a loaded pretrained encoder trains at lr * encoder_lr_scale.

    The scale head's temperature and log-scale bias are kept out of weight decay.
    """
    opt = cfg.optimizer
    if cfg.model.encoder_weights:
        by_lr = [(list(model.encoder_parameters()), opt.lr * opt.encoder_lr_scale),
                 (model.non_encoder_parameters(), opt.lr)]
    else:
        by_lr = [(list(model.parameters()), opt.lr)]
    undecayed = {id(p) for p in model.scale_head.undecayed_parameters()}
    groups = []
    for params, lr in by_lr:
        groups.append({"params": [p for p in params if id(p) not in undecayed], "lr": lr})
        kept = [p for p in params if id(p) in undecayed]
        if kept:
            groups.append({"params": kept, "lr": lr, "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay)


def batch_generator(seed: int, iteration: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, iteration]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def batch_for(dataset: SceneDataset, cfg: TrainConfig, iteration: int) -> Batch:
    sampler = RandomCropSampler(dataset, cfg.crop_size, batch_generator(cfg.seed, iteration),
                                num_samples=cfg.batch_size)
    return next(iter(dataset.loader(sampler)))


def compute_loss(model: ScaleDepthModel, batch: Batch, cfg: TrainConfig,
                 text: Optional[torch.Tensor] = None,
                 labels_map: Optional[torch.Tensor] = None) -> Tuple[LossBreakdown, ModelOutput]:
    aux_weight = cfg.model.aux_layer_weight
    use_text = cfg.uses_text and text is not None
    output = model(batch.image, text if use_text else None, return_decoder=aux_weight > 0)

    si = si_loss(output.relative, output.metric, batch.depth, cfg.loss, valid=batch.valid)
    ti = None
    if output.scene is not None:
        ti = ti_loss(output.scene, labels_map[batch.labels])

    aux = None
    if aux_weight > 0:
        size = tuple(batch.image.shape[-2:])
        terms = [
            si_loss(rel, synthesize_metric(output.scale, rel), batch.depth, cfg.loss, valid=batch.valid)
            for rel in model.layer_relative_depths(output.decoder, size)
        ]
        if terms:
            aux = torch.stack(terms).mean()
    breakdown = total_loss(si, ti, cfg.loss, int(batch.valid.sum()), aux, aux_weight)
    return breakdown, output


def _step(model, optimizer, batch, cfg, text, labels_map) -> LossBreakdown:
    optimizer.zero_grad(set_to_none=True)
    breakdown, _ = compute_loss(model, batch, cfg, text, labels_map)
    breakdown.total.backward()
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            optimizer.zero_grad(set_to_none=True)
            raise NonFiniteLossError("non-finite gradient")
    optimizer.step()
    return breakdown


@torch.no_grad()
def evaluate_samples(model: Optional[ScaleDepthModel], samples: Sequence[Sample], policy: ValidityPolicy,
                     table: Optional[SceneEmbeddingTable] = None, categories: Sequence[str] = (),
                     oracle: bool = False, error_dir: Optional[PathLike] = None) -> EvaluationResult:
    """Per-image metrics, per-family summaries, mean predicted scale and scene accuracy.

    In oracle mode the ground truth is scored against itself and no model is needed.
    With `error_dir`, a signed error image <name>_error.png is written per scored image.
    """
    if not oracle and model is None:
        raise ValueError("a model is required unless oracle mode is on")
    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()
    text = None
    if table is not None and model is not None:
        param = next(model.parameters())
        text = table.as_tensor(dtype=param.dtype, device=param.device)

    per_image: Dict[str, MetricReport] = {}
    failures: Dict[str, str] = {}
    families: List[Tuple[float, MetricReport]] = []
    scales: Dict[float, List[float]] = defaultdict(list)
    correct = total = 0
    try:
        for index, sample in enumerate(samples):
            category = sample.spec.category if sample.spec else str(sample.category_index)
            name = f"{index:05d}_{category}"
            family = sample.spec.scale_family if sample.spec else float("nan")
            if oracle:
                pred = shown = sample.depth
            else:
                param = next(model.parameters())
                output = model(image_to_tensor(sample.image, param.dtype).to(param.device), text)
                prediction = to_prediction(output)
                pred, shown = prediction.raw_metric, prediction.metric
                scales[family].append(prediction.scale)
                if prediction.scene is not None and categories:
                    total += 1
                    correct += int(np.argmax(prediction.scene) == table.index(categories[sample.category_index]))
            try:
                report = evaluate(pred, sample.depth, policy)
            except ValueError as e:
                failures[name] = str(e)
                logger.warning("Skipping %s in aggregate: %s", name, e)
                continue
            per_image[name] = report
            families.append((family, report))
            if error_dir is not None:
                error = colorize_error(shown, apply_validity(sample.depth, policy))
                save_rgb_png(error, Path(error_dir) / f"{name}_error.png")
    finally:
        if model is not None:
            model.train(was_training)

    summary = aggregate(per_image.values()) if per_image else None
    mean_scale = {k: math.fsum(v) / len(v) for k, v in scales.items()}
    return EvaluationResult(per_image, failures, summary, aggregate_by(families), mean_scale,
                            correct / total if total else None)


def validate(model: ScaleDepthModel, dataset: SceneDataset, cfg: TrainConfig,
             table: Optional[SceneEmbeddingTable] = None) -> EvaluationResult:
    policy = cfg.eval.validity_policy()
    return evaluate_samples(model, dataset.samples, policy, table, cfg.data.categories)


def train(cfg: TrainConfig, train_set: Optional[SceneDataset] = None, val_set: Optional[SceneDataset] = None,
          resume: Optional[PathLike] = None, progress: bool = True) -> RunRecord:
    """Run (or resume) training; writes config, loss/validation logs and checkpoints under cfg.run_dir."""
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_train_config(cfg, run_dir / "config.ini")
    if train_set is None:
        train_set, val_set = load_datasets(cfg)
    if len(train_set) == 0:
        raise ConfigError("training set is empty")

    table = resolve_embeddings(cfg)
    text = table.as_tensor() if table is not None else None
    labels_map = table_labels(table, cfg.data.categories) if table is not None else None

    device = torch.device(Config.DEVICE)
    if text is not None:
        text, labels_map = text.to(device), labels_map.to(device)
    model = build_model(cfg).to(device)
    optimizer = build_optimizer(model, cfg)
    start = 1
    if resume:
        ckpt = load_checkpoint(resume, expected=cfg)
        if ckpt.config_hash != config_hash(cfg):
            logger.warning("Resuming %s under a different run configuration", resume)
        model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        start = ckpt.iteration + 1
        logger.info("Resumed from %s at iteration %d", resume, ckpt.iteration)

    record = RunRecord(config_hash(cfg), run_dir, model=model)
    breaker = CircuitBreaker(fail_max=MAX_BAD_STEPS, reset_timeout=3600)
    logger.info("Training %d iterations (hash %s) in %s", cfg.iterations, record.config_hash[:12], run_dir)

    model.train()
    bar = tqdm(range(start, cfg.iterations + 1), desc="train", disable=not progress)
    for iteration in bar:
        batch = batch_for(train_set, cfg, iteration).to(device)
        try:
            breakdown = breaker.call(_step, model, optimizer, batch, cfg, text, labels_map)
        except CircuitBreakerError:
            raise TrainingDivergedError(f"{MAX_BAD_STEPS} consecutive non-finite steps, last at iteration {iteration}")
        except NonFiniteLossError as e:
            record.skipped_steps += 1
            logger.warning("Skipped update at iteration %d: %s", iteration, e)
            continue

        entry = {"iteration": iteration, **breakdown.as_record()}
        record.losses.append(entry)
        _append_jsonl(record.loss_log, entry)
        bar.set_postfix(total=f"{entry['total']:.4f}", si=f"{entry['si']:.4f}")
        if iteration % cfg.log_every == 0:
            logger.info("iter %d/%d total=%.4f si=%.4f ti=%.4f",
                        iteration, cfg.iterations, entry["total"], entry["si"], entry["ti"])

        last = iteration == cfg.iterations
        if val_set is not None and len(val_set) and (iteration % cfg.eval_every == 0 or last):
            result = validate(model, val_set, cfg, table)
            summary = {"iteration": iteration, **result.to_dict()}
            record.validations.append(summary)
            _append_jsonl(record.validation_log, summary)
            if result.summary is not None:
                logger.info("validation @%d: arel=%.4f delta1=%.4f", iteration,
                            result.summary.arel, result.summary.delta1)
        if iteration % cfg.checkpoint_every == 0 or last:
            record.checkpoints.append(
                save_checkpoint(checkpoint_path(run_dir, iteration), cfg, model, optimizer, iteration)
            )
    return record
