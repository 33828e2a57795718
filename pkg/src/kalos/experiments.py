"""Experiment drivers: pre-training and fine-tuning runs and the evaluation protocols.

Each driver takes a validated ExperimentConfig and an output directory laid
out by ``create_output_structure``; checkpoints, JSON-lines logs, reports
and plots land in the matching subdirectories.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .anchor import dump_anchor
from .config import ExperimentConfig, apply_overrides, config_hash
from .encoders import seed_everything
from .errors import ConfigError
from .evaluation import (
    EvalResult,
    OraclePredictor,
    average_results,
    compute_result,
    evaluate,
    holdout_split,
    kfold_split,
    require_labels,
    scatter_plot,
    write_report,
)
from .fusion_finetune import (
    FinetuneState,
    ModelPredictor,
    QualityModel,
    finetune_epoch,
    predict_scores,
    prepare_data,
    save_model,
)
from .pointcloud_io import DatasetManifest, load_manifest
from .pretrain import PretrainBatch, PretrainState, check_pretrain_manifest, pretrain_epoch
from .render_cache import RenderCache
from .utils.file_utils import create_output_structure

logger = logging.getLogger(__name__)

ABLATIONS: Dict[str, List[str]] = {
    "full": [],
    "no_pretrain": ["finetune.use_pretrained=false"],
    "distortion_only": ["pretrain.lambda_weight=1.0"],
    "content_only": ["pretrain.lambda_weight=0.0"],
    "max_pooling": ["fusion.mode=max"],
    "average_pooling": ["fusion.mode=mean"],
    "mse_only": ["finetune.alpha=1.0"],
}

EpochCallback = Callable[[Dict[str, Any]], None]


def apply_ablation(config: ExperimentConfig, name: str) -> ExperimentConfig:
    """Copy of ``config`` with an ablation preset applied.

    Raises:
        ConfigError: If the preset is unknown
    """
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}", field="ablation")
    return apply_overrides(config, ABLATIONS[name])


def make_cache(config: ExperimentConfig) -> RenderCache:
    return RenderCache(
        config.render,
        config.paths.resolved_cache_dir(),
        seed=config.seed,
        rotations_per_cloud=config.pretrain.rotations_per_cloud,
    )


def run_pretrain(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    resume: Optional[Path] = None,
    dump_anchors: int = 0,
    on_epoch: Optional[EpochCallback] = None,
) -> Path:
    """Pre-train the quality encoder for ``pretrain.epochs`` epochs.

    Args:
        config: Validated configuration
        manifest: Pre-training manifest (labels ignored)
        out_dir: Output root
        resume: Optional pre-training checkpoint to continue from
        dump_anchors: Number of anchors of the first batch to save as PNG
        on_epoch: Optional callback receiving each epoch's metrics

    Returns:
        Path of the final checkpoint
    """
    out_dir = create_output_structure(out_dir)
    check_pretrain_manifest(manifest)
    seed_everything(config.seed, config.runtime.deterministic)
    state = PretrainState.load(resume, config) if resume else PretrainState.create(config)
    cache = make_cache(config)
    log_path = out_dir / "logs" / "pretrain.jsonl"
    logger.info(
        f"Pre-training on {len(manifest)} entries from epoch {state.epoch} to {config.pretrain.epochs} "
        f"(config {config_hash(config)[:12]}, seed {config.seed})"
    )

    remaining = [dump_anchors]

    def sink(batch: PretrainBatch) -> None:
        for anchor in batch.anchors[:remaining[0]]:
            index = dump_anchors - remaining[0]
            dump_anchor(anchor, out_dir / "anchors" / f"anchor_{index:04d}.png")
            remaining[0] -= 1

    for _ in range(state.epoch, config.pretrain.epochs):
        metrics = pretrain_epoch(state, manifest, cache, config, log_path, sink if remaining[0] > 0 else None)
        if on_epoch:
            on_epoch(metrics)

    logger.info(f"Render cache: {cache.stats()}")
    return state.save(out_dir / "checkpoints" / "pretrain.npz", config)


@dataclass
class FinetuneRun:
    """Outcome of one fine-tuning run."""

    model: QualityModel
    checkpoint: Path
    best_epoch: Optional[int]
    selection: str
    history: List[Dict[str, Any]] = field(default_factory=list)


def run_finetune(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    pretrained: Optional[Path] = None,
    validation: Optional[DatasetManifest] = None,
    tag: str = "finetune",
    on_epoch: Optional[EpochCallback] = None,
) -> FinetuneRun:
    """Fine-tune the full model and keep the selected epoch's weights.

    Without ``validation`` the epoch with minimal training loss is kept;
    with it, the epoch with the best validation SROCC.

    Raises:
        DatasetError: If the manifest has unlabeled entries
    """
    out_dir = create_output_structure(out_dir)
    require_labels(manifest)
    seed_everything(config.seed, config.runtime.deterministic)
    if config.finetune.use_pretrained and pretrained is None:
        logger.warning("No pre-trained checkpoint given; fine-tuning from random initialisation")
    state = FinetuneState.create(config, pretrained)
    cache = make_cache(config)
    data = prepare_data(manifest, cache)
    val_data = prepare_data(validation, cache) if validation is not None else None
    val_mos = require_labels(validation) if validation is not None else None
    log_path = out_dir / "logs" / f"{tag}.jsonl"
    selection = "validation_srocc" if validation is not None else "train_loss"

    best_state = copy.deepcopy(state.model.state_dict())
    best_epoch: Optional[int] = None
    best_score = float("inf")
    history = []
    for _ in range(config.finetune.epochs):
        metrics = finetune_epoch(state, data, config, log_path)
        if val_data is not None:
            result = compute_result(predict_scores(state.model, val_data), val_mos)
            metrics["validation_srocc"] = result.srocc
            score = -result.srocc if np.isfinite(result.srocc) else float("inf")
        else:
            score = metrics["loss"]
        if score < best_score or best_epoch is None:
            best_score, best_epoch = score, metrics["epoch"]
            best_state = copy.deepcopy(state.model.state_dict())
        history.append(metrics)
        if on_epoch:
            on_epoch(metrics)

    state.model.load_state_dict(best_state)
    checkpoint = save_model(
        state.model, out_dir / "checkpoints" / f"{tag}.npz", config, epoch=best_epoch, selection=selection
    )
    logger.info(f"Fine-tuning {tag}: kept epoch {best_epoch} by {selection}")
    return FinetuneRun(state.model, checkpoint, best_epoch, selection, history)


def _pretrained_for(config: ExperimentConfig, out_dir: Path, pretrained: Optional[Path]) -> Optional[Path]:
    """Checkpoint to initialise from: the given one, a fresh pre-training run, or none."""
    if not config.finetune.use_pretrained or config.evaluation.oracle:
        return None
    if pretrained is not None:
        return pretrained
    if not config.paths.pretrain_manifest:
        raise ConfigError(
            "set paths.pretrain_manifest or pass a pre-trained checkpoint (or disable finetune.use_pretrained)",
            field="paths.pretrain_manifest",
        )
    return run_pretrain(config, load_manifest(Path(config.paths.pretrain_manifest)), out_dir)


def _evaluate_split(
    config: ExperimentConfig,
    train: DatasetManifest,
    test: DatasetManifest,
    out_dir: Path,
    pretrained: Optional[Path],
    tag: str,
    validation: Optional[DatasetManifest] = None,
) -> Dict[str, Any]:
    if config.evaluation.oracle:
        oracle = OraclePredictor()
        result = evaluate(oracle, test)
        pred = oracle.predict(test)
        entry: Dict[str, Any] = {"best_epoch": None, "selection": "oracle"}
    else:
        run = run_finetune(config, train, out_dir, pretrained, validation=validation, tag=tag)
        predictor = ModelPredictor(run.model, make_cache(config))
        pred = predictor.predict(test)
        result = compute_result(pred, require_labels(test))
        entry = {"best_epoch": run.best_epoch, "selection": run.selection, "checkpoint": str(run.checkpoint)}
    if config.evaluation.scatter_plot and not result.flagged:
        scatter_plot(pred, require_labels(test), out_dir / "plots" / f"{tag}.png", result.logistic_params, title=tag)
    entry["result"] = result
    return entry


def _report_header(config: ExperimentConfig, protocol: str) -> Dict[str, Any]:
    return {"protocol": protocol, "seed": config.seed, "config_hash": config_hash(config)}


def run_crossval(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    pretrained: Optional[Path] = None,
) -> Dict[str, Any]:
    """k-fold content-disjoint cross-validation; folds run sequentially.

    Returns:
        Report with per-fold entries and their mean
    """
    out_dir = create_output_structure(out_dir)
    require_labels(manifest)
    ecfg = config.evaluation
    folds = kfold_split(manifest.contents(), ecfg.folds, (ecfg.train_ratio, ecfg.test_ratio), config.seed)
    pretrained = _pretrained_for(config, out_dir, pretrained)

    entries = []
    for fold in folds:
        logger.info(f"Fold {fold.fold_id}: {len(fold.train)} train / {len(fold.test)} test contents")
        entry = _evaluate_split(
            config, manifest.subset(fold.train), manifest.subset(fold.test), out_dir, pretrained,
            tag=f"fold{fold.fold_id}",
        )
        entry.update(fold_id=fold.fold_id, train=list(fold.train), test=list(fold.test))
        entries.append(entry)

    report = _report_header(config, "kfold")
    report.update(folds=entries, mean=average_results([e["result"] for e in entries]))
    write_report(out_dir / "reports" / "crossval.json", report)
    return report


def run_holdout(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    pretrained: Optional[Path] = None,
) -> Dict[str, Any]:
    """Single train/validation/test split; the epoch with best validation SROCC is tested."""
    out_dir = create_output_structure(out_dir)
    require_labels(manifest)
    split = holdout_split(manifest.contents(), config.evaluation.holdout_ratios, config.seed)
    pretrained = _pretrained_for(config, out_dir, pretrained)
    entry = _evaluate_split(
        config, manifest.subset(split.train), manifest.subset(split.test), out_dir, pretrained,
        tag="holdout", validation=manifest.subset(split.validation),
    )
    entry.update(train=list(split.train), validation=list(split.validation), test=list(split.test))
    report = _report_header(config, "holdout")
    report.update(folds=[entry], mean=entry["result"])
    write_report(out_dir / "reports" / "holdout.json", report)
    return report


def run_cross_dataset(
    config: ExperimentConfig,
    train: DatasetManifest,
    test: DatasetManifest,
    out_dir: Path,
    pretrained: Optional[Path] = None,
) -> Dict[str, Any]:
    """Train on one complete dataset, test on another."""
    out_dir = create_output_structure(out_dir)
    pretrained = _pretrained_for(config, out_dir, pretrained)
    entry = _evaluate_split(config, train, test, out_dir, pretrained, tag="cross_dataset")
    report = _report_header(config, "cross_dataset")
    report.update(folds=[entry], mean=entry["result"])
    write_report(out_dir / "reports" / "cross_dataset.json", report)
    return report


def run_eval(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    model: Optional[QualityModel] = None,
) -> EvalResult:
    """Score a fine-tuned model (or the oracle when ``model`` is None) on a manifest."""
    out_dir = create_output_structure(out_dir)
    if model is None:
        predictor = OraclePredictor()
    else:
        predictor = ModelPredictor(model, make_cache(config))
    mos = require_labels(manifest)
    pred = np.asarray(predictor.predict(manifest), dtype=np.float64)
    result = compute_result(pred, mos)
    report = _report_header(config, "eval")
    report.update(result=result, predictions=[float(p) for p in pred])
    write_report(out_dir / "reports" / "eval.json", report)
    if config.evaluation.scatter_plot and not result.flagged:
        scatter_plot(pred, mos, out_dir / "plots" / "eval.png", result.logistic_params, title="eval")
    return result
