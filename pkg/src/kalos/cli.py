"""CLI entry point for Kalos.

This module implements the command-line interface using Click.
"""

import sys
from pathlib import Path
from typing import Optional, Tuple

import click
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .config import ConfigManager, ExperimentConfig, apply_overrides, config_hash
from .errors import ConfigError
from .experiments import (
    ABLATIONS,
    apply_ablation,
    make_cache,
    run_cross_dataset,
    run_crossval,
    run_eval,
    run_finetune,
    run_holdout,
    run_pretrain,
)
from .fusion_finetune import load_model, predict_ply
from .pointcloud_io import load_manifest, load_ply, synth_reference, synthesize_dataset
from .render_cache import default_workers, warm_cache
from .utils.file_utils import create_output_structure, file_sha256, get_directory_size, list_files
from .utils.logger import setup_logger

console = Console()
logger = None  # Will be initialized in commands


def init_logger(out_dir: Optional[Path] = None, level: str = "INFO", log_format: Optional[str] = None):
    """Initialize the logger."""
    global logger
    log_file = out_dir / "logs" / "system.log" if out_dir is not None else None
    logger = setup_logger("kalos", log_file=log_file, level=level, log_format=log_format)


_COMMON_OPTIONS = [
    click.option("--config", "-c", "config_path", type=click.Path(path_type=Path), help="YAML configuration file"),
    click.option("--seed", type=int, default=None, help="Override the experiment seed"),
    click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), default=None,
                 help="Output directory (default: paths.output_dir)"),
    click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="Override a config value, e.g. pretrain.lambda_weight=0.5"),
]


def common_options(func):
    """Attach --config, --seed, --out and repeatable --override."""
    for option in reversed(_COMMON_OPTIONS):
        func = option(func)
    return func


def load_config(
    config_path: Optional[Path], seed: Optional[int], out_dir: Optional[Path], overrides: Tuple[str, ...]
) -> ExperimentConfig:
    """Read the config file, apply CLI overrides and validate.

    Raises:
        ConfigError: If the result is invalid
    """
    config = ConfigManager(config_path).load() if config_path else ExperimentConfig()
    config = apply_overrides(config, overrides)
    if seed is not None:
        config.seed = seed
    if out_dir is not None:
        config.paths.output_dir = str(out_dir)
    config.validate()
    return config


def start_run(config: ExperimentConfig, command: str) -> Path:
    """Create the output tree, start logging and record the resolved config."""
    out_dir = create_output_structure(Path(config.paths.output_dir))
    init_logger(out_dir, config.logging.level, config.logging.format)
    ConfigManager(out_dir / "config.yaml").save(config)
    logger.info(f"{command}: config {config_hash(config)} seed {config.seed}")
    return out_dir


def fail(error: Exception, action: str) -> None:
    """Print a diagnostic and exit: 2 for configuration errors, 1 otherwise."""
    if isinstance(error, ConfigError):
        console.print(Panel(str(error), title="Invalid configuration", border_style="red"))
        if logger:
            logger.error(f"{action} failed: invalid configuration: {error}")
        sys.exit(2)
    console.print(f"[red]✗ {action} failed:[/red] {error}")
    if logger:
        logger.error(f"{action} failed: {error}", exc_info=True)
    sys.exit(1)


def result_table(title: str, rows) -> Table:
    table = Table(title=title)
    table.add_column("Split", style="cyan")
    table.add_column("SROCC", justify="right")
    table.add_column("PLCC", justify="right")
    table.add_column("RMSE", justify="right")
    table.add_column("N", justify="right")
    for name, result in rows:
        if result.flagged:
            table.add_row(name, "[yellow]n/a[/yellow]", "[yellow]n/a[/yellow]", "[yellow]n/a[/yellow]",
                          str(result.n_samples))
        else:
            table.add_row(name, f"{result.srocc:.4f}", f"{result.plcc:.4f}", f"{result.rmse:.4f}",
                          str(result.n_samples))
    return table


def print_epoch(metrics) -> None:
    console.print(f"  epoch {metrics['epoch']:>4}  loss {metrics['loss']:.6f}")


@click.group(invoke_without_command=True)
@click.pass_context
@click.version_option(version=__version__, prog_name="Kalos")
def main(ctx):
    """Kalos: no-reference point cloud quality assessment.

    Contrastive pre-training on rendered projections, semantic-guided
    multi-view fine-tuning and content-disjoint evaluation.
    """
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@main.command(name="synth")
@common_options
@click.argument("references", nargs=-1, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--generate", "-g", type=int, default=0, help="Generate N procedural references instead")
@click.option("--points", type=int, default=4096, help="Points per generated reference (default: 4096)")
@click.option("--pseudo-mos", is_flag=True, help="Write level-monotone MOS in [1, 5]")
@click.option("--binary", is_flag=True, help="Write binary little-endian PLY files")
@click.option("--dataset", "dataset_dir", type=click.Path(path_type=Path), default=None,
              help="Dataset directory (default: <out>/dataset)")
def synth_command(config_path, seed, out_dir, overrides, references, generate, points, pseudo_mos, binary, dataset_dir):
    """Write every distortion kind and level of each reference plus manifest.csv."""
    try:
        config = load_config(config_path, seed, out_dir, overrides)
        out = start_run(config, "synth")
        dataset_dir = dataset_dir or out / "dataset"
        if generate:
            refs = [(c, synth_reference(c, points, config.seed)) for c in range(generate)]
        else:
            refs = [(c, load_ply(path)) for c, path in enumerate(references)]

        with console.status("[cyan]Distorting references...[/cyan]"):
            manifest = synthesize_dataset(refs, dataset_dir, config.distortion, config.seed, pseudo_mos, binary)
        manifest_path = dataset_dir / "manifest.csv"

        table = Table(title="Synthetic Dataset", show_header=False)
        table.add_column("Property", style="cyan")
        table.add_column("Value", style="green")
        table.add_row("References", str(len(refs)))
        table.add_row("Kinds", ", ".join(config.distortion.kinds))
        table.add_row("Levels", str(config.distortion.levels))
        table.add_row("Rows", str(len(manifest)))
        table.add_row("Manifest", str(manifest_path))
        table.add_row("SHA-256", file_sha256(manifest_path)[:16])
        console.print(table)
    except Exception as e:
        fail(e, "Synthesis")


@main.command(name="render-cache")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path), default=None,
              help="Manifest to render (default: paths.pretrain_manifest)")
@click.option("--workers", "-w", type=int, default=None, help="Worker processes (default: runtime.workers)")
@click.option("--views/--no-views", default=True, help="Also render the six fine-tuning views")
def render_cache_command(config_path, seed, out_dir, overrides, manifest_path, workers, views):
    """Render every pre-training rotation (and axis view) into the cache."""
    try:
        config = load_config(config_path, seed, out_dir, overrides)
        if manifest_path is None:
            config.require_paths(["pretrain_manifest"])
            manifest_path = Path(config.paths.pretrain_manifest)
        start_run(config, "render-cache")
        manifest = load_manifest(manifest_path)
        cache = make_cache(config)
        workers = workers or config.runtime.workers or default_workers()
        with console.status(f"[cyan]Rendering {len(manifest)} entries with {workers} workers...[/cyan]"):
            rendered = warm_cache(cache, manifest, pretrain=True, finetune=views, workers=workers)
        cached = list_files(cache.cache_dir, "*.npy")
        size_mb = get_directory_size(cache.cache_dir) / (1 << 20)
        console.print(f"[green]✓[/green] Rendered {rendered} new images into {cache.cache_dir}")
        console.print(f"  cache holds {len(cached)} images ({size_mb:.1f} MiB)")
    except Exception as e:
        fail(e, "Rendering")


@main.command(name="pretrain")
@common_options
@click.option("--resume", type=click.Path(exists=True, path_type=Path), default=None,
              help="Continue from a pre-training checkpoint")
@click.option("--dump-anchors", type=int, default=0, help="Save the first N anchors as PNG")
def pretrain_command(config_path, seed, out_dir, overrides, resume, dump_anchors):
    """Contrastive pre-training of the quality encoder."""
    try:
        config = load_config(config_path, seed, out_dir, overrides)
        config.require_paths(["pretrain_manifest"])
        out = start_run(config, "pretrain")
        manifest = load_manifest(Path(config.paths.pretrain_manifest))
        console.print(f"[cyan]Pre-training for {config.pretrain.epochs} epochs on {len(manifest)} entries...[/cyan]")
        checkpoint = run_pretrain(config, manifest, out, resume=resume, dump_anchors=dump_anchors, on_epoch=print_epoch)
        console.print(f"[green]✓[/green] Checkpoint written to {checkpoint}")
    except Exception as e:
        fail(e, "Pre-training")


@main.command(name="finetune")
@common_options
@click.option("--pretrained", type=click.Path(exists=True, path_type=Path), default=None,
              help="Pre-training checkpoint for the quality encoder")
def finetune_command(config_path, seed, out_dir, overrides, pretrained):
    """Fine-tune the full model on a labeled manifest."""
    try:
        config = load_config(config_path, seed, out_dir, overrides)
        config.require_paths(["finetune_manifest"])
        out = start_run(config, "finetune")
        manifest = load_manifest(Path(config.paths.finetune_manifest))
        console.print(f"[cyan]Fine-tuning for {config.finetune.epochs} epochs on {len(manifest)} entries...[/cyan]")
        run = run_finetune(config, manifest, out, pretrained=pretrained, on_epoch=print_epoch)
        console.print(
            f"[green]✓[/green] Kept epoch {run.best_epoch} ({run.selection}); checkpoint written to {run.checkpoint}"
        )
    except Exception as e:
        fail(e, "Fine-tuning")


@main.command(name="eval")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), default=None,
              help="Fine-tuned checkpoint (omit with evaluation.oracle=true)")
def eval_command(config_path, seed, out_dir, overrides, checkpoint):
    """Evaluate a fine-tuned model on paths.test_manifest."""
    try:
        config = load_config(config_path, seed, out_dir, overrides)
        config.require_paths(["test_manifest"])
        if checkpoint is None and not config.evaluation.oracle:
            raise ConfigError("a checkpoint is required unless evaluation.oracle is true", field="evaluation.oracle")
        out = start_run(config, "eval")
        manifest = load_manifest(Path(config.paths.test_manifest))
        model = None
        if checkpoint is not None and not config.evaluation.oracle:
            model, model_config = load_model(checkpoint)
            config.render = model_config.render
        result = run_eval(config, manifest, out, model)
        console.print(result_table("Evaluation", [("test", result)]))
        if result.flagged:
            console.print(f"[yellow]Flagged:[/yellow] {result.message}")
    except Exception as e:
        fail(e, "Evaluation")


@main.command(name="predict")
@click.argument("ply", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path),
              help="Fine-tuned checkpoint")
def predict_command(ply, checkpoint):
    """Predict the quality score of one PLY file."""
    init_logger()
    try:
        score = predict_ply(checkpoint, ply)
        console.print(f"{score:.6f}")
    except Exception as e:
        fail(e, "Prediction")


@main.command(name="crossval")
@common_options
@click.option("--ablation", type=click.Choice(sorted(ABLATIONS)), default="full", help="Ablation preset")
@click.option("--holdout", is_flag=True, help="Single train/validation/test split instead of k folds")
@click.option("--cross-dataset", is_flag=True,
              help="Train on paths.finetune_manifest, test on paths.test_manifest")
@click.option("--pretrained", type=click.Path(exists=True, path_type=Path), default=None,
              help="Pre-training checkpoint (default: pre-train on paths.pretrain_manifest)")
def crossval_command(config_path, seed, out_dir, overrides, ablation, holdout, cross_dataset, pretrained):
    """Run the content-disjoint evaluation protocol and write an aggregate report."""
    try:
        if holdout and cross_dataset:
            raise ConfigError("--holdout and --cross-dataset are exclusive", field="protocol")
        config = apply_ablation(load_config(config_path, seed, out_dir, overrides), ablation)
        config.validate()
        config.require_paths(["finetune_manifest", "test_manifest"] if cross_dataset else ["finetune_manifest"])
        out = start_run(config, f"crossval[{ablation}]")
        manifest = load_manifest(Path(config.paths.finetune_manifest))
        if cross_dataset:
            report = run_cross_dataset(config, manifest, load_manifest(Path(config.paths.test_manifest)), out, pretrained)
        elif holdout:
            report = run_holdout(config, manifest, out, pretrained)
        else:
            report = run_crossval(config, manifest, out, pretrained)

        rows = [(f"fold {i}", entry["result"]) for i, entry in enumerate(report["folds"])]
        rows.append(("mean", report["mean"]))
        console.print(result_table(f"{report['protocol']} ({ablation})", rows))
        console.print(f"\n[green]✓[/green] Report written to {out / 'reports'}")
    except Exception as e:
        fail(e, "Cross-validation")


if __name__ == "__main__":
    main()
