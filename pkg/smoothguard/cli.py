#!/usr/bin/env python3
import io
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .checkpoint import atomic_write_bytes, calculate_checksum, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .data import load_dataset
from .evaluation import Evaluator, Threat, svm_noise_experiment
from .exceptions import ConfigurationError, SmoothGuardError
from .logging import Logger
from .models import build_model
from .report import EvalReport, format_mean_std, run_summary, write_frame_csv, write_json
from .training import Trainer

console = Console()
error_console = Console(stderr=True)


def common_options(func):
    """--config/--seed/--out/--threads/--log-file plus trailing key=value overrides."""
    func = click.argument("overrides", nargs=-1)(func)
    func = click.option("--log-file", "-l", default=None, help="Log file path")(func)
    func = click.option("--threads", "-j", type=int, default=None, help="Worker threads")(func)
    func = click.option("--out", "-o", default=None, help="Output directory")(func)
    func = click.option("--seed", "-s", type=int, default=None, help="Master seed")(func)
    func = click.option("--config", "-c", "config_path", default=None, help="Config file")(func)
    return func


def resolve_config(
    config_path: Optional[str],
    overrides: Sequence[str],
    seed: Optional[int] = None,
    out: Optional[str] = None,
    threads: Optional[int] = None,
    log_file: Optional[str] = None,
) -> ExperimentConfig:
    """File first, then key=value overrides, then the explicit flags."""
    items: List[str] = list(overrides)
    if seed is not None:
        items += [f"run.seed={seed}", f"train.seed={seed}"]
    if out is not None:
        items.append(f"run.out_dir={out}")
    if threads is not None:
        items.append(f"run.threads={threads}")
    if log_file is not None:
        items.append(f"run.log_file={log_file}")
    return load_config(config_path, items)


@contextmanager
def run_context(command: str, cfg: ExperimentConfig):
    logger = Logger(cfg.run.log_file or None)
    out_dir = Path(cfg.run.out_dir)
    logger.log_run_start(command, out_dir)
    try:
        yield logger, out_dir
    except Exception as e:
        logger.log_run_complete(False, str(e))
        raise
    logger.log_run_complete(True)


def _load_model(path: str, field_name: str):
    if not path:
        raise ConfigurationError(f"{field_name} is required")
    try:
        return load_checkpoint(path)
    except ConfigurationError as e:
        raise ConfigurationError(f"{field_name}: {e}") from None


def _print_report(report: EvalReport, title: str):
    table = Table(title=title)
    for column in ("scheme", "M", "sigma", "attack", "clean", "adversarial"):
        table.add_column(column)
    for row in report.rows:
        record = row.as_record()
        table.add_row(
            row.scheme,
            str(row.samples),
            f"{row.sigma:g}",
            record["attack"],
            format_mean_std(*row.clean),
            format_mean_std(*row.adversarial),
        )
    console.print(table)


def _finish_report(
    command: str, cfg: ExperimentConfig, report: EvalReport, out_dir: Path, name: str
):
    report.write_csv(out_dir / f"{name}.csv")
    checkpoint_hash = calculate_checksum(cfg.run.checkpoint) if cfg.run.checkpoint else None
    summary = run_summary(command, dump_config(cfg), report, checkpoint_hash)
    write_json(summary, out_dir / "summary.json")
    _print_report(report, name)
    console.print(f"[green]Wrote {out_dir / (name + '.csv')}[/green]")


@click.group()
def cli():
    """
    smoothguard - randomized-smoothing defenses, attacks and experiment sweeps.
    """


def _train(command: str, cfg: ExperimentConfig, pretrained: bool):
    with run_context(command, cfg) as (logger, out_dir):
        dataset = load_dataset(cfg.dataset)
        if pretrained:
            model = _load_model(cfg.run.checkpoint, "run.checkpoint")
        else:
            model = build_model(cfg.model, dataset.input_shape, dataset.num_classes, cfg.run.seed)
        trained, log = Trainer(logger).finetune(model, dataset, cfg.train)
        digest = save_checkpoint(trained, out_dir / "model.json")
        if log.rows:
            write_frame_csv(log.to_frame(), out_dir / "train_log.csv")
        summary = run_summary(command, dump_config(cfg), checkpoint_hash=digest)
        write_json(summary, out_dir / "summary.json")
        console.print(f"[green]Saved checkpoint {out_dir / 'model.json'} ({digest[:12]})[/green]")


@cli.command()
@common_options
def train(config_path, seed, out, threads, log_file, overrides):
    """Train a freshly initialised model."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    _train("train", cfg, pretrained=False)


@cli.command()
@common_options
def finetune(config_path, seed, out, threads, log_file, overrides):
    """Fine-tune the model at run.checkpoint with train.mode."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    _train("finetune", cfg, pretrained=True)


@cli.command()
@common_options
def attack(config_path, seed, out, threads, log_file, overrides):
    """Craft adversarial examples for run.split and save them as adversarial.npy."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    with run_context("attack", cfg) as (logger, out_dir):
        model = _load_model(cfg.run.checkpoint, "run.checkpoint")
        split = load_dataset(cfg.dataset).split(cfg.run.split)
        evaluator = Evaluator(logger, cfg.run.threads)
        smoothing = cfg.smoothing.config(cfg.run.seed)
        x_adv = evaluator.craft(model, split, replace(cfg.attack, seed=cfg.run.seed), smoothing)
        buffer = io.BytesIO()
        np.save(buffer, x_adv)
        atomic_write_bytes(out_dir / "adversarial.npy", buffer.getvalue())
        report = EvalReport(
            [
                evaluator.evaluate(
                    model, split, cfg.attack, smoothing, [cfg.run.seed], cfg.run.model_id
                )
            ]
        )
        _finish_report("attack", cfg, report, out_dir, "attack")


@cli.command()
@click.option("--threat", type=click.Choice([t.value for t in Threat]), default="direct")
@click.option("--no-attack", is_flag=True, help="Clean accuracy only")
@click.option("--dump-tally", is_flag=True, help="Write the vote tally of the first example")
@common_options
def evaluate(threat, no_attack, dump_tally, config_path, seed, out, threads, log_file, overrides):
    """Evaluate the smoothed classifier clean and under attack over run.num_seeds seeds."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    with run_context("evaluate", cfg) as (logger, out_dir):
        model = _load_model(cfg.run.checkpoint, "run.checkpoint")
        source = None
        if threat == Threat.TRANSFER.value:
            source = _load_model(cfg.run.source_checkpoint, "run.source_checkpoint")
        split = load_dataset(cfg.dataset).split(cfg.run.split)
        evaluator = Evaluator(logger, cfg.run.threads)
        smoothing = cfg.smoothing.config()
        row = evaluator.evaluate(
            model,
            split,
            None if no_attack else cfg.attack,
            smoothing,
            cfg.run.seeds,
            cfg.run.model_id,
            Threat(threat),
            source,
        )
        if (dump_tally or cfg.smoothing.dump_tally) and len(split):
            tally = evaluator.tally(model, split.x[0], cfg.smoothing.config(cfg.run.seed))
            write_frame_csv(tally.to_frame(), out_dir / "tally.csv")
        _finish_report("evaluate", cfg, EvalReport([row]), out_dir, "evaluate")


@cli.command("sweep-sigma-m")
@click.option("--no-attack", is_flag=True, help="Clean accuracy only")
@common_options
def sweep_sigma_m(no_attack, config_path, seed, out, threads, log_file, overrides):
    """Accuracy over the sweep.sigmas x sweep.samples grid."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    with run_context("sweep-sigma-m", cfg) as (logger, out_dir):
        model = _load_model(cfg.run.checkpoint, "run.checkpoint")
        split = load_dataset(cfg.dataset).split(cfg.run.split)
        report = Evaluator(logger, cfg.run.threads).sweep_sigma_M(
            model,
            split,
            cfg.sweep.sigmas,
            cfg.sweep.samples,
            None if no_attack else cfg.attack,
            cfg.run.seeds,
            cfg.smoothing.voting,
            cfg.smoothing.top_c,
            cfg.run.model_id,
        )
        _finish_report("sweep-sigma-m", cfg, report, out_dir, "sweep_sigma_m")


@cli.command("sweep-km")
@common_options
def sweep_km(config_path, seed, out, threads, log_file, overrides):
    """PGD, EPGD and SmoothAdv-PGD over iterations k and backward samples M_b."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    with run_context("sweep-km", cfg) as (logger, out_dir):
        model = _load_model(cfg.run.checkpoint, "run.checkpoint")
        split = load_dataset(cfg.dataset).split(cfg.run.split)
        report = Evaluator(logger, cfg.run.threads).sweep_kM(
            model,
            split,
            cfg.attack,
            cfg.sweep.km_families,
            cfg.sweep.km_iterations,
            cfg.sweep.km_backward_samples,
            cfg.smoothing.config(),
            cfg.run.seeds,
            cfg.run.model_id,
        )
        _finish_report("sweep-km", cfg, report, out_dir, "sweep_km")


@cli.command("sweep-eps")
@common_options
def sweep_eps(config_path, seed, out, threads, log_file, overrides):
    """Accuracy over the attack radii in sweep.epsilons."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    with run_context("sweep-eps", cfg) as (logger, out_dir):
        model = _load_model(cfg.run.checkpoint, "run.checkpoint")
        split = load_dataset(cfg.dataset).split(cfg.run.split)
        report = Evaluator(logger, cfg.run.threads).sweep_epsilon(
            model,
            split,
            cfg.attack,
            cfg.sweep.epsilons,
            cfg.smoothing.config(),
            cfg.run.seeds,
            cfg.run.model_id,
        )
        _finish_report("sweep-eps", cfg, report, out_dir, "sweep_eps")


@cli.command("svm-demo")
@common_options
def svm_demo(config_path, seed, out, threads, log_file, overrides):
    """Noisy vs noiseless adversarial SVM objective."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    with run_context("svm-demo", cfg) as (logger, out_dir):
        svm = cfg.svm
        report = svm_noise_experiment(
            svm.dim,
            svm.n,
            svm.sigma,
            svm.trials,
            cfg.run.seed,
            svm.epsilon,
            svm.z,
            svm.separation,
            svm.repetitions,
            logger,
        )
        frame = report.to_frame()
        write_frame_csv(frame, out_dir / "svm_demo.csv")
        first = report.results[0]
        write_json(
            run_summary(
                "svm-demo",
                dump_config(cfg),
                extra={
                    "coverage": report.coverage,
                    "expected_coverage": report.expected_coverage,
                    "separable": first.separable,
                },
            ),
            out_dir / "summary.json",
        )
        if not first.separable:
            console.print("[yellow]Warning: SVM data is not linearly separable[/yellow]")
        console.print(
            f"noiseless={first.noiseless_objective:.6f} noisy={first.noisy_objective:.6f} "
            f"half-width={first.half_width:.6f} coverage={report.coverage:.2%}"
        )
        console.print(f"[green]Wrote {out_dir / 'svm_demo.csv'}[/green]")


@cli.command("dump-config")
@common_options
def dump_config_command(config_path, seed, out, threads, log_file, overrides):
    """Print the fully resolved config, defaults included."""
    cfg = resolve_config(config_path, overrides, seed, out, threads, log_file)
    click.echo(dump_config(cfg), nl=False)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; 0 on success, 1 on configuration or usage errors, 2 on any other failure."""
    try:
        args = list(argv) if argv is not None else None
        result = cli.main(args=args, prog_name="smoothguard", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        error_console.print("[red]Aborted[/red]")
        return 2
    except ConfigurationError as e:
        error_console.print(f"[red]Configuration error: {escape(str(e))}[/red]")
        return 1
    except SmoothGuardError as e:
        error_console.print(f"[red]Error: {escape(str(e))}[/red]")
        return 2
    except Exception as e:
        error_console.print(f"[red]Error: {escape(str(e))}[/red]")
        return 2
    return result if isinstance(result, int) else 0


def main():
    """Entry point for the CLI."""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
