#!/usr/bin/env python3
"""
Beamsim Command Line Interface
Generate channel datasets, train, evaluate, sweep and run gradient checks
"""

import sys
from pathlib import Path
from typing import List, Optional

import click
from pydantic import ValidationError

from config.presets import PRESET_NAMES, SCALE_NAMES, load_spec
from config.settings import get_settings
from models.experiment import ExperimentSpec
from services.channel import snr_to_sigma2
from services.errors import (
    BeamsimError,
    ConfigError,
    InvalidArgumentError,
    NumericFailureError,
    UnsupportedError,
)
from services.gradcheck import SUITES, run_gradcheck
from services.harness import evaluate_checkpoint, sweep_q, sweep_snr
from services.logging import get_logger, setup_logging
from services.monitoring import export_metrics
from services.records import save_channel_records
from services.scenario import ScenarioSampler
from services.training import run_algorithm1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

logger = get_logger(__name__)


def experiment_options(command):
    """--preset, --scale, --config, --seed and --out shared by every experiment command"""
    options = [
        click.option("--preset", type=click.Choice(PRESET_NAMES), default="miso-sd", show_default=True),
        click.option("--scale", type=click.Choice(SCALE_NAMES), default="desk", show_default=True),
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="JSON overlay with system/geometry/hybrid/nets/train/feedback/eval sections"),
        click.option("--seed", type=int, default=None, help="Experiment seed (overrides the config)"),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                     help="Output directory (BEAMSIM_OUTPUT_DIR by default)"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _spec(preset: str, scale: str, config_path: Optional[str], seed: Optional[int]) -> ExperimentSpec:
    return load_spec(preset, scale, config_path=config_path, seed=seed)


def _out(out_dir: Optional[str]) -> Path:
    path = Path(out_dir or get_settings().output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
def cli():
    """Encoder-decoder downlink beamforming simulator"""
    settings = get_settings()
    setup_logging(settings.log_level, settings.log_format)


@cli.command()
@experiment_options
@click.option("--count", type=int, default=None, help="Samples to draw (eval.test_size by default)")
@click.option("--snr", "snr_db", type=float, default=None, help="Fixed SNR in dB instead of the training mixture")
def generate(preset, scale, config_path, seed, out_dir, count, snr_db):
    """Draw a channel dataset and write it as a record file"""
    spec = _spec(preset, scale, config_path, seed)
    out = _out(out_dir)
    sigma2 = None if snr_db is None else snr_to_sigma2(snr_db)
    batch = ScenarioSampler(spec.scenario).dataset(count or spec.eval.test_size, spec.seed, get_settings().threads,
                                                   spec.eval.chunk_size, sigma2=sigma2)
    path = out / "channels.bsch"
    digest = save_channel_records(path, batch)
    click.echo(f"{path}  {batch.batch_size} samples  sha256={digest}")
    return EXIT_OK


@cli.command()
@experiment_options
def train(preset, scale, config_path, seed, out_dir):
    """Run both training stages and write metrics.csv, chandec_loss.csv and checkpoint.bsck"""
    spec = _spec(preset, scale, config_path, seed)
    out = _out(out_dir)
    _, report = run_algorithm1(spec, out)
    export_metrics(out / "metrics.prom")
    if report.metrics.rows:
        last = report.metrics.rows[-1]
        click.echo(f"epoch {last.epoch}: alpha={last.alpha:.2f} mean sum rate={last.mean_sum_rate:.4f}")
    click.echo(f"wrote {out / 'metrics.csv'}, {out / 'chandec_loss.csv'} and {out / 'checkpoint.bsck'}")
    return EXIT_OK


@cli.command(name="eval")
@experiment_options
def evaluate(preset, scale, config_path, seed, out_dir):
    """Evaluate the checkpoint in --out against MMSE over the SNR grid"""
    spec = _spec(preset, scale, config_path, seed)
    out = _out(out_dir)
    table = evaluate_checkpoint(spec, out)
    click.echo(table.to_csv(), nl=False)
    return EXIT_OK


@cli.command(name="sweep-snr")
@experiment_options
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(file_okay=False), default=None,
              help="Load <dir>/<baseline>/checkpoint.bsck instead of training")
def sweep_snr_command(preset, scale, config_path, seed, out_dir, checkpoint_dir):
    """Mean sum rate per baseline and SNR"""
    spec = _spec(preset, scale, config_path, seed)
    table = sweep_snr(spec, out_dir=_out(out_dir), checkpoint_dir=checkpoint_dir)
    click.echo(table.to_csv(), nl=False)
    return EXIT_OK


@cli.command(name="sweep-q")
@experiment_options
@click.option("--snr", "snr_db", type=float, default=15.0, show_default=True)
def sweep_q_command(preset, scale, config_path, seed, out_dir, snr_db):
    """Mean sum rate per training and inference refinement step count"""
    spec = _spec(preset, scale, config_path, seed)
    table = sweep_q(spec, snr_db=snr_db, out_dir=_out(out_dir))
    click.echo(table.to_csv(), nl=False)
    return EXIT_OK


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--suite", "suites", type=click.Choice(list(SUITES)), multiple=True,
              help="Run only these suites (repeatable)")
def gradcheck(seed, suites):
    """Finite-difference oracle suites"""
    reports = run_gradcheck(seed, list(suites) or None)
    for report in reports:
        click.echo(report.summary())
        for issue in report.issues:
            click.echo(f"    {issue}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures to exit codes"""
    try:
        result = cli.main(args=argv, prog_name="beamsim", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        click.echo("Aborted", err=True)
        return EXIT_CONFIG
    except (ConfigError, ValidationError, InvalidArgumentError, UnsupportedError) as e:
        click.echo(f"configuration error: {e}", err=True)
        return EXIT_CONFIG
    except NumericFailureError as e:
        logger.error("numeric_failure", error=str(e))
        click.echo(f"numeric failure: {e}", err=True)
        return EXIT_NUMERIC
    except BeamsimError as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_NUMERIC
    return result if isinstance(result, int) else EXIT_OK


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
