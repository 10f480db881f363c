"""
TerraFusion command line: run the localization and mapping study, replay
recordings, score maps and validate scenarios.
"""
import sys
from pathlib import Path
from typing import Optional, Tuple

import click
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from config.logging_config import get_logger, setup_logging
from config.settings import Settings
from services.exceptions import PartialArtifactError, ScenarioValidationError, TerraFusionError

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _fail(code: int, message: str) -> None:
    click.echo(message, err=True)
    sys.exit(code)


def _guarded(fn):
    """Run a command body and map failures onto exit codes."""
    try:
        return fn()
    except ScenarioValidationError as e:
        _fail(EXIT_VALIDATION, str(e))
    except PartialArtifactError as e:
        logger.error(f"Study finished with failures: {len(e.failed)} failed")
        _fail(EXIT_RUNTIME, str(e))
    except (TerraFusionError, OSError) as e:
        logger.error(f"Command failed: {str(e)}")
        _fail(EXIT_RUNTIME, f"error: {e}")


@click.group()
@click.option("--quiet", is_flag=True, help="Only warnings and errors on the console, no progress bar.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR or CRITICAL.")
@click.pass_context
def cli(ctx: click.Context, quiet: bool, log_level: Optional[str]):
    """TerraFusion: multi-sensor localization and terrain grid mapping study."""
    settings = Settings(**({"log_level": log_level} if log_level else {}))
    setup_logging(settings.log_level, settings.log_file, quiet=quiet)
    ctx.obj = {"settings": settings, "quiet": quiet}


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False), required=False)
@click.option("--seed-override", "seeds", type=click.IntRange(min=0), multiple=True,
              help="Use these seeds instead of the scenario's.")
@click.option("--group", "groups", type=int, multiple=True, help="Only run these group ids.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Parent of the run directory.")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker processes.")
@click.pass_context
def run(ctx, config: Optional[str], seeds: Tuple[int, ...], groups: Tuple[int, ...], out_dir, workers):
    """Simulate, fuse, plot and evaluate every group of a scenario."""
    from services.study import run_scenario

    settings: Settings = ctx.obj["settings"]
    config = config or settings.default_config

    def body():
        result = run_scenario(
            config,
            out_dir=out_dir or settings.output_dir,
            seeds=seeds or None,
            groups=groups or None,
            workers=workers or settings.worker_count,
            quiet=ctx.obj["quiet"],
            output_rate_hz=settings.output_rate_hz,
        )
        click.echo(str(result.run_dir))

    _guarded(body)


@cli.command()
@click.argument("recording", type=click.Path(exists=True, dir_okay=False))
@click.option("--group", "group_id", type=int, required=True, help="Group id to replay.")
@click.option("--filter", "filter_kind", type=click.Choice(["ekf", "ukf"]), default=None,
              help="Override the group's filter.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Artifact directory.")
@click.pass_context
def replay(ctx, recording: str, group_id: int, filter_kind: Optional[str], out_dir: Optional[str]):
    """Re-run filtering for one group from a stored recording."""
    from services.study import replay as replay_recording

    settings: Settings = ctx.obj["settings"]
    target = Path(out_dir) if out_dir else Path(recording).parent / f"replay-group-{group_id:02d}-{filter_kind or 'default'}"

    def body():
        result = replay_recording(recording, group_id, filter_kind, target, settings.output_rate_hz)
        click.echo(f"group {result.group} ({result.filter}) net RMSE {result.error.net_rmse:.4f} m -> {target}")

    _guarded(body)


@cli.command("map-diff")
@click.argument("map_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Write mispredict masks here.")
def map_diff(map_path: str, config: str, out_dir: Optional[str]):
    """Compare a stored grid map with a scenario's ground truth."""
    from services.study import map_diff as diff

    def body():
        report, _ = diff(map_path, config, out_dir)
        click.echo(f"T={report.T} E_r={report.E_r} E_s={report.E_s} J_r={report.J_r:.6f} J_s={report.J_s:.6f}")
        if report.empty:
            click.echo("map has no populated cells")

    _guarded(body)


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
def validate(config: str):
    """Check a scenario file and list every problem."""
    from config.scenario import load_scenario

    def body():
        scenario = load_scenario(config)
        click.echo(
            f"{config}: ok ({len(scenario.sensors)} devices, {len(scenario.study.groups)} groups, "
            f"{len(scenario.study.seeds)} seeds)"
        )

    _guarded(body)


if __name__ == "__main__":
    cli()
