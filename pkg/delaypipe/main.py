#!/usr/bin/env python3
"""
Command-line interface for delaypipe.
Plans and derives per-layer gradient delays, trains with delayed gradients,
compares weight-versioning strategies and runs the verification suites.
"""

import json
import logging
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Optional, Tuple

import click

from delaypipe.checkpoint import save_checkpoint
from delaypipe.config import ExperimentConfig, apply_overrides, load_config
from delaypipe.delay_planner import derive_delays, format_plan_table, plan_to_json
from delaypipe.errors import DelayPipeError
from delaypipe.graph_ir import build_training_graph, save_graph
from delaypipe.harness import build_dataset, build_model, run_comparison, run_experiment, strategy_slug
from delaypipe.retimer import RetimingTrace, StagePartition, compact, insert_initial_delays
from delaypipe.verification import SUITES, format_results, run_verification

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


@click.group()
@click.option('-v', '--verbose', count=True, help='-v for progress, -vv for debug output')
def cli(verbose: int) -> None:
    """delaypipe - derive, plan and simulate pipelined backpropagation with delayed gradients."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT)


def partition_options(f: Callable) -> Callable:
    f = click.option(
        '--partition',
        default='per-layer',
        show_default=True,
        help="Stage partition: 'per-layer', 'single', '<n>x' for n even stages, or sizes like '2,2'"
    )(f)
    f = click.option(
        '--layers',
        type=click.IntRange(min=1),
        default=8,
        show_default=True,
        help='Number of layers in the network'
    )(f)
    return f


def experiment_options(f: Callable) -> Callable:
    """Options shared by train and compare; each overrides the config file."""
    options = [
        click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None, help='Experiment config (JSON or TOML)'),
        click.option('--layers', default=None, help="Layer count ('4') or explicit sizes ('2,64,64,3')"),
        click.option('--partition', default=None, help='Stage partition (see plan --help)'),
        click.option('--epochs', type=click.IntRange(min=1), default=None),
        click.option('--batch', type=click.IntRange(min=1), default=None, help='Minibatch size'),
        click.option('--lr', type=float, default=None, help='Initial learning rate'),
        click.option('--momentum', type=float, default=None),
        click.option('--wd', type=float, default=None, help='Weight decay'),
        click.option('--schedule', type=click.Choice(['constant', 'cosine']), default=None),
        click.option('--warmup', type=click.IntRange(min=0), default=None, help='Iterations before EMA reconstruction starts'),
        click.option('--seed', type=int, default=None),
        click.option('--parallel/--no-parallel', default=None, help='Run stage forwards on worker threads'),
        click.option('--out', type=click.Path(file_okay=False), default=None, help='Output directory'),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def handle_errors(f: Callable) -> Callable:
    @wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return f(*args, **kwargs)
        except DelayPipeError as e:
            click.echo("\nError occurred:", err=True)
            raise click.ClickException(str(e))
    return wrapper


def resolve_config(config_path: Optional[str], **overrides: Any) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    return apply_overrides(cfg, **overrides)


@cli.command()
@partition_options
@click.option(
    '--format',
    'output_format',
    type=click.Choice(['table', 'json']),
    default='table',
    help='Output format'
)
@handle_errors
def plan(layers: int, partition: str, output_format: str) -> None:
    """Print per-layer gradient delays, stash depths and storage per strategy.

    Example:
        $ delaypipe plan --layers 8
        $ delaypipe plan --layers 4 --partition 2,2 --format json
    """
    p = StagePartition.parse(partition, layers)
    assignment = derive_delays(layers, p)
    if output_format == 'json':
        click.echo(plan_to_json(assignment))
    else:
        click.echo(f"Partition {p} ({p.num_stages} stages)\n")
        click.echo(format_plan_table(assignment))


@cli.command()
@partition_options
@click.option('--explain', is_flag=True, help='Print every retiming step')
@click.option(
    '--save-graph',
    'save_graph_path',
    type=click.Path(dir_okay=False),
    default=None,
    help='Write the compacted graph as JSON'
)
@handle_errors
def retime(layers: int, partition: str, explain: bool, save_graph_path: Optional[str]) -> None:
    """Derive per-layer delays by retiming the training graph.

    Inserts delays on the feedforward cutsets and feedback edges, then compacts
    them stage by stage. The result is checked against the closed form.
    """
    p = StagePartition.parse(partition, layers)
    trace = RetimingTrace()
    g = insert_initial_delays(build_training_graph(layers), p, trace)
    g, extracted = compact(g, p, trace)
    g.validate()
    if explain:
        click.echo(trace.explain())
        click.echo("")
    expected = derive_delays(layers, p)
    click.echo(f"Gradient delays by retiming: {list(extracted.gradient_delay)}")
    click.echo(f"Closed form 2*S(l):          {list(expected.gradient_delay)}")
    if save_graph_path:
        save_graph(g, save_graph_path)
        click.echo(f"Compacted graph written to {save_graph_path}", err=True)
    if extracted != expected:
        raise click.ClickException("Retimed delays disagree with the closed form")


@cli.command()
@experiment_options
@click.option('--weights', default=None, help='stash | latest | ema-fixed:<beta> | ema-pipeline | sequential')
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None, help='Save final parameters here')
@handle_errors
def train(config_path: Optional[str], checkpoint: Optional[str], **overrides: Any) -> None:
    """Train one model and write its metrics CSV.

    Example:
        $ delaypipe train --weights ema-pipeline --epochs 10 --out runs
    """
    cfg = resolve_config(config_path, **overrides)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    click.echo(f"\nTraining {cfg.strategy} on {cfg.dataset.kind} data...", err=True)
    model = build_model(cfg, dataset)
    metrics = run_experiment(cfg, dataset=dataset, model=model)
    if checkpoint:
        save_checkpoint(model, checkpoint)
        click.echo(f"Checkpoint written to {checkpoint}", err=True)
    path = out / f"{strategy_slug(cfg.strategy)}.csv"
    metrics.write_csv(path)
    click.echo(json.dumps(metrics.summary(), indent=2))
    click.echo(f"\nMetrics written to {path}", err=True)


@cli.command()
@experiment_options
@click.option(
    '--strategies',
    default=None,
    help="Comma-separated strategies (default: sequential,stash,latest,ema-fixed:0.9,ema-pipeline)"
)
@click.option('--workers', type=click.IntRange(min=1), default=None, help='Run strategies in parallel processes')
@click.pass_context
@handle_errors
def compare(ctx: click.Context, config_path: Optional[str], strategies: Optional[str], **overrides: Any) -> None:
    """Run several weight strategies on identical data and write a report.

    Exits with status 2 if any run diverged.
    """
    cfg = resolve_config(config_path, strategies=strategies.split(',') if strategies else None, **overrides)
    click.echo(f"\nComparing {', '.join(cfg.strategies)}...", err=True)
    report = run_comparison(cfg)
    for row in report.rows:
        acc = "diverged" if row["diverged"] else f"{row['final_test_acc']:.4f}"
        click.echo(f"{row['strategy']:<16} test_acc={acc:<9} weight_copies={row['peak_weight_copies']} accumulators={row['accumulators']}")
    click.echo(f"\nReport written to {Path(cfg.out) / 'report.json'}", err=True)
    if not report.ok:
        click.echo(f"Diverged: {', '.join(report.diverged)}", err=True)
        ctx.exit(2)


@cli.command()
@click.option('--suite', 'suites', multiple=True, type=click.Choice(sorted(SUITES)), help='Run only these suites')
@click.option('--slow', is_flag=True, help='Include the convergence-ordering suite')
@click.pass_context
@handle_errors
def verify(ctx: click.Context, suites: Tuple[str, ...], slow: bool) -> None:
    """Run the oracle and invariant suites."""
    results = run_verification(suites or None, include_slow=slow)
    click.echo(format_results(results))
    if not all(r.passed for r in results):
        ctx.exit(1)


def main() -> None:
    """Entry point for the CLI application."""
    cli()


if __name__ == '__main__':
    main()
