import os
import sys
import logging.config
import functools
from pathlib import Path

import click
from dotenv import load_dotenv
import sentry_sdk

from common import NAME, VERSION, config, settings
from common.errors import ConfigError, RunError
from worker import checks, data, plots, tasks


logger = logging.getLogger(NAME)


def configure_logging(verbose):
    dict_config = {**config.DICT_CONFIG, 'loggers': {**config.DICT_CONFIG['loggers']}}
    if verbose:
        dict_config['loggers']['root'] = {**dict_config['loggers']['root'], 'level': 'DEBUG'}
    logging.config.dictConfig(dict_config)


def configure_sentry():
    app_env = os.getenv('APP_ENV', 'development')
    sentry_dsn = os.getenv('SENTRY_DSN')
    if sentry_dsn:
        sentry_sdk.init(sentry_dsn, release=VERSION, environment=app_env)
    else:
        logger.warning('SENTRY_DSN not set, Sentry disabled.')


def exit_codes(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            logger.error('Invalid configuration: %s', e)
            sys.exit(config.EXIT_CONFIG_ERROR)
        except (RunError, OSError) as e:
            logger.error('Run failed: %s', e)
            sys.exit(config.EXIT_RUN_FAILURE)
    return wrapper


def output_dir(cfg, out):
    if out or cfg.out:
        return Path(out or cfg.out)
    root = os.getenv(config.OUTPUT_ROOT_ENV, config.OUTPUT_ROOT)
    return Path(root) / tasks.run_id(cfg)


config_option = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
    help='Experiment configuration file (KEY=VALUE).')
out_option = click.option('--out', type=click.Path(file_okay=False), help='Output directory.')
seed_option = click.option('--seed', type=settings.SEED, help='Master seed, overrides the configuration.')
evaluator_option = click.option('--evaluator', type=settings.EvaluatorList(),
    help='Comma-separated evaluators; the first selects the malicious client.')
defense_option = click.option('--defense', type=click.Choice(settings.DEFENSES), help='Trimming defense mode.')


@click.group()
@click.version_option(VERSION, prog_name=NAME)
@click.option('-v', '--verbose', is_flag=True, help='Log debug messages.')
def cli(verbose):
    """Simulate attribution manipulation in federated learning."""
    load_dotenv()
    configure_logging(verbose)
    settings.filter_warnings(os.getenv(config.WARNING_FILTERS_ENV, ''))
    configure_sentry()


@cli.command()
@config_option
@out_option
@seed_option
@evaluator_option
@defense_option
@click.option('--export-shards', is_flag=True, help='Also write the client shards as CSV.')
@exit_codes
def run(config_path, out, seed, evaluator, defense, export_shards):
    """Run one paired attack-free / attacked experiment."""
    cfg = settings.load_config(config_path, seed=seed, evaluator=evaluator, defense=defense)
    out_dir = output_dir(cfg, out)
    report = tasks.run_experiment(cfg, out_dir)
    if export_shards:
        data.export_shards(tasks.build_scenario(cfg).shards, out_dir / config.SHARDS_CSV)
    click.echo(f'{report.run_id}: client {report.malicious} share {report.share_before():.4f} -> '
        f'{report.share_after():.4f}, utility {report.utility_before:.4f} -> {report.utility_after:.4f} '
        f'({"pass" if report.verdict else "fail"})')
    click.echo(str(out_dir))


@cli.command()
@config_option
@out_option
@seed_option
@evaluator_option
@defense_option
@click.option('--axis', required=True, type=click.Choice(tasks.SWEEP_AXES),
    help='Parameter to sweep.')
@click.option('--values', 'values_text', required=True, help='Comma-separated axis values.')
@exit_codes
def sweep(config_path, out, seed, evaluator, defense, axis, values_text):
    """Repeat the experiment across the values of one axis."""
    cfg = settings.load_config(config_path, seed=seed, evaluator=evaluator, defense=defense)
    key = {'method': 'attack'}.get(axis, axis)
    values = [settings.convert_value(key, v.strip()) for v in values_text.split(',') if v.strip()]
    out_dir = output_dir(cfg, out)
    reports = tasks.sweep(cfg, axis, values, out_dir)
    for value, report in zip(values, reports):
        click.echo(f'{axis}={value}: share {report.share_before():.4f} -> {report.share_after():.4f}, '
            f'utility {report.utility_after:.4f}')
    click.echo(str(out_dir))


@cli.command()
@config_option
@out_option
@click.option('--seed', default=0, show_default=True, type=settings.SEED, help='First paired seed.')
@click.option('--seeds', default=5, show_default=True, type=click.IntRange(min=1), help='Number of paired seeds.')
@exit_codes
def check(config_path, out, seed, seeds):
    """
    Run the acceptance suite.

    Each scenario fixes its own evaluators, attack and defense mode, so only the scenario file and the seeds
    are configurable.
    """
    cfg = settings.load_config(config_path)
    out_dir = Path(out) if out else None
    outcomes = checks.run_check(cfg, tuple(range(seed, seed + seeds)), out_dir)
    for outcome in outcomes:
        click.echo(f'{"PASS" if outcome.passed else "FAIL"} {outcome.name}')
    if not all(outcome.passed for outcome in outcomes):
        sys.exit(config.EXIT_CHECK_FAILURE)


@cli.command()
@click.option('--from', 'source', required=True, type=click.Path(exists=True, file_okay=False),
    help='Directory holding stored reports.')
@exit_codes
def plot(source):
    """Re-emit plots from stored reports."""
    try:
        paths = plots.replot(source)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e
    for path in paths:
        click.echo(str(path))


if __name__ == '__main__':
    cli()
