import logging
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from common import config, history


SHARES_FIGURE = 'shares.svg'
MARGINAL_FIGURE = 'marginal.svg'
SWEEP_FIGURE = 'sweep_{axis}.svg'
RC_PARAMS = {
    'svg.hashsalt': 'fedattrib',
    'svg.fonttype': 'none',
    'font.family': 'DejaVu Sans',
    'axes.unicode_minus': False,
}
PHASE_TITLES = {'attack_free': 'Attack free', 'attacked': 'Attacked'}
ATTACKER_COLOR = 'tab:red'
CLIENT_COLOR = 'tab:blue'


logger = logging.getLogger(__name__)


def save(fig, path, run_id):
    with matplotlib.rc_context(RC_PARAMS):
        fig.savefig(path, format='svg', metadata={'Date': None, 'Description': f'run {run_id}'})
    logger.debug('Saved %s.', path)


def primary(report):
    return report['evaluators'][0]


def share_figure(report):
    evaluator = primary(report)
    malicious = report['malicious']
    fig = Figure(figsize=(8, 4), layout='constrained')
    axes = fig.subplots(1, 2)
    for ax, phase in zip(axes, ['attack_free', 'attacked']):
        shares = report['attribution'][evaluator][phase]['shares']
        colors = [ATTACKER_COLOR if i == malicious else CLIENT_COLOR for i in range(len(shares))]
        # zero-share wedges are dropped by pie, so plot a floor and label with the true value
        sizes = [max(share, 1e-9) for share in shares]
        ax.pie(sizes, colors=colors, labels=[f'{i}: {s:.3f}' for i, s in enumerate(shares)], startangle=90,
            counterclock=False, wedgeprops={'width': 0.4, 'edgecolor': 'white', 'alpha': 0.8})
        ax.set_title(PHASE_TITLES[phase])
    fig.suptitle(f'{evaluator} shares, attacker = client {malicious} ({report["attack"]})')
    return fig


def marginal_figure(report):
    fig = Figure(figsize=(6, 4), layout='constrained')
    ax = fig.subplots()
    for phase, style in [('attack_free', '--'), ('attacked', '-')]:
        values = report['marginal_utility'][phase]
        ax.plot(range(1, len(values) + 1), values, style, marker='o', label=PHASE_TITLES[phase])
    ax.axhline(0, color='grey', linewidth=0.8)
    ax.set_xlabel('Round')
    ax.set_ylabel('Marginal utility')
    ax.set_title(f'Client {report["malicious"]} per-round marginal utility')
    ax.grid(True, alpha=0.3)
    ax.legend(loc='best', fontsize=8)
    return fig


def emit_plots(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, build in [(SHARES_FIGURE, share_figure), (MARGINAL_FIGURE, marginal_figure)]:
        path = out_dir / name
        save(build(report), path, report['run_id'])
        paths.append(path)
    return paths


def sweep_figure(summary):
    axis, values, reports = summary['axis'], summary['values'], summary['reports']
    labels = [str(value) for value in values]
    positions = list(range(len(values)))
    evaluator = primary(reports[0])
    before = [r['attacker'][evaluator]['share_before'] for r in reports]
    after = [r['attacker'][evaluator]['share_after'] for r in reports]
    utility = [r['utility']['after'] for r in reports]

    fig = Figure(figsize=(7, 4), layout='constrained')
    ax = fig.subplots()
    if axis == 'intensity':
        positions = [float(value) for value in values]
        ax.plot(positions, before, '--', color=CLIENT_COLOR, marker='o', label='Attack free')
        ax.plot(positions, after, '-', color=ATTACKER_COLOR, marker='o', label='Attacked')
    else:
        width = 0.38
        ax.bar([p - width / 2 for p in positions], before, width, label='Attack free', color=CLIENT_COLOR,
            alpha=0.8)
        ax.bar([p + width / 2 for p in positions], after, width, label='Attacked', color=ATTACKER_COLOR, alpha=0.8)
    ax.set_xticks(positions, labels)
    ax.set_xlabel(axis)
    ax.set_ylabel(f'Attacker share ({evaluator})')
    ax.grid(True, axis='y', alpha=0.3)

    twin = ax.twinx()
    twin.plot(positions, utility, color='black', marker='o', label='Attacked utility')
    twin.set_ylabel('Test accuracy')
    twin.set_ylim(0, 1)
    handles, names = ax.get_legend_handles_labels()
    more_handles, more_names = twin.get_legend_handles_labels()
    ax.legend(handles + more_handles, names + more_names, loc='upper left', fontsize=8)
    ax.set_title(f'Sweep over {axis}')
    return fig


def emit_sweep_plots(summary, out_dir):
    path = Path(out_dir) / SWEEP_FIGURE.format(axis=summary['axis'])
    run_ids = ','.join(r['run_id'] for r in summary['reports'])
    save(sweep_figure(summary), path, run_ids)
    return [path]


def replot(source):
    """Re-emit every figure from the reports stored under source."""
    source = Path(source)
    paths = []
    for sweep_file in sorted(source.rglob(config.SWEEP_FILE)):
        paths += emit_sweep_plots(history.read_json(sweep_file), sweep_file.parent)
    for report_file in sorted(source.rglob(config.REPORT_FILE)):
        paths += emit_plots(history.read_json(report_file), report_file.parent)
    if not paths:
        raise FileNotFoundError(f'No {config.REPORT_FILE} or {config.SWEEP_FILE} under {source}.')
    logger.info('Emitted %d figures.', len(paths))
    return paths
