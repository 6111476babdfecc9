"""
Command-line entry point of the desk-scale scheduling harness.

Every subcommand reads `src/configuration/config.ini` (or `--config PATH`);
flags given on the command line override the file.
"""

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from configparser import ConfigParser
from dataclasses import replace
from pathlib import Path
from typing import NoReturn

import numpy as np
from sklearn.model_selection import GroupShuffleSplit

import src.helpers.helpers as h
from src.controller.controller import (
    CampaignConfig,
    CampaignReport,
    ablation_left_cup,
    emit_table,
    run_campaign,
)
from src.controller.corpus import make_training_corpus
from src.model import scenarios
from src.model.annotator import (
    NoisyRetriever,
    OracleRetriever,
    RawTrajectory,
    Retriever,
    annotate,
)
from src.model.critic_train import eval_critic, read_frames, train_critic
from src.model.exceptions import ConfigurationError
from src.model.sim_world import WorldParams

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(config_data: ConfigParser, level: str | None = None) -> None:
    level = level or config_data.get('Logging', 'level', fallback='INFO')
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, force=True)


def _csv(raw: str) -> tuple[str, ...]:
    return tuple(item.strip() for item in raw.split(',') if item.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='INI file to load')
    common.add_argument(
        '--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], default=None
    )
    common.add_argument('--quiet', action='store_true', help='hide progress bars')

    campaign = argparse.ArgumentParser(add_help=False)
    campaign.add_argument('--tau-succ', type=float)
    campaign.add_argument('--n-stag', type=int)
    campaign.add_argument('--horizon', type=int)
    campaign.add_argument('--critic-lag', type=int)
    campaign.add_argument('--max-episode-ticks', type=int)
    campaign.add_argument('--episodes', type=int)
    campaign.add_argument('--seed', type=int, help='base seed')
    campaign.add_argument('--workers', type=int)
    campaign.add_argument('--output', type=Path, help='run directory')
    campaign.add_argument('--scenarios', type=_csv, help='comma separated')
    campaign.add_argument('--schedulers', type=_csv, help='comma separated')
    campaign.add_argument(
        '--critic-model', help='use the learned critic pickled at this path'
    )

    parser = argparse.ArgumentParser(
        prog='tri-desk', description='Critic-guided scheduling harness'
    )
    parser.add_argument('--version', action='version', version=h.get_app_version())
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser(
        'run-campaign',
        parents=[common, campaign],
        help='run every scheduler on every scenario',
    )
    sub.add_parser(
        'ablation',
        parents=[common, campaign],
        help='run the four left-cup ablation cases',
    )

    corpus = sub.add_parser(
        'make-corpus', parents=[common], help='record and label demonstrations'
    )
    corpus.add_argument('--scenarios', type=_csv)
    corpus.add_argument('--episodes', type=int, help='demonstrations per scenario')
    corpus.add_argument('--seed', type=int)
    corpus.add_argument('--rho', type=float, help='retriever noise')
    corpus.add_argument('--output', type=Path, default=Path('runs/corpus'))

    train = sub.add_parser(
        'train-critic', parents=[common], help='fit a critic on frames.jsonl'
    )
    train.add_argument('frames', type=Path)
    train.add_argument('--output', type=Path, default=Path('runs/critic.pkl'))
    train.add_argument('--epochs', type=int)
    train.add_argument('--seed', type=int)
    train.add_argument(
        '--heldout', type=float, default=0.2, help='share of episodes held out'
    )

    ann = sub.add_parser(
        'annotate', parents=[common], help='segment and label a trajectory'
    )
    ann.add_argument('trajectory', type=Path)
    ann.add_argument(
        '--labels', type=Path, required=True, help='one label per frame, per line'
    )
    ann.add_argument('--scenario', help='restrict labels to this vocabulary')
    ann.add_argument('--anomaly-frames', type=_csv, default=())
    ann.add_argument('--epsilon', type=float)
    ann.add_argument('--delta-t', type=int)
    ann.add_argument('--rho', type=float)
    ann.add_argument('--seed', type=int, default=0)
    ann.add_argument('--output', type=Path)

    table = sub.add_parser(
        'emit-table', parents=[common], help='render a report as a table'
    )
    table.add_argument('report', type=Path)
    table.add_argument('--format', choices=['csv', 'tsv'], default='csv')
    table.add_argument('--output', type=Path)

    plot = sub.add_parser(
        'plot-trace', parents=[common], help='plot the value stream of a trace'
    )
    plot.add_argument('trace', type=Path)
    plot.add_argument('--output', type=Path)
    plot.add_argument('--show', action='store_true', help='open the plot window')
    return parser


def campaign_config(
    args: argparse.Namespace, config_data: ConfigParser
) -> CampaignConfig:
    base = CampaignConfig.from_ini(config_data)
    sched_overrides = {
        'tau_succ': args.tau_succ,
        'n_stag': args.n_stag,
        'horizon': args.horizon,
        'critic_lag': args.critic_lag,
        'max_episode_ticks': args.max_episode_ticks,
    }
    sched = replace(
        base.scheduler, **{k: v for k, v in sched_overrides.items() if v is not None}
    )
    agents = replace(base.agents, horizon=sched.horizon)
    if args.critic_model:
        agents = replace(agents, critic='learned', critic_model=args.critic_model)
    overrides = {
        'scenarios': args.scenarios,
        'schedulers': args.schedulers,
        'episodes': args.episodes,
        'base_seed': args.seed,
        'workers': args.workers,
        'output_dir': args.output,
    }
    return replace(
        base,
        agents=agents,
        scheduler=sched,
        **{k: v for k, v in overrides.items() if v is not None},
    )


def _write_or_print(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
        return
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(text, encoding='utf-8', newline='\n')
    logger.info('Wrote %s', output)


####################################
########### Subcommands ############
####################################


def cmd_run_campaign(args: argparse.Namespace, config_data: ConfigParser) -> int:
    config = campaign_config(args, config_data)
    report = run_campaign(config, progress=not args.quiet)
    sys.stdout.write(emit_table(report))
    return 0


def cmd_ablation(args: argparse.Namespace, config_data: ConfigParser) -> int:
    config = campaign_config(args, config_data)
    report = ablation_left_cup(config, progress=not args.quiet)
    sys.stdout.write(emit_table(report))
    return 0


def cmd_make_corpus(args: argparse.Namespace, config_data: ConfigParser) -> int:
    names = args.scenarios or h.get_str_tuple(config_data, 'Campaign', 'scenarios')
    episodes = args.episodes
    if episodes is None:
        episodes = config_data.getint('Campaign', 'episodes')
    seed = args.seed
    if seed is None:
        seed = config_data.getint('Campaign', 'base_seed')
    a = config_data['Annotator']
    corpus = make_training_corpus(
        names,
        episodes,
        seed,
        args.output,
        anomaly_window=config_data.getint('CriticTrain', 'anomaly_window'),
        epsilon=a.getfloat('epsilon'),
        delta_t=a.getint('delta_t'),
        rho=args.rho if args.rho is not None else a.getfloat('rho'),
        horizon=config_data.getint('Scheduler', 'horizon'),
        params=WorldParams.from_ini(config_data),
        progress=not args.quiet,
    )
    logger.info('%d labeled frames in %s', len(corpus.frames), args.output)
    return 0


def cmd_train_critic(args: argparse.Namespace, config_data: ConfigParser) -> int:
    t = config_data['CriticTrain']
    seed = args.seed if args.seed is not None else t.getint('seed')
    frames = read_frames(args.frames)
    episodes = np.array([f.source_episode for f in frames])
    train, heldout = list(frames), []
    if 0.0 < args.heldout < 1.0 and len(set(episodes)) > 1:
        # whole episodes go to one side so held-out frames are never seen
        split = GroupShuffleSplit(
            n_splits=1, test_size=args.heldout, random_state=seed
        )
        train_idx, test_idx = next(split.split(episodes, groups=episodes))
        train = [frames[i] for i in train_idx]
        heldout = [frames[i] for i in test_idx]
    logger.info('Training on %d frames, %d held out', len(train), len(heldout))
    critic = train_critic(
        train,
        args.epochs or t.getint('epochs'),
        seed,
        iterations_per_epoch=t.getint('iterations_per_epoch'),
        regularization=t.getfloat('regularization'),
        corpus_id=str(args.frames),
    )
    critic.save(args.output)
    logger.info('Critic saved to %s', args.output)
    if heldout:
        metrics = eval_critic(critic, heldout)
        h.write_json(args.output.with_suffix('.metrics.json'), metrics.to_dict())
        logger.info('Held-out metrics: %s', metrics.to_dict())
    return 0


def cmd_annotate(args: argparse.Namespace, config_data: ConfigParser) -> int:
    a = config_data['Annotator']
    traj = RawTrajectory.load(args.trajectory)
    with open(args.labels, encoding='utf-8') as f:
        labels = [line.strip() for line in f if line.strip()]
    if len(labels) != traj.n_frames:
        raise ConfigurationError(
            f'Label file has {len(labels)} labels for {traj.n_frames} frames.'
        )
    vocabulary = None
    if args.scenario:
        vocabulary = scenarios.vocabulary_texts(args.scenario)
    retriever: Retriever = OracleRetriever(labels, vocabulary)
    rho = args.rho if args.rho is not None else a.getfloat('rho')
    if rho > 0:
        retriever = NoisyRetriever(retriever, rho, args.seed)
    episode = annotate(
        traj,
        retriever,
        args.epsilon if args.epsilon is not None else a.getfloat('epsilon'),
        args.delta_t if args.delta_t is not None else a.getint('delta_t'),
        anomaly_frames=[int(f) for f in args.anomaly_frames],
        scenario=args.scenario,
    )
    output = args.output or args.trajectory.with_suffix('.seg')
    episode.save(output)
    logger.info('%d segments written to %s', len(episode.segments), output)
    return 0


def cmd_emit_table(args: argparse.Namespace, config_data: ConfigParser) -> int:
    report = CampaignReport.load(args.report)
    _write_or_print(emit_table(report, args.format), args.output)
    return 0


def cmd_plot_trace(args: argparse.Namespace, config_data: ConfigParser) -> int:
    records = list(h.read_jsonl(args.trace))
    if args.show:
        from PySide6.QtWidgets import QApplication

        from src.view.plot_window import PlotWindow

        app = QApplication.instance() or QApplication([])
        window = PlotWindow(records)
        window.create_gui()
        window.show()
        return app.exec()

    from src.view.plot_window import save_figure

    output = args.output or args.trace.with_suffix('.png')
    save_figure(records, output)
    logger.info('Plot saved to %s', output)
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, ConfigParser], int]] = {
    'run-campaign': cmd_run_campaign,
    'ablation': cmd_ablation,
    'make-corpus': cmd_make_corpus,
    'train-critic': cmd_train_critic,
    'annotate': cmd_annotate,
    'emit-table': cmd_emit_table,
    'plot-trace': cmd_plot_trace,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config_data = h.load_ini(args.config)
    configure_logging(config_data, args.log_level)
    try:
        return COMMANDS[args.command](args, config_data)
    except (ConfigurationError, ValueError, FileNotFoundError) as e:
        logger.error('%s failed: %s', args.command, e)
        return 2


def run_cli() -> NoReturn:
    sys.exit(main())


if __name__ == '__main__':
    run_cli()
