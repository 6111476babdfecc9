"""
Seeded experiment campaigns: every (scheduler, scenario) cell runs a number
of episodes, and the per-cell counts are reduced into a report and a table.

Seeds: cell i (cells ordered scheduler-major, then scenario) uses
`base_seed + i`; its k-th episode uses `cell_seed * 10000 + k`. Episodes may
run on a QThreadPool; results are sorted by (cell, episode) before the
reduction, so the report never depends on completion order.
"""

import io
import json
import logging
import traceback
from configparser import ConfigParser
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from threading import Lock
from typing import Any

import pandas as pd
from pandas import DataFrame
from PySide6.QtCore import QObject, Qt, QThreadPool, Signal, Slot
from tqdm import tqdm

import src.helpers.helpers as h
from src.controller.corpus import episode_seed
from src.controller.episode_worker import EpisodeWorker
from src.controller.scheduler import (
    SCHEDULERS,
    SchedulerConfig,
    audit_stale_actions,
    run_scheduler,
)
from src.model import scenarios
from src.model.agents import AgentConfig, build_agents
from src.model.exceptions import ConfigurationError
from src.model.sim_world import PerturbationEvent, ScenarioConfig

logger = logging.getLogger(__name__)

TABLE_COLUMNS: tuple[str, ...] = (
    'cell',
    'scheduler',
    'scenario',
    'episodes',
    'success',
    'mean_brain_queries',
    'oscillations',
    'stagnation_resets',
    'errors',
)

# Prompt style, brain and transfer data of each left-cup ablation case; all
# run the tri-system scheduler with the out-of-distribution trap on.
ABLATION_CASES: dict[str, dict[str, Any]] = {
    'case1_plain_no_transfer': {
        'prompt': 'plain',
        'brain': 'oracle',
        'left_arm_transfer': False,
    },
    'case2_plain_transfer': {
        'prompt': 'plain',
        'brain': 'oracle',
        'left_arm_transfer': True,
    },
    'case3_structured_biased': {
        'prompt': 'structured',
        'brain': 'biased',
        'left_arm_transfer': True,
    },
    'case4_structured_oracle': {
        'prompt': 'structured',
        'brain': 'oracle',
        'left_arm_transfer': True,
    },
}


@dataclass(frozen=True, slots=True)
class CampaignConfig:
    scenarios: tuple[str, ...] = scenarios.TABLEWARE_SCENARIOS
    schedulers: tuple[str, ...] = SCHEDULERS
    episodes: int = 100
    base_seed: int = 0
    workers: int = 1
    output_dir: Path | None = None
    noise_level: float = 0.0
    agents: AgentConfig = field(default_factory=AgentConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    # (scenario, events) pairs replacing that scenario's default schedule
    perturbations: tuple[tuple[str, tuple[PerturbationEvent, ...]], ...] = ()

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ConfigurationError(
                f'Invalid episodes: {self.episodes}. Must be >= 1.'
            )
        if self.workers < 1:
            raise ConfigurationError(f'Invalid workers: {self.workers}. Must be >= 1.')
        if not self.scenarios:
            raise ConfigurationError('A campaign needs at least one scenario.')
        for name in self.scenarios:
            scenarios.check_scenario(name)
        if not self.schedulers:
            raise ConfigurationError('A campaign needs at least one scheduler.')
        for name in self.schedulers:
            if name not in SCHEDULERS:
                allowed = ', '.join(SCHEDULERS)
                raise ConfigurationError(
                    f'Invalid scheduler: {name}. Must be one of {allowed}.'
                )
        for name, _ in self.perturbations:
            scenarios.check_scenario(name)

    @classmethod
    def from_ini(cls, config_data: ConfigParser) -> 'CampaignConfig':
        c = config_data['Campaign']
        d = cls()
        output_dir = c.get('output_dir', '').strip()
        scheduled: tuple[tuple[str, tuple[PerturbationEvent, ...]], ...] = ()
        if any(sec.startswith('Perturbation.') for sec in config_data.sections()):
            scenario = ScenarioConfig.from_ini(config_data)
            scheduled = ((scenario.name, scenario.perturbations),)
        return cls(
            scenarios=h.get_str_tuple(config_data, 'Campaign', 'scenarios')
            or d.scenarios,
            schedulers=h.get_str_tuple(config_data, 'Campaign', 'schedulers')
            or d.schedulers,
            episodes=c.getint('episodes', d.episodes),
            base_seed=c.getint('base_seed', d.base_seed),
            workers=c.getint('workers', d.workers),
            output_dir=Path(output_dir) if output_dir else None,
            noise_level=config_data.getfloat('Scenario', 'noise_level', fallback=0.0),
            agents=AgentConfig.from_ini(config_data),
            scheduler=SchedulerConfig.from_ini(config_data),
            perturbations=scheduled,
        )

    def perturbations_for(self, scenario: str) -> tuple[PerturbationEvent, ...] | None:
        """The configured schedule of `scenario`, or None to keep its default."""
        for name, events in self.perturbations:
            if name == scenario:
                return events
        return None

    def to_dict(self) -> dict[str, Any]:
        """Settings that determine results; the output location is left out."""
        agents = {
            k: getattr(self.agents, k)
            for k in (
                'brain',
                'prompt',
                'p_drop',
                'ood_trap',
                'left_arm_transfer',
                'critic',
                'critic_model',
                'horizon',
            )
        }
        sched = self.scheduler
        return {
            'scenarios': list(self.scenarios),
            'schedulers': list(self.schedulers),
            'episodes': self.episodes,
            'base_seed': self.base_seed,
            'noise_level': self.noise_level,
            'agents': agents,
            'scheduler': {
                'tau_succ': sched.tau_succ,
                'n_stag': sched.n_stag,
                'horizon': sched.horizon,
                'critic_lag': sched.critic_lag,
                'max_episode_ticks': sched.max_episode_ticks,
                'tau_overrides': [list(pair) for pair in sched.tau_overrides],
            },
            'perturbations': {
                name: [e.to_dict() for e in events]
                for name, events in self.perturbations
            },
        }


@dataclass(frozen=True, slots=True)
class Cell:
    index: int
    name: str
    scheduler: str
    scenario: str
    seed: int
    agents: AgentConfig


@dataclass(frozen=True, slots=True)
class EpisodeJob:
    cell: Cell
    index: int

    @property
    def seed(self) -> int:
        return episode_seed(self.cell.seed, self.index)

    @property
    def trace_name(self) -> str:
        return f'traces/{self.cell.name}_{self.index}.jsonl'


@dataclass(frozen=True, slots=True)
class EpisodeResult:
    cell_index: int
    index: int
    seed: int
    success: bool
    brain_queries: int
    oscillations: int
    stagnation_resets: int
    subtask_progress: int
    stale_actions: int
    goals: tuple[str, ...] = ()
    fatal_error: str | None = None
    trace_file: str | None = None


@dataclass
class CellReport:
    cell: str
    scheduler: str
    scenario: str
    seed: int
    episodes: int
    success: int
    mean_brain_queries: float
    oscillations: int
    stagnation_resets: int
    errors: int
    stale_actions: int
    subtask_success: tuple[int, ...]
    traces: tuple[str, ...] = ()

    @property
    def success_rate(self) -> float:
        return self.success / self.episodes

    def to_row(self) -> dict[str, Any]:
        row = {column: getattr(self, column) for column in TABLE_COLUMNS}
        for k, count in enumerate(self.subtask_success, start=1):
            row[f'subtask_{k}'] = count
        return row

    def to_dict(self) -> dict[str, Any]:
        data = self.to_row()
        data['seed'] = self.seed
        data['stale_actions'] = self.stale_actions
        data['subtask_success'] = list(self.subtask_success)
        data['traces'] = list(self.traces)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'CellReport':
        return cls(
            cell=data['cell'],
            scheduler=data['scheduler'],
            scenario=data['scenario'],
            seed=data['seed'],
            episodes=data['episodes'],
            success=data['success'],
            mean_brain_queries=data['mean_brain_queries'],
            oscillations=data['oscillations'],
            stagnation_resets=data['stagnation_resets'],
            errors=data['errors'],
            stale_actions=data['stale_actions'],
            subtask_success=tuple(data['subtask_success']),
            traces=tuple(data.get('traces', ())),
        )


@dataclass
class CampaignReport:
    kind: str
    cells: list[CellReport]
    config: dict[str, Any]

    def cell(self, name: str) -> CellReport:
        for cell in self.cells:
            if cell.cell == name:
                return cell
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            'kind': self.kind,
            'config': self.config,
            'cells': [c.to_dict() for c in self.cells],
        }

    def save(self, filepath: str | Path) -> Path:
        return h.write_json(filepath, self.to_dict())

    @classmethod
    def load(cls, filepath: str | Path) -> 'CampaignReport':
        with open(filepath, encoding='utf-8') as f:
            data = json.load(f)
        cells = [CellReport.from_dict(c) for c in data['cells']]
        return cls(data['kind'], cells, data['config'])


def campaign_cells(config: CampaignConfig) -> list[Cell]:
    cells = []
    for scheduler in config.schedulers:
        for scenario in config.scenarios:
            index = len(cells)
            cells.append(
                Cell(
                    index,
                    f'{scheduler}_{scenario}',
                    scheduler,
                    scenario,
                    config.base_seed + index,
                    config.agents,
                )
            )
    return cells


def ablation_cells(config: CampaignConfig) -> list[Cell]:
    return [
        Cell(
            index,
            name,
            'tri',
            'left_cup',
            config.base_seed + index,
            replace(config.agents, ood_trap=True, **overrides),
        )
        for index, (name, overrides) in enumerate(ABLATION_CASES.items())
    ]


def run_episode_job(
    job: EpisodeJob, config: CampaignConfig, trace_dir: Path | None = None
) -> EpisodeResult:
    """Runs one episode and writes its trace when `trace_dir` is given."""
    cell = job.cell
    scenario = ScenarioConfig.for_scenario(
        cell.scenario, job.seed, config.noise_level, cell.agents.params
    )
    scheduled = config.perturbations_for(cell.scenario)
    if scheduled is not None:
        scenario = replace(scenario, perturbations=scheduled)
    agents = build_agents(cell.agents, cell.scenario, job.seed, cell.scheduler)
    trace = run_scheduler(cell.scheduler, scenario, agents, config.scheduler)
    trace_file = None
    if trace_dir is not None:
        trace.save(trace_dir / job.trace_name)
        trace_file = job.trace_name
    return EpisodeResult(
        cell_index=cell.index,
        index=job.index,
        seed=job.seed,
        success=trace.success,
        brain_queries=trace.brain_query_count,
        oscillations=trace.oscillations,
        stagnation_resets=trace.stagnation_resets,
        subtask_progress=trace.subtask_progress,
        stale_actions=len(audit_stale_actions(trace)),
        goals=tuple(trace.goal_sequence),
        fatal_error=trace.fatal_error,
        trace_file=trace_file,
    )


def reduce_cell(cell: Cell, results: list[EpisodeResult]) -> CellReport:
    n_subtasks = len(scenarios.script(cell.scenario))
    return CellReport(
        cell=cell.name,
        scheduler=cell.scheduler,
        scenario=cell.scenario,
        seed=cell.seed,
        episodes=len(results),
        success=sum(r.success for r in results),
        mean_brain_queries=sum(r.brain_queries for r in results) / len(results),
        oscillations=sum(r.oscillations for r in results),
        stagnation_resets=sum(r.stagnation_resets for r in results),
        errors=sum(r.fatal_error is not None for r in results),
        stale_actions=sum(r.stale_actions for r in results),
        subtask_success=tuple(
            sum(r.subtask_progress >= k for r in results)
            for k in range(1, n_subtasks + 1)
        ),
        traces=tuple(r.trace_file for r in results if r.trace_file is not None),
    )


class CampaignController(QObject):
    """
    Runs campaign and ablation cells, inline or on a QThreadPool, and
    writes the run directory.
    """

    episode_finished_sig = Signal(int, int)

    def __init__(self, config: CampaignConfig, progress: bool = True) -> None:
        super().__init__()
        self.config = config
        self.progress = progress
        self.thread_pool = QThreadPool()
        self.thread_pool.setMaxThreadCount(config.workers)
        self._lock = Lock()
        self._results: dict[tuple[int, int], EpisodeResult] = {}
        self._bar: tqdm | None = None

    def run_campaign(self) -> CampaignReport:
        return self._run_cells('campaign', campaign_cells(self.config))

    def ablation_left_cup(self) -> CampaignReport:
        return self._run_cells('ablation', ablation_cells(self.config))

    def _run_cells(self, kind: str, cells: list[Cell]) -> CampaignReport:
        out = self.config.output_dir
        episodes = self.config.episodes
        jobs = [EpisodeJob(cell, k) for cell in cells for k in range(episodes)]
        logger.info('Starting %s: %d cells x %d episodes', kind, len(cells), episodes)
        self._results = {}
        run_job = partial(run_episode_job, config=self.config, trace_dir=out)
        with tqdm(total=len(jobs), desc=kind, disable=not self.progress) as bar:
            self._bar = bar
            if self.config.workers == 1:
                for job in jobs:
                    try:
                        result = run_job(job)
                    except Exception as e:
                        tb = traceback.format_exc()
                        self.receive_error_sig(
                            job, job.cell.index, job.index, str(e), tb
                        )
                    else:
                        self.receive_result_sig(result)
                    bar.update()
            else:
                for job in jobs:
                    worker = EpisodeWorker(job, run_job)
                    worker.signals.result.connect(
                        self.receive_result_sig, Qt.ConnectionType.DirectConnection
                    )
                    worker.signals.error.connect(
                        partial(self.receive_error_sig, job),
                        Qt.ConnectionType.DirectConnection,
                    )
                    worker.signals.finished.connect(
                        self.receive_finished_sig, Qt.ConnectionType.DirectConnection
                    )
                    self.thread_pool.start(worker)
                self.thread_pool.waitForDone()
            self._bar = None

        report = CampaignReport(kind, [], self.config.to_dict())
        for cell in cells:
            results = [
                self._results[(cell.index, k)] for k in range(self.config.episodes)
            ]
            report.cells.append(reduce_cell(cell, results))
            logger.info(
                '%s: %d/%d successes', cell.name, report.cells[-1].success, len(results)
            )
        if out is not None:
            self._write_run_dir(out, report, cells)
        return report

    def _write_run_dir(
        self, out: Path, report: CampaignReport, cells: list[Cell]
    ) -> None:
        report.save(out / 'report.json')
        table = emit_table(report)
        (out / 'table.csv').write_text(table, encoding='utf-8', newline='\n')
        artifacts = ['report.json', 'table.csv']
        artifacts += [t for c in report.cells for t in c.traces]
        manifest = {
            'kind': report.kind,
            'version': h.get_app_version(),
            'output_dir': str(out),
            'config': report.config,
            'seeds': {
                c.name: {
                    'cell_seed': c.seed,
                    'episode_seeds': [
                        episode_seed(c.seed, k) for k in range(self.config.episodes)
                    ],
                }
                for c in cells
            },
            'artifacts': artifacts,
        }
        h.write_json(out / 'manifest.json', manifest)
        logger.info('Run directory written to %s', out)

    ####################################
    ####### Episode Worker Slots #######
    ####################################

    @Slot(object)
    def receive_result_sig(self, result: EpisodeResult) -> None:
        with self._lock:
            self._results[(result.cell_index, result.index)] = result

    def receive_error_sig(
        self, job: EpisodeJob, cell: int, episode: int, error: str, tb: str
    ) -> None:
        """
        Signal received from an `EpisodeWorker`.

        Records the failure as an unsuccessful episode so the cell still
        has every episode.
        """
        logger.warning(
            '%s episode %d failed: %s\n%s', job.cell.name, episode, error, tb
        )
        result = EpisodeResult(
            cell, episode, job.seed, False, 0, 0, 0, 0, 0, fatal_error=error
        )
        with self._lock:
            self._results[(cell, episode)] = result

    @Slot(int, int, bool)
    def receive_finished_sig(self, cell: int, episode: int, complete: bool) -> None:
        with self._lock:
            if self._bar is not None:
                self._bar.update()
        self.episode_finished_sig.emit(cell, episode)


def run_campaign(config: CampaignConfig, progress: bool = False) -> CampaignReport:
    return CampaignController(config, progress).run_campaign()


def ablation_left_cup(config: CampaignConfig, progress: bool = False) -> CampaignReport:
    """
    Runs the four left-cup ablation cases: plain prompt without and with
    left-arm transfer data, then structured prompts from the biased and the
    oracle Brain.
    """
    return CampaignController(config, progress).ablation_left_cup()


def emit_table(report: CampaignReport, fmt: str = 'csv') -> str:
    """
    One row per cell in a fixed column order, cumulative `subtask_<k>`
    success counts last.
    """
    seps = {'csv': ',', 'tsv': '\t'}
    if fmt not in seps:
        raise ConfigurationError(f'Invalid table format: {fmt}. Must be csv or tsv.')
    rows = [cell.to_row() for cell in report.cells]
    n_subtasks = max((len(c.subtask_success) for c in report.cells), default=0)
    subtask_columns = [f'subtask_{k}' for k in range(1, n_subtasks + 1)]
    df = DataFrame(rows, columns=list(TABLE_COLUMNS) + subtask_columns)
    if subtask_columns:
        # shorter scripts never reach the later subtasks
        df[subtask_columns] = df[subtask_columns].fillna(0).astype('int64')
    return df.to_csv(index=False, sep=seps[fmt], lineterminator='\n')


def parse_table(text: str, fmt: str = 'csv') -> DataFrame:
    sep = '\t' if fmt == 'tsv' else ','
    return pd.read_csv(io.StringIO(text), sep=sep, float_precision='round_trip')
