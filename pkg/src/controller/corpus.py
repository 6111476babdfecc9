"""
Demonstration recording and critic training corpus construction.

A demonstration is the teleoperation stand-in: the oracle Brain (with arm
tokens, so the operator always uses an arm that can reach) and the scripted
Cerebellum work through the scenario script with no critic, and the goal
switches as soon as the ground-truth predicate holds. After an
accident the demonstrator keeps going for `anomaly_window` ticks before it
turns to recovery, so the failure is visible at the end of the segment.

Recorded trajectories go through the annotator and then value labeling.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from tqdm import tqdm

import src.helpers.helpers as h
from src.model import scenarios
from src.model.agents import OracleBrain, ScriptedCerebellum
from src.model.annotator import (
    DEFAULT_DELTA_T,
    DEFAULT_EPSILON,
    AnnotatedEpisode,
    NoisyRetriever,
    OracleRetriever,
    RawTrajectory,
    Retriever,
    annotate,
)
from src.model.critic_train import (
    DEFAULT_ANOMALY_WINDOW,
    LabeledFrame,
    LmaxTable,
    compute_lmax,
    label_episode,
    write_frames,
)
from src.model.exceptions import ConfigurationError
from src.model.goals import MemoryContext
from src.model.sim_world import (
    SIDES,
    ScenarioConfig,
    WorldParams,
    WorldState,
    export_trajectory,
    global_success,
    inject_perturbations,
    observe,
    scenario_init,
    step,
    subtask_done,
)

logger = logging.getLogger(__name__)

DEMO_MAX_TICKS = 600


@dataclass(frozen=True, eq=False)
class Demonstration:
    trajectory: RawTrajectory
    labels: tuple[str, ...]
    anomaly_frames: tuple[int, ...]
    features: NDArray[np.float64]
    scenario: str
    success: bool
    worlds: tuple[WorldState, ...] = ()


def record_demonstration(
    config: ScenarioConfig,
    *,
    anomaly_window: int = DEFAULT_ANOMALY_WINDOW,
    horizon: int = 16,
    max_ticks: int = DEMO_MAX_TICKS,
    source_id: str | None = None,
) -> Demonstration:
    """
    Records one scripted demonstration with per-frame ground-truth labels.

    Frame t holds the world before the t-th step. A frame is an anomaly
    frame when an object lies fallen while the active goal is not the
    righting goal.
    """
    brain = OracleBrain('structured', config.params)
    cerebellum = ScriptedCerebellum(horizon, seed=config.seed, params=config.params)
    instruction = scenarios.instruction(config.name)
    world = scenario_init(config)
    goal = brain.plan(observe(world), instruction, MemoryContext.none())
    buffer: list = []
    accident_since: int | None = None

    ee: list[list[float]] = []
    grippers: list[list[int]] = []
    features: list[NDArray[np.float64]] = []
    labels: list[str] = []
    anomalies: list[int] = []
    worlds: list[WorldState] = []
    for tick in range(max_ticks):
        if global_success(world):
            break
        world = inject_perturbations(world, config)
        obs = observe(world)
        memory = None
        if world.fallen() and goal.verb != 'right_object':
            if accident_since is None:
                accident_since = tick
            if tick - accident_since >= anomaly_window:
                memory = MemoryContext.accident()
        elif subtask_done(world, goal):
            memory = MemoryContext.completed(goal)
        if memory is not None:
            goal = brain.plan(obs, instruction, memory)
            buffer = []
            accident_since = None
        if world.fallen() and goal.verb != 'right_object':
            anomalies.append(tick)
        worlds.append(world)
        ee.append([c for side in SIDES for c in world.arm(side).ee_position])
        grippers.append([int(world.arm(side).gripper == 'closed') for side in SIDES])
        features.append(obs.features)
        labels.append(goal.plain_text)
        if not buffer:
            buffer = list(cerebellum.act(obs, world.arms, goal).actions)
        world = step(world, buffer.pop(0))

    positions = np.asarray(ee, dtype=np.float64)
    gripper = np.asarray(grippers, dtype=np.int8)
    trajectory = RawTrajectory(
        positions[:, :3],
        positions[:, 3:],
        gripper[:, 0],
        gripper[:, 1],
        source_id or f'{config.name}_{config.seed}',
    )
    return Demonstration(
        trajectory,
        tuple(labels),
        tuple(anomalies),
        np.vstack(features),
        config.name,
        global_success(world),
        tuple(worlds),
    )


def annotate_demonstration(
    demo: Demonstration,
    epsilon: float = DEFAULT_EPSILON,
    delta_t: int = DEFAULT_DELTA_T,
    rho: float = 0.0,
    seed: int = 0,
) -> AnnotatedEpisode:
    """Annotates with the recorded labels, corrupted with probability `rho`."""
    vocabulary = scenarios.vocabulary_texts(demo.scenario)
    retriever: Retriever = OracleRetriever(demo.labels, vocabulary)
    if rho > 0:
        retriever = NoisyRetriever(retriever, rho, seed)
    return annotate(
        demo.trajectory,
        retriever,
        epsilon,
        delta_t,
        anomaly_frames=demo.anomaly_frames,
        scenario=demo.scenario,
        features=demo.features,
    )


@dataclass
class TrainingCorpus:
    episodes: list[AnnotatedEpisode]
    frames: list[LabeledFrame]
    lmax: LmaxTable
    manifest: dict


def episode_seed(cell_seed: int, index: int) -> int:
    return cell_seed * 10_000 + index


def make_training_corpus(
    scenario_names: Sequence[str],
    episodes: int,
    seed: int,
    out_dir: str | Path | None = None,
    *,
    anomaly_window: int = DEFAULT_ANOMALY_WINDOW,
    epsilon: float = DEFAULT_EPSILON,
    delta_t: int = DEFAULT_DELTA_T,
    rho: float = 0.0,
    horizon: int = 16,
    params: WorldParams | None = None,
    progress: bool = False,
) -> TrainingCorpus:
    """
    Records, annotates and labels `episodes` demonstrations per scenario.

    Scenario i uses cell seed `seed + i`; its k-th episode uses seed
    `cell_seed * 10000 + k`. With `out_dir`, writes `episodes/*.traj`,
    `episodes/*.seg`, the world states per tick as `episodes/*.world.jsonl`,
    `frames.jsonl` and `manifest.json`.
    """
    if episodes < 1:
        raise ConfigurationError(f'Invalid episodes: {episodes}. Must be >= 1.')
    for name in scenario_names:
        scenarios.check_scenario(name)
    params = params or WorldParams()
    annotated: list[AnnotatedEpisode] = []
    demos: list[Demonstration] = []
    jobs = [
        (name, episode_seed(seed + i, k))
        for i, name in enumerate(scenario_names)
        for k in range(episodes)
    ]
    for name, ep_seed in tqdm(jobs, desc='demonstrations', disable=not progress):
        config = ScenarioConfig.for_scenario(name, ep_seed, params=params)
        demo = record_demonstration(
            config, anomaly_window=anomaly_window, horizon=horizon
        )
        if not demo.success:
            logger.warning('Demonstration %s did not finish', demo.trajectory.source_id)
        demos.append(demo)
        annotated.append(annotate_demonstration(demo, epsilon, delta_t, rho, ep_seed))

    lmax = compute_lmax(annotated)
    frames = [
        frame
        for episode in annotated
        for frame in label_episode(episode, lmax, anomaly_window)
    ]
    n_anomaly = sum(frame.is_anomaly for frame in frames)
    logger.info(
        'Corpus: %d episodes, %d frames, %d anomaly frames',
        len(annotated),
        len(frames),
        n_anomaly,
    )
    manifest = {
        'kind': 'training_corpus',
        'version': h.get_app_version(),
        'scenarios': list(scenario_names),
        'episodes_per_scenario': episodes,
        'seed': seed,
        'episode_seeds': [s for _, s in jobs],
        'anomaly_window': anomaly_window,
        'epsilon': epsilon,
        'delta_t': delta_t,
        'rho': rho,
        'n_frames': len(frames),
        'n_anomaly_frames': n_anomaly,
        'lmax': lmax,
        'files': [],
    }
    if out_dir is not None:
        out = Path(out_dir)
        files = []
        for demo, episode in zip(demos, annotated):
            stem = f'episodes/{demo.trajectory.source_id}'
            demo.trajectory.save(out / f'{stem}.traj')
            episode.save(out / f'{stem}.seg')
            export_trajectory(demo.worlds, out / f'{stem}.world.jsonl')
            files += [f'{stem}.traj', f'{stem}.seg', f'{stem}.world.jsonl']
        write_frames(out / 'frames.jsonl', frames)
        files.append('frames.jsonl')
        manifest['files'] = files
        h.write_json(out / 'manifest.json', manifest)
        logger.info('Corpus written to %s', out)
    return TrainingCorpus(annotated, frames, lmax, manifest)
