"""
Critic-guided dynamic scheduling of the Brain, plus the dual-system and
single-system reference schedulers.

The tri-system scheduler keeps the Brain dormant while the Cerebellum's
action chunks execute. Every tick the Critic scores the active goal; the
buffer is preempted and the Brain re-queried only when the critic flags an
anomaly, the value clears the success threshold, or the value has not
improved for `n_stag` ticks (which also sends both arms home). Triggers are
checked in that priority order.
"""

import logging
import math
from collections.abc import Iterator
from configparser import ConfigParser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import src.helpers.helpers as h
from src.model.agents import (
    ActionChunk,
    Agents,
    CriticVerdict,
    brain_plan,
    cerebellum_act,
    critic_eval,
)
from src.model.exceptions import (
    ConfigurationError,
    EvaluationError,
    FatalEpisodeError,
    TrainingError,
)
from src.model.goals import MemoryContext, SubtaskGoal
from src.model.sim_world import (
    ActionPair,
    Observation,
    ScenarioConfig,
    WorldState,
    cumulative_subtasks,
    global_success,
    inject_perturbations,
    observe,
    reset_robot_state,
    scenario_init,
    step,
    subtask_done,
)

logger = logging.getLogger(__name__)

Trigger = Literal['anomaly', 'completion', 'stagnation']
SchedulerName = Literal['single', 'dual', 'tri']

SCHEDULERS: tuple[str, ...] = ('single', 'dual', 'tri')
V_MAX_SENTINEL = -math.inf

# Failures that end one episode; anything else is a bug and propagates.
EPISODE_ERRORS = (FatalEpisodeError, EvaluationError, TrainingError, ValueError)


@dataclass(frozen=True, slots=True)
class SchedulerConfig:
    tau_succ: float = -0.041
    n_stag: int = 180
    horizon: int = 16
    critic_lag: int = 0
    max_episode_ticks: int = 900
    tau_overrides: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        for text, tau in ((None, self.tau_succ), *self.tau_overrides):
            if not -1.0 < tau <= 0.0:
                where = '' if text is None else f' for {text!r}'
                raise ConfigurationError(
                    f'Invalid tau_succ{where}: {tau}. Must be in (-1.0, 0.0].'
                )
        if self.n_stag < 1:
            raise ConfigurationError(f'Invalid n_stag: {self.n_stag}. Must be >= 1.')
        if self.horizon < 1:
            raise ConfigurationError(f'Invalid horizon: {self.horizon}. Must be >= 1.')
        if self.critic_lag < 0:
            raise ConfigurationError(
                f'Invalid critic_lag: {self.critic_lag}. Must be >= 0.'
            )
        if self.max_episode_ticks < 0:
            raise ConfigurationError(
                f'Invalid max_episode_ticks: {self.max_episode_ticks}. Must be >= 0.'
            )

    def threshold_for(self, goal: SubtaskGoal) -> float:
        """Success threshold of a goal: its override, else the global tau."""
        overrides = dict(self.tau_overrides)
        for key in (goal.text, goal.plain_text):
            if key in overrides:
                return overrides[key]
        return self.tau_succ

    @staticmethod
    def parse_overrides(raw: str) -> tuple[tuple[str, float], ...]:
        """Parses `goal text = value` pairs separated by `;`."""
        pairs = []
        for item in raw.split(';'):
            if not item.strip():
                continue
            text, sep, value = item.rpartition('=')
            if not sep or not text.strip():
                raise ConfigurationError(f'Malformed tau override: {item.strip()!r}')
            pairs.append((text.strip(), float(value)))
        return tuple(pairs)

    @classmethod
    def from_ini(cls, config_data: ConfigParser) -> 'SchedulerConfig':
        s = config_data['Scheduler']
        d = cls()
        return cls(
            tau_succ=s.getfloat('tau_succ', d.tau_succ),
            n_stag=s.getint('n_stag', d.n_stag),
            horizon=s.getint('horizon', d.horizon),
            critic_lag=s.getint('critic_lag', d.critic_lag),
            max_episode_ticks=s.getint('max_episode_ticks', d.max_episode_ticks),
            tau_overrides=cls.parse_overrides(s.get('tau_overrides', '')),
        )


@dataclass(frozen=True, slots=True)
class BufferedAction:
    pair: ActionPair
    issued_at_tick: int


@dataclass(frozen=True, slots=True)
class PreemptionEvent:
    kind: Trigger
    tick: int
    goal_before: SubtaskGoal | None
    goal_after: SubtaskGoal

    def to_dict(self) -> dict[str, Any]:
        return {
            'kind': self.kind,
            'tick': self.tick,
            'goal_before': None if self.goal_before is None else self.goal_before.text,
            'goal_after': self.goal_after.text,
        }


@dataclass(frozen=True, slots=True)
class SchedulerState:
    """
    Scheduler memory between ticks. `history` holds the newest
    `critic_lag + 1` observations; the oldest one is what the critic scores.
    """

    goal: SubtaskGoal | None
    memory: MemoryContext = field(default_factory=MemoryContext.none)
    buffer: tuple[BufferedAction, ...] = ()
    t_stag: int = 0
    v_max: float = V_MAX_SENTINEL
    tick: int = 0
    history: tuple[Observation, ...] = ()


@dataclass(frozen=True, slots=True)
class TickOutcome:
    """
    Result of one scheduler tick. `world` is the world the actions apply to,
    which differs from the input only after a stagnation reset.
    """

    actions: ActionPair
    issued_at_tick: int
    state: SchedulerState
    events: tuple[PreemptionEvent, ...]
    world: WorldState
    verdict: CriticVerdict | None = None
    brain_queries: int = 0


def classify_trigger(
    is_anomaly: bool,
    value: float | None,
    t_stag: int,
    threshold: float,
    n_stag: int,
) -> Trigger | None:
    """Preemption trigger of a tick, in the order anomaly, completion, stagnation."""
    if is_anomaly:
        return 'anomaly'
    if value is not None and value > threshold:
        return 'completion'
    if t_stag >= n_stag:
        return 'stagnation'
    return None


def _memory_for(kind: Trigger, goal: SubtaskGoal | None) -> MemoryContext:
    match kind:
        case 'anomaly':
            return MemoryContext.accident()
        case 'completion' if goal is not None:
            return MemoryContext.completed(goal)
        case 'stagnation':
            return MemoryContext.stagnation_timeout()
    return MemoryContext.none()


def _buffered(chunk: ActionChunk, horizon: int) -> tuple[BufferedAction, ...]:
    if chunk.error is not None:
        raise FatalEpisodeError(chunk.error)
    if len(chunk.actions) != horizon:
        raise FatalEpisodeError(
            f'Cerebellum returned {len(chunk.actions)} actions, expected {horizon}.'
        )
    return tuple(BufferedAction(pair, chunk.issued_at_tick) for pair in chunk.actions)


def init_state(world: WorldState, agents: Agents) -> SchedulerState:
    """Initial plan: one Brain query with empty memory."""
    memory = MemoryContext.none()
    goal = brain_plan(agents.brain, observe(world), agents.instruction, memory)
    return SchedulerState(goal=goal, memory=memory, tick=world.tick)


def tri_tick(
    state: SchedulerState, world: WorldState, agents: Agents, config: SchedulerConfig
) -> TickOutcome:
    """
    One scheduling iteration: observe, score, update the stagnation
    tracking, preempt on a trigger, refill an empty buffer and pop the
    front action pair.

    Anomaly verdicts carry no value and leave `v_max`/`t_stag` untouched.

    Raises:
        FatalEpisodeError: If the Cerebellum cannot produce a chunk.
    """
    if agents.critic is None:
        raise FatalEpisodeError('The tri-system scheduler needs a critic.')
    goal = state.goal
    assert goal is not None
    tick = world.tick
    obs = observe(world)
    history = (state.history + (obs,))[-(config.critic_lag + 1) :]
    verdict = critic_eval(agents.critic, history[0], goal)

    t_stag, v_max = state.t_stag, state.v_max
    if not verdict.is_anomaly:
        assert verdict.value is not None
        if verdict.value > v_max:
            t_stag, v_max = 0, verdict.value
        else:
            t_stag += 1
    kind = classify_trigger(
        verdict.is_anomaly,
        verdict.value,
        t_stag,
        config.threshold_for(goal),
        config.n_stag,
    )

    buffer = state.buffer
    memory = state.memory
    events: tuple[PreemptionEvent, ...] = ()
    queries = 0
    if kind is not None:
        buffer = ()
        t_stag, v_max = 0, V_MAX_SENTINEL
        memory = _memory_for(kind, goal)
        if kind == 'stagnation':
            world = reset_robot_state(world)
            obs = observe(world)
            history = (obs,)
        new_goal = brain_plan(agents.brain, obs, agents.instruction, memory)
        queries = 1
        events = (PreemptionEvent(kind, tick, goal, new_goal),)
        logger.debug('tick %d: %s, %r -> %r', tick, kind, goal.text, new_goal.text)
        goal = new_goal

    if not buffer:
        chunk = cerebellum_act(agents.cerebellum, obs, world.arms, goal)
        buffer = _buffered(chunk, config.horizon)
    front, buffer = buffer[0], buffer[1:]
    new_state = SchedulerState(goal, memory, buffer, t_stag, v_max, tick + 1, history)
    return TickOutcome(
        front.pair, front.issued_at_tick, new_state, events, world, verdict, queries
    )


def dual_tick(
    state: SchedulerState, world: WorldState, agents: Agents, config: SchedulerConfig
) -> TickOutcome:
    """Re-queries the Brain with empty memory at every buffer refill."""
    obs = observe(world)
    buffer, goal, queries = state.buffer, state.goal, 0
    if not buffer:
        goal = brain_plan(agents.brain, obs, agents.instruction, MemoryContext.none())
        queries = 1
        chunk = cerebellum_act(agents.cerebellum, obs, world.arms, goal)
        buffer = _buffered(chunk, config.horizon)
    front, buffer = buffer[0], buffer[1:]
    new_state = SchedulerState(goal, state.memory, buffer, tick=world.tick + 1)
    return TickOutcome(
        front.pair, front.issued_at_tick, new_state, (), world, None, queries
    )


def single_tick(
    state: SchedulerState, world: WorldState, agents: Agents, config: SchedulerConfig
) -> TickOutcome:
    """Conditions the Cerebellum on the goal planned once at tick 0."""
    assert state.goal is not None
    buffer = state.buffer
    if not buffer:
        obs = observe(world)
        chunk = cerebellum_act(agents.cerebellum, obs, world.arms, state.goal)
        buffer = _buffered(chunk, config.horizon)
    front, buffer = buffer[0], buffer[1:]
    new_state = SchedulerState(state.goal, state.memory, buffer, tick=world.tick + 1)
    return TickOutcome(front.pair, front.issued_at_tick, new_state, (), world)


@dataclass(frozen=True, slots=True)
class TickRecord:
    tick: int
    goal: str | None
    verdict: str | None
    value: float | None
    actions: ActionPair
    issued_at_tick: int
    events: tuple[str, ...]
    world_events: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            'tick': self.tick,
            'goal': self.goal,
            'verdict': self.verdict,
            'value': self.value,
            'actions': [a.to_dict() for a in self.actions],
            'issued_at_tick': self.issued_at_tick,
            'events': list(self.events),
            'world_events': list(self.world_events),
        }


@dataclass
class EpisodeTrace:
    scheduler: str
    scenario: str
    seed: int
    records: list[TickRecord]
    events: list[PreemptionEvent]
    brain_query_count: int
    success: bool
    final_world: WorldState
    subtask_progress: int
    oscillations: int
    stagnation_resets: int
    fatal_error: str | None = None

    @property
    def goal_sequence(self) -> list[str]:
        goals: list[str] = []
        for record in self.records:
            if record.goal is not None and (not goals or goals[-1] != record.goal):
                goals.append(record.goal)
        return goals

    def summary(self) -> dict[str, Any]:
        return {
            'summary': True,
            'scheduler': self.scheduler,
            'scenario': self.scenario,
            'seed': self.seed,
            'ticks': len(self.records),
            'success': self.success,
            'brain_query_count': self.brain_query_count,
            'subtask_progress': self.subtask_progress,
            'oscillations': self.oscillations,
            'stagnation_resets': self.stagnation_resets,
            'fatal_error': self.fatal_error,
            'events': [e.to_dict() for e in self.events],
            'final_world_events': list(self.final_world.events),
        }

    def to_records(self) -> Iterator[dict[str, Any]]:
        for record in self.records:
            yield record.to_dict()
        yield self.summary()

    def save(self, filepath: str | Path) -> Path:
        return h.write_jsonl(filepath, self.to_records())


def audit_stale_actions(trace: EpisodeTrace) -> list[int]:
    """Ticks that executed an action issued before the latest preemption."""
    stale = []
    last_preemption = -1
    for record in trace.records:
        if record.events:
            last_preemption = record.tick
        if record.issued_at_tick < last_preemption:
            stale.append(record.tick)
    return stale


def _goal_done(world: WorldState, goal: SubtaskGoal | None) -> bool:
    if goal is None:
        return True
    try:
        return subtask_done(world, goal)
    except EvaluationError:
        return False


def _run(
    name: SchedulerName,
    scenario: ScenarioConfig,
    agents: Agents,
    config: SchedulerConfig,
) -> EpisodeTrace:
    tick_fn = {'tri': tri_tick, 'dual': dual_tick, 'single': single_tick}[name]
    world = scenario_init(scenario)
    records: list[TickRecord] = []
    events: list[PreemptionEvent] = []
    queries = 0
    oscillations = 0
    fatal_error = None
    try:
        if name == 'dual':
            state = SchedulerState(goal=None, tick=world.tick)
        else:
            state = init_state(world, agents)
            queries = 1
        for _ in range(config.max_episode_ticks):
            if global_success(world):
                break
            world = inject_perturbations(world, scenario)
            outcome = tick_fn(state, world, agents, config)
            prev_goal, goal = state.goal, outcome.state.goal
            if prev_goal is not None and goal != prev_goal:
                if name == 'tri':
                    completed = any(e.kind == 'completion' for e in outcome.events)
                else:
                    completed = _goal_done(world, prev_goal)
                oscillations += not completed
            verdict = outcome.verdict
            records.append(
                TickRecord(
                    tick=world.tick,
                    goal=None if goal is None else goal.text,
                    verdict=None if verdict is None else verdict.token,
                    value=None if verdict is None else verdict.value,
                    actions=outcome.actions,
                    issued_at_tick=outcome.issued_at_tick,
                    events=tuple(e.kind for e in outcome.events),
                    world_events=world.events,
                )
            )
            events.extend(outcome.events)
            queries += outcome.brain_queries
            world = step(outcome.world, outcome.actions)
            state = outcome.state
    except EPISODE_ERRORS as e:
        fatal_error = f'{type(e).__name__}: {e}'
        logger.warning(
            '%s episode on %s (seed %d) aborted: %s',
            name,
            scenario.name,
            scenario.seed,
            fatal_error,
        )
    return EpisodeTrace(
        scheduler=name,
        scenario=scenario.name,
        seed=scenario.seed,
        records=records,
        events=events,
        brain_query_count=queries,
        success=global_success(world),
        final_world=world,
        subtask_progress=cumulative_subtasks(world),
        oscillations=oscillations,
        stagnation_resets=sum(e.kind == 'stagnation' for e in events),
        fatal_error=fatal_error,
    )


def run_episode(
    scenario: ScenarioConfig, agents: Agents, config: SchedulerConfig
) -> EpisodeTrace:
    """
    Runs the tri-system scheduler until global success or the tick limit.
    Each tick checks success, applies due perturbations, schedules, then
    steps the world.
    The last subtask ends the episode through global success, so it gets no
    completion event.
    """
    return _run('tri', scenario, agents, config)


def run_episode_dual(
    scenario: ScenarioConfig, agents: Agents, config: SchedulerConfig
) -> EpisodeTrace:
    return _run('dual', scenario, agents, config)


def run_episode_single(
    scenario: ScenarioConfig, agents: Agents, config: SchedulerConfig
) -> EpisodeTrace:
    return _run('single', scenario, agents, config)


def run_scheduler(
    name: str, scenario: ScenarioConfig, agents: Agents, config: SchedulerConfig
) -> EpisodeTrace:
    if name not in SCHEDULERS:
        allowed = ', '.join(SCHEDULERS)
        raise ConfigurationError(
            f'Invalid scheduler: {name}. Must be one of {allowed}.'
        )
    return _run(name, scenario, agents, config)  # type: ignore[arg-type]
