import math

import numpy as np
import pytest
from conftest import STACK_BOWL, CountingBrain, NoopCerebellum

import src.helpers.helpers as h
from src.controller.scheduler import (
    SchedulerConfig,
    SchedulerState,
    audit_stale_actions,
    classify_trigger,
    init_state,
    run_episode,
    run_episode_dual,
    run_episode_single,
    run_scheduler,
    tri_tick,
)
from src.model import scenarios
from src.model.agents import (
    AgentConfig,
    Agents,
    OracleCritic,
    ScriptedCerebellum,
    ScriptedCritic,
    build_agents,
)
from src.model.critic_train import dequantize
from src.model.exceptions import ConfigurationError
from src.model.goals import SubtaskGoal
from src.model.sim_world import ScenarioConfig, scenario_init, step


def scripted_agents(stream, horizon: int = 16) -> Agents:
    return Agents(
        CountingBrain(),
        NoopCerebellum(horizon),
        ScriptedCritic(stream),
        scenarios.instruction('ordered'),
    )


def run_stream(stream, config: SchedulerConfig) -> tuple[list, Agents]:
    """Drives tri_tick over a scripted verdict stream; returns trigger per tick."""
    agents = scripted_agents(stream, config.horizon)
    world = scenario_init(ScenarioConfig('ordered'))
    state = SchedulerState(goal=STACK_BOWL)
    kinds = []
    for _ in stream:
        outcome = tri_tick(state, world, agents, config)
        kinds.append(outcome.events[0].kind if outcome.events else None)
        world = step(outcome.world, outcome.actions)
        state = outcome.state
    return kinds, agents


def reference_triggers(stream, threshold: float, n_stag: int) -> list:
    t_stag, v_max = 0, -math.inf
    kinds = []
    for entry in stream:
        if entry is None:
            kinds.append('anomaly')
            t_stag, v_max = 0, -math.inf
            continue
        value = dequantize(entry)
        if value > v_max:
            t_stag, v_max = 0, value
        else:
            t_stag += 1
        kind = None
        if value > threshold:
            kind = 'completion'
        elif t_stag >= n_stag:
            kind = 'stagnation'
        if kind is not None:
            t_stag, v_max = 0, -math.inf
        kinds.append(kind)
    return kinds


def test_trigger_priority():
    assert classify_trigger(True, None, 500, -0.041, 180) == 'anomaly'
    assert classify_trigger(False, 0.0, 500, -0.041, 180) == 'completion'
    assert classify_trigger(False, -0.5, 180, -0.041, 180) == 'stagnation'
    assert classify_trigger(False, -0.5, 179, -0.041, 180) is None
    assert classify_trigger(False, -0.040, 0, -0.041, 180) == 'completion'
    assert classify_trigger(False, -0.042, 0, -0.041, 180) is None


def random_stream(rng: np.random.Generator, i: int) -> list:
    """Short near-threshold streams, long low streams and plateau streams."""
    match i % 4:
        case 0 | 1:
            length, p_anomaly = int(rng.integers(1, 40)), 0.05
            values = rng.integers(80, 101, size=length)
        case 2:
            length, p_anomaly = int(rng.integers(150, 300)), 0.01
            values = rng.integers(0, 96, size=length)
        case _:
            runs = []
            while sum(len(r) for r in runs) < 250:
                value = int(rng.integers(0, 101))
                runs.append([value] * int(rng.integers(1, 200)))
            values = [v for run in runs for v in run]
            length, p_anomaly = len(values), 0.02
    anomalies = rng.random(length) < p_anomaly
    return [None if a else int(v) for a, v in zip(anomalies, values)]


def test_scheduler_matches_reference_on_random_streams():
    rng = np.random.default_rng(h.seed_words(2024))
    for i in range(1000):
        n_stag = (1, 2, 180)[i % 3]
        stream = random_stream(rng, i)
        config = SchedulerConfig(n_stag=n_stag)
        kinds, agents = run_stream(stream, config)
        expected = reference_triggers(stream, config.tau_succ, n_stag)
        assert kinds == expected, f'stream {i}: {stream}'
        assert agents.brain.calls == sum(k is not None for k in expected)


@pytest.mark.parametrize('n_stag', [1, 2, 180])
def test_stagnation_fires_n_ticks_after_the_last_improvement(n_stag):
    rising = [10, 20, 30, 40]
    stream = rising + [40] * (n_stag + 5)
    kinds, _ = run_stream(stream, SchedulerConfig(n_stag=n_stag))
    t0 = len(rising) - 1
    assert kinds.index('stagnation') == t0 + n_stag
    assert kinds[: t0 + n_stag] == [None] * (t0 + n_stag)


def test_flat_stream_stagnates_after_exactly_n_ticks():
    kinds, agents = run_stream([50] * 200, SchedulerConfig())
    assert kinds.index('stagnation') == 180
    assert kinds.count('stagnation') == 1
    assert agents.brain.memories[0].kind == 'stagnation_timeout'


@pytest.mark.parametrize(
    ('tau', 'fires'), [(-0.040, False), (-0.041, True), (-0.042, True)]
)
def test_completion_threshold_is_strict(tau, fires):
    kinds, _ = run_stream([96], SchedulerConfig(tau_succ=tau))
    assert (kinds[0] == 'completion') is fires


def test_anomaly_freezes_stagnation_tracking():
    stream = [60, 50, None, 50, 50]
    kinds, agents = run_stream(stream, SchedulerConfig(n_stag=2))
    # the anomaly preempts and restarts tracking, so no stagnation follows
    assert kinds == [None, None, 'anomaly', None, None]
    assert agents.brain.memories[0].kind == 'accident'


def test_critic_lag_scores_an_older_observation():
    config = SchedulerConfig(critic_lag=2)
    agents = scripted_agents([10])
    world = scenario_init(ScenarioConfig('ordered'))
    state = SchedulerState(goal=STACK_BOWL)
    for tick in range(6):
        outcome = tri_tick(state, world, agents, config)
        assert outcome.verdict.evaluated_at_tick == max(0, tick - 2)
        world = step(outcome.world, outcome.actions)
        state = outcome.state


def test_preemption_flushes_the_buffer():
    kinds, _ = run_stream([10, 100, 10], SchedulerConfig())
    assert kinds == [None, 'completion', None]
    agents = scripted_agents([10, 100, 10])
    world = scenario_init(ScenarioConfig('ordered'))
    state = SchedulerState(goal=STACK_BOWL)
    issued = []
    for _ in range(3):
        outcome = tri_tick(state, world, agents, SchedulerConfig())
        issued.append(outcome.issued_at_tick)
        world = step(outcome.world, outcome.actions)
        state = outcome.state
    assert issued == [0, 1, 1]


def test_config_validation_and_overrides():
    with pytest.raises(ConfigurationError):
        SchedulerConfig(tau_succ=0.1)
    with pytest.raises(ConfigurationError):
        SchedulerConfig(n_stag=0)
    with pytest.raises(ConfigurationError):
        SchedulerConfig(critic_lag=-1)
    pairs = SchedulerConfig.parse_overrides(
        'stack the large bowl on the plate = -0.02; right the cup=-0.1;'
    )
    assert pairs == (
        ('stack the large bowl on the plate', -0.02),
        ('right the cup', -0.1),
    )
    config = SchedulerConfig(tau_overrides=pairs)
    structured = SubtaskGoal(
        'stack', 'bowl_large', destination='plate', side='left', arm='left'
    )
    assert config.threshold_for(structured) == -0.02
    assert config.threshold_for(SubtaskGoal('right_object', 'plate')) == -0.041
    with pytest.raises(ConfigurationError):
        SchedulerConfig.parse_overrides('no equals sign')


def test_config_reads_ini():
    config = SchedulerConfig.from_ini(h.load_ini())
    assert config == SchedulerConfig()


def test_init_state_queries_the_brain_once(ordered_world):
    agents = scripted_agents([0])
    state = init_state(ordered_world, agents)
    assert state.goal == STACK_BOWL
    assert state.memory.kind == 'none'
    assert agents.brain.calls == 1


def test_tri_episode_on_ordered_succeeds():
    agents = build_agents(AgentConfig(), 'ordered', seed=7)
    trace = run_episode(
        ScenarioConfig.for_scenario('ordered', 7), agents, SchedulerConfig()
    )
    assert trace.success
    assert trace.fatal_error is None
    assert trace.subtask_progress == 3
    assert trace.brain_query_count == len(trace.events) + 1
    # the last subtask ends the episode through global success
    completions = [e.kind for e in trace.events].count('completion')
    assert completions == trace.subtask_progress - 1
    assert audit_stale_actions(trace) == []
    assert trace.goal_sequence[0] == STACK_BOWL.text


def test_agent_failure_ends_the_episode_with_an_error():
    agents = Agents(
        CountingBrain(SubtaskGoal('pick_and_place', 'spoon', destination='plate')),
        ScriptedCerebellum(),
        OracleCritic(),
        scenarios.instruction('ordered'),
    )
    trace = run_episode(ScenarioConfig('ordered'), agents, SchedulerConfig())
    assert not trace.success
    assert trace.fatal_error.startswith('FatalEpisodeError')
    assert trace.records == []


def test_programming_errors_are_not_swallowed():
    class BrokenCerebellum:
        def act(self, obs, proprio, goal):
            raise TypeError('bad chunk')

    agents = Agents(
        CountingBrain(),
        BrokenCerebellum(),
        OracleCritic(),
        scenarios.instruction('ordered'),
    )
    with pytest.raises(TypeError):
        run_episode(ScenarioConfig('ordered'), agents, SchedulerConfig())


def test_fallen_episode_replans_to_right_the_cup():
    agents = build_agents(AgentConfig(), 'fallen', seed=0)
    trace = run_episode(
        ScenarioConfig.for_scenario('fallen', 0), agents, SchedulerConfig()
    )
    assert trace.fatal_error is None
    assert trace.success
    anomaly = next(e for e in trace.events if e.kind == 'anomaly')
    assert anomaly.tick >= 40
    assert (anomaly.goal_after.verb, anomaly.goal_after.object) == (
        'right_object',
        'cup',
    )
    knocked = next(
        r.tick for r in trace.records if 'perturbation:knock_over:cup' in r.world_events
    )
    assert knocked == 40
    record = next(r for r in trace.records if r.tick == anomaly.tick)
    assert 'anomaly' in record.events
    assert record.goal == anomaly.goal_after.text
    assert trace.goal_sequence.index(record.goal) > 0


def test_baselines_run_and_count_brain_queries():
    config = SchedulerConfig(max_episode_ticks=64)
    scenario = ScenarioConfig.for_scenario('ordered', 1)
    dual = run_episode_dual(scenario, build_agents(AgentConfig(), 'ordered'), config)
    assert len(dual.records) == 64
    assert dual.brain_query_count == 4
    single_agents = build_agents(AgentConfig(), 'ordered', scheduler='single')
    single = run_episode_single(scenario, single_agents, config)
    assert single.brain_query_count == 1
    assert single.events == []
    with pytest.raises(ConfigurationError):
        run_scheduler('quad', scenario, single_agents, config)


def test_trace_is_saved_as_json_lines(tmp_path):
    config = SchedulerConfig(max_episode_ticks=20)
    agents = build_agents(AgentConfig(), 'ordered')
    trace = run_episode(ScenarioConfig('ordered'), agents, config)
    records = list(h.read_jsonl(trace.save(tmp_path / 'trace.jsonl')))
    assert len(records) == 21
    assert records[-1]['summary'] is True
    assert records[-1]['brain_query_count'] == trace.brain_query_count
    assert records[0]['tick'] == 0
    assert records[0]['goal'] == STACK_BOWL.text
