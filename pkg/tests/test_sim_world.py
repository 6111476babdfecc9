from dataclasses import replace

import numpy as np
import pytest
from conftest import drive, grip, with_object

import src.helpers.helpers as h
from src.model import scenarios
from src.model.exceptions import ConfigurationError, EvaluationError
from src.model.goals import SubtaskGoal
from src.model.sim_world import (
    ARM_HOMES,
    PerturbationEvent,
    PrimitiveAction,
    ScenarioConfig,
    WorldParams,
    cumulative_subtasks,
    decode_observation,
    export_trajectory,
    global_success,
    goal_targets,
    inject_perturbations,
    noop_pair,
    observe,
    observed_bag_open,
    reset_robot_state,
    scenario_init,
    step,
    subtask_done,
)


def test_scenario_init_is_seeded(ordered_world):
    again = scenario_init(ScenarioConfig.for_scenario('ordered', seed=3))
    other = scenario_init(ScenarioConfig.for_scenario('ordered', seed=4))
    assert again == ordered_world
    assert other != ordered_world


def test_scenario_init_jitters_at_most_one_centimeter(ordered_world):
    rows = scenarios.layout('ordered')
    for (obj_id, _, x, y), obj in zip(rows, ordered_world.objects):
        assert obj.id == obj_id
        assert abs(obj.pose[0] - x) <= 0.01
        assert abs(obj.pose[1] - y) <= 0.01
        assert obj.pose[2] == 0.0
        assert obj.upright
    for side in ('left', 'right'):
        assert ordered_world.arm(side).ee_position == ARM_HOMES[side]
        assert ordered_world.arm(side).gripper == 'open'


def test_unknown_scenario_is_rejected():
    with pytest.raises(ConfigurationError):
        ScenarioConfig.for_scenario('kitchen')


def test_noop_step_only_advances_the_clock(ordered_world):
    nxt = step(ordered_world, noop_pair())
    assert nxt.tick == ordered_world.tick + 1
    assert nxt.objects == ordered_world.objects
    assert nxt.arms == ordered_world.arms
    assert nxt.events == ()


def test_move_is_clamped_to_max_step(ordered_world):
    action = PrimitiveAction.move('left', (0.1, 0.0, 0.0))
    nxt = step(ordered_world, (action, PrimitiveAction.noop('right')))
    ee = nxt.arm('left').ee_position
    assert ee[0] == pytest.approx(-0.28)
    assert 'clamped:left' in nxt.events


def test_move_is_clamped_to_reach_envelope(ordered_world):
    right = replace(ordered_world.arm('right'), ee_position=(-0.29, 0.3, 0.2))
    world = replace(ordered_world, arms=(ordered_world.arm('left'), right))
    action = PrimitiveAction.move('right', (-0.02, 0.0, 0.0))
    nxt = step(world, (PrimitiveAction.noop('left'), action))
    assert nxt.arm('right').ee_position[0] == pytest.approx(-0.30)
    assert 'clamped:right' in nxt.events


def test_grasp_and_stack(ordered_world):
    cup = ordered_world.obj('cup')
    world = drive(ordered_world, 'left', cup.grasp_point)
    world = grip(world, 'left', 'closed')
    assert world.arm('left').held == 'cup'
    assert 'grasped:cup:left' in world.events

    goal = SubtaskGoal('pick_and_place', 'cup', destination='bowl_small')
    _, place = goal_targets(world, goal)
    world = drive(world, 'left', place)
    assert not subtask_done(world, goal)
    world = grip(world, 'left', 'open')
    cup = world.obj('cup')
    assert cup.stacked_on == 'bowl_small'
    assert cup.upright
    assert cup.pose[2] == pytest.approx(world.obj('bowl_small').top)
    assert subtask_done(world, goal)


def test_release_from_height_knocks_the_object_over(ordered_world):
    cup = ordered_world.obj('cup')
    world = drive(ordered_world, 'left', cup.grasp_point)
    world = grip(world, 'left', 'closed')
    world = drive(world, 'left', (cup.pose[0], cup.pose[1], 0.30))
    world = grip(world, 'left', 'open')
    assert 'dropped:cup' in world.events
    assert world.fallen() == ('cup',)
    assert not global_success(world)


def test_knock_over_fires_on_its_tick():
    config = ScenarioConfig.for_scenario('fallen', seed=1)
    world = scenario_init(config)
    early = replace(world, tick=39)
    assert inject_perturbations(early, config) is early
    hit = inject_perturbations(replace(world, tick=40), config)
    assert hit.fallen() == ('cup',)
    assert 'perturbation:knock_over:cup' in hit.events
    assert hit.tick == 40


def test_perturbation_on_missing_object_is_rejected(ordered_world):
    config = ScenarioConfig(
        'ordered', perturbations=(PerturbationEvent(0, 'knock_over', 'spoon'),)
    )
    with pytest.raises(ConfigurationError):
        inject_perturbations(ordered_world, config)


def test_displace_moves_the_object(ordered_world):
    config = ScenarioConfig(
        'ordered',
        perturbations=(PerturbationEvent(0, 'displace', 'plate', (0.05, 0.0, 0.0)),),
    )
    moved = inject_perturbations(ordered_world, config)
    before = ordered_world.obj('plate').pose
    assert moved.obj('plate').pose[0] == pytest.approx(before[0] + 0.05)
    assert moved.obj('plate').pose[1] == before[1]


def test_reset_robot_state_sends_arms_home(ordered_world):
    cup = ordered_world.obj('cup')
    world = drive(ordered_world, 'left', cup.grasp_point)
    world = grip(world, 'left', 'closed')
    world = drive(world, 'left', (0.2, 0.3, 0.25))
    reset = reset_robot_state(world)
    for side in ('left', 'right'):
        arm = reset.arm(side)
        assert arm.ee_position == ARM_HOMES[side]
        assert arm.gripper == 'open'
        assert arm.held is None
    assert reset.obj('cup').pose[2] == 0.0
    assert reset.obj('cup').upright
    assert reset.tick == world.tick


def test_observation_decodes_back_to_the_world(ordered_world):
    decoded = decode_observation(observe(ordered_world))
    assert decoded.objects == ordered_world.objects
    assert decoded.tick == ordered_world.tick
    assert decoded.scenario == 'ordered'


def test_observation_noise_is_seeded(ordered_world):
    noisy = replace(ordered_world, noise_level=0.01)
    a, b = observe(noisy), observe(noisy)
    assert a.same_as(b)
    assert not np.array_equal(a.features, observe(ordered_world).features)


def test_thin_bag_flickers_closed():
    world = scenario_init(ScenarioConfig.for_scenario('tidy_desk'))
    assert world.soft_body_flicker
    opened = replace(world, bag_open=True)
    assert observed_bag_open(replace(opened, tick=0))
    assert not observed_bag_open(replace(opened, tick=16))
    assert observed_bag_open(replace(opened, tick=32))
    steady = replace(opened, soft_body_flicker=False, tick=16)
    assert observed_bag_open(steady)


def test_global_success_needs_every_subtask(ordered_world):
    assert not global_success(ordered_world)
    assert cumulative_subtasks(ordered_world) == 0
    world = with_object(ordered_world, 'bowl_large', stacked_on='plate')
    assert cumulative_subtasks(world) == 1
    world = with_object(world, 'bowl_small', stacked_on='bowl_large')
    world = with_object(world, 'cup', stacked_on='bowl_small')
    assert cumulative_subtasks(world) == 3
    assert global_success(world)
    assert not global_success(with_object(world, 'cup', upright=False))


def test_cumulative_subtasks_counts_only_a_prefix(ordered_world):
    world = with_object(ordered_world, 'cup', stacked_on='bowl_small')
    assert cumulative_subtasks(world) == 0


def test_goal_on_unknown_object_raises(ordered_world):
    with pytest.raises(EvaluationError):
        goal_targets(ordered_world, SubtaskGoal('pick_and_place', 'spoon'))


def test_world_params_are_validated():
    with pytest.raises(ConfigurationError):
        WorldParams(max_step=0.0)
    with pytest.raises(ConfigurationError):
        WorldParams(workspace_min=(0.5, 0.0, 0.0), workspace_max=(0.5, 0.6, 0.4))


def test_scenario_config_reads_perturbation_sections():
    config_data = h.load_ini()
    config_data.read_string(
        '[Perturbation.1]\nat_tick = 12\nkind = displace\ntarget = cup\n'
        'displacement = 0.02, 0.0, 0.0\n'
    )
    config = ScenarioConfig.from_ini(config_data)
    assert config.name == 'ordered'
    assert config.perturbations == (
        PerturbationEvent(12, 'displace', 'cup', (0.02, 0.0, 0.0)),
    )


def test_export_trajectory(tmp_path, ordered_world):
    worlds = [ordered_world, step(ordered_world, noop_pair())]
    path = export_trajectory(worlds, tmp_path / 'traj.jsonl')
    records = list(h.read_jsonl(path))
    assert [r['tick'] for r in records] == [0, 1]
    assert records[0]['objects'][0]['id'] == 'plate'
