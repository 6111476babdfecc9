from dataclasses import replace

import numpy as np
import pytest

from src.model import scenarios
from src.model.agents import ActionChunk
from src.model.goals import SubtaskGoal
from src.model.sim_world import (
    PrimitiveAction,
    ScenarioConfig,
    WorldState,
    noop_pair,
    scenario_init,
    step,
)

STACK_BOWL = SubtaskGoal('stack', 'bowl_large', destination='plate')


class CountingBrain:
    """Always names the same goal and counts how often it was asked."""

    def __init__(self, goal: SubtaskGoal = STACK_BOWL) -> None:
        self.goal = goal
        self.calls = 0
        self.memories: list = []

    def plan(self, obs, instruction, memory) -> SubtaskGoal:
        self.calls += 1
        self.memories.append(memory)
        return self.goal


class NoopCerebellum:
    def __init__(self, horizon: int = 16) -> None:
        self.horizon = horizon

    def act(self, obs, proprio, goal) -> ActionChunk:
        actions = tuple(noop_pair() for _ in range(self.horizon))
        return ActionChunk(actions, self.horizon, obs.tick)


def drive(world: WorldState, side: str, target, max_step: float = 0.02) -> WorldState:
    """Steps one arm in a straight line onto `target`."""
    target = np.asarray(target, dtype=np.float64)
    for _ in range(1000):
        ee = np.asarray(world.arm(side).ee_position)
        delta = target - ee
        dist = float(np.linalg.norm(delta))
        if dist <= 1e-12:
            return world
        if dist > max_step:
            delta = delta * (max_step / dist)
        move = PrimitiveAction.move(side, delta)
        other = PrimitiveAction.noop('right' if side == 'left' else 'left')
        pair = (move, other) if side == 'left' else (other, move)
        world = step(world, pair)
    raise AssertionError('drive did not reach its target')


def grip(world: WorldState, side: str, target: str) -> WorldState:
    action = PrimitiveAction.grip(side, target)
    other = PrimitiveAction.noop('right' if side == 'left' else 'left')
    return step(world, (action, other) if side == 'left' else (other, action))


def with_object(world: WorldState, object_id: str, **changes) -> WorldState:
    objects = tuple(
        replace(o, **changes) if o.id == object_id else o for o in world.objects
    )
    return replace(world, objects=objects)


@pytest.fixture
def ordered_world() -> WorldState:
    return scenario_init(ScenarioConfig.for_scenario('ordered', seed=3))


@pytest.fixture
def left_cup_world() -> WorldState:
    return scenario_init(ScenarioConfig.for_scenario('left_cup', seed=0))


@pytest.fixture
def tableware_instruction():
    return scenarios.instruction('ordered')
