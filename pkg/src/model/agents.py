"""
The three systems an episode runs with.

Brain (System Two) turns an observation, the global instruction and the
short-term memory into the next subtask goal. Cerebellum (System One) turns
an observation and a goal into a fixed-length chunk of primitive actions.
Critic (System Three) judges progress on the active goal or flags an
anomaly. Only scripted, oracle, deliberately biased and learned-critic
variants are provided.
"""

import logging
import math
from collections.abc import Sequence
from configparser import ConfigParser
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Literal, Protocol

import numpy as np

import src.helpers.helpers as h
from src.model import scenarios
from src.model.critic_train import (
    ANOMALY_CLASS,
    ANOMALY_TOKEN,
    LearnedCritic,
    dequantize,
    quantize,
)
from src.model.exceptions import ConfigurationError, EvaluationError
from src.model.goals import (
    Instruction,
    MemoryContext,
    Side,
    SubtaskGoal,
    render_prompt,
)
from src.model.sim_world import (
    ARM_HOMES,
    PLACE_CLEARANCE,
    SIDES,
    ActionPair,
    ArmState,
    Observation,
    PrimitiveAction,
    WorldParams,
    WorldState,
    decode_observation,
    global_success,
    goal_targets,
    other_side,
    subtask_done,
)

logger = logging.getLogger(__name__)

VerdictKind = Literal['progress', 'anomaly']
PromptStyle = Literal['plain', 'structured']

DEFAULT_HORIZON = 16
PROGRESS_CAP = 0.95
RETREAT_STEPS = 3
HANDOVER_POINT = (0.0, 0.25, 0.20)


@dataclass(frozen=True, slots=True)
class CriticVerdict:
    """
    Output of one critic call: a progress bin or the anomaly token, never
    both. `value` is the dequantized bin.
    """

    kind: VerdictKind
    evaluated_at_tick: int
    bin: int | None = None
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind == 'progress':
            if self.bin is None or self.value != dequantize(self.bin):
                raise EvaluationError('A progress verdict needs a bin and its value.')
        elif self.bin is not None or self.value is not None:
            raise EvaluationError('An anomaly verdict carries no bin or value.')

    @property
    def is_anomaly(self) -> bool:
        return self.kind == 'anomaly'

    @property
    def token(self) -> str:
        return ANOMALY_TOKEN if self.bin is None else str(self.bin)

    @classmethod
    def progress(cls, bin_index: int, tick: int) -> 'CriticVerdict':
        return cls('progress', tick, int(bin_index), dequantize(int(bin_index)))

    @classmethod
    def anomaly(cls, tick: int) -> 'CriticVerdict':
        return cls('anomaly', tick)


@dataclass(frozen=True, slots=True)
class ActionChunk:
    actions: tuple[ActionPair, ...]
    horizon: int
    issued_at_tick: int
    error: str | None = None


class Brain(Protocol):
    def plan(
        self, obs: Observation, instruction: Instruction, memory: MemoryContext
    ) -> SubtaskGoal: ...


class Cerebellum(Protocol):
    horizon: int

    def act(
        self, obs: Observation, proprio: tuple[ArmState, ArmState], goal: SubtaskGoal
    ) -> ActionChunk: ...


class Critic(Protocol):
    def evaluate(self, obs: Observation, goal: SubtaskGoal) -> CriticVerdict: ...


def brain_plan(
    brain: Brain, obs: Observation, instruction: Instruction, memory: MemoryContext
) -> SubtaskGoal:
    logger.debug('tick %d prompt: %s', obs.tick, render_prompt(instruction, memory))
    return brain.plan(obs, instruction, memory)


def cerebellum_act(
    cerebellum: Cerebellum,
    obs: Observation,
    proprio: tuple[ArmState, ArmState],
    goal: SubtaskGoal,
) -> ActionChunk:
    return cerebellum.act(obs, proprio, goal)


def critic_eval(critic: Critic, obs: Observation, goal: SubtaskGoal) -> CriticVerdict:
    return critic.evaluate(obs, goal)


def _dist(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b)))


class OracleBrain:
    """
    Reads the world from the observation and names the next goal: righting
    the first fallen object, else the first unsatisfied script goal, else
    the last script goal.

    In the structured prompt style the goal also carries the object's side
    of the midline and the nearest arm from home that can reach every point
    of the goal.
    """

    def __init__(
        self,
        prompt: PromptStyle = 'plain',
        params: WorldParams | None = None,
        vocabulary: Sequence[SubtaskGoal] | None = None,
    ) -> None:
        if prompt not in ('plain', 'structured'):
            raise ConfigurationError(
                f'Invalid prompt style: {prompt}. Must be plain or structured.'
            )
        self.prompt = prompt
        self.params = params or WorldParams()
        self.vocabulary = None if vocabulary is None else tuple(vocabulary)

    def plan(
        self, obs: Observation, instruction: Instruction, memory: MemoryContext
    ) -> SubtaskGoal:
        world = decode_observation(obs, self.params)
        vocab = self.vocabulary
        if vocab is None:
            vocab = scenarios.vocabulary(world.scenario)
        if not vocab:
            raise ConfigurationError(
                f'Subtask vocabulary of scenario {world.scenario} is empty.'
            )
        goal = self._next_goal(world, vocab)
        if self.prompt == 'structured':
            side, arm = self._tokens(world, goal)
            goal = replace(goal, side=side, arm=arm)
        return goal

    def _next_goal(
        self, world: WorldState, vocab: Sequence[SubtaskGoal]
    ) -> SubtaskGoal:
        for obj_id in world.fallen():
            for goal in vocab:
                if goal.verb == 'right_object' and goal.object == obj_id:
                    return goal
        script = [g for g in vocab if g.verb != 'right_object'] or list(vocab)
        for goal in script:
            if goal.object in world and not subtask_done(world, goal):
                return goal
        return script[-1]

    def _tokens(self, world: WorldState, goal: SubtaskGoal) -> tuple[Side, Side]:
        obj = world.obj(goal.object)
        side: Side = 'left' if obj.pose[0] < 0 else 'right'
        grasp, place = goal_targets(world, goal)
        points = [grasp] if place is None else [grasp, place]
        feasible = [
            s for s in SIDES if all(self.params.reachable(s, p) for p in points)
        ] or list(SIDES)
        arm = min(feasible, key=lambda s: _dist(ARM_HOMES[s], grasp))
        return side, arm


class BiasedBrain(OracleBrain):
    """
    Same goal choice as the oracle, but the side/arm tokens for cups come
    from a training prior that only ever saw the right arm.
    """

    def _tokens(self, world: WorldState, goal: SubtaskGoal) -> tuple[Side, Side]:
        if world.obj(goal.object).category == 'cup':
            return 'right', 'right'
        return super()._tokens(world, goal)


class SingleSystemBrain:
    """Hands the raw instruction straight to the Cerebellum."""

    def plan(
        self, obs: Observation, instruction: Instruction, memory: MemoryContext
    ) -> SubtaskGoal:
        return SubtaskGoal('follow_instruction', '', instruction=instruction.text)


class ScriptedCerebellum:
    """
    Straight-line motion primitives toward the goal's grasp and place
    points.

    Args:
        horizon: Chunk length H.
        p_drop: Chance per chunk that a carry opens the gripper midway.
        ood_trap: When the chosen arm cannot reach a goal point, keep
            re-issuing zero-length reaches instead of clamping.
        left_arm_transfer: Without it, cups always go to the right arm.
        seed: Seed of the drop draws.
        params: World constants used for planning.
    """

    def __init__(
        self,
        horizon: int = DEFAULT_HORIZON,
        p_drop: float = 0.0,
        ood_trap: bool = True,
        left_arm_transfer: bool = True,
        seed: int = 0,
        params: WorldParams | None = None,
    ) -> None:
        if horizon < 1:
            raise ConfigurationError(f'Invalid horizon: {horizon}. Must be >= 1.')
        if not 0.0 <= p_drop <= 1.0:
            raise ConfigurationError(
                f'Invalid p_drop: {p_drop}. Must be between 0.0 and 1.0.'
            )
        self.horizon = horizon
        self.p_drop = p_drop
        self.ood_trap = ood_trap
        self.left_arm_transfer = left_arm_transfer
        self.seed = seed
        self.params = params or WorldParams()

    def act(
        self, obs: Observation, proprio: tuple[ArmState, ArmState], goal: SubtaskGoal
    ) -> ActionChunk:
        world = replace(decode_observation(obs, self.params), arms=tuple(proprio))
        if goal.verb == 'follow_instruction':
            concrete = self.instruction_goal(world)
            if concrete is None:
                return self._chunk({}, obs.tick)
            goal = concrete
        if goal.object not in world:
            return ActionChunk(
                (), self.horizon, obs.tick, error=f'Unknown goal object: {goal.object}'
            )
        side = self.choose_arm(world, goal)
        if self._trapped(world, goal, side):
            trap = [PrimitiveAction.move(side, (0.0, 0.0, 0.0))] * self.horizon
            return self._chunk({side: trap}, obs.tick)
        plans, carry_side, carry = self._plan(world, goal, side)
        rng = np.random.default_rng(h.seed_words(self.seed, obs.tick))
        in_chunk = [i for i in carry if i < self.horizon]
        if rng.random() < self.p_drop and in_chunk:
            mid = in_chunk[len(in_chunk) // 2]
            plan = plans[carry_side][:mid]
            plans[carry_side] = plan + [PrimitiveAction.grip(carry_side, 'open')]
        return self._chunk(plans, obs.tick)

    def choose_arm(self, world: WorldState, goal: SubtaskGoal) -> Side:
        if goal.arm is not None:
            return goal.arm
        holder = world.holder(goal.object)
        if holder is not None:
            return holder
        obj = world.obj(goal.object)
        if obj.category == 'cup' and not self.left_arm_transfer:
            return 'right'
        free = [s for s in SIDES if world.arm(s).held is None] or list(SIDES)
        return min(free, key=lambda s: _dist(world.arm(s).ee_position, obj.grasp_point))

    def instruction_goal(self, world: WorldState) -> SubtaskGoal | None:
        """
        Greedy reading of the global instruction: fill the bag with the
        object nearest to it, or grow the stack with the object nearest to
        its top. Cups are always taken with the right arm.
        """
        bag = world.bag()
        if bag is not None:
            if not world.bag_open:
                return SubtaskGoal('open_bag', bag.id)
            loose = [o for o in world.objects if o.category != 'bag' and not o.in_bag]
            if not loose:
                return None
            nearest = min(loose, key=lambda o: _dist(o.pose[:2], bag.pose[:2]))
            return self._with_cup_arm(
                world, SubtaskGoal('pick_and_place', nearest.id, destination=bag.id)
            )
        if 'plate' not in world:
            return None
        chain = ['plate']
        while True:
            child = next(
                (o.id for o in world.objects if o.stacked_on == chain[-1]), None
            )
            if child is None:
                break
            chain.append(child)
        top = world.obj(chain[-1])
        rest = [o for o in world.objects if o.id not in chain]
        if not rest:
            return None
        nearest = min(rest, key=lambda o: _dist(o.pose[:2], top.pose[:2]))
        verb = 'pick_and_place' if nearest.category == 'cup' else 'stack'
        return self._with_cup_arm(
            world, SubtaskGoal(verb, nearest.id, destination=top.id)
        )

    @staticmethod
    def _with_cup_arm(world: WorldState, goal: SubtaskGoal) -> SubtaskGoal:
        if world.obj(goal.object).category == 'cup':
            return replace(goal, arm='right')
        return goal

    def _trapped(self, world: WorldState, goal: SubtaskGoal, side: Side) -> bool:
        if not self.ood_trap or goal.verb == 'handover':
            return False
        grasp, place = goal_targets(world, goal)
        points = [grasp] if place is None else [grasp, place]
        if world.holder(goal.object) == side:
            points = [] if place is None else [place]
        return not all(self.params.reachable(side, p) for p in points)

    def _travel(
        self, side: Side, start: np.ndarray, target: np.ndarray
    ) -> list[PrimitiveAction]:
        target = self.params.clamp(side, target)
        delta = target - start
        dist = float(np.linalg.norm(delta))
        if dist <= 1e-12:
            return []
        n = math.ceil(dist / self.params.max_step)
        return [PrimitiveAction.move(side, delta / n)] * n

    def _plan(
        self, world: WorldState, goal: SubtaskGoal, side: Side
    ) -> tuple[dict[str, list[PrimitiveAction]], Side, list[int]]:
        """Per-arm action lists, plus the carrying arm and its carry steps."""
        if goal.verb == 'handover':
            return self._plan_handover(world, goal, side)
        arm = world.arm(side)
        ee = np.asarray(arm.ee_position, dtype=np.float64)
        plan: list[PrimitiveAction] = []
        carry: list[int] = []

        def go(target, carrying: bool = False) -> None:
            nonlocal ee
            moves = self._travel(side, ee, np.asarray(target, dtype=np.float64))
            if carrying:
                carry.extend(range(len(plan), len(plan) + len(moves)))
            plan.extend(moves)
            ee = self.params.clamp(side, target)

        grasp, place = goal_targets(world, goal)
        holding_goal = world.holder(goal.object) == side
        if arm.held is not None and not holding_goal:
            # set the other object down straight below first
            held = world.obj(arm.held)
            go((ee[0], ee[1], held.height + PLACE_CLEARANCE))
            plan.append(PrimitiveAction.grip(side, 'open'))
        elif arm.gripper == 'closed' and not holding_goal:
            plan.append(PrimitiveAction.grip(side, 'open'))

        if goal.verb == 'open_bag':
            go(grasp)
            plan.append(PrimitiveAction.grip(side, 'closed'))
            plan.append(PrimitiveAction.grip(side, 'open'))
            return {side: plan}, side, carry

        if not holding_goal:
            go(grasp)
            plan.append(PrimitiveAction.grip(side, 'closed'))
        if place is not None:
            go(place, carrying=True)
        plan.append(PrimitiveAction.grip(side, 'open'))
        for _ in range(RETREAT_STEPS):
            go(ee + (0.0, 0.0, self.params.max_step))
        return {side: plan}, side, carry

    def _plan_handover(
        self, world: WorldState, goal: SubtaskGoal, receiver: Side
    ) -> tuple[dict[str, list[PrimitiveAction]], Side, list[int]]:
        giver = world.holder(goal.object)
        if giver is None or giver == receiver:
            giver = other_side(receiver)
        point = np.asarray(HANDOVER_POINT, dtype=np.float64)
        giver_arm = world.arm(giver)
        giver_plan: list[PrimitiveAction] = []
        if giver_arm.held != goal.object:
            obj = world.obj(goal.object)
            start = np.asarray(giver_arm.ee_position, dtype=np.float64)
            grasp = np.asarray(obj.grasp_point, dtype=np.float64)
            giver_plan += self._travel(giver, start, grasp)
            giver_plan.append(PrimitiveAction.grip(giver, 'closed'))
            giver_plan += self._travel(giver, grasp, point)
        else:
            start = np.asarray(giver_arm.ee_position, dtype=np.float64)
            giver_plan += self._travel(giver, start, point)
        recv_start = np.asarray(world.arm(receiver).ee_position, dtype=np.float64)
        recv_plan = [PrimitiveAction.noop(receiver)] * len(giver_plan)
        recv_plan += self._travel(receiver, recv_start, point)
        recv_plan.append(PrimitiveAction.grip(receiver, 'closed'))
        return {giver: giver_plan, receiver: recv_plan}, giver, []

    def _chunk(self, plans: dict[str, list[PrimitiveAction]], tick: int) -> ActionChunk:
        """Pairs the per-arm plans and pads or cuts them to exactly H."""
        pairs = []
        for i in range(self.horizon):
            left = plans.get('left', [])
            right = plans.get('right', [])
            pairs.append(
                (
                    left[i] if i < len(left) else PrimitiveAction.noop('left'),
                    right[i] if i < len(right) else PrimitiveAction.noop('right'),
                )
            )
        return ActionChunk(tuple(pairs), self.horizon, tick)


class OracleCritic:
    """
    Ground-truth progress read from the observation.

    Progress is 1 - remaining / reference, where remaining is the path left
    for the end effector (to the grasp point, then on to the place point)
    and reference is that path from the arm's home. It is capped at 0.95
    until the goal predicate holds, which reports bin 100.
    """

    def __init__(self, params: WorldParams | None = None) -> None:
        self.params = params or WorldParams()

    def evaluate(self, obs: Observation, goal: SubtaskGoal) -> CriticVerdict:
        world = decode_observation(obs, self.params)
        if world.fallen() and goal.verb != 'right_object':
            return CriticVerdict.anomaly(obs.tick)
        if goal.verb == 'follow_instruction':
            return CriticVerdict.progress(100 if global_success(world) else 0, obs.tick)
        try:
            if subtask_done(world, goal):
                return CriticVerdict.progress(100, obs.tick)
            progress = self.progress(world, goal)
        except EvaluationError:
            return CriticVerdict.progress(0, obs.tick)
        return CriticVerdict.progress(quantize(progress - 1.0), obs.tick)

    def progress(self, world: WorldState, goal: SubtaskGoal) -> float:
        grasp, place = goal_targets(world, goal)
        holder = world.holder(goal.object)
        tail = 0.0 if place is None else _dist(grasp, place)

        def remaining(side: Side) -> float:
            ee = world.arm(side).ee_position
            if holder == side:
                return 0.0 if place is None else _dist(ee, place)
            return _dist(ee, grasp) + tail

        if holder is not None:
            side = holder
        elif goal.arm is not None:
            side = goal.arm
        else:
            side = min(SIDES, key=remaining)
        reference = _dist(ARM_HOMES[side], grasp) + tail
        if reference <= 1e-9:
            return PROGRESS_CAP
        return float(np.clip(1.0 - remaining(side) / reference, 0.0, PROGRESS_CAP))


class ScriptedCritic:
    """Replays a verdict stream by observation tick; None is the anomaly token."""

    def __init__(self, stream: Sequence[int | None]) -> None:
        if not stream:
            raise ConfigurationError('A scripted critic needs at least one verdict.')
        self.stream = tuple(stream)

    def evaluate(self, obs: Observation, goal: SubtaskGoal) -> CriticVerdict:
        entry = self.stream[min(obs.tick, len(self.stream) - 1)]
        if entry is None:
            return CriticVerdict.anomaly(obs.tick)
        return CriticVerdict.progress(entry, obs.tick)


class LearnedCriticAgent:
    def __init__(self, critic: LearnedCritic) -> None:
        self.critic = critic
        self._warned: set[str] = set()

    def evaluate(self, obs: Observation, goal: SubtaskGoal) -> CriticVerdict:
        predicted = self.critic.predict(obs, goal)
        if predicted is None:
            if goal.plain_text not in self._warned:
                self._warned.add(goal.plain_text)
                logger.warning('Critic never saw goal %r, reporting bin 0', goal.text)
            return CriticVerdict.progress(0, obs.tick)
        if predicted == ANOMALY_CLASS:
            return CriticVerdict.anomaly(obs.tick)
        return CriticVerdict.progress(predicted, obs.tick)


@dataclass
class Agents:
    brain: Brain
    cerebellum: Cerebellum
    critic: Critic | None
    instruction: Instruction


@dataclass(frozen=True, slots=True)
class AgentConfig:
    """Agent variants and failure modes of a campaign cell."""

    brain: Literal['oracle', 'biased'] = 'oracle'
    prompt: PromptStyle = 'plain'
    p_drop: float = 0.0
    ood_trap: bool = True
    left_arm_transfer: bool = True
    critic: Literal['oracle', 'learned'] = 'oracle'
    critic_model: str = ''
    horizon: int = DEFAULT_HORIZON
    params: WorldParams = field(default_factory=WorldParams)

    def __post_init__(self) -> None:
        if self.brain not in ('oracle', 'biased'):
            raise ConfigurationError(
                f'Invalid brain: {self.brain}. Must be oracle or biased.'
            )
        if self.critic not in ('oracle', 'learned'):
            raise ConfigurationError(
                f'Invalid critic: {self.critic}. Must be oracle or learned.'
            )
        if self.critic == 'learned' and not self.critic_model:
            raise ConfigurationError('A learned critic needs critic_model to be set.')

    @classmethod
    def from_ini(cls, config_data: ConfigParser) -> 'AgentConfig':
        s = config_data['Agents']
        default_horizon = config_data.getint(
            'Scheduler', 'horizon', fallback=DEFAULT_HORIZON
        )
        return cls(
            brain=s.get('brain', 'oracle'),  # type: ignore[arg-type]
            prompt=s.get('prompt', 'plain'),  # type: ignore[arg-type]
            p_drop=s.getfloat('p_drop', 0.0),
            ood_trap=s.getboolean('ood_trap', True),
            left_arm_transfer=s.getboolean('left_arm_transfer', True),
            critic=s.get('critic', 'oracle'),  # type: ignore[arg-type]
            critic_model=s.get('critic_model', '').strip(),
            horizon=s.getint('horizon', default_horizon),
            params=WorldParams.from_ini(config_data),
        )


@lru_cache(maxsize=4)
def _load_critic(path: str) -> LearnedCritic:
    return LearnedCritic.load(Path(path))


def build_agents(
    config: AgentConfig, scenario: str, seed: int = 0, scheduler: str = 'tri'
) -> Agents:
    """
    Wires the agents of one episode. The single-system scheduler always gets
    the pass-through brain.
    """
    brain: Brain
    if scheduler == 'single':
        brain = SingleSystemBrain()
    elif config.brain == 'biased':
        brain = BiasedBrain(config.prompt, config.params)
    else:
        brain = OracleBrain(config.prompt, config.params)
    cerebellum = ScriptedCerebellum(
        config.horizon,
        config.p_drop,
        config.ood_trap,
        config.left_arm_transfer,
        seed,
        config.params,
    )
    critic: Critic
    if config.critic == 'learned':
        critic = LearnedCriticAgent(_load_critic(config.critic_model))
    else:
        critic = OracleCritic(config.params)
    return Agents(brain, cerebellum, critic, scenarios.instruction(scenario))
