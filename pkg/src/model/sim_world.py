"""
Deterministic point-kinematic dual-arm tabletop world.

Every operation is a pure function of its inputs and returns a new frozen
WorldState; nothing is mutated in place. Poses are plain float tuples so
that two worlds compare bit-exactly, numpy is only used for the arithmetic.

Observation layout, fixed for a scenario:
    per object (inventory order), 8 values:
        x, y, z, upright, support (index of supporting object + 1,
        0 = table), in_bag, held_by_left, held_by_right
    per arm (left, right), 5 values:
        x, y, z, gripper_closed, holding
    1 global value:
        observed bag-open flag
"""

import logging
from configparser import ConfigParser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray

import src.helpers.helpers as h
from src.model import scenarios
from src.model.exceptions import ConfigurationError, EvaluationError
from src.model.goals import Side, SubtaskGoal

logger = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]
ActionKind = Literal['move_delta', 'set_gripper', 'noop', 'reset_home']
GripperState = Literal['open', 'closed']
PerturbationKind = Literal['knock_over', 'displace', 'drop_held']

SIDES: tuple[Side, Side] = ('left', 'right')

OBJECT_HEIGHTS: dict[str, float] = {
    'plate': 0.02,
    'bowl_large': 0.06,
    'bowl_small': 0.05,
    'cup': 0.09,
    'bottle': 0.20,
    'tissue': 0.03,
    'bag': 0.0,
}
UPRIGHT_CATEGORIES = frozenset({'plate', 'bowl_large', 'bowl_small', 'cup', 'bottle'})
CATEGORIES: tuple[str, ...] = tuple(OBJECT_HEIGHTS)

ARM_HOMES: dict[str, Vec3] = {
    'left': (-0.30, 0.0, 0.25),
    'right': (0.30, 0.0, 0.25),
}
BAG_GRASP_HEIGHT = 0.02
PLACE_CLEARANCE = 0.01
RIGHTING_LIFT = 0.02

OBJECT_FEATURES = 8
ARM_FEATURES = 5
_POSITION_SLOTS = (0, 1, 2)


def _vec(values: Any) -> NDArray[np.float64]:
    return np.asarray(values, dtype=np.float64)


def _tup(values: Any) -> Vec3:
    x, y, z = (float(v) for v in values)
    return (x, y, z)


def other_side(side: Side) -> Side:
    return 'right' if side == 'left' else 'left'


@dataclass(frozen=True, slots=True)
class WorldParams:
    """Kinematic constants, all in meters unless noted."""

    grasp_radius: float = 0.03
    max_step: float = 0.02
    stack_radius: float = 0.04
    bag_radius: float = 0.08
    drop_tolerance: float = 0.03
    reach_limit: float = 0.30
    workspace_min: Vec3 = (-0.5, 0.0, 0.0)
    workspace_max: Vec3 = (0.5, 0.6, 0.4)
    flicker_period: int = 16  # ticks

    def __post_init__(self) -> None:
        for name in ('grasp_radius', 'max_step', 'stack_radius', 'bag_radius'):
            value = getattr(self, name)
            if value <= 0:
                raise ConfigurationError(f'Invalid {name}: {value}. Must be > 0.')
        if self.drop_tolerance < 0:
            raise ConfigurationError(
                f'Invalid drop_tolerance: {self.drop_tolerance}. Must be >= 0.'
            )
        if self.flicker_period < 1:
            raise ConfigurationError(
                f'Invalid flicker_period: {self.flicker_period}. Must be >= 1.'
            )
        if any(lo >= hi for lo, hi in zip(self.workspace_min, self.workspace_max)):
            raise ConfigurationError('workspace_min must be below workspace_max.')

    @classmethod
    def from_ini(cls, config_data: ConfigParser) -> 'WorldParams':
        if not config_data.has_section('World'):
            return cls()
        s = config_data['World']
        d = cls()
        lo, hi = d.workspace_min, d.workspace_max
        if s.get('workspace_min', '').strip():
            lo = _tup(h.get_float_tuple(config_data, 'World', 'workspace_min'))
        if s.get('workspace_max', '').strip():
            hi = _tup(h.get_float_tuple(config_data, 'World', 'workspace_max'))
        return cls(
            grasp_radius=s.getfloat('grasp_radius', d.grasp_radius),
            max_step=s.getfloat('max_step', d.max_step),
            stack_radius=s.getfloat('stack_radius', d.stack_radius),
            bag_radius=s.getfloat('bag_radius', d.bag_radius),
            drop_tolerance=s.getfloat('drop_tolerance', d.drop_tolerance),
            reach_limit=s.getfloat('reach_limit', d.reach_limit),
            workspace_min=lo,
            workspace_max=hi,
            flicker_period=s.getint('flicker_period', d.flicker_period),
        )

    def clamp(self, side: Side, point: Any) -> NDArray[np.float64]:
        """Clips a point into the workspace box and the arm's reach envelope."""
        lo = _vec(self.workspace_min).copy()
        hi = _vec(self.workspace_max).copy()
        if side == 'left':
            hi[0] = min(hi[0], self.reach_limit)
        else:
            lo[0] = max(lo[0], -self.reach_limit)
        return np.clip(_vec(point), lo, hi)

    def reachable(self, side: Side, point: Any) -> bool:
        return bool(np.allclose(self.clamp(side, point), _vec(point), atol=1e-9))


@dataclass(frozen=True, slots=True)
class ObjectSpec:
    """A rigid object; `pose` is the center of its base."""

    id: str
    category: str
    pose: Vec3
    upright: bool = True
    stacked_on: str | None = None
    in_bag: bool = False

    @property
    def height(self) -> float:
        return OBJECT_HEIGHTS[self.category]

    @property
    def top(self) -> float:
        return self.pose[2] + self.height

    @property
    def grasp_point(self) -> Vec3:
        if self.category == 'bag':
            return (self.pose[0], self.pose[1], self.pose[2] + BAG_GRASP_HEIGHT)
        return (self.pose[0], self.pose[1], self.top)

    @property
    def fallen(self) -> bool:
        return (
            self.category in UPRIGHT_CATEGORIES and not self.upright and not self.in_bag
        )


@dataclass(frozen=True, slots=True)
class ArmState:
    side: Side
    ee_position: Vec3
    home_position: Vec3
    gripper: GripperState = 'open'
    held: str | None = None

    @classmethod
    def at_home(cls, side: Side) -> 'ArmState':
        return cls(side, ARM_HOMES[side], ARM_HOMES[side])


@dataclass(frozen=True, slots=True)
class PrimitiveAction:
    arm: Side
    kind: ActionKind
    delta: Vec3 | None = None
    gripper_target: GripperState | None = None

    @classmethod
    def noop(cls, arm: Side) -> 'PrimitiveAction':
        return cls(arm, 'noop')

    @classmethod
    def move(cls, arm: Side, delta: Any) -> 'PrimitiveAction':
        return cls(arm, 'move_delta', delta=_tup(delta))

    @classmethod
    def grip(cls, arm: Side, target: GripperState) -> 'PrimitiveAction':
        return cls(arm, 'set_gripper', gripper_target=target)

    def to_dict(self) -> dict[str, Any]:
        return {
            'arm': self.arm,
            'kind': self.kind,
            'delta': list(self.delta) if self.delta is not None else None,
            'gripper_target': self.gripper_target,
        }


ActionPair = tuple[PrimitiveAction, PrimitiveAction]


def noop_pair() -> ActionPair:
    return (PrimitiveAction.noop('left'), PrimitiveAction.noop('right'))


@dataclass(frozen=True, slots=True)
class PerturbationEvent:
    at_tick: int
    kind: PerturbationKind
    target: str
    displacement: Vec3 | None = None

    def __post_init__(self) -> None:
        if self.at_tick < 0:
            raise ConfigurationError(
                f'Invalid perturbation tick: {self.at_tick}. Must be >= 0.'
            )
        if self.kind not in ('knock_over', 'displace', 'drop_held'):
            raise ConfigurationError(f'Invalid perturbation kind: {self.kind}.')
        if self.kind == 'displace' and self.displacement is None:
            raise ConfigurationError('displace perturbations need a displacement.')

    def to_dict(self) -> dict[str, Any]:
        displacement = None if self.displacement is None else list(self.displacement)
        return {
            'at_tick': self.at_tick,
            'kind': self.kind,
            'target': self.target,
            'displacement': displacement,
        }


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    name: str
    seed: int = 0
    perturbations: tuple[PerturbationEvent, ...] = ()
    noise_level: float = 0.0
    soft_body_flicker: bool | None = None
    params: WorldParams = field(default_factory=WorldParams)

    def __post_init__(self) -> None:
        if self.noise_level < 0:
            raise ConfigurationError(
                f'Invalid noise_level: {self.noise_level}. Must be >= 0.'
            )

    @property
    def flicker(self) -> bool:
        if self.soft_body_flicker is None:
            return self.name == 'tidy_desk'
        return self.soft_body_flicker

    @classmethod
    def for_scenario(
        cls,
        name: str,
        seed: int = 0,
        noise_level: float = 0.0,
        params: WorldParams | None = None,
    ) -> 'ScenarioConfig':
        """Builds a config with the scenario's default perturbation schedule."""
        scenarios.check_scenario(name)
        events = tuple(
            PerturbationEvent(at_tick, kind, target)  # type: ignore[arg-type]
            for at_tick, kind, target in scenarios.DEFAULT_PERTURBATIONS.get(name, ())
        )
        return cls(name, seed, events, noise_level, None, params or WorldParams())

    @classmethod
    def from_ini(cls, config_data: ConfigParser) -> 'ScenarioConfig':
        """
        Reads `[Scenario]` plus any `[Perturbation.N]` sections. Without
        perturbation sections the scenario's defaults apply.
        """
        s = config_data['Scenario']
        name = s.get('name', 'ordered')
        params = WorldParams.from_ini(config_data)
        base = cls.for_scenario(
            name, s.getint('seed', 0), s.getfloat('noise_level', 0.0), params
        )
        sections = sorted(
            (sec for sec in config_data.sections() if sec.startswith('Perturbation.')),
            key=lambda sec: int(sec.split('.', 1)[1]),
        )
        if not sections:
            return base
        events = []
        for sec in sections:
            p = config_data[sec]
            displacement = None
            if p.get('displacement', '').strip():
                displacement = _tup(h.get_float_tuple(config_data, sec, 'displacement'))
            events.append(
                PerturbationEvent(
                    p.getint('at_tick'), p.get('kind'), p.get('target'), displacement
                )
            )
        return replace(base, perturbations=tuple(events))


@dataclass(frozen=True, slots=True)
class WorldState:
    objects: tuple[ObjectSpec, ...]
    arms: tuple[ArmState, ArmState]
    tick: int = 0
    rng_seed: int = 0
    scenario: str = 'ordered'
    noise_level: float = 0.0
    soft_body_flicker: bool = False
    bag_open: bool = False
    events: tuple[str, ...] = ()
    params: WorldParams = field(default_factory=WorldParams)

    def __contains__(self, object_id: object) -> bool:
        return any(o.id == object_id for o in self.objects)

    def obj(self, object_id: str) -> ObjectSpec:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise EvaluationError(f'Unknown object: {object_id}')

    def arm(self, side: Side) -> ArmState:
        return self.arms[SIDES.index(side)]

    def holder(self, object_id: str) -> Side | None:
        for arm in self.arms:
            if arm.held == object_id:
                return arm.side
        return None

    def fallen(self) -> tuple[str, ...]:
        return tuple(o.id for o in self.objects if o.fallen)

    def bag(self) -> ObjectSpec | None:
        return next((o for o in self.objects if o.category == 'bag'), None)


class _WorldEditor:
    """Scratch copy of a WorldState used to build the next frozen state."""

    def __init__(self, world: WorldState) -> None:
        self.world = world
        self.params = world.params
        self.objects: dict[str, ObjectSpec] = {o.id: o for o in world.objects}
        self.arms: dict[str, ArmState] = {a.side: a for a in world.arms}
        self.bag_open = world.bag_open
        self.events: list[str] = []

    def freeze(self, tick: int, events: tuple[str, ...] | None = None) -> WorldState:
        return replace(
            self.world,
            objects=tuple(self.objects.values()),
            arms=(self.arms['left'], self.arms['right']),
            tick=tick,
            bag_open=self.bag_open,
            events=tuple(self.events) if events is None else events,
        )

    def holder(self, object_id: str) -> Side | None:
        for arm in self.arms.values():
            if arm.held == object_id:
                return arm.side
        return None

    def _has_child(self, object_id: str) -> bool:
        return any(o.stacked_on == object_id for o in self.objects.values())

    def _bag(self) -> ObjectSpec | None:
        return next((o for o in self.objects.values() if o.category == 'bag'), None)

    def set_ee(self, side: Side, position: Any) -> None:
        arm = self.arms[side]
        self.arms[side] = replace(arm, ee_position=_tup(position))
        if arm.held is not None:
            held = self.objects[arm.held]
            base = _vec(position) - (0.0, 0.0, held.height)
            self.objects[held.id] = replace(held, pose=_tup(base))

    def move(self, side: Side, delta: Any) -> None:
        step = _vec(delta)
        norm = float(np.linalg.norm(step))
        clamped = False
        if norm > self.params.max_step + 1e-12:
            step = step * (self.params.max_step / norm)
            clamped = True
        target = _vec(self.arms[side].ee_position) + step
        bounded = self.params.clamp(side, target)
        if clamped or not np.allclose(bounded, target, atol=1e-12):
            self.events.append(f'clamped:{side}')
        self.set_ee(side, bounded)

    def close(self, side: Side) -> None:
        arm = self.arms[side]
        if arm.gripper == 'closed':
            return
        self.arms[side] = replace(arm, gripper='closed')
        ee = _vec(arm.ee_position)
        best: ObjectSpec | None = None
        best_dist = np.inf
        for o in self.objects.values():
            if o.category == 'bag' or o.in_bag or self._has_child(o.id):
                continue
            dist = float(np.linalg.norm(_vec(o.grasp_point) - ee))
            if dist <= self.params.grasp_radius and dist < best_dist:
                best, best_dist = o, dist
        if best is not None:
            giver = self.holder(best.id)
            if giver is not None:
                self.arms[giver] = replace(self.arms[giver], gripper='open', held=None)
                self.events.append(f'handover:{best.id}:{giver}->{side}')
            else:
                self.events.append(f'grasped:{best.id}:{side}')
            self.objects[best.id] = replace(best, stacked_on=None, in_bag=False)
            self.arms[side] = replace(self.arms[side], held=best.id)
            self.set_ee(side, ee)
            return
        bag = self._bag()
        if bag is not None and not self.bag_open:
            if np.linalg.norm(_vec(bag.grasp_point) - ee) <= self.params.grasp_radius:
                self.bag_open = True
                self.events.append('bag_opened')

    def open(self, side: Side) -> None:
        arm = self.arms[side]
        self.arms[side] = replace(arm, gripper='open', held=None)
        if arm.held is not None:
            self._release(self.objects[arm.held])

    def _support(self, obj: ObjectSpec) -> ObjectSpec | Literal['bag'] | None:
        xy = _vec(obj.pose[:2])
        bag = self._bag()
        if bag is not None and self.bag_open:
            if np.linalg.norm(_vec(bag.pose[:2]) - xy) <= self.params.bag_radius:
                return 'bag'
        best: ObjectSpec | None = None
        for other in self.objects.values():
            if other.id == obj.id or other.category == 'bag' or other.in_bag:
                continue
            if self.holder(other.id) is not None or self._has_child(other.id):
                continue
            if np.linalg.norm(_vec(other.pose[:2]) - xy) > self.params.stack_radius:
                continue
            if best is None or other.top > best.top:
                best = other
        return best

    def _release(self, obj: ObjectSpec) -> None:
        x, y, base_z = obj.pose
        support = self._support(obj)
        if support == 'bag':
            self.objects[obj.id] = replace(
                obj, pose=(x, y, 0.0), stacked_on=None, in_bag=True
            )
            self.events.append(f'released:{obj.id}:bag')
            return
        top = 0.0 if support is None else support.top
        if base_z - top > self.params.drop_tolerance:
            upright = obj.upright and obj.category not in UPRIGHT_CATEGORIES
            self.objects[obj.id] = replace(
                obj, pose=(x, y, 0.0), stacked_on=None, upright=upright
            )
            self.events.append(f'dropped:{obj.id}')
            return
        # setting an object down on the bare table rights it
        upright = True if support is None else obj.upright
        self.objects[obj.id] = replace(
            obj,
            pose=(x, y, top),
            stacked_on=None if support is None else support.id,
            upright=upright,
        )
        where = 'table' if support is None else support.id
        self.events.append(f'released:{obj.id}:{where}')

    def place_on_table(self, side: Side, upright: bool) -> None:
        arm = self.arms[side]
        if arm.held is None:
            return
        held = self.objects[arm.held]
        self.objects[held.id] = replace(
            held,
            pose=(held.pose[0], held.pose[1], 0.0),
            stacked_on=None,
            upright=upright or held.category not in UPRIGHT_CATEGORIES,
        )
        self.arms[side] = replace(arm, gripper='open', held=None)

    def knock_over(self, object_id: str) -> None:
        o = self.objects[object_id]
        if o.category in UPRIGHT_CATEGORIES:
            self.objects[object_id] = replace(o, upright=False)
        self.events.append(f'perturbation:knock_over:{object_id}')

    def displace(self, object_id: str, displacement: Vec3) -> None:
        o = self.objects[object_id]
        if self.holder(object_id) is not None or o.category == 'bag':
            self.events.append(f'perturbation:displace_skipped:{object_id}')
            return
        dx, dy = displacement[0], displacement[1]
        lo, hi = self.params.workspace_min, self.params.workspace_max
        x = float(np.clip(o.pose[0] + dx, lo[0], hi[0]))
        y = float(np.clip(o.pose[1] + dy, lo[1], hi[1]))
        shift = (x - o.pose[0], y - o.pose[1])
        self.objects[object_id] = replace(
            o, pose=(x, y, 0.0), stacked_on=None, in_bag=False
        )
        # whatever sits on the displaced object travels with it
        parent = object_id
        child = next((c for c in self.objects.values() if c.stacked_on == parent), None)
        while child is not None:
            below = self.objects[parent]
            self.objects[child.id] = replace(
                child,
                pose=(child.pose[0] + shift[0], child.pose[1] + shift[1], below.top),
            )
            parent = child.id
            child = next(
                (c for c in self.objects.values() if c.stacked_on == parent), None
            )
        self.events.append(f'perturbation:displace:{object_id}')

    def drop_held(self, object_id: str) -> None:
        side = self.holder(object_id)
        if side is None:
            self.events.append(f'perturbation:drop_skipped:{object_id}')
            return
        self.place_on_table(side, upright=False)
        self.events.append(f'perturbation:drop_held:{object_id}')


def scenario_init(config: ScenarioConfig) -> WorldState:
    """
    Lays out the scenario's objects with seeded jitter of at most 1 cm and
    puts both arms at home.

    Raises:
        ConfigurationError: If the scenario name is unknown.
    """
    rows = scenarios.layout(config.name)
    rng = np.random.default_rng(h.seed_words(config.seed))
    jitter = rng.uniform(-0.01, 0.01, size=(len(rows), 2))
    objects = tuple(
        ObjectSpec(obj_id, category, (float(x + jx), float(y + jy), 0.0))
        for (obj_id, category, x, y), (jx, jy) in zip(rows, jitter)
    )
    return WorldState(
        objects=objects,
        arms=(ArmState.at_home('left'), ArmState.at_home('right')),
        tick=0,
        rng_seed=config.seed,
        scenario=config.name,
        noise_level=config.noise_level,
        soft_body_flicker=config.flicker,
        params=config.params,
    )


def step(world: WorldState, actions: ActionPair) -> WorldState:
    """
    Applies one action per arm, left first, and advances the clock by one
    tick. Infeasible motion is clamped and logged as `clamped:<side>` in
    the returned world's events.
    """
    editor = _WorldEditor(world)
    for action in actions:
        side = action.arm
        match action.kind:
            case 'noop':
                pass
            case 'move_delta':
                editor.move(side, action.delta or (0.0, 0.0, 0.0))
            case 'reset_home':
                editor.set_ee(side, editor.arms[side].home_position)
            case 'set_gripper':
                if action.gripper_target == 'closed':
                    editor.close(side)
                else:
                    editor.open(side)
    return editor.freeze(world.tick + 1)


def inject_perturbations(world: WorldState, config: ScenarioConfig) -> WorldState:
    """
    Applies the scheduled perturbations whose tick equals `world.tick`.

    Raises:
        ConfigurationError: If any scheduled event targets a missing object.
    """
    for event in config.perturbations:
        if event.target not in world:
            raise ConfigurationError(
                f'Perturbation target {event.target} is not in scenario '
                f'{world.scenario}.'
            )
    due = [event for event in config.perturbations if event.at_tick == world.tick]
    if not due:
        return world
    editor = _WorldEditor(world)
    for event in due:
        logger.debug('tick %d: %s %s', world.tick, event.kind, event.target)
        match event.kind:
            case 'knock_over':
                editor.knock_over(event.target)
            case 'displace':
                editor.displace(event.target, event.displacement or (0.0, 0.0, 0.0))
            case 'drop_held':
                editor.drop_held(event.target)
    return editor.freeze(world.tick, world.events + tuple(editor.events))


def reset_robot_state(world: WorldState) -> WorldState:
    """
    Sends both arms home with open grippers. A held object is set down
    upright on the table below where it was held.
    """
    editor = _WorldEditor(world)
    for side in SIDES:
        editor.place_on_table(side, upright=True)
        arm = editor.arms[side]
        editor.arms[side] = replace(
            arm, ee_position=arm.home_position, gripper='open', held=None
        )
    return editor.freeze(world.tick, world.events)


@dataclass(frozen=True, slots=True)
class ObservationLayout:
    scenario: str
    object_ids: tuple[str, ...]
    categories: tuple[str, ...]

    @property
    def dim(self) -> int:
        return OBJECT_FEATURES * len(self.object_ids) + 2 * ARM_FEATURES + 1

    def object_offset(self, index: int) -> int:
        return OBJECT_FEATURES * index

    def arm_offset(self, side: Side) -> int:
        base = OBJECT_FEATURES * len(self.object_ids)
        return base + ARM_FEATURES * SIDES.index(side)

    @property
    def bag_index(self) -> int:
        return self.dim - 1

    @property
    def position_indices(self) -> NDArray[np.intp]:
        idx = [
            self.object_offset(i) + k
            for i in range(len(self.object_ids))
            for k in _POSITION_SLOTS
        ]
        idx += [self.arm_offset(s) + k for s in SIDES for k in _POSITION_SLOTS]
        return np.asarray(idx, dtype=np.intp)

    @classmethod
    def for_scenario(cls, name: str) -> 'ObservationLayout':
        rows = scenarios.layout(name)
        return cls(name, tuple(r[0] for r in rows), tuple(r[1] for r in rows))


@dataclass(frozen=True, eq=False)
class Observation:
    """Feature vector O_t; compare with `same_as`, not `==`."""

    features: NDArray[np.float64]
    tick: int
    layout: ObservationLayout

    def same_as(self, other: 'Observation') -> bool:
        return (
            self.tick == other.tick
            and self.layout == other.layout
            and np.array_equal(self.features, other.features)
        )


def observed_bag_open(world: WorldState) -> bool:
    """
    A thin bag that deflates looks closed: with soft-body flicker on, an
    open bag reads closed during every odd flicker period.
    """
    if not world.bag_open:
        return False
    if world.soft_body_flicker:
        return (world.tick // world.params.flicker_period) % 2 == 0
    return True


def observe(world: WorldState) -> Observation:
    layout = ObservationLayout(
        world.scenario,
        tuple(o.id for o in world.objects),
        tuple(o.category for o in world.objects),
    )
    index = {obj_id: i for i, obj_id in enumerate(layout.object_ids)}
    holders = {a.held: a.side for a in world.arms if a.held is not None}
    features = np.zeros(layout.dim, dtype=np.float64)
    for i, o in enumerate(world.objects):
        off = layout.object_offset(i)
        features[off : off + 3] = o.pose
        features[off + 3] = float(o.upright)
        features[off + 4] = 0.0 if o.stacked_on is None else index[o.stacked_on] + 1.0
        features[off + 5] = float(o.in_bag)
        features[off + 6] = float(holders.get(o.id) == 'left')
        features[off + 7] = float(holders.get(o.id) == 'right')
    for arm in world.arms:
        off = layout.arm_offset(arm.side)
        features[off : off + 3] = arm.ee_position
        features[off + 3] = float(arm.gripper == 'closed')
        features[off + 4] = float(arm.held is not None)
    features[layout.bag_index] = float(observed_bag_open(world))
    if world.noise_level > 0:
        rng = np.random.default_rng(h.seed_words(world.rng_seed, world.tick))
        pos = layout.position_indices
        features[pos] += rng.normal(0.0, world.noise_level, size=pos.size)
    return Observation(features, world.tick, layout)


def decode_observation(
    obs: Observation, params: WorldParams | None = None
) -> WorldState:
    """
    Rebuilds the world snapshot an observation shows. Oracle agents and goal
    predicates work on this snapshot, so they only know what was observed.
    """
    layout = obs.layout
    f = obs.features
    objects = []
    held: dict[str, str] = {}
    for i, (obj_id, category) in enumerate(zip(layout.object_ids, layout.categories)):
        off = layout.object_offset(i)
        support = int(round(f[off + 4]))
        objects.append(
            ObjectSpec(
                obj_id,
                category,
                _tup(f[off : off + 3]),
                upright=bool(f[off + 3] > 0.5),
                stacked_on=layout.object_ids[support - 1] if support > 0 else None,
                in_bag=bool(f[off + 5] > 0.5),
            )
        )
        if f[off + 6] > 0.5:
            held['left'] = obj_id
        elif f[off + 7] > 0.5:
            held['right'] = obj_id
    arms = []
    for side in SIDES:
        off = layout.arm_offset(side)
        arms.append(
            ArmState(
                side,
                _tup(f[off : off + 3]),
                ARM_HOMES[side],
                gripper='closed' if f[off + 3] > 0.5 else 'open',
                held=held.get(side),
            )
        )
    return WorldState(
        objects=tuple(objects),
        arms=(arms[0], arms[1]),
        tick=obs.tick,
        scenario=layout.scenario,
        bag_open=bool(f[layout.bag_index] > 0.5),
        params=params or WorldParams(),
    )


def _destination_point(world: WorldState, obj: ObjectSpec, dest_id: str) -> Vec3:
    dest = world.obj(dest_id)
    z = (dest.pose[2] if dest.category == 'bag' else dest.top) + obj.height
    return (dest.pose[0], dest.pose[1], z + PLACE_CLEARANCE)


def goal_targets(world: WorldState, goal: SubtaskGoal) -> tuple[Vec3, Vec3 | None]:
    """
    The end-effector points a goal passes through: where to grasp and where
    to release (None when the goal ends at the grasp).

    Raises:
        EvaluationError: If the goal names an object absent from the world.
    """
    obj = world.obj(goal.object)
    match goal.verb:
        case 'pick_and_place' | 'stack':
            place = None
            if goal.destination is not None:
                place = _destination_point(world, obj, goal.destination)
            return obj.grasp_point, place
        case 'right_object':
            x, y, _ = obj.pose
            if obj.stacked_on is not None:
                # righting on a stack is not possible, set it down in front
                y = max(y - 0.15, world.params.workspace_min[1])
                return obj.grasp_point, (x, y, obj.height + PLACE_CLEARANCE)
            return obj.grasp_point, (x, y, obj.height + RIGHTING_LIFT)
        case 'open_bag':
            return obj.grasp_point, None
        case 'handover':
            return obj.grasp_point, (0.0, 0.25, 0.20)
    raise EvaluationError(f'Goal {goal.text} has no geometric target.')


def subtask_done(world: WorldState, goal: SubtaskGoal) -> bool:
    """
    Success predicate of a goal on a (possibly decoded) world.

    - pick_and_place/stack: resting on the destination (in it, for the
      bag), released and upright.
    - open_bag: the bag-open flag.
    - right_object: upright and released.
    - handover: held by the named arm.
    - follow_instruction: global success.

    Raises:
        EvaluationError: If the goal names an object absent from the world.
    """
    if goal.verb == 'follow_instruction':
        return global_success(world)
    obj = world.obj(goal.object)
    match goal.verb:
        case 'pick_and_place' | 'stack':
            if goal.destination is None:
                return world.holder(obj.id) is None and obj.upright
            dest = world.obj(goal.destination)
            placed = obj.in_bag if dest.category == 'bag' else obj.stacked_on == dest.id
            upright = obj.upright or obj.category not in UPRIGHT_CATEGORIES
            return placed and upright and world.holder(obj.id) is None
        case 'open_bag':
            return world.bag_open
        case 'right_object':
            return obj.upright and world.holder(obj.id) is None
        case 'handover':
            return goal.arm is not None and world.holder(obj.id) == goal.arm
    return False


def global_success(world: WorldState) -> bool:
    """Every script goal satisfied at once and nothing fallen over."""
    return not world.fallen() and all(
        subtask_done(world, goal) for goal in scenarios.script(world.scenario)
    )


def cumulative_subtasks(world: WorldState) -> int:
    """Length of the longest satisfied prefix of the scenario script."""
    count = 0
    for goal in scenarios.script(world.scenario):
        if not subtask_done(world, goal):
            break
        count += 1
    return count


def world_record(world: WorldState) -> dict[str, Any]:
    """One line-delimited trajectory record."""
    return {
        'tick': world.tick,
        'objects': [
            {
                'id': o.id,
                'pose': list(o.pose),
                'upright': o.upright,
                'stacked_on': o.stacked_on,
                'in_bag': o.in_bag,
            }
            for o in world.objects
        ],
        'arms': [
            {
                'side': a.side,
                'ee': list(a.ee_position),
                'gripper': a.gripper,
                'held': a.held,
            }
            for a in world.arms
        ],
        'bag_open': world.bag_open,
        'events': list(world.events),
    }


def export_trajectory(worlds: list[WorldState], filepath: str | Path) -> Path:
    return h.write_jsonl(filepath, (world_record(w) for w in worlds))
