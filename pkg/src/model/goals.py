"""
Semantic goal vocabulary shared by the Brain, Cerebellum and Critic.

A SubtaskGoal is the structured form of one subtask instruction. Its text
is derived from the fields, never stored, so two equal goals always render
identically.
"""

from dataclasses import dataclass
from typing import Literal

from src.model.exceptions import ConfigurationError

Verb = Literal[
    'pick_and_place',
    'stack',
    'open_bag',
    'right_object',
    'handover',
    'follow_instruction',
]
Side = Literal['left', 'right']
MemoryKind = Literal['none', 'completed', 'accident', 'stagnation_timeout']

VERBS: tuple[str, ...] = (
    'pick_and_place',
    'stack',
    'open_bag',
    'right_object',
    'handover',
    'follow_instruction',
)

OBJECT_NAMES: dict[str, str] = {
    'plate': 'plate',
    'bowl_large': 'large bowl',
    'bowl_small': 'small bowl',
    'cup': 'cup',
    'bottle_1': 'first bottle',
    'bottle_2': 'second bottle',
    'tissue': 'tissue',
    'bag': 'bag',
}


def object_name(object_id: str) -> str:
    return OBJECT_NAMES.get(object_id, object_id.replace('_', ' '))


@dataclass(frozen=True, slots=True)
class SubtaskGoal:
    """
    One subtask g_t.

    Args:
        verb: What to do.
        object: Object id the verb acts on.
        destination: Object id to place onto (stack top or bag), if any.
        side: Workspace side of the object, only in structured prompts.
        arm: Arm to execute with, only in structured prompts.
        instruction: Raw global instruction, only for `follow_instruction`.
    """

    verb: Verb
    object: str
    destination: str | None = None
    side: Side | None = None
    arm: Side | None = None
    instruction: str | None = None

    def __post_init__(self) -> None:
        if self.verb not in VERBS:
            raise ConfigurationError(
                f'Invalid goal verb: {self.verb}. Must be one of {", ".join(VERBS)}.'
            )
        if self.verb == 'follow_instruction' and not self.instruction:
            raise ConfigurationError('follow_instruction goals need the instruction.')

    @property
    def is_structured(self) -> bool:
        return self.side is not None and self.arm is not None

    @property
    def plain_text(self) -> str:
        return self._render(structured=False)

    @property
    def structured_text(self) -> str:
        return self._render(structured=True)

    @property
    def text(self) -> str:
        return self._render(structured=self.is_structured)

    def plain(self) -> 'SubtaskGoal':
        """Same goal with the side/arm tokens stripped."""
        return SubtaskGoal(
            self.verb, self.object, self.destination, instruction=self.instruction
        )

    def _render(self, structured: bool) -> str:
        if self.verb == 'follow_instruction':
            return str(self.instruction)
        name = object_name(self.object)
        if structured and self.side:
            name = f'{self.side} {name}'
        match self.verb:
            case 'pick_and_place':
                text = f'pick and place the {name}'
            case 'stack':
                text = f'stack the {name} on the {object_name(str(self.destination))}'
            case 'open_bag':
                text = f'open the {name}'
            case 'right_object':
                text = f'right the {name}'
            case _:
                text = f'hand over the {name}'
        if structured and self.arm:
            text = f'{text} with {self.arm} arm'
        return text

    def to_dict(self) -> dict[str, str | None]:
        return {
            'verb': self.verb,
            'object': self.object,
            'destination': self.destination,
            'side': self.side,
            'arm': self.arm,
            'instruction': self.instruction,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SubtaskGoal':
        return cls(
            verb=data['verb'],
            object=data['object'],
            destination=data.get('destination'),
            side=data.get('side'),
            arm=data.get('arm'),
            instruction=data.get('instruction'),
        )


@dataclass(frozen=True, slots=True)
class MemoryContext:
    """Short-term memory m handed to the Brain after an event."""

    kind: MemoryKind = 'none'
    prev_goal: SubtaskGoal | None = None

    def __post_init__(self) -> None:
        if self.kind == 'completed' and self.prev_goal is None:
            raise ConfigurationError('A completed memory needs the previous goal.')

    @property
    def text(self) -> str:
        match self.kind:
            case 'completed':
                return f'{self.prev_goal.text} completed'  # type: ignore[union-attr]
            case 'accident':
                return 'accident happened'
            case 'stagnation_timeout':
                return 'stagnation timeout'
        return ''

    @classmethod
    def none(cls) -> 'MemoryContext':
        return cls('none')

    @classmethod
    def completed(cls, goal: SubtaskGoal) -> 'MemoryContext':
        return cls('completed', goal)

    @classmethod
    def accident(cls) -> 'MemoryContext':
        return cls('accident')

    @classmethod
    def stagnation_timeout(cls) -> 'MemoryContext':
        return cls('stagnation_timeout')


@dataclass(frozen=True, slots=True)
class Instruction:
    """The global user instruction and the scenario it is issued in."""

    text: str
    scenario: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ConfigurationError('Instruction text must not be empty.')


def render_prompt(instruction: Instruction, memory: MemoryContext) -> str:
    return f'Task: {instruction.text}; Info: {memory.text}; Current Subtask:'
