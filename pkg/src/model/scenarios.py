"""
Scenario catalog: object layouts, subtask scripts, vocabularies and the
global instruction of each tabletop scenario.

Layout rows are `(object id, category, x, y)` in meters before seeded
jitter. x < 0 is the robot's left, the midline is x = 0, y points away
from the robot.
"""

from src.model.exceptions import ConfigurationError
from src.model.goals import Instruction, SubtaskGoal

SCENARIOS: tuple[str, ...] = (
    'ordered',
    'scattered',
    'left_cup',
    'fallen',
    'tidy_desk',
)
TABLEWARE_SCENARIOS: tuple[str, ...] = ('ordered', 'scattered', 'left_cup', 'fallen')

LayoutRow = tuple[str, str, float, float]

_ROW_Y = 0.35

_ORDERED: tuple[LayoutRow, ...] = (
    ('plate', 'plate', -0.24, _ROW_Y),
    ('bowl_large', 'bowl_large', -0.08, _ROW_Y),
    ('bowl_small', 'bowl_small', 0.08, _ROW_Y),
    ('cup', 'cup', 0.24, _ROW_Y),
)

LAYOUTS: dict[str, tuple[LayoutRow, ...]] = {
    'ordered': _ORDERED,
    # sizes mixed so that "nearest next" disagrees with "largest next"
    'scattered': (
        ('plate', 'plate', -0.24, _ROW_Y),
        ('bowl_large', 'bowl_large', 0.08, _ROW_Y),
        ('bowl_small', 'bowl_small', -0.08, _ROW_Y),
        ('cup', 'cup', 0.24, _ROW_Y),
    ),
    # cup outside the right arm's reach envelope
    'left_cup': (
        ('plate', 'plate', -0.08, _ROW_Y),
        ('bowl_large', 'bowl_large', 0.08, _ROW_Y),
        ('bowl_small', 'bowl_small', 0.24, _ROW_Y),
        ('cup', 'cup', -0.40, _ROW_Y),
    ),
    'fallen': _ORDERED,
    'tidy_desk': (
        ('bag', 'bag', 0.0, 0.42),
        ('bottle_1', 'bottle', -0.24, 0.30),
        ('bottle_2', 'bottle', 0.24, 0.30),
        ('tissue', 'tissue', 0.12, 0.22),
    ),
}

_TABLEWARE_SCRIPT: tuple[SubtaskGoal, ...] = (
    SubtaskGoal('stack', 'bowl_large', destination='plate'),
    SubtaskGoal('stack', 'bowl_small', destination='bowl_large'),
    SubtaskGoal('pick_and_place', 'cup', destination='bowl_small'),
)

_TIDY_SCRIPT: tuple[SubtaskGoal, ...] = (
    SubtaskGoal('open_bag', 'bag'),
    SubtaskGoal('pick_and_place', 'bottle_1', destination='bag'),
    SubtaskGoal('pick_and_place', 'bottle_2', destination='bag'),
    SubtaskGoal('pick_and_place', 'tissue', destination='bag'),
)

_INSTRUCTIONS: dict[str, str] = {
    'tableware': (
        'arrange the tableware: stack plates and bowls by size and put the cup on top'
    ),
    'tidy_desk': 'tidy up the desk: put the bottles and the tissue into the bag',
}

# Perturbations every run of a scenario gets unless the config names its own.
DEFAULT_PERTURBATIONS: dict[str, tuple[tuple[int, str, str], ...]] = {
    'fallen': ((40, 'knock_over', 'cup'),),
}


def check_scenario(name: str) -> str:
    if name not in LAYOUTS:
        raise ConfigurationError(
            f'Unknown scenario: {name}. Must be one of {", ".join(SCENARIOS)}.'
        )
    return name


def layout(name: str) -> tuple[LayoutRow, ...]:
    return LAYOUTS[check_scenario(name)]


def object_ids(name: str) -> tuple[str, ...]:
    return tuple(row[0] for row in layout(name))


def script(name: str) -> tuple[SubtaskGoal, ...]:
    """The ordered subtask script whose joint satisfaction is global success."""
    if check_scenario(name) == 'tidy_desk':
        return _TIDY_SCRIPT
    return _TABLEWARE_SCRIPT


def vocabulary(name: str) -> tuple[SubtaskGoal, ...]:
    """
    Closed subtask vocabulary of a scenario: the script plus a righting goal
    for every object that can fall over.
    """
    from src.model.sim_world import UPRIGHT_CATEGORIES

    righting = tuple(
        SubtaskGoal('right_object', obj_id)
        for obj_id, category, _, _ in layout(name)
        if category in UPRIGHT_CATEGORIES
    )
    return script(name) + righting


def vocabulary_texts(name: str) -> tuple[str, ...]:
    return tuple(goal.plain_text for goal in vocabulary(name))


def resolve_goal(text: str, scenario: str | None = None) -> SubtaskGoal | None:
    """
    Looks up the vocabulary goal whose plain text is `text`.

    Searches one scenario when given, otherwise every scenario.
    """
    names = (scenario,) if scenario else SCENARIOS
    for name in names:
        for goal in vocabulary(name):
            if goal.plain_text == text:
                return goal
    return None


def instruction(name: str) -> Instruction:
    key = 'tidy_desk' if check_scenario(name) == 'tidy_desk' else 'tableware'
    return Instruction(_INSTRUCTIONS[key], name)
