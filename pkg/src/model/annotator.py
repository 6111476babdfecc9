"""
Automated subtask annotation of raw dual-arm trajectories.

Keyframes are proposed from the end-effector geometry of each arm (RDP
simplification) and from gripper state changes, thinned by a greedy
minimum-gap filter, then every span between kept keyframes is labeled by a
retriever queried at its midpoint frame. Adjacent spans that retrieve the
same label are merged into one segment.

File formats:
    RawTrajectory: one frame per line, 8 whitespace separated numbers
        (left x y z, right x y z, left gripper 0/1, right gripper 0/1),
        optional `# source=<id>` header line.
    AnnotatedEpisode: header `# source=<id> frames=<n>`, then one segment per
        line as `start<TAB>end<TAB>anomaly(0/1)<TAB>label`.
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Protocol

import numpy as np
from numpy.typing import NDArray

import src.helpers.helpers as h
from src.model.exceptions import AnnotationError
from src.model.goals import Side

logger = logging.getLogger(__name__)

KeyframeSource = Literal['geometric', 'gripper']

DEFAULT_EPSILON = 0.02
DEFAULT_DELTA_T = 30

SYNTHETIC_VOCABULARY: tuple[str, ...] = (
    'pick and place the pink plate',
    'pick and place the blue cup',
    'stack the green bowl on the plate',
    'open the drawer',
    'wipe the table',
)


@dataclass(frozen=True, slots=True)
class RawTrajectory:
    left: NDArray[np.float64]
    right: NDArray[np.float64]
    left_gripper: NDArray[np.int8]
    right_gripper: NDArray[np.int8]
    source_id: str = 'trajectory'
    frame_rate_label: str = '20 Hz'

    def __post_init__(self) -> None:
        n = len(self.left)
        if n < 2:
            raise AnnotationError(f'Trajectory needs at least 2 frames, got {n}.')
        for name in ('left', 'right'):
            arr = getattr(self, name)
            if arr.shape != (n, 3):
                raise AnnotationError(f'{name} positions must be ({n}, 3).')
            if not np.all(np.isfinite(arr)):
                raise AnnotationError(f'{name} positions must be finite.')
        for name in ('left_gripper', 'right_gripper'):
            if getattr(self, name).shape != (n,):
                raise AnnotationError(f'{name} must have {n} entries.')

    @property
    def n_frames(self) -> int:
        return len(self.left)

    def positions(self, arm: Side) -> NDArray[np.float64]:
        return self.left if arm == 'left' else self.right

    def gripper(self, arm: Side) -> NDArray[np.int8]:
        return self.left_gripper if arm == 'left' else self.right_gripper

    def to_array(self) -> NDArray[np.float64]:
        return np.column_stack(
            (self.left, self.right, self.left_gripper, self.right_gripper)
        ).astype(np.float64)

    @classmethod
    def from_array(cls, arr: Any, source_id: str = 'trajectory') -> 'RawTrajectory':
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 8:
            raise AnnotationError(
                f'Trajectory rows must hold 8 numbers, got shape {arr.shape}.'
            )
        return cls(
            left=arr[:, 0:3].copy(),
            right=arr[:, 3:6].copy(),
            left_gripper=(arr[:, 6] > 0.5).astype(np.int8),
            right_gripper=(arr[:, 7] > 0.5).astype(np.int8),
            source_id=source_id,
        )

    def save(self, filepath: str | Path) -> Path:
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(
            filepath, self.to_array(), fmt='%.17g', header=f'source={self.source_id}'
        )
        return filepath

    @classmethod
    def load(cls, filepath: str | Path) -> 'RawTrajectory':
        filepath = Path(filepath)
        source_id = filepath.stem
        with open(filepath, 'r', encoding='utf-8') as f:
            first = f.readline()
        if first.startswith('#') and 'source=' in first:
            source_id = first.split('source=', 1)[1].split()[0]
        try:
            arr = np.loadtxt(filepath, ndmin=2, comments='#')
        except ValueError as e:
            raise AnnotationError(f'Malformed trajectory file {filepath}: {e}') from e
        return cls.from_array(arr, source_id)


@dataclass(frozen=True, slots=True)
class Keyframe:
    frame_index: int
    source: KeyframeSource
    arm: Side


@dataclass(frozen=True, slots=True)
class Segment:
    """Frames `start..end` inclusive carrying one subtask label."""

    start: int
    end: int
    label: str
    anomaly: bool = False

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True, eq=False)
class AnnotatedEpisode:
    """
    A trajectory partitioned into contiguous labeled segments.

    `features` optionally holds one observation feature row per frame so the
    episode can be turned into labeled training frames.
    """

    segments: tuple[Segment, ...]
    source_id: str
    scenario: str | None = None
    features: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        if not self.segments:
            raise AnnotationError('An annotated episode needs at least one segment.')
        if self.segments[0].start != 0:
            raise AnnotationError('The first segment must start at frame 0.')
        for prev, seg in zip(self.segments, self.segments[1:]):
            if seg.start != prev.end + 1:
                raise AnnotationError(
                    f'Segments are not contiguous at frame {seg.start}.'
                )
            if seg.label == prev.label:
                raise AnnotationError(
                    f'Adjacent segments share the label {seg.label!r}.'
                )
        for seg in self.segments:
            if seg.end < seg.start:
                raise AnnotationError(f'Segment {seg} ends before it starts.')
        if self.features is not None and len(self.features) != self.n_frames:
            raise AnnotationError('Feature rows must match the number of frames.')

    @property
    def n_frames(self) -> int:
        return self.segments[-1].end + 1

    @property
    def boundaries(self) -> tuple[int, ...]:
        return tuple(seg.start for seg in self.segments[1:])

    def label_map(self) -> list[str]:
        labels: list[str] = []
        for seg in self.segments:
            labels.extend([seg.label] * seg.n_frames)
        return labels

    def save(self, filepath: str | Path) -> Path:
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
            f.write(f'# source={self.source_id} frames={self.n_frames}\n')
            for seg in self.segments:
                f.write(f'{seg.start}\t{seg.end}\t{int(seg.anomaly)}\t{seg.label}\n')
        return filepath

    @classmethod
    def load(
        cls, filepath: str | Path, scenario: str | None = None
    ) -> 'AnnotatedEpisode':
        source_id = Path(filepath).stem
        segments = []
        with open(filepath, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.rstrip('\n')
                if line.startswith('#'):
                    if 'source=' in line:
                        source_id = line.split('source=', 1)[1].split()[0]
                    continue
                if not line.strip():
                    continue
                parts = line.split('\t', 3)
                if len(parts) != 4:
                    raise AnnotationError(f'Malformed segment line: {line!r}')
                start, end, anomaly, label = parts
                segments.append(Segment(int(start), int(end), label, anomaly == '1'))
        return cls(tuple(segments), source_id, scenario)


def perpendicular_distances(
    points: NDArray[np.float64], start: NDArray[np.float64], end: NDArray[np.float64]
) -> NDArray[np.float64]:
    """
    Distances from `points` to the infinite line through `start` and `end`.
    Identical endpoints fall back to the point-to-point distance.
    """
    direction = end - start
    length = float(np.linalg.norm(direction))
    offsets = points - start
    if length == 0.0:
        return np.linalg.norm(offsets, axis=1)
    return np.linalg.norm(np.cross(offsets, direction), axis=1) / length


def rdp_keyframes(points: Any, epsilon: float) -> list[int]:
    """
    Ramer-Douglas-Peucker retained indices, endpoints always included.

    A point is kept when its distance to the current chord is strictly
    greater than `epsilon`; among equal maxima the earliest index wins.

    Args:
        points: Array of shape (n, d) with n >= 2.
        epsilon: Distance threshold, strictly positive.

    Returns:
        list[int]: Retained indices in increasing order.

    Raises:
        AnnotationError: If `points` has fewer than 2 rows or `epsilon` <= 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise AnnotationError('RDP needs at least 2 points.')
    if not epsilon > 0:
        raise AnnotationError(f'Invalid epsilon: {epsilon}. Must be > 0.')
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        d = perpendicular_distances(pts[first + 1 : last], pts[first], pts[last])
        i = int(np.argmax(d))
        if d[i] > epsilon:
            split = first + 1 + i
            keep[split] = True
            stack.append((first, split))
            stack.append((split, last))
    return [int(i) for i in np.flatnonzero(keep)]


def gripper_events(traj: RawTrajectory) -> list[Keyframe]:
    events = []
    for arm in ('left', 'right'):
        g = traj.gripper(arm)  # type: ignore[arg-type]
        for idx in np.flatnonzero(g[1:] != g[:-1]) + 1:
            events.append(Keyframe(int(idx), 'gripper', arm))  # type: ignore[arg-type]
    return sorted(events, key=_keyframe_order)


def _keyframe_order(kf: Keyframe) -> tuple[int, int, int]:
    # gripper keyframes first at equal index
    source_rank = 0 if kf.source == 'gripper' else 1
    return (kf.frame_index, source_rank, 0 if kf.arm == 'left' else 1)


def proximity_filter(keyframes: Sequence[Keyframe], delta_t: int) -> list[Keyframe]:
    """
    Greedy left-to-right scan keeping a keyframe iff it lies at least
    `delta_t` frames after the last kept one. The first is always kept.

    Raises:
        AnnotationError: If `delta_t` is below 1.
    """
    if delta_t < 1:
        raise AnnotationError(f'Invalid delta_t: {delta_t}. Must be >= 1.')
    kept: list[Keyframe] = []
    for kf in sorted(keyframes, key=_keyframe_order):
        if not kept or kf.frame_index >= kept[-1].frame_index + delta_t:
            kept.append(kf)
    return kept


class Retriever(Protocol):
    vocabulary: tuple[str, ...]

    def retrieve(
        self, frame_index: int, context: RawTrajectory | None, vocabulary: Sequence[str]
    ) -> str: ...


class OracleRetriever:
    """Answers from a ground-truth label per frame."""

    def __init__(self, labels: Sequence[str], vocabulary: Sequence[str] | None = None):
        self.labels = tuple(labels)
        self.vocabulary = tuple(vocabulary or dict.fromkeys(self.labels))

    def retrieve(
        self, frame_index: int, context: RawTrajectory | None, vocabulary: Sequence[str]
    ) -> str:
        return self.labels[frame_index]


class NoisyRetriever:
    """
    Corrupts another retriever: with probability `rho` per query the answer
    is replaced by a different vocabulary entry drawn uniformly. The draw is
    seeded by (seed, frame index) so repeated queries agree.
    """

    def __init__(self, base: Retriever, rho: float, seed: int = 0) -> None:
        if not 0.0 <= rho <= 1.0:
            raise AnnotationError(f'Invalid rho: {rho}. Must be between 0 and 1.')
        self.base = base
        self.rho = rho
        self.seed = seed
        self.vocabulary = base.vocabulary

    def retrieve(
        self, frame_index: int, context: RawTrajectory | None, vocabulary: Sequence[str]
    ) -> str:
        truth = self.base.retrieve(frame_index, context, vocabulary)
        rng = np.random.default_rng(h.seed_words(self.seed, frame_index))
        if rng.random() >= self.rho:
            return truth
        others = [label for label in vocabulary if label != truth]
        if not others:
            return truth
        return others[int(rng.integers(len(others)))]


def retrieve_label(
    frame_index: int,
    context: RawTrajectory | None,
    vocabulary: Sequence[str],
    retriever: Retriever,
) -> str:
    """
    Asks `retriever` for the label of one frame and checks it.

    Args:
        frame_index: Frame to label, usually a span midpoint.
        context: Trajectory the frame belongs to.
        vocabulary: Labels the answer must come from.
        retriever: Label source.

    Returns:
        str: A label from `vocabulary`.

    Raises:
        AnnotationError: If the vocabulary is empty or the answer is not in it.
    """
    if not vocabulary:
        raise AnnotationError('Label vocabulary is empty.')
    label = retriever.retrieve(frame_index, context, vocabulary)
    if label not in vocabulary:
        raise AnnotationError(f'Retrieved label {label!r} is not in the vocabulary.')
    return label


def propose_keyframes(traj: RawTrajectory, epsilon: float) -> list[Keyframe]:
    keyframes = gripper_events(traj)
    for arm in ('left', 'right'):
        keyframes.extend(
            Keyframe(i, 'geometric', arm)  # type: ignore[arg-type]
            for i in rdp_keyframes(traj.positions(arm), epsilon)  # type: ignore
        )
    return sorted(keyframes, key=_keyframe_order)


def annotate(
    traj: RawTrajectory,
    retriever: Retriever,
    epsilon: float = DEFAULT_EPSILON,
    delta_t: int = DEFAULT_DELTA_T,
    vocabulary: Sequence[str] | None = None,
    anomaly_frames: Iterable[int] = (),
    scenario: str | None = None,
    features: NDArray[np.float64] | None = None,
) -> AnnotatedEpisode:
    """
    Segments a trajectory and labels every segment.

    Args:
        traj: The raw trajectory.
        retriever: Label source queried at each span's midpoint frame.
        epsilon: RDP distance threshold in meters.
        delta_t: Minimum frame gap between kept keyframes.
        vocabulary: Allowed labels; defaults to the retriever's vocabulary.
        anomaly_frames: Frames showing a failure; segments containing one
            are flagged anomalous.
        scenario, features: Passed through onto the episode.

    Returns:
        AnnotatedEpisode: Contiguous segments with no repeated adjacent label.
    """
    vocab = tuple(vocabulary if vocabulary is not None else retriever.vocabulary)
    kept = proximity_filter(propose_keyframes(traj, epsilon), delta_t)
    starts = sorted({0} | {kf.frame_index for kf in kept})
    n = traj.n_frames
    spans: list[Segment] = []
    for start, nxt in zip(starts, starts[1:] + [n]):
        end = nxt - 1
        label = retrieve_label((start + end) // 2, traj, vocab, retriever)
        if spans and spans[-1].label == label:
            spans[-1] = Segment(spans[-1].start, end, label)
        else:
            spans.append(Segment(start, end, label))
    flagged = sorted(set(anomaly_frames))
    if flagged:
        spans = [
            Segment(
                s.start,
                s.end,
                s.label,
                any(s.start <= f <= s.end for f in flagged),
            )
            for s in spans
        ]
    logger.debug(
        '%s: %d keyframes kept, %d segments', traj.source_id, len(kept), len(spans)
    )
    return AnnotatedEpisode(tuple(spans), traj.source_id, scenario, features)


def boundary_recall(
    recovered: Sequence[int], truth: Sequence[int], delta_t: int
) -> float | None:
    """
    Share of true boundaries with a recovered boundary within `delta_t`.

    Returns:
        float | None: Recall in [0, 1], or None when `truth` is empty.
    """
    if not truth:
        return None
    hits = sum(1 for b in truth if any(abs(b - r) <= delta_t for r in recovered))
    return hits / len(truth)


def synthesize_trajectory(
    seed: int,
    n_segments: int = 3,
    vocabulary: Sequence[str] = SYNTHETIC_VOCABULARY,
    min_length: int = 100,
    max_length: int = 160,
) -> tuple[RawTrajectory, tuple[Segment, ...]]:
    """
    Builds a trajectory with planted subtask segments.

    Each segment moves one arm in a straight line to a grasp point over its
    first half, closes that gripper, then carries to a place point. The next
    segment starts by opening the gripper, so every planted boundary has a
    gripper event and a direction change.

    Returns:
        tuple: The trajectory and its ground-truth segments.
    """
    if len(vocabulary) < 2 and n_segments > 1:
        raise AnnotationError('Planting several segments needs two labels or more.')
    rng = np.random.default_rng(h.seed_words(seed))
    lengths = rng.integers(min_length, max_length + 1, size=n_segments)
    pos = {'left': np.array([-0.30, 0.0, 0.25]), 'right': np.array([0.30, 0.0, 0.25])}
    n = int(lengths.sum())
    track = {side: np.zeros((n, 3)) for side in pos}
    grip = {side: np.zeros(n, dtype=np.int8) for side in pos}
    truth: list[Segment] = []
    label = ''
    start = 0

    def far_point(anchor: NDArray[np.float64]) -> NDArray[np.float64]:
        while True:
            p = rng.uniform((-0.35, 0.20, 0.02), (0.35, 0.50, 0.12))
            if np.linalg.norm(p - anchor) >= 0.15:
                return p

    for length in (int(x) for x in lengths):
        label = str(rng.choice([v for v in vocabulary if v != label]))
        arm = 'left' if rng.random() < 0.5 else 'right'
        idle = 'right' if arm == 'left' else 'left'
        reach = length // 2
        grasp = far_point(pos[arm])
        place = far_point(grasp)
        steps = np.arange(1, reach + 1)[:, None] / reach
        track[arm][start : start + reach] = pos[arm] + (grasp - pos[arm]) * steps
        carry = length - reach
        steps = np.arange(1, carry + 1)[:, None] / carry
        track[arm][start + reach : start + length] = grasp + (place - grasp) * steps
        grip[arm][start + reach : start + length] = 1
        track[idle][start : start + length] = pos[idle]
        pos[arm] = place
        truth.append(Segment(start, start + length - 1, label))
        start += length

    traj = RawTrajectory(
        track['left'], track['right'], grip['left'], grip['right'], f'synthetic-{seed}'
    )
    return traj, tuple(truth)
