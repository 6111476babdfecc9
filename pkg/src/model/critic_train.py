"""
Progress-value labeling and the learned discrete critic.

Frames of an annotated subtask segment get the value target
max(-1, (t - L) / L_max), quantized into 101 bins, so -1.0 marks the start
of a subtask and 0.0 its completion. The trailing window of an anomalous
segment gets the `<aci>` anomaly class instead. The learned critic is one
multinomial classifier per goal over 102 classes (101 bins + anomaly).
"""

import logging
import math
import pickle
import warnings
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from numpy.typing import NDArray
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import log_loss
from sklearn.preprocessing import StandardScaler

import src.helpers.helpers as h
from src.model import scenarios
from src.model.annotator import AnnotatedEpisode
from src.model.exceptions import EvaluationError, LabelingError, TrainingError
from src.model.goals import SubtaskGoal
from src.model.sim_world import (
    SIDES,
    Observation,
    ObservationLayout,
    decode_observation,
    goal_targets,
)

logger = logging.getLogger(__name__)

NUM_BINS = 101
ANOMALY_CLASS = 101
NUM_CLASSES = 102
ANOMALY_TOKEN = '<aci>'
DEFAULT_ANOMALY_WINDOW = 20
GOAL_FEATURES = 19

LmaxTable = dict[str, int]


def nearest_rank_percentile(values: Sequence[int], percent: int = 90) -> int:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    ordered = sorted(values)
    rank = max(1, -(-percent * len(ordered) // 100))
    return ordered[rank - 1]


def compute_lmax(corpus: Sequence[AnnotatedEpisode]) -> LmaxTable:
    """
    Robust per-label maximum segment length (nearest-rank p90).

    Segment length counts frame steps, `end - start`, floored at 1. Only
    nominal segments are used; a label seen solely in anomalous segments
    falls back to those so every label gets an entry.

    Raises:
        LabelingError: If the corpus is empty.
    """
    if not corpus:
        raise LabelingError('Cannot compute L_max from an empty corpus.')
    nominal: dict[str, list[int]] = defaultdict(list)
    anomalous: dict[str, list[int]] = defaultdict(list)
    for episode in corpus:
        for seg in episode.segments:
            bucket = anomalous if seg.anomaly else nominal
            bucket[seg.label].append(max(1, seg.end - seg.start))
    labels = sorted(set(nominal) | set(anomalous))
    return {
        label: nearest_rank_percentile(nominal.get(label) or anomalous[label])
        for label in labels
    }


def value_target(t: int, L: int, L_max: int) -> float:
    """
    Progress value of frame `t` in a segment of `L` frame steps.

    Args:
        t: Frame index within the segment, 0 at its first frame.
        L: Segment length in frame steps, `end - start`.
        L_max: Robust maximum length for the segment label.

    Returns:
        float: `(t - L) / L_max` clipped below at -1.0, so the last frame
            of every segment is 0.0.

    Raises:
        LabelingError: If `L_max` is below 1 or `t` lies outside `0..L`.
    """
    if L_max < 1:
        raise LabelingError(f'Invalid L_max: {L_max}. Must be >= 1.')
    if not 0 <= t <= L:
        raise LabelingError(f'Invalid frame index: {t}. Must be between 0 and {L}.')
    return max(-1.0, (t - L) / L_max)


def quantize(v: float) -> int:
    """Bin of a value in [-1, 0]: round((v + 1) * 100), halves rounded up."""
    if not -1.0 <= v <= 0.0:
        raise LabelingError(f'Invalid value: {v}. Must be between -1.0 and 0.0.')
    return min(NUM_BINS - 1, int(math.floor((v + 1.0) * 100.0 + 0.5)))


def dequantize(bin_index: int) -> float:
    """
    Value a bin stands for, `bin_index / 100 - 1`.

    Raises:
        LabelingError: If `bin_index` is not an int in `0..100`.
    """
    if isinstance(bin_index, bool) or not isinstance(bin_index, int | np.integer):
        raise LabelingError(f'Received {type(bin_index).__name__} but expected int.')
    if not 0 <= bin_index <= NUM_BINS - 1:
        raise LabelingError(f'Invalid bin: {bin_index}. Must be between 0 and 100.')
    return int(bin_index) / 100.0 - 1.0


def target_token(target: int) -> str:
    return ANOMALY_TOKEN if target == ANOMALY_CLASS else str(target)


def parse_target_token(token: str) -> int:
    if token == ANOMALY_TOKEN:
        return ANOMALY_CLASS
    value = int(token)
    if not 0 <= value <= NUM_BINS - 1:
        raise LabelingError(f'Invalid target token: {token!r}.')
    return value


@dataclass(frozen=True, eq=False)
class LabeledFrame:
    """
    One training example. `target` is a bin in 0..100 or ANOMALY_CLASS;
    `goal_text` is the plain rendering of the active subtask.
    """

    features: NDArray[np.float64]
    goal_text: str
    target: int
    source_episode: str
    frame_index: int
    scenario: str | None = None

    @property
    def is_anomaly(self) -> bool:
        return self.target == ANOMALY_CLASS

    @property
    def token(self) -> str:
        return target_token(self.target)

    def to_record(self) -> dict[str, Any]:
        return {
            'episode': self.source_episode,
            'frame': self.frame_index,
            'scenario': self.scenario,
            'goal': self.goal_text,
            'target': self.token,
            'features': [float(x) for x in self.features],
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> 'LabeledFrame':
        return cls(
            features=np.asarray(record['features'], dtype=np.float64),
            goal_text=record['goal'],
            target=parse_target_token(record['target']),
            source_episode=record['episode'],
            frame_index=int(record['frame']),
            scenario=record.get('scenario'),
        )


def label_episode(
    episode: AnnotatedEpisode,
    lmax: LmaxTable,
    anomaly_window: int = DEFAULT_ANOMALY_WINDOW,
) -> list[LabeledFrame]:
    """
    Per-frame targets for every segment of one annotated episode.

    In an anomalous segment the last min(anomaly_window, frames) frames carry
    the anomaly class and earlier frames keep their nominal value targets.

    Args:
        episode: Segmented episode; its features, when present, are copied
            onto the frames.
        lmax: Per-label robust maximum segment length.
        anomaly_window: Number of trailing anomaly frames per anomalous
            segment.

    Returns:
        list[LabeledFrame]: One frame per episode frame, in frame order.

    Raises:
        LabelingError: If a segment label is missing from `lmax`.
    """
    if anomaly_window < 1:
        raise LabelingError(f'Invalid anomaly window: {anomaly_window}. Must be >= 1.')
    frames: list[LabeledFrame] = []
    empty = np.zeros(0, dtype=np.float64)
    for seg in episode.segments:
        if seg.label not in lmax:
            raise LabelingError(f'Label {seg.label!r} has no L_max entry.')
        L = seg.end - seg.start
        n = L + 1
        window_start = n - min(anomaly_window, n) if seg.anomaly else n
        for t in range(n):
            if t >= window_start:
                target = ANOMALY_CLASS
            else:
                target = quantize(value_target(t, L, lmax[seg.label]))
            frame_index = seg.start + t
            features = (
                empty if episode.features is None else episode.features[frame_index]
            )
            frames.append(
                LabeledFrame(
                    features,
                    seg.label,
                    target,
                    episode.source_id,
                    frame_index,
                    episode.scenario,
                )
            )
    return frames


def goal_features(
    features: NDArray[np.float64], layout: ObservationLayout, goal: SubtaskGoal | None
) -> NDArray[np.float64]:
    """
    Goal-relative features: per arm the offset and distance to the grasp and
    to the place point, then the goal object's upright/held/in-bag flags.
    """
    out = np.zeros(GOAL_FEATURES, dtype=np.float64)
    if goal is None or goal.verb == 'follow_instruction' or features.size != layout.dim:
        return out
    world = decode_observation(Observation(features, 0, layout))
    try:
        grasp, place = goal_targets(world, goal)
    except EvaluationError:
        return out
    grasp_v = np.asarray(grasp)
    place_v = np.asarray(place if place is not None else grasp)
    k = 0
    for side in SIDES:
        ee = np.asarray(world.arm(side).ee_position)
        for target in (grasp_v, place_v):
            out[k : k + 3] = ee - target
            out[k + 3] = np.linalg.norm(ee - target)
            k += 4
    obj = world.obj(goal.object)
    out[16] = float(obj.upright)
    out[17] = float(world.holder(obj.id) is not None)
    out[18] = float(obj.in_bag)
    return out


def frame_matrix(frames: Sequence[LabeledFrame]) -> NDArray[np.float64]:
    rows = []
    for frame in frames:
        goal = None
        layout = None
        if frame.scenario is not None:
            goal = scenarios.resolve_goal(frame.goal_text, frame.scenario)
            layout = ObservationLayout.for_scenario(frame.scenario)
        extra = (
            goal_features(frame.features, layout, goal)
            if layout is not None
            else np.zeros(GOAL_FEATURES)
        )
        rows.append(np.concatenate((frame.features, extra)))
    return np.vstack(rows)


@dataclass
class GoalModel:
    """Classifier for one goal, or a constant class when training saw one."""

    scaler: StandardScaler | None = None
    model: LogisticRegression | None = None
    constant: int | None = None

    def proba(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        full = np.zeros((len(X), NUM_CLASSES), dtype=np.float64)
        if self.constant is not None:
            full[:, self.constant] = 1.0
            return full
        assert self.scaler is not None and self.model is not None
        probs = self.model.predict_proba(self.scaler.transform(X))
        full[:, self.model.classes_] = probs
        return full


class FramePredictor(Protocol):
    def predict_frames(self, frames: Sequence[LabeledFrame]) -> NDArray[np.int64]: ...


@dataclass
class LearnedCritic:
    models: dict[str, GoalModel]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def goals(self) -> tuple[str, ...]:
        return tuple(sorted(self.models))

    def predict_classes(
        self, X: NDArray[np.float64], goal_text: str
    ) -> NDArray[np.int64]:
        """Argmax over the 102 classes; ties go to the lowest index."""
        return np.argmax(self.models[goal_text].proba(X), axis=1).astype(np.int64)

    def predict_frames(self, frames: Sequence[LabeledFrame]) -> NDArray[np.int64]:
        out = np.full(len(frames), -1, dtype=np.int64)
        by_goal: dict[str, list[int]] = defaultdict(list)
        for i, frame in enumerate(frames):
            by_goal[frame.goal_text].append(i)
        for goal_text, idx in by_goal.items():
            if goal_text not in self.models:
                logger.warning('No critic model for goal %r, using bin 0', goal_text)
                out[idx] = 0
                continue
            X = frame_matrix([frames[i] for i in idx])
            out[idx] = self.predict_classes(X, goal_text)
        return out

    def predict(self, obs: Observation, goal: SubtaskGoal) -> int | None:
        """Class for one observation, or None when the goal was never trained."""
        key = goal.plain_text
        if key not in self.models:
            return None
        extra = goal_features(obs.features, obs.layout, goal.plain())
        X = np.concatenate((obs.features, extra))[None, :]
        return int(self.predict_classes(X, key)[0])

    def save(self, filepath: str | Path) -> Path:
        filepath = Path(filepath)
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(filepath, 'wb') as f:
            pickle.dump(self, f)
        return filepath

    @classmethod
    def load(cls, filepath: str | Path) -> 'LearnedCritic':
        with open(filepath, 'rb') as f:
            critic = pickle.load(f)
        if not isinstance(critic, cls):
            raise TrainingError(f'{filepath} does not hold a learned critic.')
        return critic


def _soft_check(losses: Sequence[float]) -> None:
    quarter = max(1, len(losses) // 4)
    tail = losses[-quarter - 1 :]
    rises = [b - a for a, b in zip(tail, tail[1:]) if b - a > 1e-9]
    if rises:
        logger.warning(
            'Training loss rose %d time(s) in the final quarter (max +%.3g)',
            len(rises),
            max(rises),
        )


def train_critic(
    frames: Sequence[LabeledFrame],
    epochs: int,
    seed: int,
    *,
    iterations_per_epoch: int = 5,
    regularization: float = 1.0,
    required_goals: Iterable[str] = (),
    corpus_id: str = '',
) -> LearnedCritic:
    """
    Fits one warm-started multinomial logistic model per goal.

    Each epoch runs `iterations_per_epoch` more lbfgs iterations on every
    goal and logs the mean training log loss. A goal whose frames all carry
    one class becomes a constant predictor.

    Args:
        frames: Labeled frames with observation features.
        epochs: Number of warm-started refits.
        seed: Seed for every per-goal model.
        iterations_per_epoch: lbfgs iterations added per epoch.
        regularization: Inverse regularization strength `C`.
        required_goals: Goals that must appear in `frames`.
        corpus_id: Identifier stored with the checkpoint.

    Returns:
        LearnedCritic: The per-goal predictors.

    Raises:
        TrainingError: If `frames` is empty or a required goal has no frames.
    """
    if not frames:
        raise TrainingError('Cannot train a critic without frames.')
    if epochs < 1:
        raise TrainingError(f'Invalid epochs: {epochs}. Must be >= 1.')
    groups: dict[str, list[LabeledFrame]] = defaultdict(list)
    for frame in frames:
        groups[frame.goal_text].append(frame)
    missing = [g for g in required_goals if g not in groups]
    if missing:
        raise TrainingError(f'No training frames for goal(s): {", ".join(missing)}')

    models: dict[str, GoalModel] = {}
    data: dict[str, tuple[NDArray[np.float64], NDArray[np.int64]]] = {}
    for goal_text in sorted(groups):
        group = groups[goal_text]
        X = frame_matrix(group)
        y = np.asarray([f.target for f in group], dtype=np.int64)
        classes = np.unique(y)
        if classes.size == 1:
            models[goal_text] = GoalModel(constant=int(classes[0]))
            continue
        scaler = StandardScaler().fit(X)
        model = LogisticRegression(
            C=regularization,
            solver='lbfgs',
            max_iter=iterations_per_epoch,
            warm_start=True,
            random_state=seed,
        )
        models[goal_text] = GoalModel(scaler=scaler, model=model)
        data[goal_text] = (scaler.transform(X), y)

    history: list[float] = []
    if data:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', ConvergenceWarning)
            for epoch in range(epochs):
                losses = []
                for goal_text, (Xs, y) in data.items():
                    model = models[goal_text].model
                    assert model is not None
                    model.fit(Xs, y)
                    proba = model.predict_proba(Xs)
                    losses.append(log_loss(y, proba, labels=model.classes_))
                history.append(float(np.mean(losses)))
                logger.info(
                    'epoch %d/%d: mean log loss %.4f', epoch + 1, epochs, history[-1]
                )
        _soft_check(history)

    return LearnedCritic(
        models,
        {
            'corpus_id': corpus_id,
            'epochs': epochs,
            'seed': seed,
            'n_frames': len(frames),
            'loss_history': history,
        },
    )


@dataclass(frozen=True, slots=True)
class CriticMetrics:
    """
    Held-out scores. `bin_mae` covers frames whose target and prediction are
    both bins; precision/recall are None when their denominator is zero.
    """

    bin_mae: float | None
    anomaly_precision: float | None
    anomaly_recall: float | None
    true_anomaly: int
    false_anomaly: int
    missed_anomaly: int
    true_progress: int
    n_frames: int

    def to_dict(self) -> dict[str, Any]:
        return {
            'bin_mae': self.bin_mae,
            'anomaly_precision': self.anomaly_precision,
            'anomaly_recall': self.anomaly_recall,
            'confusion': {
                'true_anomaly': self.true_anomaly,
                'false_anomaly': self.false_anomaly,
                'missed_anomaly': self.missed_anomaly,
                'true_progress': self.true_progress,
            },
            'n_frames': self.n_frames,
        }


def eval_critic(
    critic: FramePredictor, heldout: Sequence[LabeledFrame]
) -> CriticMetrics:
    """
    Scores a critic on held-out frames.

    Bin MAE is averaged over frames where neither prediction nor target is
    the anomaly class. Precision and recall are None when undefined.

    Returns:
        CriticMetrics: Error and anomaly counts over `heldout`.

    Raises:
        LabelingError: If `heldout` is empty.
    """
    if not heldout:
        raise LabelingError('Held-out set is empty.')
    pred = np.asarray(critic.predict_frames(heldout), dtype=np.int64)
    target = np.asarray([f.target for f in heldout], dtype=np.int64)
    pred_a = pred == ANOMALY_CLASS
    target_a = target == ANOMALY_CLASS
    both_bins = ~pred_a & ~target_a
    mae = None
    if both_bins.any():
        mae = float(np.mean(np.abs(pred[both_bins] - target[both_bins])))
    tp = int(np.sum(pred_a & target_a))
    fp = int(np.sum(pred_a & ~target_a))
    fn = int(np.sum(~pred_a & target_a))
    tn = int(np.sum(both_bins))
    return CriticMetrics(
        bin_mae=mae,
        anomaly_precision=tp / (tp + fp) if tp + fp else None,
        anomaly_recall=tp / (tp + fn) if tp + fn else None,
        true_anomaly=tp,
        false_anomaly=fp,
        missed_anomaly=fn,
        true_progress=tn,
        n_frames=len(heldout),
    )


def write_frames(filepath: str | Path, frames: Iterable[LabeledFrame]) -> Path:
    return h.write_jsonl(filepath, (f.to_record() for f in frames))


def read_frames(filepath: str | Path) -> list[LabeledFrame]:
    return [LabeledFrame.from_record(r) for r in h.read_jsonl(filepath)]
