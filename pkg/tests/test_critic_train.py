import logging
import pickle

import numpy as np
import pytest

import src.helpers.helpers as h
from src.model.annotator import AnnotatedEpisode, Segment
from src.model.critic_train import (
    ANOMALY_CLASS,
    ANOMALY_TOKEN,
    LabeledFrame,
    LearnedCritic,
    _soft_check,
    compute_lmax,
    dequantize,
    eval_critic,
    label_episode,
    nearest_rank_percentile,
    quantize,
    read_frames,
    train_critic,
    value_target,
    write_frames,
)
from src.model.exceptions import LabelingError, TrainingError


def frame(x: float, target: int, goal: str = 'g', episode: str = 'e0', i: int = 0):
    return LabeledFrame(np.array([x]), goal, target, episode, i)


def separable_frames(goal: str = 'g') -> list[LabeledFrame]:
    lows = [frame(x, 0, goal, i=i) for i, x in enumerate(np.linspace(-1, -0.1, 20))]
    highs = [frame(x, 100, goal, i=i) for i, x in enumerate(np.linspace(0.1, 1, 20))]
    return lows + highs


def episode(*segments: Segment, source_id: str = 'ep') -> AnnotatedEpisode:
    return AnnotatedEpisode(tuple(segments), source_id)


@pytest.mark.parametrize(
    ('value', 'expected'),
    [(-1.0, 0), (0.0, 100), (-0.5, 50), (-0.375, 63), (-0.625, 38), (-0.004, 100)],
)
def test_quantize_rounds_halves_up(value, expected):
    assert quantize(value) == expected


def test_quantize_and_dequantize_reject_out_of_range():
    with pytest.raises(LabelingError):
        quantize(0.1)
    with pytest.raises(LabelingError):
        quantize(-1.01)
    with pytest.raises(LabelingError):
        dequantize(101)
    with pytest.raises(LabelingError):
        dequantize(True)
    assert dequantize(50) == -0.5
    assert dequantize(np.int64(100)) == 0.0


def test_value_target():
    assert value_target(0, 10, 10) == -1.0
    assert value_target(5, 10, 10) == -0.5
    assert value_target(10, 10, 10) == 0.0
    # segments longer than L_max saturate at -1
    assert value_target(0, 10, 5) == -1.0
    with pytest.raises(LabelingError):
        value_target(0, 10, 0)
    with pytest.raises(LabelingError):
        value_target(11, 10, 10)


def test_nearest_rank_percentile():
    assert nearest_rank_percentile(list(range(1, 11))) == 9
    assert nearest_rank_percentile(list(range(20, 0, -1))) == 18
    assert nearest_rank_percentile([5]) == 5
    assert nearest_rank_percentile([3, 1, 2], percent=100) == 3


def test_lmax_prefers_nominal_segments():
    corpus = [
        episode(Segment(0, 10, 'a'), Segment(11, 30, 'b', anomaly=True)),
        episode(Segment(0, 0, 'c'), Segment(1, 8, 'a')),
    ]
    assert compute_lmax(corpus) == {'a': 10, 'b': 19, 'c': 1}
    corpus.append(episode(Segment(0, 4, 'b')))
    assert compute_lmax(corpus)['b'] == 4
    with pytest.raises(LabelingError):
        compute_lmax([])


def test_label_episode_targets_rise_to_completion():
    frames = label_episode(
        episode(Segment(0, 10, 'a'), Segment(11, 15, 'b')), {'a': 10, 'b': 4}
    )
    assert [f.target for f in frames[:11]] == [10 * t for t in range(11)]
    assert [f.frame_index for f in frames] == list(range(16))
    assert [f.target for f in frames[11:]] == [0, 25, 50, 75, 100]
    assert {f.source_episode for f in frames} == {'ep'}
    assert frames[0].features.size == 0


def test_anomalous_segment_ends_in_anomaly_class():
    frames = label_episode(
        episode(Segment(0, 10, 'a', anomaly=True)), {'a': 10}, anomaly_window=3
    )
    assert [f.target for f in frames[:8]] == [10 * t for t in range(8)]
    assert [f.target for f in frames[8:]] == [ANOMALY_CLASS] * 3
    assert frames[-1].token == ANOMALY_TOKEN
    short = label_episode(
        episode(Segment(0, 4, 'a', anomaly=True)), {'a': 10}, anomaly_window=20
    )
    assert all(f.is_anomaly for f in short)


def test_label_episode_copies_features_onto_frames():
    features = np.arange(12, dtype=np.float64).reshape(6, 2)
    annotated = AnnotatedEpisode((Segment(0, 5, 'a'),), 'ep', 'ordered', features)
    frames = label_episode(annotated, {'a': 5})
    assert np.array_equal(np.vstack([f.features for f in frames]), features)
    assert {f.scenario for f in frames} == {'ordered'}


def test_label_episode_rejects_bad_input():
    with pytest.raises(LabelingError):
        label_episode(episode(Segment(0, 4, 'a')), {'b': 4})
    with pytest.raises(LabelingError):
        label_episode(episode(Segment(0, 4, 'a')), {'a': 4}, anomaly_window=0)


def test_trained_critic_separates_classes():
    critic = train_critic(separable_frames(), epochs=10, seed=0, corpus_id='toy')
    queries = [frame(-0.5, 0), frame(0.5, 100), frame(-0.9, 0), frame(0.9, 100)]
    assert critic.predict_frames(queries).tolist() == [0, 100, 0, 100]
    assert critic.goals == ('g',)
    assert len(critic.metadata['loss_history']) == 10
    assert critic.metadata['corpus_id'] == 'toy'
    assert critic.metadata['n_frames'] == 40


def test_single_class_goal_becomes_constant():
    frames = separable_frames() + [frame(x, ANOMALY_CLASS, 'h') for x in (0.0, 1.0)]
    critic = train_critic(frames, epochs=2, seed=0)
    assert critic.models['h'].constant == ANOMALY_CLASS
    assert critic.predict_frames([frame(7.0, 0, 'h')]).tolist() == [ANOMALY_CLASS]


def test_unseen_goal_predicts_bin_zero(caplog):
    critic = train_critic(separable_frames(), epochs=2, seed=0)
    with caplog.at_level(logging.WARNING):
        pred = critic.predict_frames([frame(0.5, 100, 'never seen')])
    assert pred.tolist() == [0]
    assert 'never seen' in caplog.text


def test_training_rejects_bad_input():
    with pytest.raises(TrainingError):
        train_critic([], epochs=1, seed=0)
    with pytest.raises(TrainingError):
        train_critic(separable_frames(), epochs=0, seed=0)
    with pytest.raises(TrainingError):
        train_critic(separable_frames(), epochs=1, seed=0, required_goals=['other'])


def test_critic_save_and_load(tmp_path):
    critic = train_critic(separable_frames(), epochs=3, seed=1)
    loaded = LearnedCritic.load(critic.save(tmp_path / 'critic.pkl'))
    queries = separable_frames()
    assert loaded.predict_frames(queries).tolist() == critic.predict_frames(
        queries
    ).tolist()
    bogus = tmp_path / 'bogus.pkl'
    bogus.write_bytes(pickle.dumps({'not': 'a critic'}))
    with pytest.raises(TrainingError):
        LearnedCritic.load(bogus)


class FixedPredictor:
    def __init__(self, classes) -> None:
        self.classes = np.asarray(classes, dtype=np.int64)

    def predict_frames(self, frames):
        return self.classes


def test_eval_critic_metrics():
    targets = [10, 20, ANOMALY_CLASS, ANOMALY_CLASS, 50]
    frames = [frame(0.0, t, i=i) for i, t in enumerate(targets)]
    metrics = eval_critic(
        FixedPredictor([12, 20, ANOMALY_CLASS, 30, ANOMALY_CLASS]), frames
    )
    assert metrics.bin_mae == 1.0
    assert metrics.anomaly_precision == 0.5
    assert metrics.anomaly_recall == 0.5
    assert (metrics.true_anomaly, metrics.false_anomaly) == (1, 1)
    assert (metrics.missed_anomaly, metrics.true_progress) == (1, 2)
    assert metrics.to_dict()['confusion']['true_progress'] == 2


def test_eval_critic_without_anomalies():
    frames = [frame(0.0, t) for t in (0, 100)]
    metrics = eval_critic(FixedPredictor([0, 90]), frames)
    assert metrics.bin_mae == 5.0
    assert metrics.anomaly_precision is None
    assert metrics.anomaly_recall is None
    with pytest.raises(LabelingError):
        eval_critic(FixedPredictor([]), [])


def test_rising_loss_is_reported(caplog):
    with caplog.at_level(logging.WARNING):
        _soft_check([1.0, 0.9, 0.8, 0.7])
    assert caplog.records == []
    with caplog.at_level(logging.WARNING):
        _soft_check([1.0, 0.9, 0.8, 0.9])
    assert 'rose 1 time' in caplog.text


def test_frames_file_keeps_the_anomaly_token(tmp_path):
    frames = [frame(0.25, 40, i=0), frame(0.5, ANOMALY_CLASS, i=1)]
    path = write_frames(tmp_path / 'frames.jsonl', frames)
    assert ANOMALY_TOKEN in path.read_text(encoding='utf-8')
    loaded = read_frames(path)
    assert [f.target for f in loaded] == [40, ANOMALY_CLASS]
    assert loaded[1].features.tolist() == [0.5]


def test_every_bin_survives_dequantize_then_quantize():
    assert [quantize(dequantize(b)) for b in range(101)] == list(range(101))


def test_value_target_is_monotone_in_time():
    rng = np.random.default_rng(h.seed_words(5))
    for _ in range(10_000):
        L = int(rng.integers(0, 300))
        L_max = int(rng.integers(1, 300))
        t1, t2 = sorted(int(t) for t in rng.integers(0, L + 1, size=2))
        v1, v2 = value_target(t1, L, L_max), value_target(t2, L, L_max)
        assert -1.0 <= v1 <= v2 <= 0.0
        assert quantize(v1) <= quantize(v2)
        assert value_target(L, L, L_max) == 0.0


@pytest.mark.parametrize('n_frames', [5, 20, 50])
def test_anomaly_window_covers_the_trailing_frames(n_frames):
    segment = Segment(0, n_frames - 1, 'a', anomaly=True)
    frames = label_episode(episode(segment), {'a': 50})
    flags = [f.is_anomaly for f in frames]
    tail = min(20, n_frames)
    assert flags == [False] * (n_frames - tail) + [True] * tail
