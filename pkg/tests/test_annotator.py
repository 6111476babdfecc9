import numpy as np
import pytest

import src.helpers.helpers as h
from src.model.annotator import (
    SYNTHETIC_VOCABULARY,
    AnnotatedEpisode,
    Keyframe,
    NoisyRetriever,
    OracleRetriever,
    RawTrajectory,
    Segment,
    annotate,
    boundary_recall,
    gripper_events,
    perpendicular_distances,
    proximity_filter,
    rdp_keyframes,
    retrieve_label,
    synthesize_trajectory,
)
from src.model.exceptions import AnnotationError


def reference_rdp(pts, epsilon: float) -> list[int]:
    """Textbook recursion, one distance call per point."""

    def split(first: int, last: int) -> list[int]:
        if last - first < 2:
            return []
        best, index = -1.0, first
        for i in range(first + 1, last):
            d = perpendicular_distances(pts[i : i + 1], pts[first], pts[last])[0]
            if d > best:
                best, index = d, i
        if best <= epsilon:
            return []
        return split(first, index) + [index] + split(index, last)

    return [0] + split(0, len(pts) - 1) + [len(pts) - 1]


def truth_labels(truth: tuple[Segment, ...]) -> list[str]:
    return AnnotatedEpisode(truth, 'truth').label_map()


def test_rdp_on_a_straight_line_keeps_endpoints():
    pts = np.linspace((0.0, 0.0, 0.0), (1.0, 0.5, 0.2), 10)
    assert rdp_keyframes(pts, 0.01) == [0, 9]


def test_rdp_finds_the_corner():
    leg1 = np.linspace((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 11)
    leg2 = np.linspace((1.0, 0.1, 0.0), (1.0, 1.0, 0.0), 10)
    assert rdp_keyframes(np.vstack((leg1, leg2)), 0.01) == [0, 10, 20]


def test_rdp_rejects_bad_input():
    with pytest.raises(AnnotationError):
        rdp_keyframes([[0.0, 0.0, 0.0]], 0.01)
    with pytest.raises(AnnotationError):
        rdp_keyframes([0.0, 1.0, 2.0], 0.01)
    with pytest.raises(AnnotationError):
        rdp_keyframes([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 0.0)


def test_rdp_matches_the_recursive_definition():
    rng = np.random.default_rng(h.seed_words(11))
    for i in range(1000):
        n = int(rng.integers(2, 501 if i % 10 == 5 else 60))
        pts = np.cumsum(rng.normal(scale=0.05, size=(n, 3)), axis=0)
        if i % 10 == 0 and n > 3:
            pts[2] = pts[1]
        epsilon = float(rng.uniform(0.005, 0.1))
        assert rdp_keyframes(pts, epsilon) == reference_rdp(pts, epsilon), i


def test_large_epsilon_keeps_only_the_endpoints():
    pts = np.random.default_rng(h.seed_words(3)).uniform(size=(40, 3))
    assert rdp_keyframes(pts, 10.0) == [0, 39]


def test_gripper_events_mark_state_changes():
    arr = np.zeros((6, 8))
    arr[:, 6] = [0, 0, 1, 1, 0, 0]
    arr[:, 7] = [0, 0, 0, 1, 1, 1]
    events = gripper_events(RawTrajectory.from_array(arr))
    assert [(k.frame_index, k.arm) for k in events] == [
        (2, 'left'),
        (3, 'right'),
        (4, 'left'),
    ]
    assert {k.source for k in events} == {'gripper'}


def test_proximity_filter_is_greedy():
    keyframes = [Keyframe(i, 'geometric', 'left') for i in (0, 10, 30, 31, 65)]
    kept = proximity_filter(keyframes, 30)
    assert [k.frame_index for k in kept] == [0, 30, 65]
    with pytest.raises(AnnotationError):
        proximity_filter(keyframes, 0)


def test_proximity_filter_prefers_gripper_keyframes_on_ties():
    keyframes = [Keyframe(5, 'geometric', 'left'), Keyframe(5, 'gripper', 'right')]
    assert proximity_filter(keyframes, 30) == [Keyframe(5, 'gripper', 'right')]


def test_annotation_recovers_planted_segments():
    agreements = []
    for seed in range(100):
        traj, truth = synthesize_trajectory(seed)
        labels = truth_labels(truth)
        episode = annotate(traj, OracleRetriever(labels, SYNTHETIC_VOCABULARY))
        true_bounds = [seg.start for seg in truth[1:]]
        assert boundary_recall(episode.boundaries, true_bounds, 30) == 1.0, seed
        assert boundary_recall(true_bounds, episode.boundaries, 30) == 1.0, seed
        assert [s.label for s in episode.segments] == [s.label for s in truth]
        assert episode.n_frames == traj.n_frames
        recovered = episode.label_map()
        agreements.append(np.mean([a == b for a, b in zip(recovered, labels)]))
    assert np.mean(agreements) >= 0.95


def test_boundary_recall():
    assert boundary_recall([100, 250], [98, 200, 260], 30) == pytest.approx(2 / 3)
    assert boundary_recall([], [50], 30) == 0.0
    assert boundary_recall([10], [], 30) is None


def test_anomaly_frames_flag_their_segments():
    traj, truth = synthesize_trajectory(4)
    flagged = truth[1].start + 5
    episode = annotate(
        traj, OracleRetriever(truth_labels(truth)), anomaly_frames=[flagged]
    )
    assert [s.anomaly for s in episode.segments] == [
        s.start <= flagged <= s.end for s in episode.segments
    ]
    assert sum(s.anomaly for s in episode.segments) == 1


def test_annotated_episode_is_validated():
    with pytest.raises(AnnotationError):
        AnnotatedEpisode((), 'ep')
    with pytest.raises(AnnotationError):
        AnnotatedEpisode((Segment(1, 4, 'a'),), 'ep')
    with pytest.raises(AnnotationError):
        AnnotatedEpisode((Segment(0, 4, 'a'), Segment(6, 9, 'b')), 'ep')
    with pytest.raises(AnnotationError):
        AnnotatedEpisode((Segment(0, 4, 'a'), Segment(5, 9, 'a')), 'ep')
    with pytest.raises(AnnotationError):
        AnnotatedEpisode((Segment(0, 4, 'a'),), 'ep', features=np.zeros((3, 2)))


def test_segment_file_keeps_labels_and_flags(tmp_path):
    episode = AnnotatedEpisode(
        (Segment(0, 9, 'open the drawer'), Segment(10, 19, 'wipe the table', True)),
        'demo-1',
    )
    loaded = AnnotatedEpisode.load(episode.save(tmp_path / 'demo.seg'), 'ordered')
    assert loaded.segments == episode.segments
    assert loaded.source_id == 'demo-1'
    assert loaded.scenario == 'ordered'
    assert loaded.boundaries == (10,)


def test_trajectory_file(tmp_path):
    traj, _ = synthesize_trajectory(3)
    loaded = RawTrajectory.load(traj.save(tmp_path / 'demo.traj'))
    assert loaded.source_id == 'synthetic-3'
    np.testing.assert_array_equal(loaded.to_array(), traj.to_array())

    bad = tmp_path / 'bad.traj'
    bad.write_text('1 2 3\n4 5 6\n', encoding='utf-8')
    with pytest.raises(AnnotationError):
        RawTrajectory.load(bad)
    with pytest.raises(AnnotationError):
        RawTrajectory.from_array(np.zeros((1, 8)))


def test_noisy_retriever():
    vocabulary = ('a', 'b', 'c')
    base = OracleRetriever(['a'] * 50, vocabulary)
    clean = NoisyRetriever(base, 0.0, seed=1)
    assert {clean.retrieve(i, None, vocabulary) for i in range(50)} == {'a'}
    wrong = NoisyRetriever(base, 1.0, seed=1)
    answers = [wrong.retrieve(i, None, vocabulary) for i in range(50)]
    assert 'a' not in answers
    assert answers == [wrong.retrieve(i, None, vocabulary) for i in range(50)]
    with pytest.raises(AnnotationError):
        NoisyRetriever(base, 1.5)


def test_retrieve_label_checks_the_vocabulary():
    retriever = OracleRetriever(['x', 'x'])
    assert retrieve_label(0, None, ('x',), retriever) == 'x'
    with pytest.raises(AnnotationError):
        retrieve_label(0, None, (), retriever)
    with pytest.raises(AnnotationError):
        retrieve_label(1, None, ('a', 'b'), retriever)


def test_noisy_labels_still_give_a_valid_episode():
    for seed in range(100):
        traj, truth = synthesize_trajectory(seed)
        noisy = NoisyRetriever(
            OracleRetriever(truth_labels(truth), SYNTHETIC_VOCABULARY), 0.2, seed
        )
        episode = annotate(traj, noisy)
        segments = episode.segments
        assert segments[0].start == 0
        assert segments[-1].end == traj.n_frames - 1
        for prev, nxt in zip(segments, segments[1:]):
            assert nxt.start == prev.end + 1
            assert nxt.label != prev.label
        assert {s.label for s in segments} <= set(SYNTHETIC_VOCABULARY)
