import json

import numpy as np
import pytest
from sklearn.model_selection import GroupShuffleSplit

import src.helpers.helpers as h
from src.controller.corpus import (
    annotate_demonstration,
    make_training_corpus,
    record_demonstration,
)
from src.controller.scheduler import SchedulerConfig, run_episode
from src.model import scenarios
from src.model.agents import AgentConfig, LearnedCriticAgent, build_agents
from src.model.critic_train import eval_critic, read_frames, train_critic
from src.model.exceptions import ConfigurationError
from src.model.sim_world import ScenarioConfig


def test_demonstration_finishes_the_script():
    demo = record_demonstration(ScenarioConfig.for_scenario('ordered', 0))
    assert demo.success
    assert len(demo.labels) == demo.trajectory.n_frames
    assert len(demo.features) == demo.trajectory.n_frames
    assert demo.anomaly_frames == ()
    assert demo.labels[0] == 'stack the large bowl on the plate'
    assert set(demo.labels) <= set(scenarios.vocabulary_texts('ordered'))


def test_demonstration_after_an_accident():
    demo = record_demonstration(
        ScenarioConfig.for_scenario('fallen', 0), anomaly_window=20
    )
    assert demo.success
    assert demo.anomaly_frames[0] == 40
    assert demo.anomaly_frames == tuple(range(40, 60))
    assert 'right the cup' in demo.labels


def test_annotated_demonstration_covers_every_frame():
    demo = record_demonstration(ScenarioConfig.for_scenario('ordered', 2))
    episode = annotate_demonstration(demo)
    assert episode.n_frames == demo.trajectory.n_frames
    assert episode.scenario == 'ordered'
    assert episode.features is demo.features


def test_corpus_files(tmp_path):
    corpus = make_training_corpus(['ordered'], 1, 0, tmp_path)
    manifest = json.loads((tmp_path / 'manifest.json').read_text(encoding='utf-8'))
    assert manifest['episode_seeds'] == [0]
    assert manifest['n_frames'] == len(corpus.frames)
    for name in manifest['files']:
        assert (tmp_path / name).is_file()
    assert 'episodes/ordered_0.seg' in manifest['files']
    frames = read_frames(tmp_path / 'frames.jsonl')
    assert len(frames) == len(corpus.frames)
    assert {f.scenario for f in frames} == {'ordered'}
    assert sum(e.n_frames for e in corpus.episodes) == len(frames)
    assert set(corpus.lmax) == {f.goal_text for f in frames}


def test_corpus_exports_world_states(tmp_path):
    corpus = make_training_corpus(['fallen'], 1, 0, tmp_path)
    manifest = json.loads((tmp_path / 'manifest.json').read_text(encoding='utf-8'))
    assert 'episodes/fallen_0.world.jsonl' in manifest['files']
    records = list(h.read_jsonl(tmp_path / 'episodes/fallen_0.world.jsonl'))
    n_frames = corpus.episodes[0].n_frames
    assert [r['tick'] for r in records] == list(range(n_frames))
    assert any('perturbation:knock_over:cup' in r['events'] for r in records)


def test_fallen_corpus_has_anomaly_frames():
    corpus = make_training_corpus(['fallen'], 1, 0)
    assert corpus.manifest['n_anomaly_frames'] > 0
    assert corpus.manifest['files'] == []


def test_corpus_rejects_bad_arguments():
    with pytest.raises(ConfigurationError):
        make_training_corpus(['ordered'], 0, 0)
    with pytest.raises(ConfigurationError):
        make_training_corpus(['kitchen'], 1, 0)


@pytest.mark.slow
def test_learned_critic_drives_an_episode(tmp_path):
    corpus = make_training_corpus(['ordered'], 3, 0)
    critic = train_critic(corpus.frames, epochs=3, seed=0)
    path = critic.save(tmp_path / 'critic.pkl')
    agents = build_agents(
        AgentConfig(critic='learned', critic_model=str(path)), 'ordered', seed=1
    )
    assert isinstance(agents.critic, LearnedCriticAgent)
    trace = run_episode(
        ScenarioConfig.for_scenario('ordered', 1),
        agents,
        SchedulerConfig(max_episode_ticks=60),
    )
    assert trace.fatal_error is None
    assert all(r.verdict is not None for r in trace.records)


@pytest.mark.slow
def test_learned_critic_tracks_progress_and_flags_accidents():
    corpus = make_training_corpus(['ordered', 'scattered', 'fallen'], 15, 0)
    frames = corpus.frames
    assert len(frames) >= 5000
    episodes = np.array([f.source_episode for f in frames])
    split = GroupShuffleSplit(n_splits=1, test_size=0.2, random_state=0)
    train_idx, test_idx = next(split.split(episodes, groups=episodes))
    config_data = h.load_ini()
    critic = train_critic(
        [frames[i] for i in train_idx],
        config_data.getint('CriticTrain', 'epochs'),
        seed=0,
        iterations_per_epoch=config_data.getint('CriticTrain', 'iterations_per_epoch'),
    )
    metrics = eval_critic(critic, [frames[i] for i in test_idx])
    assert metrics.bin_mae <= 10
    assert metrics.anomaly_recall >= 0.9
