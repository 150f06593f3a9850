import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedspk.errors import ConfigError, InputError
from fedspk.synth_data import (
    PopulationConfig,
    TrialSet,
    build_trials,
    export_population,
    generate_population,
    import_population,
    partition_to_clients,
    stack,
)

SMALL = dict(num_speakers=30, utterances_per_speaker=8, supervector_dim=40)


def test_zero_within_noise_gives_identical_utterances():
    pop = generate_population(PopulationConfig(within_speaker_noise=0.0, **SMALL))
    for rec in pop:
        assert (rec.utterances == rec.utterances[0]).all()


def test_generation_is_deterministic():
    a = generate_population(PopulationConfig(seed=5, **SMALL))
    b = generate_population(PopulationConfig(seed=5, **SMALL))
    c = generate_population(PopulationConfig(seed=6, **SMALL))
    assert all(np.array_equal(x.utterances, y.utterances) for x, y in zip(a, b))
    assert not np.array_equal(a[0].utterances, c[0].utterances)


def test_nearest_centroid_separable():
    cfg = PopulationConfig(num_speakers=120, utterances_per_speaker=10, supervector_dim=60,
                           class_separation=12.0, within_speaker_noise=0.1, speaker_spread=0.3, seed=2)
    pop = generate_population(cfg)
    x, side, _ = stack(pop, slice(0, 5))
    xt, side_t, _ = stack(pop, slice(5, None))
    centroids = np.stack([x[side == c].mean(axis=0) for c in range(cfg.num_side_classes)])
    pred = np.argmin(((xt[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(pred == side_t) >= 0.99


@settings(max_examples=20)
@given(st.integers(2, 60), st.integers(2, 8))
def test_classes_balanced(n, c):
    pop = generate_population(PopulationConfig(num_speakers=n, utterances_per_speaker=1, supervector_dim=4,
                                               num_side_classes=c, latent_dim=max(c, 4)))
    counts = np.bincount([r.side_class for r in pop], minlength=c)
    assert counts.max() - counts.min() <= 1


def test_values_finite_and_scale_with_noise():
    stds = []
    for w in (0.1, 1.0):
        pop = generate_population(PopulationConfig(within_speaker_noise=w, **SMALL))
        x = np.stack([r.utterances for r in pop])
        assert np.isfinite(x).all()
        stds.append((x - x.mean(axis=1, keepdims=True)).std())
    assert stds[1] > 5 * stds[0]


def test_config_validation():
    with pytest.raises(ConfigError):
        PopulationConfig(num_side_classes=1)
    with pytest.raises(ConfigError):
        PopulationConfig(latent_dim=3, num_side_classes=6)


# -- partitioning ------------------------------------------------------------------


def test_default_partition_one_client_per_speaker():
    pop = generate_population(PopulationConfig(**SMALL))
    clients = partition_to_clients(pop)
    assert len(clients) == len(pop)
    assert sum(len(c) for c in clients) == 30 * 8
    ids = np.concatenate([c.example_ids for c in clients])
    assert len(np.unique(ids)) == len(ids)


def test_multi_client_partition_preserves_data():
    pop = generate_population(PopulationConfig(**SMALL))
    clients = partition_to_clients(pop, clients_per_speaker=3)
    ids = np.concatenate([c.example_ids for c in clients])
    assert sorted(ids) == sorted(np.concatenate([r.utterance_ids() for r in pop]))
    x = np.concatenate([c.x for c in clients])
    assert np.isclose(x.sum(), np.concatenate([r.utterances for r in pop]).sum())
    with pytest.raises(InputError):
        partition_to_clients([])


# -- trials ------------------------------------------------------------------------


def test_trials_without_impostors():
    pop = generate_population(PopulationConfig(**SMALL))
    t = build_trials(pop, 5, 0.0, np.random.default_rng(0))
    assert t.is_target.all()
    assert len(t) == 30 * 3


def test_trial_count_and_disjointness():
    pop = generate_population(PopulationConfig(**SMALL))
    t = build_trials(pop, 3, 1.7, np.random.default_rng(0))
    targets = 30 * 5
    assert t.is_target.sum() == targets
    assert len(t) == targets + int(np.floor(targets * 1.7))
    for pid, tid, tgt in zip(t.profile_ids, t.test_ids, t.is_target):
        assert tid not in t.enroll_ids[pid]
        assert (tid // 1_000_000 == pid) == tgt


def test_trials_need_enough_utterances():
    pop = generate_population(PopulationConfig(**SMALL))
    with pytest.raises(InputError):
        build_trials(pop, 8, 1.0, np.random.default_rng(0))


def test_trialset_round_trip(tmp_path):
    pop = generate_population(PopulationConfig(**SMALL))
    t = build_trials(pop, 3, 1.0, np.random.default_rng(0))
    t.save(tmp_path / "t.npz")
    u = TrialSet.load(tmp_path / "t.npz")
    assert np.array_equal(u.test_x, t.test_x) and np.array_equal(u.is_target, t.is_target)
    assert all(np.array_equal(u.profiles[k], t.profiles[k]) for k in t.profiles)


def test_csv_round_trip_exact(tmp_path):
    pop = generate_population(PopulationConfig(num_speakers=4, utterances_per_speaker=3, supervector_dim=6))
    export_population(pop, tmp_path / "p.csv")
    back = import_population(tmp_path / "p.csv")
    for a, b in zip(pop, back):
        assert a.speaker_id == b.speaker_id and a.side_class == b.side_class
        assert np.array_equal(a.utterances, b.utterances)
