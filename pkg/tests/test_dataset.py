import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from himoe.codec import Kind
from himoe.dataset import (MAGIC, RECORD_DTYPE, Dataset, DatasetManifest, build_dataset,
                           stats_from_dict, stats_to_dict)
from himoe.embodiments import get_embodiment
from himoe.objectives import EEF, JOINT

SMALL = DatasetManifest(embodiments=["joint_a", "eef_a"], n_episodes=12, seed=3, horizon=4)


@pytest.fixture(scope="module")
def small():
    return build_dataset(SMALL)


def test_fifty_fifty_counts():
    m = DatasetManifest(embodiments=["joint_a", "eef_a"], n_episodes=100)
    c = m.episode_counts()
    assert abs(c["joint_a"] - 50) <= 1 and abs(c["eef_a"] - 50) <= 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), st.integers(1, 300))
def test_schedule_tracks_weights(raw, n):
    w = list(np.asarray(raw) / sum(raw))
    m = DatasetManifest(embodiments=["joint_a"] * len(w), weights=w, n_episodes=n)
    counts = np.bincount(m.schedule(), minlength=len(w))
    assert counts.sum() == n
    assert np.all(np.abs(counts - n * np.asarray(w)) <= 1 + 1e-9)


def test_manifest_validation():
    with pytest.raises(ValueError):
        DatasetManifest(weights=[0.7, 0.7])
    with pytest.raises(ValueError):
        DatasetManifest(weights=[1.0])
    with pytest.raises(ValueError):
        DatasetManifest(normalization="per_batch")
    with pytest.raises(ValueError):
        build_dataset(DatasetManifest(n_episodes=0))
    assert DatasetManifest.from_dict(SMALL.to_dict()) == SMALL


def test_same_manifest_same_bytes(small):
    assert build_dataset(SMALL).to_bytes() == small.to_bytes()
    other = build_dataset(DatasetManifest(**{**SMALL.to_dict(), "seed": 4}))
    assert other.to_bytes() != small.to_bytes()


def test_byte_round_trip(small, tmp_path):
    blob = small.to_bytes()
    assert blob.startswith(MAGIC)
    p = tmp_path / "d.bin"
    small.save(p)
    back = Dataset.load(p)
    assert back.to_bytes() == blob
    np.testing.assert_array_equal(back.norm_actions, small.norm_actions)
    with pytest.raises(ValueError):
        Dataset.from_bytes(b"nope" + blob)


def test_records_occupy_own_slots_only(small):
    r = small.records
    for k, name in enumerate(SMALL.embodiments):
        e = get_embodiment(name)
        sel = r["emb"] == k
        amask = e.mapped_mask(Kind.ACTION)
        assert not r["action"][sel][:, ~amask].any()
        np.testing.assert_array_equal(r["state_mask"][sel].astype(bool),
                                      np.broadcast_to(e.mapped_mask(Kind.STATE), (sel.sum(), 24)))
    assert set(small.action_space[r["emb"] == 0]) == {JOINT}
    assert set(small.action_space[r["emb"] == 1]) == {EEF}


def test_chunks_pad_with_last_action(small):
    r = small.records
    last = np.nonzero(np.diff(r["episode"]))[0][0]
    ch = small.raw_chunk(last - 1)
    np.testing.assert_array_equal(ch[0], r["action"][last - 1])
    for j in range(1, 4):
        np.testing.assert_array_equal(ch[j], r["action"][last])


def test_per_embodiment_normalization(small):
    assert set(small.stats) == {"joint_a", "eef_a"}
    for k, name in enumerate(SMALL.embodiments):
        sel = small.records["emb"] == k
        amask = get_embodiment(name).mapped_mask(Kind.ACTION)
        a = small.norm_actions[sel][:, amask]
        np.testing.assert_allclose(a.mean(0), 0.0, atol=1e-9)
    g = build_dataset(DatasetManifest(**{**SMALL.to_dict(), "normalization": "global"}))
    assert set(g.stats) == {"global"}


def test_batch_shapes_and_stats_serialization(small):
    b = small.batch(np.arange(5))
    assert b.state.shape == (5, 48) and b.actions.shape == (5, 4, 24)
    assert b.ctx.obs.shape[0] == 5
    back = stats_from_dict(stats_to_dict(small.stats))
    for scope in small.stats:
        np.testing.assert_array_equal(back[scope]["action"].mean, small.stats[scope]["action"].mean)


def test_validation_manifest_is_disjoint():
    v = SMALL.validation()
    assert v.seed != SMALL.seed and v.embodiments == SMALL.embodiments
    assert v.n_episodes == max(2, SMALL.n_episodes // 4)


def test_header_documents_fields(small):
    h = small.header()
    assert [f[0] for f in h["record_fields"]] == list(RECORD_DTYPE.names)
    assert h["record_size"] == RECORD_DTYPE.itemsize and h["n_records"] == len(small)
