import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dsgtf.data import (
    LABELS,
    DatasetSplit,
    Recording,
    SyntheticConfig,
    class_channel_subsets,
    load_manifest,
    normalize_segment,
    prepare_segments,
    read_recording,
    save_dataset,
    segment_recording,
    spectral_oracle,
    split_subjects,
    synthesize_dataset,
    window_segment,
    write_recording,
)


def rec_of(T, c=3, seed=0):
    return Recording("S01", "motor", np.random.default_rng(seed).standard_normal((c, T)))


# ---------------------------------------------------------------- segmentation

@pytest.mark.parametrize("T, d, overlap, count", [(1000, 100, 0.5, 19), (100, 100, 0.5, 1),
                                                   (100, 100, 0.0, 1), (149, 100, 0.5, 1)])
def test_segment_counts(T, d, overlap, count):
    assert len(segment_recording(rec_of(T), d, overlap)) == count


def test_segment_too_short():
    with pytest.raises(ValueError):
        segment_recording(rec_of(99), 100, 0.5)


def test_segment_bad_stride():
    with pytest.raises(ValueError):
        segment_recording(rec_of(200), 100, 0.333)
    with pytest.raises(ValueError):
        segment_recording(rec_of(200), 100, 1.0)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 400))
def test_segmentation_property(d, stride, extra):
    T = d + extra
    overlap = 1.0 - stride / d
    if overlap < 0:
        return
    data = np.arange(2 * T, dtype=float).reshape(2, T)
    segs = segment_recording(data, d, overlap)
    assert len(segs) == (T - d) // stride + 1
    for i, seg in enumerate(segs):
        np.testing.assert_array_equal(seg, data[:, i * stride:i * stride + d])


# ---------------------------------------------------------------- normalization

def test_normalize_hand_zscore():
    out = normalize_segment(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]))
    np.testing.assert_allclose(out[0], np.array([-1.0, 0.0, 1.0]) * np.sqrt(1.5), rtol=1e-7)
    assert abs(out[0].mean()) < 1e-12 and abs(out[0].std() - 1) < 1e-7
    np.testing.assert_array_equal(out[1], [0.0, 0.0, 0.0])


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8), st.integers(2, 50), st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_normalize_idempotent(c, d, seed, scale):
    seg = scale * np.random.default_rng(seed).standard_normal((c, d)) + 3.0
    # the 1e-8 epsilon shifts near-constant channels by more than 1e-6
    assume(seg.std(axis=1).min() > 0.1)
    once = normalize_segment(seg)
    assert once.shape == seg.shape
    np.testing.assert_allclose(once.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(once.std(axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(normalize_segment(once), once, atol=1e-6)


# ---------------------------------------------------------------- windows

def test_window_examples():
    seg = np.arange(3 * 100).reshape(3, 100)
    assert window_segment(seg, 10).shape == (10, 3, 10)
    np.testing.assert_array_equal(window_segment(seg, 100)[0], seg)
    seg20 = np.arange(2 * 20).reshape(2, 20)
    wins = window_segment(seg20, 4)
    assert wins.shape[0] == 5
    np.testing.assert_array_equal(wins[2], seg20[:, 8:12])
    with pytest.raises(ValueError):
        window_segment(seg20, 3)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10), st.integers(1, 10))
def test_windows_reassemble(c, m, w):
    seg = np.random.default_rng(c * 100 + m * 10 + w).standard_normal((c, m * w))
    wins = window_segment(seg, w)
    assert wins.shape == (m, c, w)
    np.testing.assert_array_equal(np.concatenate(list(wins), axis=1), seg)


def test_prepare_segments_shapes():
    segs = prepare_segments([rec_of(300, c=4)], d=100, overlap=0.5, w=10)
    assert len(segs) == 5
    assert segs[0].segment.shape == (4, 100) and segs[0].windows.shape == (10, 4, 10)
    assert segs[0].label == LABELS.index("motor")


# ---------------------------------------------------------------- splits

def test_split_default_sizes():
    ids = [f"S{i:02d}" for i in range(1, 19)]
    split = split_subjects(ids, 12, 6, seed=3)
    assert len(split.train_subjects) == 12 and len(split.test_subjects) == 6
    assert not set(split.train_subjects) & set(split.test_subjects)
    assert split == split_subjects(ids, 12, 6, seed=3)
    assert split_subjects(ids, 12, 0).test_subjects == ()
    with pytest.raises(ValueError):
        split_subjects(ids, 12, 7)


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        DatasetSplit(("a", "b"), ("b",))


# ---------------------------------------------------------------- recording file

def test_recording_file_layout(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_recording(tmp_path / "r.bin", data)
    raw = (tmp_path / "r.bin").read_bytes()
    assert raw[:8] == b"DSGTF1\0\0"
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 3
    assert len(raw) == 20 + 6 * 4
    np.testing.assert_array_equal(read_recording(tmp_path / "r.bin"), data)


def test_recording_file_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTDSGT\0" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        read_recording(tmp_path / "bad.bin")
    write_recording(tmp_path / "r.bin", np.zeros((2, 3)))
    (tmp_path / "t.bin").write_bytes((tmp_path / "r.bin").read_bytes()[:-2])
    with pytest.raises(ValueError):
        read_recording(tmp_path / "t.bin")


# ---------------------------------------------------------------- synthetic data

def test_synthetic_counts_and_determinism(tmp_path):
    cfg = SyntheticConfig(subjects=18, channels=8, samples_per_task=200, seed=7, noise=0.3)
    recs, layout = synthesize_dataset(cfg)
    assert len(recs) == 72
    assert {r.label for r in recs} == set(LABELS)
    np.testing.assert_allclose(np.linalg.norm(layout.coords, axis=1), 1.0)
    a = save_dataset(tmp_path / "a", layout, recs)
    b = save_dataset(tmp_path / "b", *reversed(synthesize_dataset(cfg)))
    for rel in ["manifest.json", "layout.csv", "recordings/S05_motor.bin"]:
        assert (a.parent / rel).read_bytes() == (b.parent / rel).read_bytes()


def test_manifest_roundtrip(tmp_path):
    recs, layout = synthesize_dataset(SyntheticConfig(subjects=2, channels=4, samples_per_task=120))
    path = save_dataset(tmp_path, layout, recs)
    obj = json.loads(path.read_text())
    assert obj["layout"] == "layout.csv"
    assert obj["subjects"][0]["recordings"][0] == {"label": "resting", "file": "recordings/S01_resting.bin"}
    man = load_manifest(path)
    assert man.subjects == ["S01", "S02"]
    for orig, back in zip(recs, man.recordings):
        assert (orig.subject_id, orig.label) == (back.subject_id, back.label)
        np.testing.assert_array_equal(orig.data, back.data)
    with pytest.raises(KeyError):
        man.for_subjects(["S99"])


def test_noise_free_spectral_oracle_is_perfect():
    cfg = SyntheticConfig(subjects=6, channels=16, samples_per_task=1000, seed=11)
    recs, layout = synthesize_dataset(cfg)
    subsets = class_channel_subsets(layout, 4)
    hits = [spectral_oracle(r.data, subsets, cfg.frequencies) == r.label_index for r in recs]
    assert all(hits)


@pytest.mark.parametrize("bad", [dict(subjects=1), dict(channels=1), dict(noise=-1.0),
                                 dict(frequencies=(0.1, 0.2)), dict(frequencies=(0.1, 0.2, 0.3, 0.6))])
def test_synthetic_rejects_bad_config(bad):
    with pytest.raises(ValueError):
        synthesize_dataset(SyntheticConfig(**bad))
