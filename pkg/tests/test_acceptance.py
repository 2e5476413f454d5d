"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the same lines are
repeated in the pytest terminal summary. Criteria 4 and 5 train real models
and take a few minutes in total.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from dsgtf import numerics as nx
from dsgtf.cli import GRADCHECK_CONFIG, main, run_gradcheck
from dsgtf.data import (
    SyntheticConfig,
    load_manifest,
    normalize_segment,
    prepare_segments,
    random_sphere_layout,
    save_dataset,
    segment_recording,
    split_subjects,
    synthesize_dataset,
    synthetic_config_from_json,
    window_segment,
)
from dsgtf.model import gat_forward, init_params, self_attention
from dsgtf.sensor_graph import SensorLayout, build_fc, build_thresh, build_topk
from dsgtf.training import LeakageError, TrainConfig, evaluate, fit_arrays, train, save_checkpoint

from .acceptance_log import criterion
from .oracles import brute_fc, brute_thresh, brute_topk

REPO = __import__("pathlib").Path(__file__).resolve().parents[1]


def edge_set(adj):
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(adj.off_diagonal()))}


def test_criterion_1_gradient_check():
    with criterion(1, "toy-model gradients match central differences (< 1e-3, < 60 s)") as info:
        cfg = GRADCHECK_CONFIG
        assert (cfg.channels, cfg.segment_length, cfg.window, cfg.n_windows) == (6, 20, 4, 5)
        assert (cfg.gat_features, cfg.token_dim, cfg.ff_hidden, cfg.encoder_heads, cfg.head_dim) == (4, 4, 32, 4, 5)
        start = time.perf_counter()
        report = run_gradcheck(seed=1, tolerance=1e-3)
        elapsed = time.perf_counter() - start
        per_tensor = report.per_tensor()
        info["text"] = (f"max rel err {report.max_rel_error:.2e} over {len(report.entries)} coords "
                        f"in {len(per_tensor)} tensors, {elapsed:.1f} s")
        assert set(per_tensor) == set(init_params(cfg, 0))
        assert report.passed and report.max_rel_error < 1e-3
        assert elapsed < 60


def test_criterion_2_adjacency_oracle():
    with criterion(2, "FC/Thresh/TopK match brute force on 100 layouts; n*k edges; tau ladder monotone") as info:
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 33))
            coords = rng.uniform(-1, 1, size=(n, 3))
            lay = SensorLayout.from_coords(coords)
            gamma = float(rng.uniform(0.1, 10))
            pts = coords.tolist()
            assert edge_set(build_fc(lay)) == brute_fc(n)
            tau = float(rng.uniform(0.01, 0.99))
            assert edge_set(build_thresh(lay, gamma, tau)) == brute_thresh(pts, gamma, tau)
            k = int(rng.integers(1, n))
            topk = build_topk(lay, gamma, k)
            assert edge_set(topk) == brute_topk(pts, gamma, k)
            assert int(topk.off_diagonal().sum()) == n * k
            ladder = np.sort(rng.uniform(0.001, 0.999, size=10))
            sets = [edge_set(build_thresh(lay, gamma, t)) for t in ladder]
            assert all(b <= a for a, b in zip(sets, sets[1:]))
        info["text"] = "100 layouts, n in [2, 32]"


def test_criterion_3_topk_edge_counts_248():
    with criterion(3, "248-channel TopK edge counts 248/496/744/1240/1984/3224") as info:
        expected = {1: 248, 2: 496, 3: 744, 5: 1240, 8: 1984, 13: 3224}
        for seed in range(3):
            lay = random_sphere_layout(248, np.random.default_rng(seed))
            got = {k: int(build_topk(lay, 100.0, k).off_diagonal().sum()) for k in expected}
            assert got == expected, got
        info["text"] = "3 layouts"


@pytest.fixture(scope="module")
def noise_free(tmp_path_factory):
    root = tmp_path_factory.mktemp("noise_free")
    recs, layout = synthesize_dataset(SyntheticConfig(subjects=18, channels=16, seed=0))
    return load_manifest(save_dataset(root, layout, recs))


def test_criterion_4_learnability(noise_free, tmp_path):
    with criterion(4, "noise-free test accuracy >= 0.90 in < 10 min; moderate-noise loss decreases") as info:
        cfg = TrainConfig(adjacency="topk", k=3, seed=0)
        split = split_subjects(noise_free.subjects, 12, 6, seed=0)
        start = time.perf_counter()
        result = train(noise_free, split, cfg)
        save_checkpoint(tmp_path / "ck", result.params, result.model_config, cfg)
        report = evaluate(tmp_path / "ck", noise_free, split.test_subjects)
        elapsed = time.perf_counter() - start
        info["text"] = f"noise-free test mean {report.mean:.3f} +/- {report.std:.3f} in {elapsed:.0f} s"
        assert len(result.metrics) == 15
        assert report.mean >= 0.90
        assert elapsed < 600

        noisy_cfg = synthetic_config_from_json(REPO / "configs" / "synthetic_moderate_noise.json")
        assert noisy_cfg.noise > 0
        recs, layout = synthesize_dataset(noisy_cfg)
        noisy = load_manifest(save_dataset(tmp_path / "noisy", layout, recs))
        noisy_result = train(noisy, split_subjects(noisy.subjects, 12, 6, seed=0), cfg)
        first, last = noisy_result.metrics[0].train_loss, noisy_result.metrics[-1].train_loss
        info["text"] += f"; noisy loss {first:.4f} -> {last:.4f}"
        assert last < first


def _full_run(root, seed):
    """gen-synthetic, train, eval and sweep through the CLI; returns output bytes."""
    data = root / "data"
    small = ["--epochs", "3", "--n-train", "4", "--n-test", "2", "--seed", str(seed)]
    assert main(["gen-synthetic", "--subjects", "6", "--channels", "8", "--samples", "600",
                 "--noise", "0.5", "--seed", str(seed), "--out", str(data)]) == 0
    assert main(["train", "--manifest", str(data / "manifest.json"), "--out", str(root / "run"), *small]) == 0
    assert main(["eval", "--checkpoint", str(root / "run" / "checkpoint.bin"), "--manifest",
                 str(data / "manifest.json"), "--split", str(root / "run" / "split.json"),
                 "--out", str(root / "run" / "eval.csv")]) == 0
    assert main(["sweep", "--manifest", str(data / "manifest.json"), "--variants", "topk:1,topk:3,thresh:0.5,fc",
                 "--out", str(root / "sweep.csv"), *small]) == 0
    files = ["run/metrics.csv", "run/eval.csv", "run/checkpoint.bin", "run/split.json", "sweep.csv"]
    return {f: (root / f).read_bytes() for f in files}


def test_criterion_5_determinism(tmp_path):
    with criterion(5, "identical seeds give bitwise-identical metrics/eval/sweep CSVs and checkpoints") as info:
        a = _full_run(tmp_path / "a", seed=3)
        b = _full_run(tmp_path / "b", seed=3)
        for name in a:
            assert a[name] == b[name], f"{name} differs between runs"
        c = _full_run(tmp_path / "c", seed=4)
        assert c["run/checkpoint.bin"] != a["run/checkpoint.bin"]
        info["text"] = f"{len(a)} files compared"


def _softmax_cases(rng):
    for _ in range(100):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 12)))
        scores = rng.standard_normal(shape) * float(rng.choice([1e-3, 1.0, 50.0, 700.0]))
        mask = rng.random(shape) < 0.6
        mask[np.arange(shape[0]), rng.integers(0, shape[1], shape[0])] = True
        p = nx.masked_softmax(nx.Tensor(scores), mask).data
        assert np.all(p >= 0) and np.all(p[~mask] == 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def _equivariance_cases(rng):
    cfg = GRADCHECK_CONFIG
    for seed in range(100):
        c = int(rng.integers(2, 12))
        W = nx.Tensor(rng.standard_normal((3, 4, 4)))
        a = nx.Tensor(rng.standard_normal((3, 8)))
        x = rng.standard_normal((c, 4))
        adj = build_topk(SensorLayout.from_coords(rng.uniform(size=(c, 3))), 5.0, int(rng.integers(1, c)))
        perm = rng.permutation(c)
        out = gat_forward(x, adj.mask, W, a).data
        out_p = gat_forward(x[perm], adj.permuted(perm).mask, W, a).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-9)
        params = init_params(cfg, seed)
        tokens = rng.standard_normal((1, cfg.channels, cfg.segment_length))
        perm = rng.permutation(cfg.channels)
        t = self_attention(nx.Tensor(tokens), params, cfg).data
        t_p = self_attention(nx.Tensor(tokens[:, perm]), params, cfg).data
        np.testing.assert_allclose(t_p, t[:, perm], atol=1e-9)


def _segmentation_cases(rng):
    for _ in range(100):
        d = int(rng.integers(1, 60))
        overlap = float(rng.choice([0.0, 0.5, 0.75, 0.9]))
        stride = d * (1 - overlap)
        if stride != int(stride) or stride < 1:
            d, overlap, stride = 2 * d, 0.5, d
        T = d + int(rng.integers(0, 400))
        rec = rng.standard_normal((2, T))
        segs = segment_recording(rec, d, overlap)
        assert len(segs) == (T - d) // int(stride) + 1
        for i, s in enumerate(segs):
            np.testing.assert_array_equal(s, rec[:, i * int(stride): i * int(stride) + d])


def _window_cases(rng):
    for _ in range(100):
        c, m, w = (int(v) for v in rng.integers(1, 11, 3))
        seg = rng.standard_normal((c, m * w))
        windows = window_segment(seg, w)
        assert windows.shape == (m, c, w)
        np.testing.assert_array_equal(np.concatenate(list(windows), axis=1), seg)


def _normalization_cases(rng):
    for _ in range(100):
        c, d = int(rng.integers(2, 9)), int(rng.integers(2, 60))
        seg = rng.standard_normal((c, d)) * rng.uniform(0.5, 100, size=(c, 1)) + rng.uniform(-50, 50, size=(c, 1))
        once = normalize_segment(seg)
        np.testing.assert_allclose(once.mean(axis=1), 0, atol=1e-5)
        np.testing.assert_allclose(once.std(axis=1), 1, atol=1e-5)
        np.testing.assert_allclose(normalize_segment(once), once, atol=1e-6)


def _leakage_cases(rng):
    recs, layout = synthesize_dataset(SyntheticConfig(subjects=8, channels=4, samples_per_task=40, seed=1))
    ids = sorted({r.subject_id for r in recs})
    cfg = TrainConfig(segment_length=20, window=4, gamma=1.0, k=1, encoder_heads=2, gat_features=2,
                      token_dim=2, ff_hidden=4, epochs=1, batch_size=4)
    mcfg = cfg.model_config(4)
    adj = build_fc(layout)
    segs = prepare_segments(recs, 20, 0.5, 4)
    X = np.stack([s.segment for s in segs])
    W = np.stack([s.windows for s in segs])
    y = np.array([s.label for s in segs])
    subj = np.array([s.subject_id for s in segs])
    for seed in range(100):
        split = split_subjects(ids, 5, 3, seed=seed)
        assert not set(split.train_subjects) & set(split.test_subjects)
        train_ids = {s.subject_id for s in prepare_segments(
            [r for r in recs if r.subject_id in split.train_subjects], 20, 0.5, 4)}
        assert train_ids <= set(split.train_subjects)
        # feeding every subject's segments must abort before any update lands
        with pytest.raises(LeakageError):
            fit_arrays(X, W, y, subj, adj, mcfg, replace(cfg, seed=seed), test_subjects=split.test_subjects)


def test_criterion_6_contract_properties():
    with criterion(6, "contract properties hold over 100 randomized cases each") as info:
        rng = np.random.default_rng(2024)
        checks = [("softmax", _softmax_cases), ("equivariance", _equivariance_cases),
                  ("segmentation", _segmentation_cases), ("windows", _window_cases),
                  ("normalization", _normalization_cases), ("leakage", _leakage_cases)]
        done = []
        for name, fn in checks:
            fn(rng)
            done.append(name)
        info["text"] = ", ".join(done)
