"""Recordings, segmentation, normalization, windowing and subject splits.

Also carries the binary recording format, the JSON manifest, and a synthetic
generator that stands in for real multi-channel task recordings.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sensor_graph import SensorLayout, read_layout, write_layout

LABELS = ("resting", "story_math", "working_memory", "motor")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

RECORDING_MAGIC = b"DSGTF1\0"
_HEADER = struct.Struct("<7sxIQ")


@dataclass
class Recording:
    subject_id: str
    label: str
    data: np.ndarray  # (channels, samples), channel-major

    def __post_init__(self):
        if self.label not in LABEL_INDEX:
            raise ValueError(f"unknown task label {self.label!r}; expected one of {LABELS}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise ValueError(f"recording data must be (channels>=2, samples), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass
class WindowedSegment:
    subject_id: str
    label: int
    segment: np.ndarray  # (c, d), normalized
    windows: np.ndarray  # (m, c, w)


@dataclass(frozen=True)
class DatasetSplit:
    train_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_subjects) & set(self.test_subjects)
        if overlap:
            raise ValueError(f"subjects in both train and test: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {"train": list(self.train_subjects), "test": list(self.test_subjects)}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        return cls(tuple(obj["train"]), tuple(obj["test"]))


def segment_stride(d: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap fraction must lie in [0, 1), got {overlap}")
    stride = d * (1.0 - overlap)
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise ValueError(f"segment stride d*(1-overlap) = {stride} is not a positive integer")
    return int(round(stride))


def segment_count(samples: int, d: int, stride: int) -> int:
    return (samples - d) // stride + 1 if samples >= d else 0


def segment_recording(rec: Recording | np.ndarray, d: int = 100, overlap: float = 0.5) -> list[np.ndarray]:
    """Cut a (c, T) recording into overlapping (c, d) slices.

    Slices start at 0, s, 2s, ... with stride ``s = d * (1 - overlap)``;
    trailing samples that do not fill a whole segment are dropped.
    """
    data = rec.data if isinstance(rec, Recording) else np.asarray(rec)
    stride = segment_stride(d, overlap)
    T = data.shape[1]
    if T < d:
        raise ValueError(f"recording has {T} samples, fewer than segment length {d}")
    return [data[:, s:s + d] for s in range(0, T - d + 1, stride)]


def normalize_segment(seg: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-channel z-score (population std). Constant channels map to zeros."""
    seg = np.asarray(seg, dtype=np.float64)
    centered = seg - seg.mean(axis=1, keepdims=True)
    return centered / (seg.std(axis=1, keepdims=True) + eps)


def window_segment(seg: np.ndarray, w: int = 10) -> np.ndarray:
    """Split a (c, d) segment into ``d // w`` contiguous (c, w) windows -> (m, c, w)."""
    seg = np.asarray(seg)
    c, d = seg.shape
    if w < 1 or d % w:
        raise ValueError(f"window width {w} does not divide segment length {d}")
    return seg.reshape(c, d // w, w).transpose(1, 0, 2).copy()


def prepare_segments(recordings: Iterable[Recording], d: int = 100, overlap: float = 0.5,
                     w: int = 10) -> list[WindowedSegment]:
    out = []
    for rec in recordings:
        for raw in segment_recording(rec, d, overlap):
            seg = normalize_segment(raw)
            out.append(WindowedSegment(rec.subject_id, rec.label_index, seg, window_segment(seg, w)))
    return out


def split_subjects(subject_ids: Sequence[str], n_train: int = 12, n_test: int = 6,
                   seed: int = 0) -> DatasetSplit:
    ids = sorted(set(subject_ids))
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ids):
        raise ValueError(f"cannot draw {n_train} train + {n_test} test from {len(ids)} subjects")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(tuple(shuffled[:n_train]), tuple(shuffled[n_train:n_train + n_test]))


# ---------------------------------------------------------------- file formats

def write_recording(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    c, T = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RECORDING_MAGIC, c, T))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_recording(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated recording header")
    magic, c, T = _HEADER.unpack_from(raw)
    if magic != RECORDING_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * c * T
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {c}x{T} samples, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, T).astype(np.float64)


@dataclass
class Manifest:
    layout: SensorLayout
    recordings: list[Recording]
    path: Path | None = None

    @property
    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for rec in self.recordings:
            seen.setdefault(rec.subject_id, None)
        return list(seen)

    def for_subjects(self, subjects: Iterable[str]) -> list[Recording]:
        wanted = set(subjects)
        unknown = wanted - set(self.subjects)
        if unknown:
            raise KeyError(f"subjects not in manifest: {sorted(unknown)}")
        return [r for r in self.recordings if r.subject_id in wanted]


def load_manifest(path) -> Manifest:
    path = Path(path)
    obj = json.loads(path.read_text())
    base = path.parent
    layout = read_layout(base / obj["layout"])
    recordings = []
    for subj in obj["subjects"]:
        for entry in subj["recordings"]:
            data = read_recording(base / entry["file"])
            if data.shape[0] != layout.n:
                raise ValueError(f"{entry['file']}: {data.shape[0]} channels but layout has {layout.n}")
            recordings.append(Recording(str(subj["id"]), entry["label"], data))
    return Manifest(layout, recordings, path)


def save_dataset(out_dir, layout: SensorLayout, recordings: Sequence[Recording]) -> Path:
    """Write layout.csv, one .bin per recording and manifest.json under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "recordings").mkdir(parents=True, exist_ok=True)
    write_layout(layout, out_dir / "layout.csv")
    subjects: dict[str, list] = {}
    for rec in recordings:
        rel = f"recordings/{rec.subject_id}_{rec.label}.bin"
        write_recording(out_dir / rel, rec.data)
        subjects.setdefault(rec.subject_id, []).append({"label": rec.label, "file": rel})
    manifest = {
        "layout": "layout.csv",
        "subjects": [{"id": sid, "recordings": recs} for sid, recs in subjects.items()],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticConfig:
    subjects: int = 18
    channels: int = 16
    samples_per_task: int = 2000
    seed: int = 0
    noise: float = 0.0
    # cycles per sample of each class's carrier
    frequencies: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2)
    active_fraction: float = 0.25
    gain_range: tuple[float, float] = (0.5, 1.5)

    def validate(self) -> None:
        if self.subjects < 2:
            raise ValueError("synthetic dataset needs at least 2 subjects")
        if self.channels < 2:
            raise ValueError("synthetic dataset needs at least 2 channels")
        if self.samples_per_task < 1:
            raise ValueError("samples_per_task must be positive")
        if len(self.frequencies) != len(LABELS):
            raise ValueError(f"need one frequency per class ({len(LABELS)})")
        if any(not 0.0 < f < 0.5 for f in self.frequencies):
            raise ValueError("frequencies must lie strictly between 0 and Nyquist (0.5)")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        if not 0.0 < self.active_fraction <= 1.0:
            raise ValueError("active_fraction must lie in (0, 1]")


def random_sphere_layout(n: int, rng: np.random.Generator) -> SensorLayout:
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return SensorLayout.from_coords(pts)


def class_channel_subsets(layout: SensorLayout, n_active: int) -> list[np.ndarray]:
    """For each class, the ``n_active`` channels nearest a class-specific anchor channel.

    Anchors are spread over the channel index range so subsets are spatially
    local on the layout.
    """
    n = layout.n
    anchors = [(k * n) // len(LABELS) for k in range(len(LABELS))]
    d2 = ((layout.coords[:, None, :] - layout.coords[None, :, :]) ** 2).sum(-1)
    return [np.sort(np.argsort(d2[a], kind="stable")[:n_active]) for a in anchors]


def synthesize_dataset(config: SyntheticConfig) -> tuple[list[Recording], SensorLayout]:
    """Labelled recordings whose class lives in a spatio-spectral signature.

    Each class drives a sinusoid at its own frequency on its own spatially
    local channel subset. Subjects differ by per-channel gain and phase;
    white noise of amplitude ``config.noise`` is added everywhere.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    layout = random_sphere_layout(config.channels, rng)
    n_active = max(1, int(round(config.active_fraction * config.channels)))
    subsets = class_channel_subsets(layout, n_active)
    t = np.arange(config.samples_per_task, dtype=np.float64)
    recordings = []
    for s in range(config.subjects):
        sid = f"S{s + 1:02d}"
        gain = rng.uniform(*config.gain_range, size=config.channels)
        for k, label in enumerate(LABELS):
            phase = rng.uniform(0.0, 2 * np.pi, size=n_active)
            data = np.zeros((config.channels, config.samples_per_task))
            carrier = np.sin(2 * np.pi * config.frequencies[k] * t[None, :] + phase[:, None])
            data[subsets[k]] = gain[subsets[k], None] * carrier
            if config.noise > 0:
                data += config.noise * rng.standard_normal(data.shape)
            recordings.append(Recording(sid, label, data.astype(np.float32).astype(np.float64)))
    return recordings, layout


def spectral_oracle(data: np.ndarray, subsets: Sequence[np.ndarray],
                    frequencies: Sequence[float]) -> int:
    """Classify a recording by carrier power on each class's channel subset."""
    spectrum = np.abs(np.fft.rfft(data, axis=1)) ** 2
    freqs = np.fft.rfftfreq(data.shape[1])
    scores = []
    for chans, f in zip(subsets, frequencies):
        b = int(np.argmin(np.abs(freqs - f)))
        dominant = freqs[np.argmax(spectrum[chans], axis=1)]
        hit = np.isclose(dominant, freqs[b])
        scores.append(spectrum[chans, b].sum() * hit.mean())
    return int(np.argmax(scores))


def synthetic_config_from_json(path: str | os.PathLike) -> SyntheticConfig:
    obj = json.loads(Path(path).read_text())
    if "frequencies" in obj:
        obj["frequencies"] = tuple(obj["frequencies"])
    if "gain_range" in obj:
        obj["gain_range"] = tuple(obj["gain_range"])
    return SyntheticConfig(**obj)
