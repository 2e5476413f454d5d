"""Training loop, per-subject evaluation, adjacency sweeps and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import DatasetSplit, Manifest, WindowedSegment, load_manifest, prepare_segments
from .model import ModelConfig, forward, init_params, param_specs, predict_labels
from .numerics import Tensor
from .sensor_graph import AdjacencyMatrix, SensorLayout, build_adjacency, connectivity_report

logger = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    """A test-subject segment reached a training batch."""


@dataclass
class TrainConfig:
    segment_length: int = 100
    overlap: float = 0.5
    window: int = 10
    gamma: float = 100.0
    adjacency: str = "topk"
    k: int = 3
    tau: float = 0.5
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    channels: int | None = None  # taken from the layout when omitted
    gat_heads: int = 3
    gat_features: int = 8
    encoder_heads: int = 8
    head_dim: int | None = None
    ff_hidden: int = 256
    token_dim: int = 8
    n_train: int = 12
    n_test: int = 6

    def __post_init__(self):
        if self.segment_length % self.window:
            raise ValueError(f"window {self.window} does not divide segment length {self.segment_length}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.adjacency not in ("fc", "thresh", "topk"):
            raise ValueError(f"unknown adjacency method {self.adjacency!r}")

    def model_config(self, channels: int | None = None) -> ModelConfig:
        c = channels if channels is not None else self.channels
        if c is None:
            raise ValueError("channel count unknown; pass a layout or set channels")
        return ModelConfig(
            channels=c, segment_length=self.segment_length, window=self.window,
            gat_heads=self.gat_heads, gat_features=self.gat_features,
            encoder_heads=self.encoder_heads, head_dim=self.head_dim,
            ff_hidden=self.ff_hidden, token_dim=self.token_dim,
        )

    def build_adjacency(self, layout: SensorLayout) -> AdjacencyMatrix:
        return build_adjacency(layout, self.adjacency, self.gamma, k=self.k, tau=self.tau)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    model_config: ModelConfig
    train_config: TrainConfig
    metrics: list[EpochMetrics]
    adjacency: AdjacencyMatrix


@dataclass
class EvalReport:
    per_subject: dict[str, float]
    mean: float
    std: float

    @classmethod
    def from_accuracies(cls, per_subject: dict[str, float]) -> "EvalReport":
        accs = np.array(list(per_subject.values()), dtype=np.float64)
        if accs.size == 0:
            return cls({}, float("nan"), float("nan"))
        return cls(dict(per_subject), float(accs.mean()), float(accs.std()))


def _stack(segments: Sequence[WindowedSegment]):
    X = np.stack([s.segment for s in segments])
    W = np.stack([s.windows for s in segments])
    y = np.array([s.label for s in segments], dtype=np.int64)
    subj = np.array([s.subject_id for s in segments])
    return X, W, y, subj


def fit_arrays(X: np.ndarray, windows: np.ndarray, y: np.ndarray, subjects: np.ndarray,
               adj: AdjacencyMatrix, model_cfg: ModelConfig, cfg: TrainConfig,
               test_subjects: Iterable[str] = (), params: dict[str, Tensor] | None = None,
               ) -> tuple[dict[str, Tensor], list[EpochMetrics]]:
    """Mini-batch Adam on cross-entropy over pre-windowed segments.

    The batch order of epoch ``e`` is drawn from a generator seeded with
    ``(seed, e)``, so runs with equal inputs are bitwise reproducible.
    """
    forbidden = set(test_subjects)
    params = init_params(model_cfg, cfg.seed) if params is None else params
    plist = list(params.values())
    state = nx.AdamState(lr=cfg.lr)
    n = len(y)
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            leaked = forbidden.intersection(subjects[idx].tolist())
            if leaked:
                raise LeakageError(f"epoch {epoch} batch {b}: test subjects {sorted(leaked)} in batch")
            try:
                with nx.Tape() as tape:
                    probs = forward(X[idx], adj, params, model_cfg, windows=windows[idx])
                    loss = nx.cross_entropy(probs, y[idx])
                nx.backward(tape, loss, plist)
            except nx.NonFiniteError as err:
                raise nx.NonFiniteError(f"epoch {epoch} batch {b}: {err}") from err
            nx.adam_step(state, plist, [p.grad for p in plist])
            loss_sum += loss.item() * len(idx)
            correct += int((predict_labels(probs.data) == y[idx]).sum())
        m = EpochMetrics(epoch, loss_sum / max(n, 1), correct / max(n, 1))
        logger.info("epoch %d loss %.6f acc %.4f", m.epoch, m.train_loss, m.train_acc)
        metrics.append(m)
    return params, metrics


def train(manifest: Manifest | str | Path, split: DatasetSplit, cfg: TrainConfig) -> TrainResult:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    model_cfg = cfg.model_config(manifest.layout.n)
    adj = cfg.build_adjacency(manifest.layout)
    recs = manifest.for_subjects(split.train_subjects)
    segments = prepare_segments(recs, cfg.segment_length, cfg.overlap, cfg.window)
    if not segments:
        raise ValueError("no training segments")
    X, W, y, subj = _stack(segments)
    params, metrics = fit_arrays(X, W, y, subj, adj, model_cfg, cfg, split.test_subjects)
    return TrainResult(params, model_cfg, cfg, metrics, adj)


def predict_proba(params: dict[str, Tensor], model_cfg: ModelConfig, adj: AdjacencyMatrix,
                  X: np.ndarray, windows: np.ndarray | None = None, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(X), batch_size):
        w = None if windows is None else windows[start:start + batch_size]
        out.append(forward(X[start:start + batch_size], adj, params, model_cfg, windows=w).data)
    return np.concatenate(out) if out else np.zeros((0, model_cfg.n_classes))


def evaluate_params(params: dict[str, Tensor], model_cfg: ModelConfig, adj: AdjacencyMatrix,
                    manifest: Manifest, subjects: Sequence[str], cfg: TrainConfig) -> EvalReport:
    known = set(manifest.subjects)
    for s in subjects:
        if s not in known:
            raise KeyError(f"unknown subject {s!r}")
    per_subject = {}
    for s in subjects:
        segs = prepare_segments(manifest.for_subjects([s]), cfg.segment_length, cfg.overlap, cfg.window)
        X, W, y, _ = _stack(segs)
        pred = predict_labels(predict_proba(params, model_cfg, adj, X, W))
        per_subject[s] = float((pred == y).mean())
    return EvalReport.from_accuracies(per_subject)


def evaluate(checkpoint, manifest: Manifest | str | Path, subjects: Sequence[str]) -> EvalReport:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    ck = load_checkpoint(checkpoint)
    if ck.model_config.channels != manifest.layout.n:
        raise ValueError(f"checkpoint expects {ck.model_config.channels} channels, "
                         f"manifest layout has {manifest.layout.n}")
    adj = ck.train_config.build_adjacency(manifest.layout)
    return evaluate_params(ck.params, ck.model_config, adj, manifest, subjects, ck.train_config)


# ---------------------------------------------------------------- sweep

@dataclass
class SweepRow:
    method: str
    param: float | int | None
    edges: int | None
    mean_acc: float | None
    std_acc: float | None
    error: str | None = None


def sweep_adjacency(manifest: Manifest | str | Path, split: DatasetSplit, base: TrainConfig,
                    variants: Sequence[tuple[str, float | int | None]],
                    checkpoint_dir: Path | None = None) -> list[SweepRow]:
    """Train and evaluate one model per adjacency variant, all from ``base.seed``.

    Each trained model goes through a checkpoint round trip before evaluation
    so a sweep row matches a separate ``train`` + ``evaluate`` run exactly.
    A failing variant yields a row with ``error`` set; the sweep continues.
    """
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    rows = []
    for i, (method, value) in enumerate(variants):
        try:
            cfg = replace(base, adjacency=method)
            if method == "topk":
                cfg = replace(cfg, k=int(value))
            elif method == "thresh":
                cfg = replace(cfg, tau=float(value))
            edges = connectivity_report(cfg.build_adjacency(manifest.layout)).edges
            result = train(manifest, split, cfg)
            blob = checkpoint_bytes(result.params, result.model_config, cfg)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                (Path(checkpoint_dir) / f"variant{i:02d}_{method}_{value}.ckpt").write_bytes(blob)
            ck = parse_checkpoint(blob)
            report = evaluate_params(ck.params, ck.model_config, result.adjacency, manifest,
                                     split.test_subjects, cfg)
            rows.append(SweepRow(method, value, edges, report.mean, report.std))
        except Exception as err:  # one bad variant must not sink the sweep
            logger.warning("variant %s=%s failed: %s", method, value, err)
            rows.append(SweepRow(method, value, None, None, None, str(err)))
    return rows


# ---------------------------------------------------------------- CSV outputs

def write_metrics_csv(metrics: Sequence[EpochMetrics], path) -> None:
    lines = ["epoch,train_loss,train_acc"]
    lines += [f"{m.epoch},{m.train_loss:.6f},{m.train_acc:.6f}" for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_csv(report: EvalReport, path) -> None:
    lines = ["subject,accuracy"]
    lines += [f"{s},{a:.6f}" for s, a in report.per_subject.items()]
    lines += [f"mean,{report.mean:.6f}", f"std,{report.std:.6f}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_eval_csv(path) -> EvalReport:
    rows = [line.split(",") for line in Path(path).read_text().splitlines()[1:] if line]
    per = {s: float(v) for s, v in rows if s not in ("mean", "std")}
    extra = {s: float(v) for s, v in rows if s in ("mean", "std")}
    return EvalReport(per, extra["mean"], extra["std"])


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    def fmt(v):
        return "nan" if v is None else f"{v:.6f}"

    lines = ["method,param,edges,mean_acc,std_acc"]
    for r in rows:
        param = "" if r.param is None else f"{r.param:g}"
        edges = "failed" if r.edges is None else str(r.edges)
        lines.append(f"{r.method},{param},{edges},{fmt(r.mean_acc)},{fmt(r.std_acc)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"DSGTFCK\0"
#   u32       byte length L of the JSON header
#   L bytes   UTF-8 JSON {"model": ModelConfig, "train": TrainConfig, "tensors": [names]}
#   u32       tensor count N
#   N times:  u32 ndim, ndim * u32 dims, prod(dims) * f32 values (row-major)
# Tensors appear in param_specs() order: per window g=0..m-1 the GAT W, GAT a,
# spatial dense weight and bias; then encoder wq, wk, wv, wo, bo, ln1 gain/bias,
# ff1 weight/bias, ff2 weight/bias, ln2 gain/bias, down weight/bias; then the
# fusion weight and bias.

CHECKPOINT_MAGIC = b"DSGTFCK\0"


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    model_config: ModelConfig
    train_config: TrainConfig


def checkpoint_bytes(params: dict[str, Tensor], model_cfg: ModelConfig, cfg: TrainConfig) -> bytes:
    names = list(param_specs(model_cfg))
    if list(params) != names:
        raise ValueError("parameters are not in canonical order")
    header = json.dumps({"model": model_cfg.to_json(), "train": cfg.to_json(), "tensors": names},
                        sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(names))]
    for name in names:
        t = params[name].data
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    pos = 8
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    model_cfg = ModelConfig.from_json(header["model"])
    cfg = TrainConfig.from_json(header["train"])
    specs = param_specs(model_cfg)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if count != len(specs) or header["tensors"] != list(specs):
        raise ValueError("checkpoint tensor list does not match its model config")
    params = {}
    for name, (shape, _, _) in specs.items():
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        if tuple(dims) != shape:
            raise ValueError(f"{name}: checkpoint shape {dims} != expected {shape}")
        size = int(np.prod(dims))
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    if pos != len(blob):
        raise ValueError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return Checkpoint(params, model_cfg, cfg)


def save_checkpoint(path, params: dict[str, Tensor], model_cfg: ModelConfig, cfg: TrainConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, model_cfg, cfg))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
