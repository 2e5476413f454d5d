"""Dual-stream graph-attention / transformer fusion network.

Parameters live in an ordered ``dict[str, Tensor]``; the key order returned
by :func:`param_specs` is the canonical order used by checkpoints, the
optimizer and gradient checks. Every forward function accepts a leading batch
axis.

Shapes (B = batch, c = channels, d = segment length, m = windows, w = window
width, H = heads):

    spatial   windows (B, m, c, w) -> GAT per window -> (B, m, c*H_s*F')
              -> per-window dense -> sum over windows -> (B, c*p)
    temporal  segment (B, c, d) -> one post-LN encoder block over c tokens
              -> per-token dense d->p -> (B, c*p)
    fusion    concat (B, 2*c*p) -> dense -> softmax (B, 4)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .sensor_graph import AdjacencyMatrix

N_CLASSES = 4


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    segment_length: int = 100
    window: int = 10
    gat_heads: int = 3
    gat_features: int = 8
    encoder_heads: int = 8
    head_dim: int | None = None  # defaults to segment_length // encoder_heads
    ff_hidden: int = 256
    token_dim: int = 8
    n_classes: int = N_CLASSES
    leaky_slope: float = 0.2

    def __post_init__(self):
        for f in ("channels", "segment_length", "window", "gat_heads", "gat_features",
                  "encoder_heads", "ff_hidden", "token_dim", "n_classes"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"{f} must be a positive integer")
        if self.segment_length % self.window:
            raise ValueError(f"window {self.window} does not divide segment length {self.segment_length}")
        if self.head_dim is None:
            object.__setattr__(self, "head_dim", self.segment_length // self.encoder_heads)
        if self.head_dim < 1:
            raise ValueError("encoder head dimension must be at least 1")

    @property
    def n_windows(self) -> int:
        return self.segment_length // self.window

    @property
    def embed_dim(self) -> int:
        return self.channels * self.token_dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


# name -> (shape, fan_in, fan_out) ; fan_in is None for biases/gains
def param_specs(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int | None, int | None]]:
    c, d, w, m = cfg.channels, cfg.segment_length, cfg.window, cfg.n_windows
    hs, fp, ht, dk = cfg.gat_heads, cfg.gat_features, cfg.encoder_heads, cfg.head_dim
    f, p, k = cfg.ff_hidden, cfg.token_dim, cfg.n_classes
    gat_flat = c * hs * fp
    specs: dict[str, tuple] = {}
    for g in range(m):
        specs[f"gat.{g}.W"] = ((hs, w, fp), w, fp)
        specs[f"gat.{g}.a"] = ((hs, 2 * fp), 2 * fp, 1)
        specs[f"spatial.{g}.weight"] = ((gat_flat, c * p), gat_flat, c * p)
        specs[f"spatial.{g}.bias"] = ((c * p,), None, None)
    specs["encoder.wq"] = ((ht, d, dk), d, dk)
    specs["encoder.wk"] = ((ht, d, dk), d, dk)
    specs["encoder.wv"] = ((ht, d, dk), d, dk)
    specs["encoder.wo"] = ((ht * dk, d), ht * dk, d)
    specs["encoder.bo"] = ((d,), None, None)
    specs["encoder.ln1.gain"] = ((d,), None, None)
    specs["encoder.ln1.bias"] = ((d,), None, None)
    specs["encoder.ff1.weight"] = ((d, f), d, f)
    specs["encoder.ff1.bias"] = ((f,), None, None)
    specs["encoder.ff2.weight"] = ((f, d), f, d)
    specs["encoder.ff2.bias"] = ((d,), None, None)
    specs["encoder.ln2.gain"] = ((d,), None, None)
    specs["encoder.ln2.bias"] = ((d,), None, None)
    specs["encoder.down.weight"] = ((d, p), d, p)
    specs["encoder.down.bias"] = ((p,), None, None)
    specs["fusion.weight"] = ((2 * c * p, k), 2 * c * p, k)
    specs["fusion.bias"] = ((k,), None, None)
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    c, d, w, m = cfg.channels, cfg.segment_length, cfg.window, cfg.n_windows
    hs, fp, ht, dk = cfg.gat_heads, cfg.gat_features, cfg.encoder_heads, cfg.head_dim
    f, p, k = cfg.ff_hidden, cfg.token_dim, cfg.n_classes
    spatial = m * (hs * w * fp + hs * 2 * fp + (c * hs * fp) * (c * p) + c * p)
    encoder = 3 * ht * d * dk + (ht * dk * d + d) + 4 * d + (d * f + f) + (f * d + d) + (d * p + p)
    fusion = 2 * c * p * k + k
    return spatial + encoder + fusion


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, fan_in, fan_out) in param_specs(cfg).items():
        if fan_in is not None:
            b = glorot_bound(fan_in, fan_out)
            data = rng.uniform(-b, b, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _check_params(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    specs = param_specs(cfg)
    if list(params) != list(specs):
        missing = set(specs) - set(params)
        raise ValueError(f"parameter set does not match config (missing {sorted(missing)[:3]}...)")
    for name, (shape, _, _) in specs.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _guard(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except nx.NonFiniteError as err:
        raise nx.NonFiniteError(f"{stage}: {err}") from err


# ---------------------------------------------------------------- spatial stream

def gat_forward(node_feats, mask: np.ndarray, W: Tensor, a: Tensor,
                slope: float = 0.2, return_attention: bool = False):
    """Multi-head graph attention; heads concatenated on the feature axis.

    ``node_feats`` is (..., c, w); ``W`` is (..., H, w, F') and ``a`` is
    (..., H, 2F') with leading axes broadcasting against the features' batch
    axes. ``mask[i, j]`` marks j as a neighbour of i. Output is (..., c, H*F').
    """
    x = nx.as_tensor(node_feats)
    H, _, fp = W.shape[-3:]
    xh = nx.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])              # (..., 1, c, w)
    proj = nx.matmul(xh, W)                                               # (..., H, c, F')
    a_src = nx.reshape(a, a.shape[:-1] + (2 * fp, 1))
    src = nx.matmul(proj, _slice_rows(a_src, 0, fp))                      # (..., H, c, 1)
    dst = nx.matmul(proj, _slice_rows(a_src, fp, 2 * fp))                 # (..., H, c, 1)
    scores = nx.leaky_relu(nx.add(src, nx.swapaxes(dst, -1, -2)), slope)  # (..., H, c, c)
    alpha = nx.masked_softmax(scores, mask, axis=-1)
    out = nx.elu(nx.matmul(alpha, proj))                                  # (..., H, c, F')
    c = out.shape[-2]
    lead = out.shape[:-3]
    out = nx.swapaxes(out, -3, -2)                                        # (..., c, H, F')
    out = nx.reshape(out, lead + (c, H * fp))
    return (out, alpha) if return_attention else out


def _slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    # slicing as a matmul with a selector keeps the op set small
    n = t.shape[-2]
    sel = np.zeros((stop - start, n))
    sel[np.arange(stop - start), np.arange(start, stop)] = 1.0
    return nx.matmul(sel, t)


def spatial_forward(windows, adj: AdjacencyMatrix | np.ndarray, params: dict[str, Tensor],
                    cfg: ModelConfig) -> Tensor:
    """(B, m, c, w) windows -> (B, c*p) spatial embedding."""
    x = nx.as_tensor(windows)
    m = cfg.n_windows
    if x.ndim != 4 or x.shape[1] != m or x.shape[2:] != (cfg.channels, cfg.window):
        raise nx.ShapeError(f"expected windows (B, {m}, {cfg.channels}, {cfg.window}), got {x.shape}")
    mask = adj.mask if isinstance(adj, AdjacencyMatrix) else np.asarray(adj, dtype=bool)
    W = nx.concat([nx.reshape(params[f"gat.{g}.W"], (1,) + params[f"gat.{g}.W"].shape)
                   for g in range(m)], axis=0)                             # (m, H, w, F')
    a = nx.concat([nx.reshape(params[f"gat.{g}.a"], (1,) + params[f"gat.{g}.a"].shape)
                   for g in range(m)], axis=0)                             # (m, H, 2F')
    gat = _guard("graph attention", gat_forward, x, mask, W, a, cfg.leaky_slope)  # (B, m, c, H*F')
    B = x.shape[0]
    flat = nx.swapaxes(nx.reshape(gat, (B, m, -1)), 0, 1)                  # (m, B, cHF')
    dense_w = nx.concat([nx.reshape(params[f"spatial.{g}.weight"], (1,) + params[f"spatial.{g}.weight"].shape)
                         for g in range(m)], axis=0)                       # (m, cHF', cp)
    dense_b = nx.concat([nx.reshape(params[f"spatial.{g}.bias"], (1, 1, -1)) for g in range(m)], axis=0)
    per_window = _guard("spatial dense", lambda: nx.add(nx.matmul(flat, dense_w), dense_b))  # (m, B, cp)
    return nx.sum_(per_window, axis=0)


# ---------------------------------------------------------------- temporal stream

def self_attention(tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                   return_attention: bool = False):
    """Multi-head scaled dot-product attention over the c channel tokens."""
    B, c, d = tokens.shape
    x = nx.reshape(tokens, (B, 1, c, d))
    q = nx.matmul(x, params["encoder.wq"])                                # (B, H, c, dk)
    k = nx.matmul(x, params["encoder.wk"])
    v = nx.matmul(x, params["encoder.wv"])
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.head_dim))
    alpha = nx.masked_softmax(scores, None, axis=-1)                      # (B, H, c, c)
    z = nx.swapaxes(nx.matmul(alpha, v), 1, 2)                            # (B, c, H, dk)
    z = nx.reshape(z, (B, c, cfg.encoder_heads * cfg.head_dim))
    out = nx.add(nx.matmul(z, params["encoder.wo"]), params["encoder.bo"])
    return (out, alpha) if return_attention else out


def temporal_forward(segment, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, c, d) normalized segments -> (B, c*p) temporal embedding."""
    x = nx.as_tensor(segment)
    if x.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.segment_length):
        raise nx.ShapeError(f"expected segments (B, {cfg.channels}, {cfg.segment_length}), got {x.shape}")
    B = x.shape[0]
    attn = _guard("self-attention", self_attention, x, params, cfg)
    h = _guard("attention residual norm", lambda: nx.layer_norm(
        nx.add(x, attn), params["encoder.ln1.gain"], params["encoder.ln1.bias"]))
    ff = _guard("feed-forward", lambda: nx.add(nx.matmul(
        nx.relu(nx.add(nx.matmul(h, params["encoder.ff1.weight"]), params["encoder.ff1.bias"])),
        params["encoder.ff2.weight"]), params["encoder.ff2.bias"]))
    h = _guard("feed-forward residual norm", lambda: nx.layer_norm(
        nx.add(h, ff), params["encoder.ln2.gain"], params["encoder.ln2.bias"]))
    down = _guard("token down-sampling", lambda: nx.add(
        nx.matmul(h, params["encoder.down.weight"]), params["encoder.down.bias"]))
    return nx.reshape(down, (B, cfg.embed_dim))


# ---------------------------------------------------------------- fusion

def forward_logits(segments, windows, adj, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    temporal = temporal_forward(segments, params, cfg)
    spatial = spatial_forward(windows, adj, params, cfg)
    fused = nx.concat([temporal, spatial], axis=1)
    return nx.add(nx.matmul(fused, params["fusion.weight"]), params["fusion.bias"])


def forward(segments, adj, params: dict[str, Tensor], cfg: ModelConfig,
            windows=None) -> Tensor:
    """Class probabilities for a batch of normalized (B, c, d) segments.

    ``windows`` may be passed when already computed; otherwise they are cut
    from ``segments``. A single (c, d) segment is promoted to a batch of one.
    """
    seg = segments.data if isinstance(segments, Tensor) else np.asarray(segments, dtype=np.float64)
    if seg.ndim == 2:
        seg = seg[None]
    if windows is None:
        B, c, d = seg.shape
        windows = seg.reshape(B, c, d // cfg.window, cfg.window).transpose(0, 2, 1, 3)
    else:
        windows = np.asarray(windows.data if isinstance(windows, Tensor) else windows)
        if windows.ndim == 3:
            windows = windows[None]
    _check_params(params, cfg)
    logits = forward_logits(seg, windows, adj, params, cfg)
    return nx.softmax(logits, axis=-1)


def loss_fn(segments, labels, adj, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    return nx.cross_entropy(forward(segments, adj, params, cfg), labels)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class
    return np.argmax(np.asarray(probs), axis=-1)
