"""scikit-learn style wrappers.

``RecordingSegmenter`` and ``SegmentNormalizer`` turn (n, c, T) recordings
into normalized (n_seg, c, d) segments; ``DSGTFClassifier`` is a
fit/predict classifier over those segments. All three follow the sklearn
estimator contract (``get_params``/``set_params``/``clone``) and can sit in a
``Pipeline``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import normalize_segment, segment_recording, window_segment
from .model import ModelConfig
from .sensor_graph import SensorLayout, build_adjacency
from .training import TrainConfig, fit_arrays, predict_proba as _predict_proba


def _check_3d(X, name="X"):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"{name} must be 3-D (n_samples, channels, time), got {X.ndim}-D")
    return X


class RecordingSegmenter(TransformerMixin, BaseEstimator):
    """Cut each (c, T) recording into overlapping (c, d) segments.

    ``transform`` stacks the segments of all recordings; ``segment_index_``
    maps every output row back to its source recording so labels can be
    expanded with :meth:`expand`.
    """

    def __init__(self, segment_length: int = 100, overlap: float = 0.5):
        self.segment_length = segment_length
        self.overlap = overlap

    def fit(self, X, y=None):
        X = _check_3d(X)
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        X = _check_3d(X)
        if X.shape[1] != self.n_channels_:
            raise ValueError(f"fitted on {self.n_channels_} channels, got {X.shape[1]}")
        segs, index = [], []
        for i, rec in enumerate(X):
            pieces = segment_recording(rec, self.segment_length, self.overlap)
            segs.extend(pieces)
            index.extend([i] * len(pieces))
        self.segment_index_ = np.array(index, dtype=np.int64)
        return np.stack(segs)

    def expand(self, y):
        """Repeat per-recording values (labels, subject ids) per segment."""
        check_is_fitted(self, "segment_index_")
        return np.asarray(y)[self.segment_index_]


class SegmentNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel z-score of every segment. Stateless."""

    def __init__(self, eps: float = 1e-8):
        self.eps = eps

    def fit(self, X, y=None):
        _check_3d(X)
        return self

    def transform(self, X):
        X = _check_3d(X)
        return np.stack([normalize_segment(seg, self.eps) for seg in X])


class DSGTFClassifier(ClassifierMixin, BaseEstimator):
    """Dual-stream graph-attention / transformer classifier over segments.

    ``X`` is (n_segments, channels, segment_length) and should already be
    normalized. Channel geometry comes from ``layout`` (an (n, 3) coordinate
    array or a :class:`SensorLayout`); the adjacency is rebuilt at fit time.
    Labels may be any four hashable classes; they are mapped through
    ``classes_`` in sorted order.
    """

    def __init__(self, layout=None, adjacency="topk", k=3, tau=0.5, gamma=100.0,
                 window=10, gat_heads=3, gat_features=8, encoder_heads=8, head_dim=None,
                 ff_hidden=256, token_dim=8, lr=1e-4, batch_size=32, epochs=15, seed=0):
        self.layout = layout
        self.adjacency = adjacency
        self.k = k
        self.tau = tau
        self.gamma = gamma
        self.window = window
        self.gat_heads = gat_heads
        self.gat_features = gat_features
        self.encoder_heads = encoder_heads
        self.head_dim = head_dim
        self.ff_hidden = ff_hidden
        self.token_dim = token_dim
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _train_config(self, segment_length: int, channels: int) -> TrainConfig:
        return TrainConfig(
            segment_length=segment_length, window=self.window, gamma=self.gamma,
            adjacency=self.adjacency, k=self.k, tau=self.tau, lr=self.lr,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed, channels=channels,
            gat_heads=self.gat_heads, gat_features=self.gat_features,
            encoder_heads=self.encoder_heads, head_dim=self.head_dim,
            ff_hidden=self.ff_hidden, token_dim=self.token_dim,
        )

    def _layout(self, channels: int) -> SensorLayout:
        if self.layout is None:
            raise ValueError("DSGTFClassifier needs a sensor layout")
        layout = self.layout if isinstance(self.layout, SensorLayout) else SensorLayout.from_coords(self.layout)
        if layout.n != channels:
            raise ValueError(f"layout has {layout.n} channels but X has {channels}")
        return layout

    def fit(self, X, y, groups=None, test_groups=()):
        """Train from scratch.

        ``groups`` holds per-segment subject ids; any id listed in
        ``test_groups`` aborts training with a leakage error.
        """
        X = _check_3d(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} segments but {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) > 4:
            raise ValueError(f"at most 4 classes are supported, got {len(self.classes_)}")
        n, c, d = X.shape
        self.train_config_ = self._train_config(d, c)
        self.model_config_: ModelConfig = self.train_config_.model_config(c)
        self.adjacency_ = build_adjacency(self._layout(c), self.adjacency, self.gamma, k=self.k, tau=self.tau)
        windows = np.stack([window_segment(seg, self.window) for seg in X])
        groups = np.array(["_"] * n) if groups is None else np.asarray(groups).astype(str)
        self.params_, self.history_ = fit_arrays(
            X, windows, y_idx, groups, self.adjacency_, self.model_config_, self.train_config_,
            test_subjects=[str(g) for g in test_groups])
        self.n_features_in_ = c
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = _check_3d(X)
        probs = _predict_proba(self.params_, self.model_config_, self.adjacency_, X)
        return probs[:, :len(self.classes_)] if len(self.classes_) < 4 else probs

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
