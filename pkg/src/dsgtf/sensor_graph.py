"""Binary channel adjacency from sensor geometry via an RBF kernel."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METHODS = ("fc", "thresh", "topk")


@dataclass(frozen=True)
class SensorLayout:
    ids: tuple[str, ...]
    coords: np.ndarray  # (n, 3)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "coords", coords)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"layout coordinates must be (n, 3), got {coords.shape}")
        if len(self.ids) != coords.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for {coords.shape[0]} coordinates")
        if len(self.ids) < 2:
            raise ValueError("a layout needs at least 2 channels")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("channel ids must be unique")
        if not np.isfinite(coords).all():
            raise ValueError("channel coordinates must be finite")

    @property
    def n(self) -> int:
        return len(self.ids)

    @classmethod
    def from_coords(cls, coords, prefix: str = "ch") -> "SensorLayout":
        coords = np.asarray(coords, dtype=np.float64)
        return cls(tuple(f"{prefix}{i:03d}" for i in range(len(coords))), coords)

    def permuted(self, order: Sequence[int]) -> "SensorLayout":
        order = list(order)
        return SensorLayout(tuple(self.ids[i] for i in order), self.coords[order])


def read_layout(path) -> SensorLayout:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["channel", "x", "y", "z"]:
            raise ValueError(f"{path}: expected header 'channel,x,y,z', got {','.join(header)!r}")
        ids, coords = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            ids.append(row[0].strip())
            coords.append([float(v) for v in row[1:]])
    return SensorLayout(tuple(ids), np.array(coords, dtype=np.float64).reshape(-1, 3))


def write_layout(layout: SensorLayout, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("channel,x,y,z\n")
        for cid, (x, y, z) in zip(layout.ids, layout.coords):
            fh.write(f"{cid},{float(x)!r},{float(y)!r},{float(z)!r}\n")


def rbf_weight(ci, cj, gamma: float) -> float:
    """``exp(-gamma * ||ci - cj||^2)``."""
    ci = np.asarray(ci, dtype=np.float64)
    cj = np.asarray(cj, dtype=np.float64)
    if not (np.isfinite(ci).all() and np.isfinite(cj).all() and math.isfinite(gamma)):
        raise ValueError("rbf_weight needs finite coordinates and gamma")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return math.exp(-gamma * float(np.sum((ci - cj) ** 2)))


def squared_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sum(diff * diff, axis=-1)


def rbf_matrix(layout: SensorLayout, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.exp(-gamma * squared_distances(layout.coords))


@dataclass
class AdjacencyMatrix:
    entries: np.ndarray  # (n, n) uint8, row i lists the nodes i attends to
    method: str
    gamma: float | None = None
    param: float | int | None = None
    self_loops: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"adjacency must be square, got {e.shape}")
        if not np.isin(e, (0, 1)).all():
            raise ValueError("adjacency entries must be binary")
        if self.method not in METHODS:
            raise ValueError(f"unknown adjacency method {self.method!r}")
        self.entries = e.astype(np.uint8)
        if self.self_loops:
            np.fill_diagonal(self.entries, 1)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def mask(self) -> np.ndarray:
        return self.entries.astype(bool)

    def off_diagonal(self) -> np.ndarray:
        off = self.entries.copy()
        np.fill_diagonal(off, 0)
        return off

    def edges(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.off_diagonal())
        return list(zip(rows.tolist(), cols.tolist()))

    def permuted(self, order: Sequence[int]) -> "AdjacencyMatrix":
        order = np.asarray(order)
        return AdjacencyMatrix(self.entries[np.ix_(order, order)], self.method,
                               self.gamma, self.param, self.self_loops)


def build_fc(layout: SensorLayout, self_loops: bool = True) -> AdjacencyMatrix:
    n = layout.n
    entries = np.ones((n, n), dtype=np.uint8)
    if not self_loops:
        np.fill_diagonal(entries, 0)
    return AdjacencyMatrix(entries, "fc", None, None, self_loops)


def build_thresh(layout: SensorLayout, gamma: float, tau: float,
                 self_loops: bool = True) -> AdjacencyMatrix:
    """Keep edge (i, j) iff its RBF weight is at least ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    weights = rbf_matrix(layout, gamma)
    entries = (weights >= tau).astype(np.uint8)
    np.fill_diagonal(entries, 1 if self_loops else 0)
    return AdjacencyMatrix(entries, "thresh", gamma, tau, self_loops)


def build_topk(layout: SensorLayout, gamma: float, k: int,
               self_loops: bool = True) -> AdjacencyMatrix:
    """Per node, keep the ``k`` other nodes with the largest RBF weight.

    Ranking uses the log-kernel ``-gamma * ||ci - cj||^2`` so far-apart
    sensors do not underflow into spurious ties. Exact ties go to the lower
    channel index. The result is directed.
    """
    n = layout.n
    if int(k) != k or not 1 <= k <= n - 1:
        raise ValueError(f"k must be an integer in [1, {n - 1}], got {k}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    k = int(k)
    log_w = -gamma * squared_distances(layout.coords)
    np.fill_diagonal(log_w, -np.inf)
    # stable sort on the negated weights keeps lower indices first among ties
    order = np.argsort(-log_w, axis=1, kind="stable")[:, :k]
    entries = np.zeros((n, n), dtype=np.uint8)
    np.put_along_axis(entries, order, 1, axis=1)
    np.fill_diagonal(entries, 1 if self_loops else 0)
    return AdjacencyMatrix(entries, "topk", gamma, k, self_loops)


def build_adjacency(layout: SensorLayout, method: str, gamma: float = 100.0,
                    k: int | None = None, tau: float | None = None) -> AdjacencyMatrix:
    method = method.lower().replace("-adj", "")
    if method == "fc":
        return build_fc(layout)
    if method == "thresh":
        if tau is None:
            raise ValueError("thresh adjacency needs tau")
        return build_thresh(layout, gamma, tau)
    if method == "topk":
        if k is None:
            raise ValueError("topk adjacency needs k")
        return build_topk(layout, gamma, k)
    raise ValueError(f"unknown adjacency method {method!r}; expected one of {METHODS}")


@dataclass(frozen=True)
class ConnectivityReport:
    edges: int
    isolated: int


def connectivity_report(adj: AdjacencyMatrix) -> ConnectivityReport:
    off = adj.off_diagonal().astype(bool)
    touched = off.any(axis=0) | off.any(axis=1)
    return ConnectivityReport(int(off.sum()), int((~touched).sum()))


def write_edge_list(adj: AdjacencyMatrix, path) -> None:
    edges = adj.edges()
    gamma = "none" if adj.gamma is None else f"{adj.gamma:g}"
    param = "none" if adj.param is None else f"{adj.param:g}"
    with open(path, "w") as fh:
        fh.write(f"# method={adj.method} gamma={gamma} param={param} edges={len(edges)}\n")
        for i, j in edges:
            fh.write(f"{i},{j}\n")


def read_edge_list(path, n: int) -> AdjacencyMatrix:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing '# method=...' header")
    header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    entries = np.zeros((n, n), dtype=np.uint8)
    for line in lines[1:]:
        if line.strip():
            i, j = (int(v) for v in line.split(","))
            entries[i, j] = 1
    gamma = None if header.get("gamma", "none") == "none" else float(header["gamma"])
    param = None if header.get("param", "none") == "none" else float(header["param"])
    return AdjacencyMatrix(entries, header["method"], gamma, param)
