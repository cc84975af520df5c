"""Dynamic functional-connectivity graphs: windowed correlation, thresholding, stats.

A dynamic graph is the ordered sequence of snapshots obtained by sliding a
window of ``window`` timepoints with step ``stride`` over a subject's signal
matrix. Each snapshot pairs the windowed Pearson correlation matrix C with the
binary adjacency A obtained by keeping the top fraction of correlation values.

Cache file layout (``.dfc``), all little-endian:

    magic b'DFCG' | u32 version=1 | u32 N | u32 T | u32 window | u32 stride
    | f32 frac
    then per snapshot t = 1..T:
        u32 degenerate_rois
        adjacency bitset: upper triangle (i < j) in row-major order, packed
            LSB-first, ceil(N*(N-1)/2 / 8) bytes
        correlation upper triangle including the diagonal, row-major,
            N*(N+1)/2 float32
    then window means: T x N float32, row-major.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .ingest import RoiTimeSeries

_MAGIC = b"DFCG"
_VERSION = 1

# (window, stride) presets matching the two acquisition regimes supported
PRESETS = {"ukb-like": (50, 16), "clinical-like": (16, 3)}


@dataclass
class GraphConfig:
    window: int = 50
    stride: int = 16
    frac: float = 0.3

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0.0 < self.frac < 1.0:
            raise ConfigError("frac must be in (0, 1)")


@dataclass
class GraphSnapshot:
    """One (correlation, adjacency) pair at 1-based time index t."""

    t: int
    C: np.ndarray           # (N, N) float64, symmetric, values in [-1, 1]
    A: np.ndarray           # (N, N) uint8, symmetric, zero diagonal
    degenerate_rois: int = 0

    @property
    def n_edges(self) -> int:
        return int(self.A.sum()) // 2


@dataclass
class DynamicGraph:
    snapshots: list[GraphSnapshot]
    window: int
    stride: int
    N: int
    T: int
    frac: float
    window_means: np.ndarray  # (T, N) per-window mean ROI signal

    def adjacency_stack(self) -> np.ndarray:
        return np.stack([s.A for s in self.snapshots])


@dataclass
class GraphStats:
    n_graphs: int
    n_nodes_avg: float
    n_edges_avg: float
    d_max: int
    d_avg: float
    K: float
    n_zero_wedge: int = 0  # snapshots that contributed no wedges (flagged)

    def as_dict(self) -> dict:
        return {
            "n_graphs": self.n_graphs,
            "n_nodes_avg": self.n_nodes_avg,
            "n_edges_avg": self.n_edges_avg,
            "d_max": self.d_max,
            "d_avg": self.d_avg,
            "K": self.K,
            "n_zero_wedge": self.n_zero_wedge,
        }


def _pearson(window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Correlation matrix plus boolean mask of zero-variance (flat) rows."""
    X = np.asarray(window, dtype=np.float64)
    N, W = X.shape
    if W < 2:
        raise ConfigError("window must contain at least 2 samples")
    flat = X.max(axis=1) == X.min(axis=1)
    Xc = X - X.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(Xc, axis=1)
    norms[flat] = 1.0  # avoid division by ~0; rows zeroed below
    U = Xc / norms[:, None]
    C = U @ U.T
    C = np.clip((C + C.T) / 2.0, -1.0, 1.0)
    C[flat, :] = 0.0
    C[:, flat] = 0.0
    idx = np.arange(N)
    C[idx[~flat], idx[~flat]] = 1.0
    return C, flat


def pearson_fc(window: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlation over a (N, W) window, W >= 2.

    Flat (zero-variance) rows get all-zero correlations, diagonal included;
    everything else has an exact unit diagonal.
    """
    C, _ = _pearson(window)
    return C


def threshold_topk(C: np.ndarray, frac: float) -> np.ndarray:
    """Binarize a correlation matrix by keeping its top values.

    Selects the k = round(frac * N^2) largest entries of the full matrix
    (diagonal included; ties broken by ascending (row, col)), drops the
    diagonal, and symmetrizes: (i, j) is an edge iff either orientation was
    selected. Returns a (N, N) uint8 adjacency.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ConfigError(f"expected square matrix, got {C.shape}")
    if not 0.0 < frac < 1.0:
        raise ConfigError("frac must be in (0, 1)")
    N = C.shape[0]
    k = int(round(frac * N * N))
    if k <= N:
        warnings.warn(
            f"top-k budget k={k} does not exceed the diagonal size N={N}; "
            "adjacency may be empty",
            RuntimeWarning,
            stacklevel=2,
        )
    vals = C.ravel()
    rows, cols = np.divmod(np.arange(N * N), N)
    order = np.lexsort((cols, rows, -vals))
    mask = np.zeros(N * N, dtype=bool)
    mask[order[:k]] = True
    mask = mask.reshape(N, N)
    A = (mask | mask.T).astype(np.uint8)
    np.fill_diagonal(A, 0)
    return A


def build_dynamic_graph(ts: RoiTimeSeries, window: int, stride: int,
                        frac: float) -> DynamicGraph:
    """Slide a window over the series and threshold each windowed correlation.

    Snapshot t covers columns [(t-1)*stride, (t-1)*stride + window);
    T = floor((T_max - window) / stride) + 1.
    """
    cfg = GraphConfig(window, stride, frac)
    if window > ts.T_max:
        raise ConfigError(
            f"window {window} exceeds series length {ts.T_max} for {ts.subject_id}"
        )
    T = (ts.T_max - window) // stride + 1
    snapshots = []
    means = np.empty((T, ts.N))
    for t in range(1, T + 1):
        start = (t - 1) * stride
        sl = ts.P[:, start:start + window]
        C, flat = _pearson(sl)
        A = threshold_topk(C, cfg.frac)
        snapshots.append(GraphSnapshot(t, C, A, degenerate_rois=int(flat.sum())))
        means[t - 1] = sl.mean(axis=1)
    return DynamicGraph(snapshots, window, stride, ts.N, T, cfg.frac, means)


def _triangle_wedge_counts(A: np.ndarray) -> tuple[int, int]:
    Ai = A.astype(np.int64)
    tri = int(np.trace(Ai @ Ai @ Ai)) // 6
    deg = Ai.sum(axis=1)
    wedges = int((deg * (deg - 1)).sum()) // 2
    return tri, wedges


def graph_stats(graphs: list[DynamicGraph]) -> GraphStats:
    """Aggregate structural statistics over every snapshot of every graph.

    K is the transitivity 3 * triangles / wedges, pooled across snapshots;
    snapshots without wedges add nothing to either count and are flagged.
    """
    if not graphs:
        raise ConfigError("graph_stats needs at least one dynamic graph")
    n_snapshots = 0
    node_sum = 0
    edge_sum = 0
    d_max = 0
    tri_total = 0
    wedge_total = 0
    n_zero_wedge = 0
    for g in graphs:
        for snap in g.snapshots:
            n_snapshots += 1
            node_sum += g.N
            edge_sum += snap.n_edges
            deg = snap.A.sum(axis=1)
            d_max = max(d_max, int(deg.max()) if deg.size else 0)
            tri, wedges = _triangle_wedge_counts(snap.A)
            if wedges == 0:
                n_zero_wedge += 1
            tri_total += tri
            wedge_total += wedges
    n_nodes_avg = node_sum / n_snapshots
    n_edges_avg = edge_sum / n_snapshots
    d_avg = 2.0 * n_edges_avg / n_nodes_avg
    K = 3.0 * tri_total / wedge_total if wedge_total > 0 else 0.0
    return GraphStats(n_snapshots, n_nodes_avg, n_edges_avg, d_max, d_avg, K,
                      n_zero_wedge)


def _pack_upper(A: np.ndarray) -> bytes:
    iu = np.triu_indices(A.shape[0], k=1)
    bits = A[iu].astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_upper(buf: bytes, N: int) -> np.ndarray:
    n_bits = N * (N - 1) // 2
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:n_bits]
    A = np.zeros((N, N), dtype=np.uint8)
    iu = np.triu_indices(N, k=1)
    A[iu] = bits
    return A | A.T


def save_dynamic_graph(graph: DynamicGraph, path: str | Path) -> None:
    """Write the documented binary cache format (see module docstring)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    N, T = graph.N, graph.T
    iu = np.triu_indices(N, k=0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<5I", _VERSION, N, T, graph.window, graph.stride))
        fh.write(struct.pack("<f", graph.frac))
        for snap in graph.snapshots:
            fh.write(struct.pack("<I", snap.degenerate_rois))
            fh.write(_pack_upper(snap.A))
            fh.write(snap.C[iu].astype("<f4").tobytes())
        fh.write(graph.window_means.astype("<f4").tobytes())


def load_dynamic_graph(path: str | Path) -> DynamicGraph:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise DataFormatError(f"{path}: not a dynamic-graph cache (bad magic)")
    version, N, T, window, stride = struct.unpack_from("<5I", raw, 4)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported cache version {version}")
    (frac,) = struct.unpack_from("<f", raw, 24)
    off = 28
    n_adj_bytes = (N * (N - 1) // 2 + 7) // 8
    n_corr = N * (N + 1) // 2
    iu = np.triu_indices(N, k=0)
    snapshots = []
    for t in range(1, T + 1):
        (degen,) = struct.unpack_from("<I", raw, off)
        off += 4
        A = _unpack_upper(raw[off:off + n_adj_bytes], N)
        off += n_adj_bytes
        tri = np.frombuffer(raw, dtype="<f4", count=n_corr, offset=off)
        off += 4 * n_corr
        C = np.zeros((N, N), dtype=np.float64)
        C[iu] = tri
        C = C + np.triu(C, k=1).T
        snapshots.append(GraphSnapshot(t, C, A, degenerate_rois=int(degen)))
    means = np.frombuffer(raw, dtype="<f4", count=T * N, offset=off)
    means = means.reshape(T, N).astype(np.float64)
    return DynamicGraph(snapshots, window, stride, N, T, float(frac), means)
