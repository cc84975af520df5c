"""Self-supervised objectives: masking, reconstruction losses, combined step.

Two reconstruction tasks share one encoder. The spatial task masks a
snapshot's node features and edges, encodes the masked snapshot, and
reconstructs the original features (scaled cosine error) and adjacency
(binary cross-entropy). The temporal task picks flanking time indices
t_a < t < t_b, encodes those snapshots unmasked, and reconstructs snapshot t
from their concatenated representations. Per training step, a random subset
of interior time indices receives both losses, and the total is the plain sum
of the spatial and temporal parts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
import torch

from .dynfc import DynamicGraph
from .errors import ConfigError
from .model import (
    ModelParams,
    decode_edges_cross,
    decode_edges_same,
    decode_nodes,
    encode_time,
    gin_encode,
    masked_node_row,
    node_features,
)

_PROB_CLAMP = 1e-7


@dataclass
class MaskConfig:
    """Masking ratios plus objective knobs swept by the ablation harness."""

    ratio_node: float = 0.3
    ratio_edge: float = 0.3
    ratio_time: float = 0.5
    node_mode: str = "token"        # "zero" | "token"
    sce_gamma: float = 2.0
    sce_subset: str = "masked"      # node loss over "masked" rows or "all"
    node_criterion: str = "sce"     # "sce" | "mse"
    edge_criterion: str = "bce"     # "bce" | "mse"
    recon_target: str = "both"      # "both" | "node-only" | "edge-only"
    context_masked: bool = False    # mask the flanking snapshots too
    allow_spatial_only: bool = False  # permit T < 3 (skips the temporal task)

    def __post_init__(self):
        for name in ("ratio_node", "ratio_edge"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0.0 < self.ratio_time <= 1.0:
            raise ConfigError("ratio_time must be in (0, 1]")
        if self.node_mode not in ("zero", "token"):
            raise ConfigError(f"unknown node_mode {self.node_mode!r}")
        if self.sce_gamma < 1.0:
            raise ConfigError("sce_gamma must be >= 1")
        if self.sce_subset not in ("masked", "all"):
            raise ConfigError(f"unknown sce_subset {self.sce_subset!r}")
        if self.node_criterion not in ("sce", "mse"):
            raise ConfigError(f"unknown node_criterion {self.node_criterion!r}")
        if self.edge_criterion not in ("bce", "mse"):
            raise ConfigError(f"unknown edge_criterion {self.edge_criterion!r}")
        if self.recon_target not in ("both", "node-only", "edge-only"):
            raise ConfigError(f"unknown recon_target {self.recon_target!r}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MaskedSnapshot:
    X_m: torch.Tensor          # (N, D) features with masked rows replaced
    A_m: torch.Tensor          # (N, N) adjacency with flipped edge pairs
    node_mask: np.ndarray      # sorted masked node indices
    edge_flips: np.ndarray     # (n_flips, 2) unordered pairs (i < j)


@dataclass
class LossBreakdown:
    """Loss components; sums are formed exactly from the stored parts."""

    l_sp_node: float
    l_sp_edge: float
    l_tp_node: float
    l_tp_edge: float
    l_spatial: float
    l_temporal: float
    l_total: float

    @classmethod
    def from_parts(cls, sp_node: float, sp_edge: float,
                   tp_node: float, tp_edge: float) -> "LossBreakdown":
        l_spatial = sp_node + sp_edge
        l_temporal = tp_node + tp_edge
        return cls(sp_node, sp_edge, tp_node, tp_edge,
                   l_spatial, l_temporal, l_spatial + l_temporal)


def sample_mask_times(T: int, ratio_time: float, rng: np.random.Generator) -> list[int]:
    """Uniform subset of interior time indices {2, ..., T-1}, 1-based.

    Size is max(1, round(ratio_time * (T - 2))); requires T >= 3 so that every
    selected index has flanking context on both sides.
    """
    if T < 3:
        raise ConfigError("temporal objective needs T >= 3")
    size = max(1, round(ratio_time * (T - 2)))
    picks = rng.choice(np.arange(2, T), size=size, replace=False)
    return sorted(int(t) for t in picks)


def sample_context(t: int, T: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform flanking pair (t_a, t_b) with 1 <= t_a < t < t_b <= T."""
    if not 2 <= t <= T - 1:
        raise ConfigError(f"t={t} has no flanking context in [1, {T}]")
    t_a = int(rng.integers(1, t))
    t_b = int(rng.integers(t + 1, T + 1))
    return t_a, t_b


def mask_snapshot(X: torch.Tensor, A: torch.Tensor, cfg: MaskConfig,
                  params: ModelParams, rng: np.random.Generator) -> MaskedSnapshot:
    """Mask round(ratio_node * N) node rows and flip round(ratio_edge * P) edge pairs.

    Masked rows become zeros or the learnable token's feature-space
    projection; edge flips act symmetrically on unordered off-diagonal pairs.
    """
    N = X.shape[-2]
    n_mask = round(cfg.ratio_node * N)
    node_idx = np.sort(rng.choice(N, size=n_mask, replace=False))
    X_m = X.clone()
    if n_mask:
        if cfg.node_mode == "zero":
            X_m[node_idx] = 0.0
        else:
            X_m[node_idx] = masked_node_row(params).to(X.dtype)

    iu = np.triu_indices(N, k=1)
    n_pairs = len(iu[0])
    n_flip = round(cfg.ratio_edge * n_pairs)
    flip_idx = np.sort(rng.choice(n_pairs, size=n_flip, replace=False))
    flips = np.stack([iu[0][flip_idx], iu[1][flip_idx]], axis=1)
    A_m = A.clone()
    if n_flip:
        rows, cols = flips[:, 0], flips[:, 1]
        A_m[rows, cols] = 1.0 - A_m[rows, cols]
        A_m[cols, rows] = 1.0 - A_m[cols, rows]
    return MaskedSnapshot(X_m, A_m, node_idx, flips)


def sce_loss(X: torch.Tensor, X_hat: torch.Tensor, subset,
             gamma: float = 2.0) -> tuple[torch.Tensor, int]:
    """Scaled cosine error: mean over subset rows of (1 - cos(x_v, x_hat_v))^gamma.

    Target rows with zero norm cannot define a cosine; they are skipped and
    counted in the returned int. Raises on an empty subset.
    """
    subset = np.asarray(subset, dtype=int)
    if subset.size == 0:
        raise ConfigError("sce_loss: empty node subset")
    x = X[..., subset, :]
    y = X_hat[..., subset, :]
    x_norm = torch.linalg.vector_norm(x, dim=-1)
    y_norm = torch.linalg.vector_norm(y, dim=-1)
    valid = x_norm > 0
    n_skipped = int((~valid).sum().item())
    if n_skipped == valid.numel():
        raise ConfigError("sce_loss: all target rows have zero norm")
    tiny = torch.finfo(x.dtype).tiny
    cos = (x * y).sum(dim=-1) / (x_norm * y_norm).clamp(min=tiny)
    per_row = (1.0 - cos).clamp(min=0.0) ** gamma
    return per_row[valid].mean(), n_skipped


def bce_loss(A: torch.Tensor, A_hat: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over off-diagonal entries, mean-reduced.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    if A.shape != A_hat.shape:
        raise ConfigError(f"shape mismatch: {tuple(A.shape)} vs {tuple(A_hat.shape)}")
    N = A.shape[-1]
    p = A_hat.clamp(min=_PROB_CLAMP, max=1.0 - _PROB_CLAMP)
    ll = A * torch.log(p) + (1.0 - A) * torch.log(1.0 - p)
    off = ~torch.eye(N, dtype=torch.bool).expand_as(ll)
    return -ll[off].mean()


def mse_node_loss(X: torch.Tensor, X_hat: torch.Tensor, subset) -> torch.Tensor:
    """Mean squared error over the subset's rows (ablation criterion)."""
    subset = np.asarray(subset, dtype=int)
    if subset.size == 0:
        raise ConfigError("mse_node_loss: empty node subset")
    diff = X[..., subset, :] - X_hat[..., subset, :]
    return (diff ** 2).mean()


def mse_edge_loss(A: torch.Tensor, A_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared (A - A_hat) over off-diagonal entries (ablation criterion)."""
    N = A.shape[-1]
    off = ~torch.eye(N, dtype=torch.bool).expand_as(A)
    return ((A - A_hat) ** 2)[off].mean()


def _node_loss(X, X_hat, subset, cfg: MaskConfig) -> torch.Tensor:
    if cfg.node_criterion == "mse":
        return mse_node_loss(X, X_hat, subset)
    return sce_loss(X, X_hat, subset, cfg.sce_gamma)[0]


def _edge_loss(A, A_hat, cfg: MaskConfig) -> torch.Tensor:
    if cfg.edge_criterion == "mse":
        return mse_edge_loss(A, A_hat)
    return bce_loss(A, A_hat)


def spatial_step(X_t: torch.Tensor, A_t: torch.Tensor, params: ModelParams,
                 cfg: MaskConfig, rng: np.random.Generator) -> dict:
    """Masked reconstruction of one snapshot from its own masked encoding.

    Returns node/edge loss tensors plus intermediates. The node loss covers
    masked rows only (or every row with ``sce_subset="all"``); with no masked
    rows in masked mode the node term is zero.
    """
    N = X_t.shape[-2]
    ms = mask_snapshot(X_t, A_t, cfg, params, rng)
    Z, _ = gin_encode(ms.X_m, ms.A_m, params)
    X_hat = decode_nodes(Z @ params.W_sp, params)
    A_hat = decode_edges_same(Z, params)
    subset = ms.node_mask if cfg.sce_subset == "masked" else np.arange(N)
    zero = torch.zeros((), dtype=X_t.dtype)
    l_node = zero
    l_edge = zero
    if cfg.recon_target != "edge-only":
        l_node = _node_loss(X_t, X_hat, subset, cfg) if subset.size else zero
    if cfg.recon_target != "node-only":
        l_edge = _edge_loss(A_t, A_hat, cfg)
    return {"l_node": l_node, "l_edge": l_edge, "masked": ms, "Z": Z,
            "X_hat": X_hat, "A_hat": A_hat}


def temporal_step(X_all: torch.Tensor, A_all: torch.Tensor, t: int,
                  params: ModelParams, cfg: MaskConfig,
                  rng: np.random.Generator) -> dict:
    """Reconstruct snapshot t from flanking snapshots t_a < t < t_b.

    The flanking snapshots are encoded unmasked (or masked when
    ``context_masked``); the node loss covers every row.
    """
    T = X_all.shape[0]
    t_a, t_b = sample_context(t, T, rng)
    X_a, A_a = X_all[t_a - 1], A_all[t_a - 1]
    X_b, A_b = X_all[t_b - 1], A_all[t_b - 1]
    if cfg.context_masked:
        ms_a = mask_snapshot(X_a, A_a, cfg, params, rng)
        ms_b = mask_snapshot(X_b, A_b, cfg, params, rng)
        X_a, A_a, X_b, A_b = ms_a.X_m, ms_a.A_m, ms_b.X_m, ms_b.A_m
    Z_a, _ = gin_encode(X_a, A_a, params)
    Z_b, _ = gin_encode(X_b, A_b, params)
    X_hat = decode_nodes(torch.cat([Z_a, Z_b], dim=-1) @ params.W_tp, params)
    A_hat = decode_edges_cross(Z_a, Z_b, params)
    N = X_all.shape[-2]
    zero = torch.zeros((), dtype=X_all.dtype)
    l_node = zero
    l_edge = zero
    if cfg.recon_target != "edge-only":
        l_node = _node_loss(X_all[t - 1], X_hat, np.arange(N), cfg)
    if cfg.recon_target != "node-only":
        l_edge = _edge_loss(A_all[t - 1], A_hat, cfg)
    return {"l_node": l_node, "l_edge": l_edge, "context": (t_a, t_b),
            "X_hat": X_hat, "A_hat": A_hat}


def stmae_step(graph: DynamicGraph, params: ModelParams, cfg: MaskConfig,
               rng: np.random.Generator) -> tuple[LossBreakdown, torch.Tensor]:
    """One subject's combined loss: spatial + temporal terms summed over
    sampled time indices.

    Returns the float breakdown (whose sums are exact by construction) and
    the differentiable total for the backward pass. With T < 3 and
    ``allow_spatial_only`` the temporal part is skipped with a warning;
    otherwise T < 3 is an error.
    """
    dtype = params.dtype
    T = graph.T
    means = torch.tensor(graph.window_means, dtype=dtype)
    A_all = torch.tensor(graph.adjacency_stack(), dtype=dtype)
    eta = encode_time(means, params)          # (T, D)
    X_all = node_features(eta, params)        # (T, N, D)

    spatial_only = T < 3
    if spatial_only:
        if not cfg.allow_spatial_only:
            raise ConfigError(
                f"T={T} < 3: temporal objective undefined "
                "(set allow_spatial_only to pretrain without it)"
            )
        warnings.warn(f"T={T} < 3: falling back to spatial-only objective",
                      RuntimeWarning, stacklevel=2)
        size = max(1, round(cfg.ratio_time * T))
        tset = sorted(int(t) for t in rng.choice(np.arange(1, T + 1), size=size,
                                                 replace=False))
    else:
        tset = sample_mask_times(T, cfg.ratio_time, rng)

    zero = torch.zeros((), dtype=dtype)
    sp_node, sp_edge, tp_node, tp_edge = zero, zero, zero, zero
    for t in tset:
        sp = spatial_step(X_all[t - 1], A_all[t - 1], params, cfg, rng)
        sp_node = sp_node + sp["l_node"]
        sp_edge = sp_edge + sp["l_edge"]
        if not spatial_only:
            tp = temporal_step(X_all, A_all, t, params, cfg, rng)
            tp_node = tp_node + tp["l_node"]
            tp_edge = tp_edge + tp["l_edge"]

    total = (sp_node + sp_edge) + (tp_node + tp_edge)
    breakdown = LossBreakdown.from_parts(
        float(sp_node.detach()), float(sp_edge.detach()),
        float(tp_node.detach()), float(tp_edge.detach()))
    return breakdown, total
