"""Differentiable model components as pure functions over explicit parameters.

Components: a gated recurrent time encoder producing one context vector per
window, a node featurizer combining one-hot node identity with that context, a
GIN message-passing encoder, residual MLP decoders for node features, an
inner-product edge decoder, a gated (squeeze-excitation style) readout with
jumping-knowledge concatenation, and scalar task heads.

All ops accept arbitrary leading batch dimensions and are deterministic given
parameters and inputs. Parameters live in plain dataclasses of torch tensors;
initialization is uniform with fan-in scaling from a seeded numpy generator,
so every downstream result is reproducible bit-for-bit.

MLP convention: mlp(x) = x + gelu(x @ w1 + b1) @ w2 + b2. The residual form
means zeroing w2/b2 yields the identity map, which the tests use as a neutral
starting point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    n_nodes: int
    dim: int = 32
    n_layers: int = 4
    gin_eps_learnable: bool = True
    gin_layernorm: bool = False        # per-node normalization after each layer
    node_mask_mode: str = "token"      # "zero" | "token"
    readout: str = "sero"
    head: str = "classify"             # "classify" | "regress"
    sero_reduction: int = 2
    time_encoder: str = "gru"          # "gru" | "pos_embed"
    max_time: int = 512                # positional table size for pos_embed

    def __post_init__(self):
        if self.dim < 1 or self.n_layers < 1:
            raise ConfigError("dim and n_layers must be >= 1")
        if self.n_nodes < 2:
            raise ConfigError("n_nodes must be >= 2")
        if self.node_mask_mode not in ("zero", "token"):
            raise ConfigError(f"unknown node_mask_mode {self.node_mask_mode!r}")
        if self.readout != "sero":
            raise ConfigError(f"unknown readout {self.readout!r}")
        if self.head not in ("classify", "regress"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.time_encoder not in ("gru", "pos_embed"):
            raise ConfigError(f"unknown time_encoder {self.time_encoder!r}")
        if self.sero_reduction < 1:
            raise ConfigError("sero_reduction must be >= 1")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MlpParams:
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor


@dataclass
class GruParams:
    w_in: torch.Tensor   # (N, D) input projection of window summaries
    b_in: torch.Tensor   # (D,)
    w_x: torch.Tensor    # (D, 3D) input-to-gates
    w_h: torch.Tensor    # (D, 3D) hidden-to-gates
    b: torch.Tensor      # (3D,)


@dataclass
class GinLayerParams:
    mlp: MlpParams
    eps: torch.Tensor                    # scalar
    ln_gamma: torch.Tensor | None = None  # (D,) when gin_layernorm is on
    ln_beta: torch.Tensor | None = None


@dataclass
class SeroParams:
    w1: torch.Tensor     # (D, D // reduction)
    b1: torch.Tensor
    w2: torch.Tensor     # (D // reduction, D)
    b2: torch.Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    W: torch.Tensor                 # (N + D, D) input projection
    seq: GruParams
    gin: list[GinLayerParams]
    W_sp: torch.Tensor              # (D, D)
    W_tp: torch.Tensor              # (2D, D)
    dec_node: MlpParams
    dec_edge: MlpParams
    readout: list[SeroParams]
    head_w: torch.Tensor            # (n_layers * D,)
    head_b: torch.Tensor            # (1,)
    mask_token: torch.Tensor        # (N + D,)
    pos_embed: torch.Tensor | None = None  # (max_time, D) when time_encoder=pos_embed

    def named_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        def walk(prefix, obj):
            if isinstance(obj, torch.Tensor):
                yield prefix, obj
            elif isinstance(obj, list):
                for i, item in enumerate(obj):
                    yield from walk(f"{prefix}.{i}", item)
            elif isinstance(obj, (MlpParams, GruParams, GinLayerParams, SeroParams)):
                for f in fields(obj):
                    yield from walk(f"{prefix}.{f.name}", getattr(obj, f.name))

        for f in fields(self):
            if f.name == "config":
                continue
            obj = getattr(self, f.name)
            if obj is None:
                continue
            yield from walk(f.name, obj)

    def groups(self) -> dict[str, list[tuple[str, torch.Tensor]]]:
        """Tensors keyed by top-level parameter group (W, seq, gin, ...)."""
        out: dict[str, list[tuple[str, torch.Tensor]]] = {}
        for name, t in self.named_tensors():
            out.setdefault(name.split(".")[0], []).append((name, t))
        return out

    def tensors(self) -> list[torch.Tensor]:
        return [t for _, t in self.named_tensors()]

    @property
    def dtype(self) -> torch.dtype:
        return self.W.dtype

    def all_finite(self) -> bool:
        return all(torch.isfinite(t).all().item() for t in self.tensors())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy().copy() for name, t in self.named_tensors()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = dict(self.named_tensors())
        if set(named) != set(arrays):
            missing = set(named) ^ set(arrays)
            raise ConfigError(f"parameter name mismatch on load: {sorted(missing)}")
        with torch.no_grad():
            for name, t in named.items():
                src = torch.from_numpy(np.asarray(arrays[name])).to(t.dtype)
                if src.shape != t.shape:
                    raise ConfigError(f"shape mismatch for {name}: {src.shape} vs {t.shape}")
                t.copy_(src)

    def clone(self) -> "ModelParams":
        out = init_params(self.config, seed=0, dtype=self.dtype)
        out.load_state_arrays(self.state_arrays())
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    arr = rng.uniform(-bound, bound, size=shape)
    return torch.tensor(arr, dtype=dtype, requires_grad=True)


def _zeros(shape, dtype) -> torch.Tensor:
    return torch.zeros(shape, dtype=dtype, requires_grad=True)


def _mlp(rng, d_in: int, d_hidden: int, d_out: int, dtype) -> MlpParams:
    return MlpParams(
        w1=_uniform(rng, (d_in, d_hidden), d_in, dtype),
        b1=_zeros((d_hidden,), dtype),
        w2=_uniform(rng, (d_hidden, d_out), d_hidden, dtype),
        b2=_zeros((d_out,), dtype),
    )


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ModelParams:
    """Seeded uniform fan-in initialization; biases and GIN epsilons start at 0."""
    rng = np.random.default_rng((seed, 0xC0FFEE))
    N, D = cfg.n_nodes, cfg.dim
    seq = GruParams(
        w_in=_uniform(rng, (N, D), N, dtype),
        b_in=_zeros((D,), dtype),
        w_x=_uniform(rng, (D, 3 * D), D, dtype),
        w_h=_uniform(rng, (D, 3 * D), D, dtype),
        b=_zeros((3 * D,), dtype),
    )
    gin = []
    for _ in range(cfg.n_layers):
        eps = torch.zeros((), dtype=dtype, requires_grad=cfg.gin_eps_learnable)
        layer = GinLayerParams(mlp=_mlp(rng, D, D, D, dtype), eps=eps)
        if cfg.gin_layernorm:
            layer.ln_gamma = torch.ones(D, dtype=dtype, requires_grad=True)
            layer.ln_beta = _zeros((D,), dtype)
        gin.append(layer)
    reduced = max(1, D // cfg.sero_reduction)
    readout = [
        SeroParams(
            w1=_uniform(rng, (D, reduced), D, dtype),
            b1=_zeros((reduced,), dtype),
            w2=_uniform(rng, (reduced, D), reduced, dtype),
            b2=_zeros((D,), dtype),
        )
        for _ in range(cfg.n_layers)
    ]
    pos = None
    if cfg.time_encoder == "pos_embed":
        pos = _uniform(rng, (cfg.max_time, D), D, dtype)
    return ModelParams(
        config=cfg,
        W=_uniform(rng, (N + D, D), N + D, dtype),
        seq=seq,
        gin=gin,
        W_sp=_uniform(rng, (D, D), D, dtype),
        W_tp=_uniform(rng, (2 * D, D), 2 * D, dtype),
        dec_node=_mlp(rng, D, D, D, dtype),
        dec_edge=_mlp(rng, D, D, D, dtype),
        readout=readout,
        head_w=_uniform(rng, (cfg.n_layers * D,), cfg.n_layers * D, dtype),
        head_b=_zeros((1,), dtype),
        mask_token=_uniform(rng, (N + D,), N + D, dtype),
        pos_embed=pos,
    )


def mlp_apply(x: torch.Tensor, p: MlpParams) -> torch.Tensor:
    return x + F.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def encode_time(window_means: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """Context vectors for each window, (..., T, N) -> (..., T, D).

    GRU mode runs a gated recurrent cell over projected window summaries, so
    output t depends only on windows <= t. pos_embed mode looks positions up
    in a learned table instead.
    """
    cfg = params.config
    T = window_means.shape[-2]
    if cfg.time_encoder == "pos_embed":
        if T > cfg.max_time:
            raise ConfigError(f"T={T} exceeds positional table size {cfg.max_time}")
        out = params.pos_embed[:T]
        return out.expand(*window_means.shape[:-2], T, cfg.dim)
    p = params.seq
    x = window_means @ p.w_in + p.b_in  # (..., T, D)
    D = cfg.dim
    h = torch.zeros(x.shape[:-2] + (D,), dtype=x.dtype)
    outs = []
    for t in range(T):
        gx = x[..., t, :] @ p.w_x + p.b
        gh = h @ p.w_h
        r = torch.sigmoid(gx[..., :D] + gh[..., :D])
        z = torch.sigmoid(gx[..., D:2 * D] + gh[..., D:2 * D])
        n = torch.tanh(gx[..., 2 * D:] + r * gh[..., 2 * D:])
        h = (1.0 - z) * n + z * h
        outs.append(h)
    return torch.stack(outs, dim=-2)


def node_features(eta: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """Per-node features from one-hot identity and time context.

    Row v equals W^T [e_v || eta], i.e. X = W[:N] + eta @ W[N:] broadcast over
    nodes; eta may carry leading dims, giving (..., N, D).
    """
    N = params.config.n_nodes
    w_id = params.W[:N, :]
    return w_id + (eta @ params.W[N:, :]).unsqueeze(-2)


def masked_node_row(params: ModelParams) -> torch.Tensor:
    """Feature-space projection of the learnable mask token, shape (D,)."""
    return params.mask_token @ params.W


def gin_encode(X: torch.Tensor, A: torch.Tensor,
               params: ModelParams) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """GIN message passing: H <- mlp((1 + eps) * H + A @ H) per layer.

    With ``gin_layernorm`` each layer output is additionally normalized per
    node (deterministic, batch-independent); without it, sum aggregation over
    dense graphs grows feature magnitude by roughly the mean degree per layer.
    Returns the final representation plus every layer's output (for the
    jumping-knowledge readout). A must be symmetric with a zero diagonal;
    X is (..., N, D), A is (..., N, N).
    """
    H = X
    outs = []
    for layer in params.gin:
        H = mlp_apply((1.0 + layer.eps) * H + A @ H, layer.mlp)
        if layer.ln_gamma is not None:
            mean = H.mean(dim=-1, keepdim=True)
            var = H.var(dim=-1, unbiased=False, keepdim=True)
            H = layer.ln_gamma * (H - mean) / torch.sqrt(var + 1e-5) + layer.ln_beta
        outs.append(H)
    return outs[-1], outs


def decode_nodes(zproj: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """Row-wise MLP reconstruction of node features from projected representations."""
    return mlp_apply(zproj, params.dec_node)


def edge_hidden(Z: torch.Tensor, params: ModelParams) -> torch.Tensor:
    return mlp_apply(Z @ params.W_sp, params.dec_edge)


def decode_edges_same(Z: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """Edge probabilities sigmoid(H H^T) from one representation.

    The Gram matrix is explicitly symmetrized so the output is exactly
    symmetric, not just up to BLAS rounding.
    """
    H = edge_hidden(Z, params)
    S = H @ H.transpose(-1, -2)
    S = (S + S.transpose(-1, -2)) / 2.0
    return torch.sigmoid(S)


def decode_edges_cross(Z_a: torch.Tensor, Z_b: torch.Tensor,
                       params: ModelParams) -> torch.Tensor:
    """Edge probabilities from two representations, symmetric in (a, b).

    0.5 * (sigmoid(H_a H_b^T) + sigmoid(H_b H_a^T)); swapping the arguments
    produces a bitwise-identical result.
    """
    H_a = edge_hidden(Z_a, params)
    H_b = edge_hidden(Z_b, params)
    return (torch.sigmoid(H_a @ H_b.transpose(-1, -2))
            + torch.sigmoid(H_b @ H_a.transpose(-1, -2))) / 2.0


def readout(layer_outputs: list[torch.Tensor], params: ModelParams,
            gate_override: torch.Tensor | None = None) -> torch.Tensor:
    """Gated pooling per layer, concatenated across layers.

    Per layer: squeeze to the node-mean vector, excite it through a 2-layer
    MLP into a query q, gate each node by sigmoid(z_v . q), and average the
    gated node embeddings. Gates depend on node content only, so the result
    is invariant to node permutations. ``gate_override`` substitutes fixed
    gates (testing hook).
    """
    if not layer_outputs:
        raise ConfigError("readout needs at least one layer output")
    pooled = []
    for Z, p in zip(layer_outputs, params.readout):
        m = Z.mean(dim=-2)
        q = F.gelu(m @ p.w1 + p.b1) @ p.w2 + p.b2
        if gate_override is None:
            gates = torch.sigmoid((Z * q.unsqueeze(-2)).sum(dim=-1))
        else:
            gates = gate_override
        pooled.append((gates.unsqueeze(-1) * Z).mean(dim=-2))
    return torch.cat(pooled, dim=-1)


def head_predict(g_seq: torch.Tensor, params: ModelParams) -> torch.Tensor:
    """Temporal mean-pool then affine map to one output.

    g_seq is (..., T, n_layers * D); returns (...,). For classification the
    value is a logit; for regression it is the raw prediction.
    """
    if g_seq.shape[-2] == 0:
        raise ConfigError("head_predict needs a non-empty sequence")
    g = g_seq.mean(dim=-2)
    return g @ params.head_w + params.head_b[0]


def downstream_logits(window_means: torch.Tensor, A: torch.Tensor,
                      params: ModelParams) -> torch.Tensor:
    """Full unmasked forward pass for fine-tuning and evaluation.

    window_means is (..., T, N), A is (..., T, N, N); returns (...,) scalar
    predictions (logits for classification, values for regression).
    """
    eta = encode_time(window_means, params)           # (..., T, D)
    X = node_features(eta, params)                    # (..., T, N, D)
    _, layers = gin_encode(X, A, params)
    g_seq = readout(layers, params)                   # (..., T, L*D)
    return head_predict(g_seq, params)
