"""Training drivers: Adam with decoupled weight decay, LR schedules, pretraining
and fine-tuning loops, checkpointing, and a finite-difference gradient check.

Checkpoint container: a NumPy ``.npz`` archive holding one array per named
parameter under ``param/<name>``, Adam moments under ``adam/m/<name>`` and
``adam/v/<name>``, the Adam step count under ``adam/t``, and a ``__meta__``
0-d unicode array with a JSON object carrying ``format_version`` (mandatory),
the model/train config snapshots, the epoch counter, the dtype, and the numpy
bit-generator state. Arrays round-trip exactly, so a reloaded checkpoint
reproduces forward outputs bit for bit.

Determinism: all randomness flows through numpy generators seeded from
(seed, epoch, subject-index) tuples, so a fixed seed reproduces loss logs
bit-identically regardless of batch composition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .dynfc import GraphConfig, build_dynamic_graph
from .errors import ConfigError, NanLossError
from .ingest import DatasetManifest, FoldSplit, RoiTimeSeries, sample_segment
from .metrics import MetricReport, accuracy, auroc, binarize_logits, mae
from .model import DTYPES, ModelConfig, ModelParams, downstream_logits, init_params
from .objectives import MaskConfig, stmae_step

CHECKPOINT_VERSION = 1

# parameter groups transferred from a pretraining checkpoint into a
# fine-tuning model; the rest (decoders, readout, head) start fresh
ENCODER_GROUPS = ("W", "seq", "gin", "mask_token", "pos_embed")

LOSS_LOG_COLUMNS = ("epoch", "step", "l_sp_node", "l_sp_edge", "l_tp_node",
                    "l_tp_edge", "l_total", "lr")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    schedule: str = "cosine"          # "cosine" | "onecycle"
    onecycle_peak: float = 1e-3
    onecycle_floor: float = 5e-7
    onecycle_warm_frac: float = 0.2
    seed: int = 0
    segment_length: int = 150
    label_fraction: float = 1.0
    decoupled_weight_decay: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        # lr == 0 permitted: a null update is a useful test fixture
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 < self.onecycle_warm_frac < 1.0:
            raise ConfigError("onecycle_warm_frac must be in (0, 1)")
        if self.onecycle_floor >= self.onecycle_peak:
            raise ConfigError("onecycle_floor must be below onecycle_peak")
        if self.schedule not in ("cosine", "onecycle"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must be in (0, 1]")
        if self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp from cfg.lr to the peak over the warm fraction of steps,
    then cosine decay down to the floor."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = round(cfg.onecycle_warm_frac * total_steps)
    if step <= warm:
        if step == warm or warm == 0:
            return cfg.onecycle_peak
        return cfg.lr + (cfg.onecycle_peak - cfg.lr) * step / warm
    if step == total_steps:
        return cfg.onecycle_floor
    progress = (step - warm) / (total_steps - warm)
    return cfg.onecycle_floor + (cfg.onecycle_peak - cfg.onecycle_floor) * 0.5 * (
        1.0 + math.cos(math.pi * progress))


def schedule_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "onecycle":
        return onecycle_lr(step, total_steps, cfg)
    return cosine_lr(step, total_steps, cfg.lr)


class Adam:
    """Adam with optional decoupled weight decay over named parameter tensors.

    With weight_decay == 0 the coupled and decoupled variants perform exactly
    the same update.
    """

    def __init__(self, named_params: list[tuple[str, torch.Tensor]],
                 weight_decay: float = 0.0, decoupled: bool = True,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named_params = named_params
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in named_params}
        self.v = {n: torch.zeros_like(p) for n, p in named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0 and not self.decoupled:
                g = g + self.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            if self.weight_decay != 0.0 and self.decoupled:
                p.add_(p, alpha=-lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array(self.t, dtype=np.int64)}
        for n in self.m:
            out[f"adam/m/{n}"] = self.m[n].numpy().copy()
            out[f"adam/v/{n}"] = self.v[n].numpy().copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam/t"])
        for n in self.m:
            self.m[n] = torch.from_numpy(np.asarray(arrays[f"adam/m/{n}"])).to(self.m[n].dtype)
            self.v[n] = torch.from_numpy(np.asarray(arrays[f"adam/v/{n}"])).to(self.v[n].dtype)


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer_arrays: dict
    epoch: int
    rng_state: dict
    train_config: dict
    format_version: int = CHECKPOINT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": a for n, a in ckpt.params.state_arrays().items()}
    arrays.update(ckpt.optimizer_arrays)
    meta = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.params.config.as_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "dtype": str(ckpt.params.dtype).removeprefix("torch."),
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig(**meta["model_config"])
        params = init_params(cfg, seed=0, dtype=DTYPES[meta["dtype"]])
        params.load_state_arrays(
            {k.removeprefix("param/"): data[k] for k in data.files if k.startswith("param/")})
        opt_arrays = {k: data[k] for k in data.files if k.startswith("adam/")}
    return Checkpoint(params=params, optimizer_arrays=opt_arrays,
                      epoch=meta["epoch"], rng_state=meta["rng_state"],
                      train_config=meta["train_config"])


def _subject_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, epoch, index))


def _segment_graph(ts: RoiTimeSeries, segment_length: int, graph_cfg: GraphConfig,
                   rng: np.random.Generator):
    if ts.T_max > segment_length:
        seg, _ = sample_segment(ts, segment_length, rng)
    else:
        seg = ts
    return build_dynamic_graph(seg, graph_cfg.window, graph_cfg.stride, graph_cfg.frac)


def _write_loss_log(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(LOSS_LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in LOSS_LOG_COLUMNS) + "\n")


def pretrain(manifest: DatasetManifest, model_cfg: ModelConfig,
             train_cfg: TrainConfig, mask_cfg: MaskConfig | None = None,
             graph_cfg: GraphConfig | None = None,
             out_dir: str | Path | None = None) -> Checkpoint:
    """Self-supervised pretraining over the whole (unlabeled) manifest.

    Subjects are shuffled each epoch, one random fixed-length segment per
    subject per epoch; the batch loss is the mean subject total. Writes
    ``loss_log.csv`` and ``checkpoint.npz`` under out_dir when given. Aborts
    with NanLossError (plus a JSON dump) on the first non-finite loss.
    """
    mask_cfg = mask_cfg or MaskConfig()
    graph_cfg = graph_cfg or GraphConfig()
    if len(manifest) == 0:
        raise ConfigError("pretrain needs a non-empty dataset")
    series = [manifest.load_series(e) for e in manifest.entries]
    min_len = min(ts.T_max for ts in series)
    t_seg = (min(train_cfg.segment_length, min_len) - graph_cfg.window) \
        // graph_cfg.stride + 1
    if t_seg < 3 and not mask_cfg.allow_spatial_only:
        raise ConfigError(
            f"segments of length {train_cfg.segment_length} yield T={t_seg} < 3 "
            "snapshots; enlarge segment_length or allow_spatial_only")

    dtype = DTYPES[train_cfg.dtype]
    params = init_params(model_cfg, seed=train_cfg.seed, dtype=dtype)
    opt = Adam(list(params.named_tensors()), weight_decay=train_cfg.weight_decay,
               decoupled=train_cfg.decoupled_weight_decay)
    n = len(series)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng((train_cfg.seed, 0xD00D))

    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows: list[dict] = []
    step_idx = 0
    ckpt = None
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        for b0 in range(0, n, train_cfg.batch_size):
            batch = order[b0:b0 + train_cfg.batch_size]
            lr = schedule_lr(step_idx, total_steps, train_cfg)
            opt.zero_grad()
            parts = {k: 0.0 for k in ("l_sp_node", "l_sp_edge", "l_tp_node",
                                      "l_tp_edge", "l_total")}
            loss_sum = None
            for idx in batch:
                rng = _subject_rng(train_cfg.seed, epoch, int(idx))
                graph = _segment_graph(series[idx], train_cfg.segment_length,
                                       graph_cfg, rng)
                breakdown, loss = stmae_step(graph, params, mask_cfg, rng)
                loss_sum = loss if loss_sum is None else loss_sum + loss
                for key in parts:
                    parts[key] += getattr(breakdown, key)
            batch_loss = loss_sum / len(batch)
            mean_parts = {k: v / len(batch) for k, v in parts.items()}
            if not math.isfinite(mean_parts["l_total"]):
                dump = {"epoch": epoch, "step": step_idx,
                        "subjects": [series[i].subject_id for i in batch],
                        "losses": mean_parts, "lr": lr}
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                raise NanLossError(
                    f"non-finite loss at epoch {epoch}, step {step_idx}", dump)
            batch_loss.backward()
            opt.step(lr)
            log_rows.append({"epoch": epoch, "step": step_idx, **mean_parts, "lr": lr})
            step_idx += 1
        ckpt = Checkpoint(params=params, optimizer_arrays=opt.state_arrays(),
                          epoch=epoch + 1,
                          rng_state=shuffle_rng.bit_generator.state,
                          train_config=train_cfg.as_dict())
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoint.npz")
            _write_loss_log(log_rows, out_dir / "loss_log.csv")
    if out_dir is not None:
        _write_loss_log(log_rows, out_dir / "loss_log.csv")
    ckpt.loss_log = log_rows  # type: ignore[attr-defined]
    return ckpt


def _label_subset(entries, fraction: float, task: str,
                  rng: np.random.Generator) -> list:
    """Deterministic stratified subset of labeled training subjects."""
    if fraction >= 1.0:
        return list(entries)
    if task == "classify":
        picked = []
        by_class: dict[int, list] = {}
        for e in entries:
            by_class.setdefault(int(e.labels["class"]), []).append(e)
        for c in sorted(by_class):
            group = by_class[c]
            keep = max(1, round(fraction * len(group)))
            order = rng.permutation(len(group))[:keep]
            picked.extend(group[i] for i in sorted(order))
        return picked
    keep = max(2, round(fraction * len(entries)))
    order = rng.permutation(len(entries))[:keep]
    return [entries[i] for i in sorted(order)]


def _init_finetune_params(model_cfg: ModelConfig, ckpt: Checkpoint | None,
                          seed: int, dtype: torch.dtype) -> ModelParams:
    params = init_params(model_cfg, seed=seed, dtype=dtype)
    if ckpt is None:
        return params
    if ckpt.model_config.n_nodes != model_cfg.n_nodes:
        raise ConfigError(
            f"checkpoint n_nodes {ckpt.model_config.n_nodes} != dataset {model_cfg.n_nodes}")
    if (ckpt.model_config.dim, ckpt.model_config.n_layers) != (model_cfg.dim, model_cfg.n_layers):
        raise ConfigError("checkpoint encoder shape differs from requested model config")
    source = dict(ckpt.params.named_tensors())
    with torch.no_grad():
        for name, t in params.named_tensors():
            if name.split(".")[0] in ENCODER_GROUPS and name in source:
                t.copy_(source[name].to(dtype))
    return params


def _stack_forward(params: ModelParams, graphs: list, dtype) -> torch.Tensor:
    means = torch.tensor(np.stack([g.window_means for g in graphs]), dtype=dtype)
    adjs = torch.tensor(np.stack([g.adjacency_stack() for g in graphs]), dtype=dtype)
    return downstream_logits(means, adjs, params)


def finetune(manifest: DatasetManifest, ckpt: Checkpoint | None, task: str,
             folds: FoldSplit, model_cfg: ModelConfig, train_cfg: TrainConfig,
             graph_cfg: GraphConfig | None = None,
             out_dir: str | Path | None = None) -> list[MetricReport]:
    """Cross-validated fine-tuning; ckpt=None is the supervised-from-scratch
    baseline (identical code path, random init).

    Per fold: the encoder starts from the checkpoint (or randomly), a fresh
    readout and head are attached, everything is trained end to end, and the
    held-out fold is scored on full unsegmented series. Returns one report
    per fold plus "mean" and "std" aggregates.
    """
    if task not in ("classify", "regress"):
        raise ConfigError(f"unknown task {task!r}")
    graph_cfg = graph_cfg or GraphConfig()
    label_key = "class" if task == "classify" else "target"
    missing = [e.subject_id for e in manifest.entries if label_key not in e.labels]
    if missing:
        raise ConfigError(f"subjects missing {label_key!r} label: {missing}")
    dtype = DTYPES[train_cfg.dtype]
    entries = {e.subject_id: e for e in manifest.entries}
    series = {e.subject_id: manifest.load_series(e) for e in manifest.entries}
    subject_index = {e.subject_id: i for i, e in enumerate(manifest.entries)}

    reports: list[MetricReport] = []
    for fold in range(folds.k):
        train_ids = folds.train_ids(fold)
        test_ids = folds.test_ids(fold)
        sub_rng = np.random.default_rng((train_cfg.seed, 0xFADE, fold))
        train_entries = _label_subset([entries[s] for s in train_ids],
                                      train_cfg.label_fraction, task, sub_rng)
        params = _init_finetune_params(model_cfg, ckpt,
                                       train_cfg.seed * 1009 + fold, dtype)
        opt = Adam(list(params.named_tensors()), weight_decay=train_cfg.weight_decay,
                   decoupled=train_cfg.decoupled_weight_decay)
        n = len(train_entries)
        steps_per_epoch = math.ceil(n / train_cfg.batch_size)
        total_steps = train_cfg.epochs * steps_per_epoch
        shuffle_rng = np.random.default_rng((train_cfg.seed, 0xBEEF, fold))
        step_idx = 0
        for epoch in range(train_cfg.epochs):
            order = shuffle_rng.permutation(n)
            for b0 in range(0, n, train_cfg.batch_size):
                batch = [train_entries[i] for i in order[b0:b0 + train_cfg.batch_size]]
                lr = schedule_lr(step_idx, total_steps, train_cfg)
                opt.zero_grad()
                graphs, targets = [], []
                for e in batch:
                    rng = _subject_rng(train_cfg.seed, epoch, subject_index[e.subject_id])
                    graphs.append(_segment_graph(series[e.subject_id],
                                                 train_cfg.segment_length,
                                                 graph_cfg, rng))
                    targets.append(float(e.labels[label_key]))
                preds = _stack_forward(params, graphs, dtype)
                y = torch.tensor(targets, dtype=dtype)
                if task == "classify":
                    loss = torch.nn.functional.binary_cross_entropy_with_logits(preds, y)
                else:
                    loss = ((preds - y) ** 2).mean()
                if not math.isfinite(float(loss.detach())):
                    raise NanLossError(f"non-finite fine-tune loss in fold {fold}",
                                       {"fold": fold, "epoch": epoch, "step": step_idx})
                loss.backward()
                opt.step(lr)
                step_idx += 1
        # deterministic evaluation on full series of held-out subjects only
        assert not set(e.subject_id for e in train_entries) & set(test_ids)
        scores, labels = [], []
        with torch.no_grad():
            for sid in test_ids:
                g = build_dynamic_graph(series[sid], graph_cfg.window,
                                        graph_cfg.stride, graph_cfg.frac)
                pred = _stack_forward(params, [g], dtype)[0]
                scores.append(float(pred))
                labels.append(float(entries[sid].labels[label_key]))
        scores_arr = np.array(scores)
        labels_arr = np.array(labels)
        if task == "classify":
            reports.append(MetricReport(
                task=task, n=len(test_ids), fold=fold,
                auroc=auroc(scores_arr, labels_arr.astype(int)),
                accuracy=accuracy(binarize_logits(scores_arr), labels_arr.astype(int))))
        else:
            reports.append(MetricReport(task=task, n=len(test_ids), fold=fold,
                                        mae=mae(scores_arr, labels_arr)))
    reports.extend(aggregate_reports(reports))
    if out_dir is not None:
        write_metric_outputs(reports, Path(out_dir))
    return reports


def aggregate_reports(per_fold: list[MetricReport]) -> list[MetricReport]:
    """Mean and std rows over the per-fold reports."""
    folds = [r for r in per_fold if isinstance(r.fold, int)]
    out = []
    for stat, fn in (("mean", np.mean), ("std", np.std)):
        kwargs = {}
        for name in ("auroc", "accuracy", "mae"):
            vals = [getattr(r, name) for r in folds if getattr(r, name) is not None]
            if vals:
                kwargs[name] = float(fn(vals))
        out.append(MetricReport(task=folds[0].task, n=sum(r.n for r in folds),
                                fold=stat, **kwargs))
    return out


def write_metric_outputs(reports: list[MetricReport], out_dir: Path) -> None:
    """CSV of (fold, metric, value) rows plus a JSON summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", encoding="ascii", newline="\n") as fh:
        fh.write("fold,metric,value\n")
        for r in reports:
            for name, value in r.metrics().items():
                fh.write(f"{r.fold},{name},{repr(value)}\n")
    summary = {
        "task": reports[0].task,
        "folds": {str(r.fold): r.metrics() for r in reports},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_group: dict[str, float]
    zero_grad_groups: list[str]
    n_checked: int
    n_negligible: int

    def as_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "per_group": self.per_group,
            "zero_grad_groups": self.zero_grad_groups,
            "n_checked": self.n_checked,
            "n_negligible": self.n_negligible,
        }


def grad_check(model_cfg: ModelConfig, seed: int = 0,
               mask_cfg: MaskConfig | None = None, n_samples: int = 20,
               h: float = 1e-6, zero_tol: float = 2e-3,
               params_transform=None) -> GradCheckReport:
    """Central finite differences vs autograd on the combined loss, float64.

    Checks >= n_samples randomly chosen scalars of every parameter group.
    Scalars where both sides fall below zero_tol are counted as negligible
    rather than scored: each loss evaluation carries tens of ulps of rounding
    (~1e-13 absolute at loss scale ~10), so the h = 1e-6 difference quotient
    has an absolute noise floor near 1e-7 and cannot resolve gradients below
    ~1e-3 to the target relative accuracy. Groups whose sampled scalars are
    all negligible (e.g. the head, unused by this loss) are flagged, not
    failed.
    """
    mask_cfg = mask_cfg or MaskConfig()
    data_rng = np.random.default_rng((seed, 0xDA7A))
    window, stride = 8, 4
    t_max = window + stride * 4  # five snapshots
    ts = RoiTimeSeries("gradcheck", data_rng.standard_normal((model_cfg.n_nodes, t_max)))
    graph = build_dynamic_graph(ts, window, stride, 0.4)
    params = init_params(model_cfg, seed=seed, dtype=torch.float64)
    if params_transform is not None:
        params_transform(params)

    def loss_value() -> float:
        with torch.no_grad():
            _, loss = stmae_step(graph, params, mask_cfg, np.random.default_rng((seed, 7)))
        return float(loss)

    _, loss = stmae_step(graph, params, mask_cfg, np.random.default_rng((seed, 7)))
    loss.backward()

    pick_rng = np.random.default_rng((seed, 0x9C3))
    per_group: dict[str, float] = {}
    zero_groups: list[str] = []
    n_checked = 0
    n_negligible = 0
    overall = 0.0
    for group, tensors in params.groups().items():
        flats = [(t, int(i)) for _, t in tensors for i in range(t.numel())]
        if len(flats) > n_samples:
            idx = pick_rng.choice(len(flats), size=n_samples, replace=False)
            flats = [flats[int(i)] for i in idx]
        group_max = 0.0
        group_has_signal = False
        for tensor, flat_idx in flats:
            analytic = 0.0 if tensor.grad is None else float(tensor.grad.view(-1)[flat_idx])
            with torch.no_grad():
                view = tensor.view(-1)
                orig = float(view[flat_idx])
                view[flat_idx] = orig + h
                up = loss_value()
                view[flat_idx] = orig - h
                down = loss_value()
                view[flat_idx] = orig
            fd = (up - down) / (2.0 * h)
            scale = max(abs(analytic), abs(fd))
            if scale < zero_tol:
                n_negligible += 1
                continue
            group_has_signal = True
            n_checked += 1
            rel = abs(analytic - fd) / scale
            group_max = max(group_max, rel)
        if group_has_signal:
            per_group[group] = group_max
            overall = max(overall, group_max)
        else:
            zero_groups.append(group)
    return GradCheckReport(max_rel_err=overall, per_group=per_group,
                           zero_grad_groups=sorted(zero_groups),
                           n_checked=n_checked, n_negligible=n_negligible)
