"""Ablation harness: run pretrain + finetune across a one-knob grid.

Every cell shares the same seeds and base configuration; only the ablated
knob differs (asserted before running). Results land in a schema-stable
long-format CSV with columns (grid, cell, fold, task, metric, value); rows
with fold "mean"/"std" carry the cross-fold aggregates. Failed cells are
recorded in the JSON summary and the remaining cells still run.

Grids:
    mask_ratio     values set both the node and edge masking ratios
    criterion      fixed four cells: node in {mse, sce} x edge in {mse, bce}
    ssl_fraction   fraction of subjects used for pretraining
    label_fraction fraction of labeled training subjects per fold
    recon_target   {node-only, edge-only, both} reconstruction targets
"""

from __future__ import annotations

import json
from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynfc import GraphConfig
from .errors import ConfigError
from .ingest import DatasetManifest, FoldSplit, split_folds
from .model import ModelConfig
from .objectives import MaskConfig
from .train import TrainConfig, finetune, pretrain

CSV_COLUMNS = ("grid", "cell", "fold", "task", "metric", "value")

CRITERION_CELLS = ("mse+mse", "mse+bce", "sce+mse", "sce+bce")
RECON_CELLS = ("node-only", "edge-only", "both")
DEFAULT_MASK_RATIOS = (0.1, 0.3, 0.5, 0.7, 0.9)

GRIDS = ("mask_ratio", "criterion", "ssl_fraction", "label_fraction", "recon_target")


@dataclass
class AblationConfig:
    model: ModelConfig
    train_pre: TrainConfig
    train_fine: TrainConfig
    mask: MaskConfig
    graph: GraphConfig
    task: str = "classify"
    k_folds: int = 5

    def snapshot(self) -> dict:
        return {
            "model": self.model.as_dict(),
            "train_pre": self.train_pre.as_dict(),
            "train_fine": self.train_fine.as_dict(),
            "mask": self.mask.as_dict(),
            "graph": {"window": self.graph.window, "stride": self.graph.stride,
                      "frac": self.graph.frac},
            "task": self.task,
            "k_folds": self.k_folds,
        }


def _apply_knob(base: AblationConfig, grid: str, value) -> tuple[AblationConfig, float]:
    """Return (cell config, ssl_fraction). Only the ablated knob may change."""
    cfg = deepcopy(base)
    ssl_fraction = 1.0
    if grid == "mask_ratio":
        cfg.mask.ratio_node = float(value)
        cfg.mask.ratio_edge = float(value)
    elif grid == "criterion":
        node, edge = str(value).split("+")
        cfg.mask.node_criterion = node
        cfg.mask.edge_criterion = edge
    elif grid == "ssl_fraction":
        ssl_fraction = float(value)
        if not 0.0 < ssl_fraction <= 1.0:
            raise ConfigError("ssl_fraction values must be in (0, 1]")
    elif grid == "label_fraction":
        cfg.train_fine.label_fraction = float(value)
    elif grid == "recon_target":
        if value not in RECON_CELLS:
            raise ConfigError(f"unknown recon_target cell {value!r}")
        cfg.mask.recon_target = str(value)
    else:
        raise ConfigError(f"unknown grid {grid!r}; choose from {GRIDS}")
    return cfg, ssl_fraction


def _assert_only_knob_differs(base: AblationConfig, cell: AblationConfig,
                              grid: str) -> None:
    allowed = {
        "mask_ratio": {("mask", "ratio_node"), ("mask", "ratio_edge")},
        "criterion": {("mask", "node_criterion"), ("mask", "edge_criterion")},
        "ssl_fraction": set(),
        "label_fraction": {("train_fine", "label_fraction")},
        "recon_target": {("mask", "recon_target")},
    }[grid]
    a, b = base.snapshot(), cell.snapshot()
    diffs = set()
    for section in a:
        if isinstance(a[section], dict):
            for key in a[section]:
                if a[section][key] != b[section][key]:
                    diffs.add((section, key))
        elif a[section] != b[section]:
            diffs.add((section,))
    if not diffs <= allowed:
        raise ConfigError(f"ablation hygiene violated: {sorted(diffs - allowed)} changed")


def default_grid_values(grid: str):
    if grid == "criterion":
        return list(CRITERION_CELLS)
    if grid == "recon_target":
        return list(RECON_CELLS)
    if grid == "mask_ratio":
        return list(DEFAULT_MASK_RATIOS)
    if grid in ("ssl_fraction", "label_fraction"):
        return [0.25, 0.5, 1.0]
    raise ConfigError(f"unknown grid {grid!r}; choose from {GRIDS}")


def _ssl_subset(manifest: DatasetManifest, fraction: float,
                seed: int) -> DatasetManifest:
    if fraction >= 1.0:
        return manifest
    keep = max(2, round(fraction * len(manifest)))
    order = np.random.default_rng((seed, 0x55D)).permutation(len(manifest))[:keep]
    entries = [manifest.entries[i] for i in sorted(order)]
    return DatasetManifest(entries, root=manifest.root)


def ablate(manifest: DatasetManifest, grid: str, values, base: AblationConfig,
           out_dir: str | Path | None = None,
           folds: FoldSplit | None = None) -> tuple[list[dict], dict]:
    """Run one grid; returns (csv rows, summary dict) and optionally writes
    results.csv / summary.json."""
    if grid not in GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; choose from {GRIDS}")
    values = list(values) if values else default_grid_values(grid)
    if grid == "criterion":
        values = list(CRITERION_CELLS)  # the four-cell grid is fixed
    if not values:
        raise ConfigError("empty ablation grid")
    folds = folds or split_folds(manifest, base.k_folds, base.train_fine.seed)

    rows: list[dict] = []
    statuses: dict[str, dict] = {}
    for value in values:
        cell = str(value)
        try:
            cfg, ssl_fraction = _apply_knob(base, grid, value)
            _assert_only_knob_differs(base, cfg, grid)
            ssl_manifest = _ssl_subset(manifest, ssl_fraction, cfg.train_pre.seed)
            ckpt = pretrain(ssl_manifest, cfg.model, cfg.train_pre, cfg.mask,
                            cfg.graph)
            reports = finetune(manifest, ckpt, cfg.task, folds, cfg.model,
                               cfg.train_fine, cfg.graph)
            for r in reports:
                for metric, val in r.metrics().items():
                    rows.append({"grid": grid, "cell": cell, "fold": r.fold,
                                 "task": r.task, "metric": metric, "value": val})
            statuses[cell] = {"status": "ok"}
        except Exception as exc:  # cell failures recorded, run continues
            statuses[cell] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    summary = {
        "grid": grid,
        "cells": statuses,
        "base_config": base.snapshot(),
        "n_rows": len(rows),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows_csv(rows, out_dir / "results.csv")
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2,
                                                         sort_keys=True))
    return rows, summary


def write_rows_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in CSV_COLUMNS:
                v = row[col]
                cells.append(repr(v) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def read_rows_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"results CSV not found: {path}")
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or lines[0].split(",") != list(CSV_COLUMNS):
        raise ConfigError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        row = dict(zip(CSV_COLUMNS, parts))
        row["value"] = float(row["value"])
        rows.append(row)
    return rows
