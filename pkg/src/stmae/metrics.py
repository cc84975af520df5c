"""Evaluation metrics: AUROC (Mann-Whitney with tie correction), MAE, accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class MetricReport:
    task: str
    n: int
    fold: int | str  # fold index, or "mean"/"std" for aggregates
    auroc: float | None = None
    accuracy: float | None = None
    mae: float | None = None

    def metrics(self) -> dict[str, float]:
        out = {}
        for name in ("auroc", "accuracy", "mae"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their block."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be 1-D of equal length")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ConfigError("labels must be binary 0/1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def mae(preds, targets) -> float:
    """Mean absolute error."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise ConfigError("preds and targets must be non-empty and equal length")
    return float(np.abs(preds - targets).mean())


def accuracy(preds, labels) -> float:
    """Fraction of exact matches between binarized predictions and labels."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ConfigError("preds and labels must be non-empty and equal length")
    return float((preds == labels).mean())


def binarize_logits(logits, threshold: float = 0.5) -> np.ndarray:
    """Threshold sigmoid(logit) at ``threshold`` (0.5 means logit > 0)."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = 1.0 / (1.0 + np.exp(-logits))
    return (probs > threshold).astype(int)
