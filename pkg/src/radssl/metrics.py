"""Classification and regression metrics, aggregated over CV runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

CLASSIFICATION_METRICS = ("ba", "sen", "spe", "auc")
REGRESSION_METRICS = ("mae", "r2")


def auc_score(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from mid-ranks, which is the same pairwise count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes in the labels")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(prob, labels, threshold: float = 0.5) -> dict[str, float]:
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    if pos.all() or not pos.any():
        raise ValueError("classification metrics need both classes in the labels")
    pred = prob >= threshold
    sen = float((pred & pos).sum() / pos.sum())
    spe = float((~pred & ~pos).sum() / (~pos).sum())
    return {"ba": (sen + spe) / 2, "sen": sen, "spe": spe, "auc": auc_score(prob, labels)}


def regression_metrics(pred, target) -> dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    err = pred - target
    ss_tot = float(((target - target.mean()) ** 2).sum())
    ss_res = float((err ** 2).sum())
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else -np.inf
    return {"mae": float(np.abs(err).mean()), "r2": r2}


@dataclass
class MetricsReport:
    task: str
    runs: list[dict[str, float]] = field(default_factory=list)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return CLASSIFICATION_METRICS if self.task == "classification" else REGRESSION_METRICS

    def values(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.runs])

    def mean(self, name: str) -> float:
        return float(self.values(name).mean())

    def std(self, name: str) -> float:
        v = self.values(name)
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    def summary(self) -> dict[str, float]:
        out = {}
        for m in self.metric_names:
            out[f"{m}_mean"] = self.mean(m)
            out[f"{m}_sd"] = self.std(m)
        return out

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        if other.task != self.task:
            raise ValueError("cannot merge reports for different tasks")
        return MetricsReport(self.task, self.runs + other.runs)


def evaluate(preds, labels, task: str) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size < 2:
        raise ValueError("predictions and labels must have equal length >= 2")
    if task == "classification":
        return MetricsReport(task, [classification_metrics(preds, labels)])
    if task == "regression":
        return MetricsReport(task, [regression_metrics(preds, labels)])
    raise ValueError(f"unknown task {task!r}")
