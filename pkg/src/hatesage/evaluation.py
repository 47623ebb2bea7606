"""Accuracy, AUC, predictive-equality fairness and error-cohort statistics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .graph import DirectedGraph

__all__ = [
    "ConfusionMatrix",
    "confusion",
    "prf",
    "auc",
    "FairnessReport",
    "fairness_report",
    "CohortTable",
    "error_cohort_stats",
    "threshold_sweep",
    "emit_report",
    "format_keyvalue",
    "parse_keyvalue",
    "table1_row",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    @property
    def fpr(self) -> float | None:
        """fp / (fp + tn), or None without negatives."""
        return self.fp / self.negatives if self.negatives else None


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts with the rule "positive iff score > threshold"."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("empty input")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = scores > threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def prf(cm: ConfusionMatrix) -> dict[str, float | int | None]:
    """Accuracy, precision, recall and F1.

    A ratio with a zero denominator comes back as ``None`` with its
    ``*_undefined`` flag set to 1.  F1 falls back to 0 (flagged) when
    precision or recall is undefined or both are 0.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    out: dict[str, float | int | None] = {"accuracy": (cm.tp + cm.tn) / cm.total}
    p_den = cm.tp + cm.fp
    r_den = cm.tp + cm.fn
    precision = cm.tp / p_den if p_den else None
    recall = cm.tp / r_den if r_den else None
    out["precision"] = precision
    out["recall"] = recall
    if precision is not None and recall is not None and precision + recall > 0:
        out["f1"] = 2 * precision * recall / (precision + recall)
        f1_flag = 0
    else:
        out["f1"] = 0.0
        f1_flag = 1
    out["precision_undefined"] = int(precision is None)
    out["recall_undefined"] = int(recall is None)
    out["f1_undefined"] = f1_flag
    return out


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks: ties are half-integers
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# fairness


@dataclass
class FairnessReport:
    protected: str
    groups: dict[str, ConfusionMatrix]
    protected_cm: ConfusionMatrix
    rest_cm: ConfusionMatrix
    overall_cm: ConfusionMatrix
    overall: dict[str, float | int | None] = field(default_factory=dict)

    @property
    def fpr_protected(self) -> float | None:
        return self.protected_cm.fpr

    @property
    def fpr_rest(self) -> float | None:
        return self.rest_cm.fpr

    @property
    def fpr_gap(self) -> float | None:
        a, b = self.fpr_protected, self.fpr_rest
        return None if a is None or b is None else a - b

    def as_dict(self) -> dict[str, float | int | str | None]:
        d: dict[str, float | int | str | None] = {"protected_group": self.protected}
        for name, cm in (("protected", self.protected_cm), ("rest", self.rest_cm), ("overall", self.overall_cm)):
            for k in ("tp", "fp", "fn", "tn"):
                d[f"{name}_{k}"] = getattr(cm, k)
        d["protected_accuracy"] = (
            (self.protected_cm.tp + self.protected_cm.tn) / self.protected_cm.total if self.protected_cm.total else None
        )
        d["fpr_protected"] = self.fpr_protected
        d["fpr_rest"] = self.fpr_rest
        d["fpr_gap"] = self.fpr_gap
        d.update(self.overall)
        return d


def fairness_report(scores, labels, groups, protected_group: str, threshold: float = 0.5) -> FairnessReport:
    """Per-group confusion matrices and the protected-minus-rest FPR gap."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups, dtype=object)
    mask = groups == protected_group
    if not mask.any():
        raise ValueError(f"protected group {protected_group!r} absent")
    if not np.any(labels[mask] == 0):
        raise ValueError(f"protected group {protected_group!r} has no negatives")
    per_group = {
        str(g): confusion(scores[groups == g], labels[groups == g], threshold)
        for g in sorted(set(groups.tolist()), key=str)
    }
    prot = per_group[protected_group]
    rest = ConfusionMatrix()
    for g, cm in per_group.items():
        if g != protected_group:
            rest = rest + cm
    overall = confusion(scores, labels, threshold)
    metrics = prf(overall)
    if np.any(labels == 1) and np.any(labels != 1):
        metrics["auc"] = auc(scores, labels)
    return FairnessReport(protected_group, per_group, prot, rest, overall, metrics)


# ---------------------------------------------------------------------------
# error cohorts

COHORTS = ("TP", "FP", "TN", "FN")


@dataclass
class CohortTable:
    rows: dict[str, dict[str, float | int | None]]

    def ratio(self, a: str, b: str, stat: str) -> float | None:
        """stat(a) / stat(b), None if either cohort is absent or b is zero."""
        ra, rb = self.rows.get(a), self.rows.get(b)
        if not ra or not rb or not ra.get("count") or not rb.get("count"):
            return None
        x, y = ra.get(stat), rb.get(stat)
        return None if x is None or not y else x / y


def error_cohort_stats(
    graph: DirectedGraph,
    node_labels,
    nodes,
    scores,
    labels,
    threshold: float = 0.5,
    lexicon_counts=None,
    feature_columns: Mapping[str, np.ndarray] | None = None,
    direction: str = "both",
) -> CohortTable:
    """Describe each outcome cohort of the scored ``nodes``.

    ``node_labels`` are the annotated labels of every graph node (-1 for
    unlabeled); a "hateful neighbor" is a neighbor annotated hateful.
    ``lexicon_counts`` and each array in ``feature_columns`` are indexed by
    graph node.  Empty cohorts report count 0 and ``None`` statistics.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    node_labels = np.asarray(node_labels)
    pred = scores > threshold
    pos = labels == 1
    members = {
        "TP": nodes[pred & pos],
        "FP": nodes[pred & ~pos],
        "TN": nodes[~pred & ~pos],
        "FN": nodes[~pred & pos],
    }
    indptr, indices = graph.adjacency(direction)
    hateful = node_labels == 1
    nbr_hate = np.zeros(graph.node_count, dtype=bool)
    nbr_normal = np.zeros(graph.node_count, dtype=bool)
    for v in np.unique(nodes):
        nb = indices[indptr[v] : indptr[v + 1]]
        nbr_hate[v] = hateful[nb].any()
        nbr_normal[v] = (node_labels[nb] == 0).any()
    rows = {}
    for c in COHORTS:
        m = members[c]
        row: dict[str, float | int | None] = {"count": len(m)}
        if len(m):
            row["frac_hateful_neighbor"] = float(nbr_hate[m].mean())
            row["frac_normal_neighbor"] = float(nbr_normal[m].mean())
            row["lexicon"] = float(np.mean(np.asarray(lexicon_counts)[m])) if lexicon_counts is not None else None
            for name, col in (feature_columns or {}).items():
                row[name] = float(np.mean(np.asarray(col)[m]))
        else:
            row["frac_hateful_neighbor"] = row["frac_normal_neighbor"] = row["lexicon"] = None
            for name in feature_columns or {}:
                row[name] = None
        rows[c] = row
    return CohortTable(rows)


def threshold_sweep(scores, labels, thresholds: Sequence[float]) -> list[dict]:
    out = []
    for t in thresholds:
        row = {"threshold": float(t)}
        row.update(prf(confusion(scores, labels, t)))
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# report output


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_keyvalue(report: Mapping[str, object]) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in report.items())


def parse_keyvalue(text: str) -> dict[str, float | int | str | None]:
    out: dict[str, float | int | str | None] = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        if v == "NA":
            out[k] = None
            continue
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def _pct(v) -> str:
    return "NA" if v is None else f"{100 * v:.1f}"


TABLE1_HEADER = f"{'Model':<28}{'Accuracy':>10}{'Precision':>11}{'Recall':>9}{'F1':>8}{'AUC':>8}"
TABLE2_HEADER = f"{'Model':<28}{'Acc(prot)':>10}{'FP(prot)':>10}{'FP(rest)':>10}{'FPR(prot)':>11}{'FPR(rest)':>11}"


def table1_row(name: str, metrics: Mapping[str, object]) -> str:
    """One accuracy-table row; values in percent with one decimal."""
    cols = [metrics.get(k) for k in ("accuracy", "precision", "recall", "f1", "auc")]
    widths = (10, 11, 9, 8, 8)
    return f"{name:<28}" + "".join(f"{_pct(v):>{w}}" for v, w in zip(cols, widths))


def table2_row(name: str, rep: FairnessReport) -> str:
    d = rep.as_dict()
    fpr = lambda v: "NA" if v is None else f"{100 * v:.1f}%"
    return (
        f"{name:<28}{_pct(d['protected_accuracy']):>10}{rep.protected_cm.fp:>10}{rep.rest_cm.fp:>10}"
        f"{fpr(rep.fpr_protected):>11}{fpr(rep.fpr_rest):>11}"
    )


def format_text(report: Mapping[str, object], name: str = "model", fairness: FairnessReport | None = None) -> str:
    lines = [TABLE1_HEADER, table1_row(name, report)]
    for k in ("precision", "recall", "f1"):
        if report.get(f"{k}_undefined"):
            lines.append(f"# {k} undefined (zero denominator)")
    if fairness is not None:
        lines += ["", TABLE2_HEADER, table2_row(name, fairness)]
    return "\n".join(lines) + "\n"


def emit_report(
    report: Mapping[str, object],
    path: str | os.PathLike,
    fmt: str = "keyvalue",
    name: str = "model",
    fairness: FairnessReport | None = None,
) -> None:
    if fmt == "keyvalue":
        text = format_keyvalue(report)
    elif fmt == "text":
        text = format_text(report, name, fairness)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w") as fh:
        fh.write(text)
