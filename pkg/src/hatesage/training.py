"""Class-weighted training with stratified cross-validation."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np

from .graph import DirectedGraph, NodeTable, from_edges
from .models import (
    FEATURE_SETS,
    ModelConfig,
    ModelParams,
    bind,
    init_params,
    lr_logits,
    mlp_logits,
    sage_logits,
)
from .ndiff import NonFiniteError, Tape, backward, forward_op, grad_check
from .samplers import RngStream, _rng, sample_neighbors

__all__ = [
    "TrainHyper",
    "FoldPlan",
    "TrainRun",
    "FoldResult",
    "AdamState",
    "class_weight",
    "weighted_bce_loss",
    "adam_step",
    "stratified_kfold",
    "train",
    "predict",
    "model_grad_check",
    "read_config",
    "write_predictions",
    "read_predictions",
]

log = logging.getLogger(__name__)


def class_weight(labels) -> float:
    """Negative-to-positive count ratio of a training fold."""
    labels = np.asarray(labels)
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos == 0 or neg == 0:
        raise ValueError(f"single-class fold ({pos} positive, {neg} negative)")
    return float(Fraction(neg, pos))


def weighted_bce_loss(logits, labels, pos_weight: float) -> float:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, 1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(labels) != len(logits):
        raise ValueError("logits and labels differ in length")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logit")
    t = Tape()
    z = t.leaf(logits)
    return t.value(forward_op(t, "weighted_bce", (z,), labels=labels, pos_weight=pos_weight)).item()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    state.t += 1
    out = {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, np.zeros_like(p)), dtype=np.float64)
        if g.shape != p.shape:
            g = g.reshape(p.shape) if g.size == p.size else None
            if g is None:
                raise ValueError(f"gradient shape mismatch for {k}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**state.t)
        v_hat = v / (1 - beta2**state.t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[k], state.v[k] = m, v
    return out, state


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    folds: list[tuple[np.ndarray, np.ndarray]]  # (train ids, test ids)
    seed: int


def stratified_kfold(labels, k: int = 5, seed: int = 0, nodes=None) -> FoldPlan:
    """Label-stratified k-fold partition.

    ``labels`` are for the nodes in ``nodes`` (default ``0..len-1``); entries
    below 0 are treated as unlabeled and left out.  Each class is shuffled
    and dealt round-robin, starting each class where the previous one ended
    so fold sizes differ by at most one.
    """
    labels = np.asarray(labels)
    nodes = np.arange(len(labels)) if nodes is None else np.asarray(nodes)
    if k < 2:
        raise ValueError("k must be >= 2")
    gen = np.random.default_rng(seed)
    assign = np.full(len(labels), -1)
    cursor = 0
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} members, fewer than k={k}")
        idx = gen.permutation(idx)
        assign[idx] = (cursor + np.arange(len(idx))) % k
        cursor = (cursor + len(idx)) % k
    folds = []
    for f in range(k):
        test = np.sort(nodes[assign == f])
        train = np.sort(nodes[(assign >= 0) & (assign != f)])
        folds.append((train, test))
    return FoldPlan(k, folds, seed)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 512
    k: int = 5
    seed: int = 0


@dataclass
class TrainRun:
    config: ModelConfig
    hyper: TrainHyper
    fold: int
    pos_weight: float
    losses: list[float]
    params: ModelParams


@dataclass
class FoldResult:
    run: TrainRun
    nodes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray


def _feature_matrix(table: NodeTable, config: ModelConfig) -> np.ndarray:
    cols = table.columns(kinds=FEATURE_SETS[config.feature_set])
    if len(cols) == 0:
        raise ValueError(f"no feature columns for feature set {config.feature_set!r}")
    return table.features[:, cols]


def _logits(tape, p, config, graph, x, batch, gen, training):
    drop_gen = gen if training else None
    if config.kind == "lr":
        return lr_logits(tape, p, tape.leaf(x[batch]))
    if config.kind == "mlp":
        return mlp_logits(tape, p, tape.leaf(x[batch]), config.layers, config.dropout_rate, drop_gen)
    block = sample_neighbors(graph, batch, config.fanouts, config.direction, gen)
    return sage_logits(tape, p, block, x, config, drop_gen)


def predict(config: ModelConfig, params: ModelParams, graph: DirectedGraph | None, x: np.ndarray, nodes, rng=0, batch_size=4096) -> np.ndarray:
    """Sigmoid scores for ``nodes``; GraphSAGE draws fresh neighbor samples."""
    gen = _rng(rng)
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.empty(len(nodes))
    for s in range(0, len(nodes), batch_size):
        batch = nodes[s : s + batch_size]
        t = Tape()
        z = _logits(t, bind(t, params), config, graph, x, batch, gen, training=False)
        out[s : s + batch_size] = t.value(t.sigmoid(z)).ravel()
    return out


def _train_fold(config, hyper, graph, x, labels, train_ids, fold, stream: RngStream) -> TrainRun:
    y = labels[train_ids]
    pos_weight = class_weight(y)
    params = init_params(config, x.shape[1], stream.child(0))
    gen = stream.child(1).generator()
    state = AdamState()
    tensors = params.tensors
    losses = []
    for epoch in range(hyper.epochs):
        order = gen.permutation(len(train_ids))
        total = 0.0
        for s in range(0, len(order), hyper.batch_size):
            sel = order[s : s + hyper.batch_size]
            batch = train_ids[sel]
            t = Tape()
            p = bind(t, tensors)
            z = _logits(t, p, config, graph, x, batch, gen, training=True)
            loss = forward_op(t, "weighted_bce", (z,), labels=labels[batch], pos_weight=pos_weight)
            grads = backward(t, loss)
            tensors, state = adam_step(
                tensors,
                {k: grads.get(i, np.zeros_like(t.value(i))).reshape(tensors[k].shape) for k, i in p.items()},
                state,
                lr=hyper.lr,
            )
            total += t.value(loss).item() * len(batch)
        losses.append(total / len(train_ids))
        if not np.isfinite(losses[-1]):
            raise NonFiniteError(f"fold {fold}: non-finite loss at epoch {epoch}")
        log.debug("fold %d epoch %d loss %.6f", fold, epoch, losses[-1])
    return TrainRun(config, hyper, fold, pos_weight, losses, ModelParams(tensors, params.init))


def train(
    config: ModelConfig,
    graph: DirectedGraph | None,
    table: NodeTable,
    fold_plan: FoldPlan,
    rng: RngStream | int = 0,
    hyper: TrainHyper = TrainHyper(),
) -> list[FoldResult]:
    """Train one model per fold and score that fold's test nodes.

    Features are re-standardized per fold on the fold's training nodes.
    Only training-node labels are read while fitting.
    """
    if config.kind == "sage" and graph is None:
        raise ValueError("GraphSAGE needs a graph")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    results = []
    for f, (train_ids, test_ids) in enumerate(fold_plan.folds):
        fold_table = table.standardized(train_ids)
        x = _feature_matrix(fold_table, config)
        labels = np.where(np.isin(np.arange(table.node_count), train_ids), table.labels, -1)
        fs = stream.child(f)
        run = _train_fold(config, hyper, graph, x, labels, train_ids, f, fs)
        scores = predict(config, run.params, graph, x, test_ids, fs.child(2))
        results.append(FoldResult(run, test_ids, table.labels[test_ids], scores))
    return results


# ---------------------------------------------------------------------------
# gradient checking over model configurations


def _tiny_problem(config: ModelConfig, gen, n=7, in_dim=3):
    x = gen.normal(size=(n, in_dim))
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and gen.random() < 0.35]
    # ring keeps every union degree >= 2 so no softmax runs over a single neighbor
    pairs += [(i, (i + 1) % n) for i in range(n)]
    graph = from_edges(pairs, n)
    seeds = np.sort(gen.choice(n, size=4, replace=False))
    labels = np.array([1, 0, 1, 0])
    return x, graph, seeds, labels


def model_grad_check(config: ModelConfig, seed: int = 0, points: int = 10, eps: float = 1e-5, in_dim: int = 3, margin: float = 1e-3, max_tries: int = 200) -> float:
    """Worst gradient error over ``points`` seeded random problems.

    Each point draws fresh parameters, features, a small graph and a
    neighbor sample.  Points whose relu/leaky-relu inputs or max-pool gaps
    come within ``margin`` of a kink are redrawn.
    """
    gen = np.random.default_rng(seed)
    worst = 0.0
    done = tries = 0
    while done < points:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not draw points away from non-differentiable kinks")
        params = init_params(config, in_dim, gen)
        # non-zero biases so no unit sits exactly at a kink
        for k, v in params.tensors.items():
            if k.endswith(".b") or k == "b":
                params.tensors[k] = gen.normal(scale=0.5, size=v.shape)
        x, graph, seeds, labels = _tiny_problem(config, gen, in_dim=in_dim)
        block = sample_neighbors(graph, seeds, config.fanouts, config.direction, gen) if config.kind == "sage" else None

        def build(t, p):
            if config.kind == "lr":
                z = lr_logits(t, p, t.leaf(x[seeds]))
            elif config.kind == "mlp":
                z = mlp_logits(t, p, t.leaf(x[seeds]), config.layers)
            else:
                z = sage_logits(t, p, block, x, config)
            return forward_op(t, "weighted_bce", (z,), labels=labels, pos_weight=2.0)

        t = Tape()
        build(t, bind(t, params))
        if t.kink_margin < margin:
            continue
        worst = max(worst, grad_check(build, params.tensors, eps))
        done += 1
    return worst


# ---------------------------------------------------------------------------
# files


def read_config(path: str | os.PathLike) -> tuple[ModelConfig, TrainHyper, dict[str, str]]:
    """Parse ``key=value`` lines (``#`` comments allowed).

    ``model`` may name a preset (``lr``, ``mlp``, ``sage-mean`` ...); other
    keys override it.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    return config_from_mapping(raw) + (raw,)


CONFIG_KEYS = {
    "model", "kind", "aggregator", "feature_set", "hidden_dim", "layers", "direction",
    "fanouts", "dropout_rate", "dropout", "leaky_alpha", "lr", "epochs", "batch_size", "k", "seed",
}


def config_from_mapping(raw: Mapping[str, str]) -> tuple[ModelConfig, TrainHyper]:
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    model_keys = {"kind", "aggregator", "feature_set", "hidden_dim", "layers", "direction", "fanouts", "dropout_rate", "leaky_alpha"}
    overrides = {k: raw[k] for k in model_keys if k in raw}
    if "dropout" in raw:
        overrides["dropout_rate"] = raw["dropout"]
    preset = raw.get("model")
    if preset is None:
        kind = raw.get("kind", "sage")
        preset = f"sage-{raw.get('aggregator', 'mean')}" if kind == "sage" else kind
    base = ModelConfig.preset(preset)
    merged = base.as_dict()
    merged.update(overrides)
    config = ModelConfig.from_dict(merged)
    hyper = TrainHyper(
        lr=float(raw.get("lr", 1e-3)),
        epochs=int(raw.get("epochs", 30)),
        batch_size=int(raw.get("batch_size", 512)),
        k=int(raw.get("k", 5)),
        seed=int(raw.get("seed", 0)),
    )
    return config, hyper


PRED_HEADER = ["node_id", "label", "group", "score"]


def write_predictions(path, node_ids, labels, groups, scores) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(PRED_HEADER) + "\n")
        for n, y, g, s in zip(node_ids, labels, groups, scores):
            fh.write(f"{int(n)},{int(y)},{g},{float(s)!r}\n")


def read_predictions(path) -> dict[str, np.ndarray]:
    """Read a predictions file; raises ValueError naming the file on bad input."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty predictions file") from None
        missing = [c for c in ("node_id", "label", "score") if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        pos = {h: i for i, h in enumerate(header)}
        ids, labels, groups, scores = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                ids.append(int(rec[pos["node_id"]]))
                labels.append(int(rec[pos["label"]]))
                scores.append(float(rec[pos["score"]]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed row {rec!r}") from None
            groups.append(rec[pos["group"]].strip() if "group" in pos else "")
    if not ids:
        raise ValueError(f"{path}: no prediction rows")
    return {
        "node_id": np.array(ids, dtype=np.int64),
        "label": np.array(labels, dtype=np.int64),
        "group": np.array(groups, dtype=object),
        "score": np.array(scores, dtype=np.float64),
    }
