"""Classifiers: logistic regression, feed-forward network, GraphSAGE.

Each model has a tape-level builder (``*_logits``) used for training and a
plain ``*_forward`` wrapper returning numpy logits.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .ndiff import Tape, forward_op
from .samplers import SampledBlock, _rng

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_params",
    "bind",
    "lr_logits",
    "mlp_logits",
    "sage_logits",
    "lr_forward",
    "mlp_forward",
    "sage_forward",
    "save_checkpoint",
    "load_checkpoint",
]

KINDS = ("lr", "mlp", "sage")
AGGREGATORS = ("mean", "maxpool", "attention")
FEATURE_SETS = {
    "text+user": ("text", "user"),
    "text+user+network": ("text", "user", "network"),
}


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "sage"
    aggregator: str = "mean"
    feature_set: str = "text+user"
    hidden_dim: int = 128
    layers: int = 2
    direction: str = "both"
    fanouts: tuple[int, ...] = (25, 10)
    dropout_rate: float = 0.0
    leaky_alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {tuple(FEATURE_SETS)}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.direction not in ("out", "in", "both"):
            raise ValueError("direction must be out, in or both")
        if self.kind == "lr" and self.layers != 0:
            raise ValueError("lr has layers == 0")
        if self.kind == "sage":
            if self.aggregator not in AGGREGATORS:
                raise ValueError(f"aggregator must be one of {AGGREGATORS}")
            if len(self.fanouts) != self.layers:
                raise ValueError("sage needs one fanout per layer")
            if self.layers < 1:
                raise ValueError("sage needs at least one layer")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """Defaults per model family: ``lr``, ``mlp``, ``sage-mean`` etc."""
        if name == "lr":
            base = cls(kind="lr", layers=0, hidden_dim=0, fanouts=())
        elif name == "mlp":
            base = cls(kind="mlp", layers=2, hidden_dim=64, fanouts=(), dropout_rate=0.5)
        elif name.startswith("sage-"):
            base = cls(kind="sage", aggregator=name[5:])
        else:
            raise ValueError(f"unknown model preset {name!r}")
        return replace(base, **overrides)

    def as_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            if k not in types:
                continue
            t = types[k]
            if "tuple" in str(t):
                kw[k] = tuple(int(x) for x in str(v).split(",") if x.strip())
            elif t in ("int", int):
                kw[k] = int(v)
            elif t in ("float", float):
                kw[k] = float(v)
            else:
                kw[k] = str(v)
        if kw.get("kind") == "lr":
            kw.setdefault("layers", 0)
            kw.setdefault("fanouts", ())
        elif kw.get("kind") == "mlp":
            kw.setdefault("fanouts", ())
        return cls(**kw)


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    init: str = "glorot-uniform"

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.init)


def _glorot(gen, fan_in, fan_out, shape):
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"zero-dimension layer {shape}")
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-lim, lim, size=shape)


def init_params(config: ModelConfig, in_dim: int, rng=0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    gen = _rng(rng)
    t: dict[str, np.ndarray] = {}

    def dense(name, i, o):
        t[f"{name}.W"] = _glorot(gen, i, o, (i, o))
        t[f"{name}.b"] = np.zeros(o)

    if in_dim <= 0:
        raise ValueError("zero-dimension input")
    if config.kind == "lr":
        t["W"] = _glorot(gen, in_dim, 1, (in_dim, 1))
        t["b"] = np.zeros(1)
    elif config.kind == "mlp":
        d = in_dim
        for i in range(config.layers):
            dense(f"hidden{i}", d, config.hidden_dim)
            d = config.hidden_dim
        dense("out", d, 1)
    else:
        h = config.hidden_dim
        d = in_dim
        for i in range(config.layers):
            name = f"sage{i}"
            if config.aggregator == "mean":
                agg_dim = d
            elif config.aggregator == "maxpool":
                dense(f"{name}.pool", d, h)
                agg_dim = h
            else:
                t[f"{name}.att.W"] = _glorot(gen, d, h, (d, h))
                t[f"{name}.att.a"] = _glorot(gen, 2 * h, 1, (2 * h, 1))
                agg_dim = h
            dense(name, d + agg_dim, h)
            d = h
        dense("head", d, 1)
    return ModelParams(t)


def bind(tape: Tape, params: ModelParams | Mapping[str, np.ndarray]) -> dict[str, int]:
    """Put every parameter on the tape as a leaf; returns name -> node id."""
    tensors = params.tensors if isinstance(params, ModelParams) else params
    ids = {}
    for k, v in tensors.items():
        ids[k] = tape.leaf(v, k)
    return ids


def _dense(tape, p, name, x):
    return tape.add(tape.matmul(x, p[f"{name}.W"]), p[f"{name}.b"])


def _dropout(tape, x, rate, gen):
    if rate <= 0 or gen is None:
        return x
    shape = tape.value(x).shape
    mask = (gen.random(shape) >= rate) / (1.0 - rate)
    return tape.mul(x, tape.leaf(mask))


def lr_logits(tape: Tape, p: Mapping[str, int], x: int) -> int:
    return tape.add(tape.matmul(x, p["W"]), p["b"])


def mlp_logits(tape, p, x, layers: int, dropout_rate=0.0, gen=None) -> int:
    h = x
    for i in range(layers):
        h = _dropout(tape, h, dropout_rate, gen)
        h = tape.relu(_dense(tape, p, f"hidden{i}", h))
    h = _dropout(tape, h, dropout_rate, gen)
    return _dense(tape, p, "out", h)


def _aggregate(tape, p, name, aggregator, h, n_target, block_idx, off, alpha):
    nbr = tape.gather(h, block_idx)
    if aggregator == "mean":
        return forward_op(tape, "segment_mean", (nbr,), segment_spec=off)
    if aggregator == "maxpool":
        pooled = tape.relu(_dense(tape, p, f"{name}.pool", nbr))
        return forward_op(tape, "segment_max", (pooled,), segment_spec=off)
    # attention: score e_uv = leaky_relu(a . [W h_v || W h_u]), softmax over u
    z = tape.matmul(h, p[f"{name}.att.W"])
    z_nbr = tape.gather(z, block_idx)
    owner = np.repeat(np.arange(n_target), np.diff(off))
    z_self = tape.gather(z, owner)
    scores = tape.leaky_relu(tape.matmul(tape.concat(z_self, z_nbr), p[f"{name}.att.a"]), alpha)
    return forward_op(tape, "segment_softmax_weighted_sum", (scores, z_nbr), segment_spec=off)


def sage_logits(
    tape: Tape,
    p: Mapping[str, int],
    block: SampledBlock,
    features: np.ndarray,
    config: ModelConfig,
    gen=None,
    return_embeddings: bool = False,
) -> int:
    """Logits for ``block.seeds``.

    ``features`` is indexed by graph node id.  Layer ``i`` updates the nodes
    of ``block.layer_nodes[depth - 1 - i]`` from their sampled neighbors in
    the layer above.
    """
    if block.depth != config.layers:
        raise ValueError(f"block depth {block.depth} != model layers {config.layers}")
    needed = [f"sage{i}.W" for i in range(config.layers)]
    if config.aggregator == "maxpool":
        needed.append("sage0.pool.W")
    elif config.aggregator == "attention":
        needed.append("sage0.att.a")
    missing = [k for k in needed if k not in p]
    if missing:
        raise ValueError(f"parameters do not match aggregator {config.aggregator!r}: missing {missing}")
    h = tape.leaf(features[block.layer_nodes[-1]])
    L = config.layers
    for i in range(L):
        level = L - 1 - i
        n_target = len(block.layer_nodes[level])
        off = block.offsets[level]
        h = _dropout(tape, h, config.dropout_rate, gen)
        agg = _aggregate(
            tape, p, f"sage{i}", config.aggregator, h, n_target, block.neighbor_index[level], off, config.leaky_alpha
        )
        self_h = tape.gather(h, np.arange(n_target))
        h = tape.relu(_dense(tape, p, f"sage{i}", tape.concat(self_h, agg)))
        if i < L - 1:
            h = tape.normalize(h)
    if return_embeddings:
        return h
    return _dense(tape, p, "head", h)


# plain forward passes ------------------------------------------------------


def lr_forward(params: ModelParams, features) -> np.ndarray:
    t = Tape()
    p = bind(t, params)
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != params["W"].shape[0]:
        raise ValueError(f"feature width {x.shape[1]} != weight rows {params['W'].shape[0]}")
    return t.value(lr_logits(t, p, t.leaf(x))).ravel()


def mlp_forward(params: ModelParams, features, dropout_active=False, rng=None, dropout_rate=0.5) -> np.ndarray:
    t = Tape()
    p = bind(t, params)
    layers = sum(1 for k in params.tensors if k.startswith("hidden") and k.endswith(".W"))
    gen = _rng(rng) if dropout_active else None
    x = t.leaf(np.asarray(features, dtype=np.float64))
    return t.value(mlp_logits(t, p, x, layers, dropout_rate, gen)).ravel()


def sage_forward(
    params: ModelParams,
    block: SampledBlock,
    features,
    config: ModelConfig,
    dropout_active=False,
    rng=None,
) -> np.ndarray:
    t = Tape()
    p = bind(t, params)
    gen = _rng(rng) if dropout_active else None
    return t.value(sage_logits(t, p, block, np.asarray(features, dtype=np.float64), config, gen)).ravel()


# checkpoints ---------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(directory: str | os.PathLike, config: ModelConfig, params: ModelParams, extra: Mapping[str, str] | None = None) -> Path:
    """Manifest of ``key=value`` lines plus one ``<name>.bin`` blob per tensor.

    Blob layout (little-endian): u32 name length, utf-8 name, u32 rank,
    u64 dims, f64 values in row-major order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in config.as_dict().items()]
    lines.append(f"init={params.init}")
    lines.append("tensors=" + ",".join(params.tensors))
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    for name, arr in params.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        with open(d / f"{name}.bin", "wb") as fh:
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    return d


def _read_blob(path: Path) -> tuple[str, np.ndarray]:
    data = path.read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    name = data[4 : 4 + n].decode()
    pos = 4 + n
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shape = struct.unpack_from(f"<{rank}Q", data, pos)
    pos += 8 * rank
    arr = np.frombuffer(data[pos:], dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def load_checkpoint(directory: str | os.PathLike) -> tuple[ModelConfig, ModelParams, dict[str, str]]:
    d = Path(directory)
    meta = {}
    for line in (d / MANIFEST).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    config = ModelConfig.from_dict(meta)
    tensors = {}
    for name in filter(None, meta.get("tensors", "").split(",")):
        stored, arr = _read_blob(d / f"{name}.bin")
        if stored != name:
            raise ValueError(f"{d / name}.bin holds tensor {stored!r}")
        tensors[name] = arr
    return config, ModelParams(tensors, meta.get("init", "glorot-uniform")), meta
