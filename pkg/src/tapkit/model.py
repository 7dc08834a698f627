"""Pattern-bank attention units and the stacked parser network.

An attention unit keeps a learnable bank of pattern vectors.  Each frame
feature queries the bank through two attention heads, the two head outputs
are merged by one fc layer, added back onto the frame feature, and pushed
through a small feed-forward net.  Stacking units refines the features; the
last unit's attention response is what downstream parsing and the local
loss consume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION
from . import linalg as la
from .errors import ConfigError, DimensionError, FormatError, InputError, NumericError

CHECKPOINT_MAGIC = b"TPSR"

NUM_HEADS = 2  # two groups of query/key/value projections


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the parser network.

    ``feature_dim`` must match the per-frame feature width of the data;
    everything else is free.  Defaults are sized for desk-scale synthetic
    runs.
    """

    feature_dim: int = 64
    pattern_dim: int = 64
    num_patterns: int = 32
    attn_dim: int = 32
    value_dim: int = 32
    hidden_dim: int = 128
    num_classes: int = 4
    num_units: int = 2
    use_layer_norm: bool = False  # normalize f + r before the FFN

    def validate(self) -> None:
        for name in ("feature_dim", "pattern_dim", "num_patterns", "attn_dim",
                     "value_dim", "hidden_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_units < 1:
            raise ConfigError(f"num_units must be >= 1, got {self.num_units}")


class PatternMiner:
    """Learnable bank of sub-action patterns, one pattern per row."""

    def __init__(self, weights):
        arr = np.asarray(weights, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"pattern bank must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("pattern bank contains non-finite entries")
        if not arr.any():
            # all-zero bank makes every response permanently uniform
            raise InputError("pattern bank must not be all-zero")
        self.node = la.Node(arr)

    @property
    def num_patterns(self) -> int:
        return self.node.shape[0]

    @property
    def pattern_dim(self) -> int:
        return self.node.shape[1]

    @property
    def patterns(self) -> np.ndarray:
        return self.node.value


@dataclass
class AttentionHead:
    w_q: la.Node
    w_k: la.Node
    w_v: la.Node


@dataclass
class SPSUnit:
    """One soft-pattern-strengthen block: bank, two heads, merge fc, FFN."""

    miner: PatternMiner
    heads: list[AttentionHead]
    merge_w: la.Node
    merge_b: la.Node
    ffn_w1: la.Node
    ffn_b1: la.Node
    ffn_w2: la.Node
    ffn_b2: la.Node
    ln_gamma: la.Node | None = None
    ln_beta: la.Node | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, la.Node]]:
        yield f"{prefix}miner", self.miner.node
        for h, head in enumerate(self.heads):
            yield f"{prefix}head{h}.w_q", head.w_q
            yield f"{prefix}head{h}.w_k", head.w_k
            yield f"{prefix}head{h}.w_v", head.w_v
        yield f"{prefix}merge.w", self.merge_w
        yield f"{prefix}merge.b", self.merge_b
        if self.ln_gamma is not None:
            yield f"{prefix}norm.gamma", self.ln_gamma
            yield f"{prefix}norm.beta", self.ln_beta
        yield f"{prefix}ffn.w1", self.ffn_w1
        yield f"{prefix}ffn.b1", self.ffn_b1
        yield f"{prefix}ffn.w2", self.ffn_w2
        yield f"{prefix}ffn.b2", self.ffn_b2


def _uniform_init(rng: np.random.Generator, rows: int, cols: int) -> la.Node:
    s = 1.0 / np.sqrt(rows)
    return la.Node(rng.uniform(-s, s, size=(rows, cols)))


def _init_unit(rng: np.random.Generator, cfg: ModelConfig) -> SPSUnit:
    miner = PatternMiner(
        rng.uniform(-1.0 / np.sqrt(cfg.pattern_dim), 1.0 / np.sqrt(cfg.pattern_dim),
                    size=(cfg.num_patterns, cfg.pattern_dim)))
    heads = [
        AttentionHead(
            w_q=_uniform_init(rng, cfg.feature_dim, cfg.attn_dim),
            w_k=_uniform_init(rng, cfg.pattern_dim, cfg.attn_dim),
            w_v=_uniform_init(rng, cfg.pattern_dim, cfg.value_dim),
        )
        for _ in range(NUM_HEADS)
    ]
    return SPSUnit(
        miner=miner,
        heads=heads,
        merge_w=_uniform_init(rng, NUM_HEADS * cfg.value_dim, cfg.feature_dim),
        merge_b=la.Node(np.zeros((1, cfg.feature_dim))),
        ffn_w1=_uniform_init(rng, cfg.feature_dim, cfg.hidden_dim),
        ffn_b1=la.Node(np.zeros((1, cfg.hidden_dim))),
        ffn_w2=_uniform_init(rng, cfg.hidden_dim, cfg.feature_dim),
        ffn_b2=la.Node(np.zeros((1, cfg.feature_dim))),
        ln_gamma=la.Node(np.ones((1, cfg.feature_dim))) if cfg.use_layer_norm else None,
        ln_beta=la.Node(np.zeros((1, cfg.feature_dim))) if cfg.use_layer_norm else None,
    )


class TransParserModel:
    """Stack of attention units plus a linear action classifier.

    Each unit owns its own pattern bank.  ``labels``, when present, gives
    the action-name vocabulary in classifier column order.
    """

    def __init__(self, config: ModelConfig, units: Sequence[SPSUnit],
                 classifier_w: la.Node, labels: Sequence[str] | None = None):
        config.validate()
        if len(units) != config.num_units:
            raise ConfigError(f"config says {config.num_units} units, got {len(units)}")
        if classifier_w.shape != (config.feature_dim, config.num_classes):
            raise DimensionError(
                f"classifier must be {(config.feature_dim, config.num_classes)}, "
                f"got {classifier_w.shape}")
        if labels is not None and len(labels) != config.num_classes:
            raise ConfigError(f"{len(labels)} labels for {config.num_classes} classes")
        self.config = config
        self.units = list(units)
        self.classifier_w = classifier_w
        self.labels = tuple(labels) if labels is not None else None

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int,
                   labels: Sequence[str] | None = None) -> "TransParserModel":
        """Fresh model with uniform(-1/sqrt(fan_in), +) weights, zero biases."""
        config.validate()
        rng = np.random.default_rng(seed)
        units = [_init_unit(rng, config) for _ in range(config.num_units)]
        classifier = _uniform_init(rng, config.feature_dim, config.num_classes)
        return cls(config, units, classifier, labels)

    def named_parameters(self) -> Iterator[tuple[str, la.Node]]:
        for i, unit in enumerate(self.units):
            yield from unit.named_parameters(prefix=f"unit{i}.")
        yield "classifier.w", self.classifier_w

    def parameters(self) -> list[la.Node]:
        return [node for _, node in self.named_parameters()]

    # -- checkpoint container ------------------------------------------------

    def save(self, path) -> None:
        """Write the self-describing little-endian checkpoint container."""
        header = {
            "feature_dim": self.config.feature_dim,
            "pattern_dim": self.config.pattern_dim,
            "num_patterns": self.config.num_patterns,
            "attn_dim": self.config.attn_dim,
            "value_dim": self.config.value_dim,
            "hidden_dim": self.config.hidden_dim,
            "num_classes": self.config.num_classes,
            "num_units": self.config.num_units,
            "use_layer_norm": self.config.use_layer_norm,
            "labels": list(self.labels) if self.labels is not None else None,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries = list(self.named_parameters())
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_FORMAT_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(entries)))
            for name, node in entries:
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
                rows, cols = node.shape
                fh.write(struct.pack("<II", rows, cols))
                fh.write(node.value.astype("<f8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "TransParserModel":
        with open(path, "rb") as fh:
            magic = _read_exact(fh, 4)
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<I", _read_exact(fh, 4))
            if version != CHECKPOINT_FORMAT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
            try:
                header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"unreadable checkpoint header: {exc}") from exc
            try:
                labels = header.pop("labels")
                config = ModelConfig(**header)
            except (KeyError, TypeError) as exc:
                raise FormatError(f"incomplete checkpoint header: {exc}") from exc
            model = cls.initialize(config, seed=0, labels=labels)
            expected = list(model.named_parameters())
            (count,) = struct.unpack("<I", _read_exact(fh, 4))
            if count != len(expected):
                raise FormatError(f"checkpoint has {count} weights, expected {len(expected)}")
            for name, node in expected:
                (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
                stored = _read_exact(fh, nlen).decode("utf-8")
                if stored != name:
                    raise FormatError(f"weight order mismatch: expected {name!r}, got {stored!r}")
                rows, cols = struct.unpack("<II", _read_exact(fh, 8))
                if (rows, cols) != node.shape:
                    raise FormatError(f"{name}: shape {(rows, cols)} does not match {node.shape}")
                raw = _read_exact(fh, rows * cols * 8)
                np.copyto(node.value, np.frombuffer(raw, dtype="<f8").reshape(rows, cols))
            if fh.read(1):
                raise FormatError("trailing bytes after checkpoint payload")
        return model


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class GraphTrace:
    """Differentiable forward pass: per-unit responses/features plus logits."""

    responses: list[la.Node]
    features: list[la.Node]
    logits: la.Node


@dataclass
class ForwardTrace:
    """Inference-side view of the forward pass, plain arrays only."""

    instance_id: str
    responses: list[np.ndarray]
    features: list[np.ndarray]
    logits: np.ndarray

    @property
    def response(self) -> np.ndarray:
        """Last unit's per-frame attention response, the parsing signal."""
        return self.responses[-1]

    @property
    def final_features(self) -> np.ndarray:
        return self.features[-1]


def _unit_forward(feats: la.Node, unit: SPSUnit) -> tuple[la.Node, la.Node]:
    alphas = []
    head_outs = []
    for head in unit.heads:
        queries = la.matmul(feats, head.w_q)
        keys = la.matmul(unit.miner.node, head.w_k)
        alpha = la.softmax_rows(la.matmul(queries, la.transpose(keys)))
        alphas.append(alpha)
        head_outs.append(la.matmul(alpha, la.matmul(unit.miner.node, head.w_v)))
    merged = la.linear(la.hconcat(head_outs[0], head_outs[1]), unit.merge_w, unit.merge_b)
    amplified = la.add(feats, merged)
    if unit.ln_gamma is not None:
        amplified = la.layer_norm_rows(amplified, unit.ln_gamma, unit.ln_beta)
    hidden = la.relu(la.linear(amplified, unit.ffn_w1, unit.ffn_b1))
    out = la.linear(hidden, unit.ffn_w2, unit.ffn_b2)
    # single reported response per frame: mean of the two heads' rows,
    # which keeps every row a probability vector
    response = la.scale(la.add(alphas[0], alphas[1]), 0.5)
    return out, response


def _check_features(features: np.ndarray, feature_dim: int) -> np.ndarray:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"features must be 2-D (frames x dim), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise InputError("empty feature sequence")
    if arr.shape[1] != feature_dim:
        raise DimensionError(f"features have dim {arr.shape[1]}, model expects {feature_dim}")
    if not np.isfinite(arr).all():
        raise NumericError("features contain non-finite entries")
    return arr


def sps_forward(features, unit: SPSUnit) -> tuple[np.ndarray, np.ndarray]:
    """Run one unit over a frame sequence.

    Returns ``(out_features, response)`` where ``response`` rows are the
    mean of the two heads' attention rows (still row-stochastic).
    """
    arr = _check_features(features, unit.heads[0].w_q.shape[0])
    out, response = _unit_forward(la.Node(arr), unit)
    return out.value.copy(), response.value.copy()


def forward_graph(features, model: TransParserModel) -> GraphTrace:
    """Differentiable forward pass through every unit plus the classifier."""
    arr = _check_features(features, model.config.feature_dim)
    node = la.Node(arr)
    responses: list[la.Node] = []
    outs: list[la.Node] = []
    for unit in model.units:
        node, response = _unit_forward(node, unit)
        responses.append(response)
        outs.append(node)
    logits = la.mean_over_rows(la.matmul(node, model.classifier_w))
    return GraphTrace(responses=responses, features=outs, logits=logits)


def forward(features, model: TransParserModel, instance_id: str = "") -> ForwardTrace:
    """Inference forward pass; validates that every output stays finite."""
    graph = forward_graph(features, model)
    trace = ForwardTrace(
        instance_id=instance_id,
        responses=[r.value.copy() for r in graph.responses],
        features=[f.value.copy() for f in graph.features],
        logits=graph.logits.value.copy(),
    )
    for arr in (*trace.responses, *trace.features, trace.logits):
        if not np.isfinite(arr).all():
            raise NumericError("forward pass produced non-finite values")
    return trace


def retrieve_top_frames(traces: Iterable[ForwardTrace], pattern_index: int,
                        top_n: int) -> list[tuple[str, int, float]]:
    """Frames with the highest last-unit response for one pattern.

    Returns up to ``top_n`` ``(instance_id, frame, score)`` triples sorted by
    score descending, ties broken by instance id then frame index ascending.
    """
    if top_n < 0:
        raise InputError(f"top_n must be >= 0, got {top_n}")
    items: list[tuple[float, str, int]] = []
    for trace in traces:
        resp = trace.response
        if not 0 <= pattern_index < resp.shape[1]:
            raise IndexError(
                f"pattern index {pattern_index} out of range for {resp.shape[1]} patterns")
        col = resp[:, pattern_index]
        for t in range(resp.shape[0]):
            items.append((-col[t], trace.instance_id, t))
    items.sort()
    return [(iid, t, -neg) for neg, iid, t in items[:top_n]]
