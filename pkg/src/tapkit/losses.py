"""Training losses and the SGD loop.

Two signals train the parser: a local ratio loss that pulls attention
responses together inside a sub-action and pushes them apart across
sub-actions, and a global classification loss on mean-pooled logits that
keeps the refined features predictive of the action label.  Both are read
off the final unit (for a one-unit model, that unit).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg as la
from .errors import ConfigError, InputError, NumericError
from .model import TransParserModel, forward_graph


@dataclass(frozen=True)
class LossConfig:
    """Loss shape and optimizer settings.

    ``lambda_reg`` is the numerator regularizer of the local ratio loss (it
    keeps the collapsed all-rows-identical solution expensive);
    ``epsilon_div`` guards the denominator, which is otherwise undefined
    when all cross-segment responses coincide.
    """

    lambda_reg: float = 1.0
    epsilon_div: float = 1e-8
    w_local: float = 1.0
    w_global: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0
    epochs: int = 100
    batch_size: int = 1
    seed: int = 0
    pair_subsample: int = 0  # cap per pair set; 0 enumerates exactly

    def validate(self) -> None:
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.epsilon_div <= 0:
            raise ConfigError(f"epsilon_div must be > 0, got {self.epsilon_div}")
        if self.w_local < 0 or self.w_global < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.w_local == 0 and self.w_global == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0 (0 disables), got {self.grad_clip}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pair_subsample < 0:
            raise ConfigError(f"pair_subsample must be >= 0, got {self.pair_subsample}")


def _as_starts(segmentation, n: int) -> tuple[int, ...]:
    starts = getattr(segmentation, "starts", segmentation)
    starts = tuple(int(s) for s in starts)
    prev = 0
    for s in starts:
        if not 1 <= s < n:
            raise InputError(f"segment start {s} outside [1, {n})")
        if s <= prev:
            raise InputError(f"segment starts must be strictly increasing, got {starts}")
        prev = s
    return starts


def pair_indices(n: int, starts: Sequence[int],
                 subsample: int = 0) -> tuple[np.ndarray, ...]:
    """Index arrays (wi, wj, ci, cj) of within- and cross-segment frame pairs.

    Pairs are unordered (i < j).  Single-frame segments contribute no within
    pairs; fewer than two segments means no cross pairs.  ``subsample`` > 0
    caps each pair set at that many evenly strided pairs (deterministic,
    for long sequences where the full O(n^2) enumeration would dominate).
    """
    seg_of = np.searchsorted(np.asarray(starts, dtype=np.intp), np.arange(n), side="right")
    ii, jj = np.triu_indices(n, k=1)
    same = seg_of[ii] == seg_of[jj]
    sets = [ii[same], jj[same], ii[~same], jj[~same]]
    if subsample > 0:
        out = []
        for a, b in ((sets[0], sets[1]), (sets[2], sets[3])):
            if a.size > subsample:
                keep = np.linspace(0, a.size - 1, subsample).astype(np.intp)
                a, b = a[keep], b[keep]
            out.extend((a, b))
        sets = out
    return tuple(sets)


def local_loss(responses, segmentation, cfg: LossConfig,
               pairs: tuple[np.ndarray, ...] | None = None) -> la.Node:
    """Ratio of within-segment to cross-segment mean response distance.

    ``(L_sim + lambda) / (L_dissim + epsilon)`` where both L terms average
    Euclidean distances between attention-response rows over the respective
    pair sets.  With fewer than two segments there are no cross pairs; the
    guarded value ``(L_sim + lambda) / epsilon`` is returned and a
    degenerate-instance warning is emitted.
    """
    cfg.validate()
    resp = la.as_node(responses)
    n = resp.shape[0]
    if pairs is None:
        starts = _as_starts(segmentation, n)
        pairs = pair_indices(n, starts, cfg.pair_subsample)
    wi, wj, ci, cj = pairs
    if wi.size:
        sim = la.mean_all(la.row_norms(la.sub(la.gather_rows(resp, wi),
                                              la.gather_rows(resp, wj))))
    else:
        sim = la.as_node(0.0)
    if ci.size:
        dissim = la.mean_all(la.row_norms(la.sub(la.gather_rows(resp, ci),
                                                 la.gather_rows(resp, cj))))
    else:
        warnings.warn("instance has fewer than 2 segments; local loss "
                      "falls back to its epsilon-guarded denominator",
                      stacklevel=2)
        dissim = la.as_node(0.0)
    return la.div(la.add(sim, la.as_node(cfg.lambda_reg)),
                  la.add(dissim, la.as_node(cfg.epsilon_div)))


def global_loss(final_features, classifier_w, label: int) -> la.Node:
    """NLL of the action label under softmax of mean-pooled frame logits."""
    logits = la.mean_over_rows(la.matmul(la.as_node(final_features),
                                         la.as_node(classifier_w)))
    return la.nll_from_logits(logits, label)


def combined_loss(graph, segmentation, label: int, cfg: LossConfig,
                  pairs=None) -> tuple[la.Node, float, float]:
    """Weighted sum of both losses on a forward graph.

    Returns ``(total, local_value, global_value)``; a disabled side (weight
    zero) is skipped and reported as 0.0.
    """
    parts = []
    local_value = 0.0
    global_value = 0.0
    if cfg.w_local > 0:
        ll = local_loss(graph.responses[-1], segmentation, cfg, pairs=pairs)
        local_value = ll.item()
        parts.append(la.scale(ll, cfg.w_local))
    if cfg.w_global > 0:
        gl = la.nll_from_logits(graph.logits, label)
        global_value = gl.item()
        parts.append(la.scale(gl, cfg.w_global))
    total = parts[0] if len(parts) == 1 else la.add(parts[0], parts[1])
    return total, local_value, global_value


def train(dataset, model: TransParserModel, cfg: LossConfig,
          log_path=None) -> tuple[TransParserModel, list[dict]]:
    """SGD with momentum over ``(features, segmentation, label)`` triples.

    Instance order is reshuffled each epoch from ``cfg.seed``; gradients
    within a batch are averaged in instance order, so the whole run is
    deterministic for a fixed seed.  History carries per-epoch means of the
    raw loss components and the weighted total.  Raises on the first
    non-finite loss, naming the epoch and instance.
    """
    cfg.validate()
    if not dataset:
        raise InputError("training dataset is empty")
    prepared = []
    for features, segmentation, label in dataset:
        arr = np.asarray(features, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != model.config.feature_dim:
            raise InputError(
                f"features must be (frames x {model.config.feature_dim}), got {arr.shape}")
        if not 0 <= int(label) < model.config.num_classes:
            raise InputError(f"label {label} out of range")
        starts = _as_starts(segmentation, arr.shape[0])
        prepared.append((arr, starts, int(label), pair_indices(arr.shape[0], starts)))

    params = model.parameters()
    velocity = [np.zeros_like(p.value) for p in params]
    accum = [np.zeros_like(p.value) for p in params]
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        local_sum = 0.0
        global_sum = 0.0
        total_sum = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            for buf in accum:
                buf.fill(0.0)
            for idx in batch:
                arr, starts, label, pairs = prepared[idx]
                graph = forward_graph(arr, model)
                total, lval, gval = combined_loss(graph, starts, label, cfg, pairs=pairs)
                tval = total.item()
                if not np.isfinite(tval):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, instance {idx}")
                local_sum += lval
                global_sum += gval
                total_sum += tval
                la.backward(total)
                for buf, p in zip(accum, params):
                    buf += p.grad
            inv = 1.0 / len(batch)
            if cfg.grad_clip > 0:
                # global-norm clip keeps the ratio loss's near-pole gradients
                # from blowing up the first few updates
                norm_sq = sum(float((buf * buf).sum()) for buf in accum) * inv * inv
                norm = np.sqrt(norm_sq)
                if norm > cfg.grad_clip:
                    inv *= cfg.grad_clip / norm
            for p, v, buf in zip(params, velocity, accum):
                v *= cfg.momentum
                v += buf * inv
                p.value -= cfg.learning_rate * v
        count = len(prepared)
        history.append({
            "epoch": epoch,
            "local_loss": local_sum / count,
            "global_loss": global_sum / count,
            "total": total_sum / count,
        })
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for record in history:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return model, history
