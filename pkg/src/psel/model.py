"""Selection model: scoring head over the zoo, losses, training loop.

A model scores every solver for an instance; training supervises those
scores with either a cross-entropy objective on the best solver or a
listwise ranking likelihood over the full solver ordering. Both losses
are fused tape nodes with hand-derived gradients.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .features import manual_features
from .instances import DomainError, RoutingInstance
from .zoo import PerformanceTable

logger = logging.getLogger("psel")

SCALE_NORM = 500.0   # scale feature fed to the head as N / 500


class LabelError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    loss: str = "ranking"           # "ranking" | "classification"
    augment: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.loss not in ("ranking", "classification"):
            raise DomainError(f"unknown loss {self.loss!r}")
        return self


@dataclass
class SelectionModel:
    solver_ids: list
    kind: str                             # "TSP" | "CVRP"
    encoder_mode: str                     # "flat" | "hierarchical" | "manual"
    encoder_cfg: Optional[enc.EncoderConfig]
    params: dict = field(default_factory=dict)
    head_hidden: int = 256
    feature_norm: Optional[tuple] = None  # (mean, std) for manual features
    feature_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def zoo_size(self) -> int:
        return len(self.solver_ids)

    def rep_dim(self) -> int:
        if self.encoder_mode == "manual":
            return 13 if self.kind == "CVRP" else 11
        return self.encoder_cfg.rep_dim()


def init_selection_model(solver_ids, kind: str, encoder_mode: str = "hierarchical",
                         encoder_cfg: Optional[enc.EncoderConfig] = None,
                         head_hidden: int = 256, seed: int = 0,
                         feature_norm: Optional[tuple] = None) -> SelectionModel:
    rng = np.random.default_rng(seed)
    if encoder_mode in ("flat", "hierarchical"):
        cfg = encoder_cfg or enc.EncoderConfig(mode=encoder_mode)
        cfg.mode = encoder_mode
        cfg.validate()
        in_dim = 3 if kind == "CVRP" else 2
        params = enc.init_encoder_params(cfg, in_dim, rng)
    elif encoder_mode == "manual":
        cfg = None
        params = {}
    else:
        raise DomainError(f"unknown encoder mode {encoder_mode!r}")
    model = SelectionModel(solver_ids=list(solver_ids), kind=kind,
                           encoder_mode=encoder_mode, encoder_cfg=cfg,
                           head_hidden=head_hidden, feature_norm=feature_norm)
    d_in = model.rep_dim() + 1           # + scale feature
    h = head_hidden
    m = len(solver_ids)
    params["head.w1"] = ad.param(rng.normal(0, 1 / math.sqrt(d_in), (d_in, h)), "head.w1")
    params["head.b1"] = ad.param(np.zeros((1, h)), "head.b1")
    params["head.w2"] = ad.param(rng.normal(0, 1 / math.sqrt(h), (h, h)), "head.w2")
    params["head.b2"] = ad.param(np.zeros((1, h)), "head.b2")
    params["head.w3"] = ad.param(rng.normal(0, 1 / math.sqrt(h), (h, m)), "head.w3")
    params["head.b3"] = ad.param(np.zeros((1, m)), "head.b3")
    model.params = params
    return model


def fit_feature_norm(dataset) -> tuple:
    """Per-feature mean and population std of manual features over a dataset."""
    mat = np.vstack([manual_features(it) for it in dataset])
    return mat.mean(axis=0), mat.std(axis=0)


def _representation(model: SelectionModel, instance: RoutingInstance) -> ad.Tensor:
    if model.encoder_mode == "manual":
        vec = model.feature_cache.get(instance.id)
        if vec is None:
            vec = manual_features(instance)
            model.feature_cache[instance.id] = vec
        if model.feature_norm is not None:
            mean, std = model.feature_norm
            vec = (vec - mean) / np.where(std > 0, std, 1.0)
        return ad.tensor(vec.reshape(1, -1))
    return enc.encode(instance, model.params, model.encoder_cfg)


def score_tensor(model: SelectionModel, instance: RoutingInstance) -> ad.Tensor:
    """Solver scores on the tape, shape (1, M)."""
    if instance.kind != model.kind:
        raise DomainError(
            f"model for {model.kind} cannot score a {instance.kind} instance")
    rep = _representation(model, instance)
    scale_feat = ad.tensor([[instance.scale / SCALE_NORM]])
    x = ad.concat_cols(rep, scale_feat)
    p = model.params
    h1 = ad.tanh(ad.broadcast_add_row(ad.matmul(x, p["head.w1"]), p["head.b1"]))
    h2 = ad.tanh(ad.broadcast_add_row(ad.matmul(h1, p["head.w2"]), p["head.b2"]))
    return ad.broadcast_add_row(ad.matmul(h2, p["head.w3"]), p["head.b3"])


def score(model: SelectionModel, instance: RoutingInstance) -> np.ndarray:
    return score_tensor(model, instance).data[0].copy()


# ---------------------------------------------------------------------------
# losses

def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def classification_loss(scores: ad.Tensor, best_index: int) -> ad.Tensor:
    m = scores.shape[1]
    if scores.shape[0] != 1:
        raise DomainError(f"scores must be a (1, M) row, got {scores.shape}")
    if not (0 <= best_index < m):
        raise LabelError(f"best index {best_index} outside zoo of size {m}")
    p = _softmax(scores.data[0])
    value = -math.log(max(p[best_index], 1e-300))

    def vjp(g):
        if scores.requires_grad or scores.parents:
            grad = p.copy()
            grad[best_index] -= 1.0
            scores.accumulate(g[0, 0] * grad.reshape(1, -1))

    return ad.fused([[value]], (scores,), vjp, op="classification-loss")


def ranking_loss(scores: ad.Tensor, phi) -> ad.Tensor:
    """Listwise ranking likelihood: -sum_i log softmax over the rank-i suffix."""
    m = scores.shape[1]
    phi = np.asarray(phi, dtype=np.intp)
    if sorted(phi.tolist()) != list(range(m)):
        raise LabelError(f"ranking label {phi.tolist()} is not a permutation of 0..{m - 1}")
    s = scores.data[0]
    t = s[phi]          # scores in rank order
    value = 0.0
    # suffix softmax probabilities, per-suffix max subtraction
    suffix_p = np.zeros((m, m))    # suffix_p[i, k] = p_i(phi(k)) for k >= i
    for i in range(m):
        tail = t[i:]
        mx = tail.max()
        e = np.exp(tail - mx)
        z = e.sum()
        value += math.log(z) + mx - t[i]
        suffix_p[i, i:] = e / z

    def vjp(g):
        if scores.requires_grad or scores.parents:
            grad_ranked = suffix_p.sum(axis=0) - 1.0   # sum_{i<=k} p_i(phi(k)) - 1
            grad = np.zeros(m)
            grad[phi] = grad_ranked
            scores.accumulate(g[0, 0] * grad.reshape(1, -1))

    return ad.fused([[value]], (scores,), vjp, op="ranking-loss")


def build_labels(row: np.ndarray):
    """(best index, full ranking) for one performance-table row."""
    row = np.asarray(row, dtype=float)
    if not np.isfinite(row).any():
        raise LabelError("all solvers failed on this instance")
    order = np.lexsort((np.arange(len(row)), row))
    return int(order[0]), order.astype(np.intp)


# ---------------------------------------------------------------------------
# training

def greedy_indices(model: SelectionModel, dataset) -> np.ndarray:
    return np.array([int(np.argmax(score(model, it))) for it in dataset])


def mean_gap_of_choices(table: PerformanceTable, dataset, choices) -> float:
    gaps = table.gaps()
    idx = table.row_index()
    return float(np.mean([gaps[idx[it.id], c] for it, c in zip(dataset, choices)]))


def accuracy_of_choices(table: PerformanceTable, dataset, choices) -> float:
    """Percent of instances whose choice attains the row minimum (ties count)."""
    idx = table.row_index()
    hits = 0
    for it, c in zip(dataset, choices):
        row = table.objective[idx[it.id]]
        hits += bool(row[c] <= row.min() + 1e-9)
    return 100.0 * hits / len(dataset)


def selection_accuracy(model: SelectionModel, dataset, table: PerformanceTable) -> float:
    return accuracy_of_choices(table, dataset, greedy_indices(model, dataset))


def _clone_params(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def _restore_params(params: dict, snapshot: dict) -> None:
    for k, v in snapshot.items():
        params[k].data[:] = v


def train(model_init: SelectionModel, train_set, table: PerformanceTable,
          cfg: TrainConfig, val_set=None):
    """Adam over shuffled mini-batches; returns (best-validation model, history).

    history rows: dicts with epoch, train_loss, val_gap. The input model is
    left untouched; the returned model owns its own parameters.
    """
    cfg.validate()
    model = copy.deepcopy(model_init)
    params = model.params
    idx = table.row_index()

    labeled = []
    items = list(train_set)
    for it in items:
        row = table.objective[idx[it.id]]
        try:
            best, phi = build_labels(row)
        except LabelError:
            logger.warning("excluding %s from training: all solvers failed", it.id)
            continue
        if cfg.augment:
            from .instances import augment_8fold
            for view in augment_8fold(it):
                labeled.append((view, best, phi))
        else:
            labeled.append((it, best, phi))
    if not labeled:
        raise ad.TrainingError("no trainable instances (all rows failed)")

    val = list(val_set) if val_set is not None else []
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_val = math.inf
    best_snapshot = _clone_params(params)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labeled))
        total_loss = 0.0
        n_batches = math.ceil(len(labeled) / cfg.batch_size)
        for b in range(n_batches):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            ad.zero_grads(params)
            batch_loss = 0.0
            for k in batch:
                it, best, phi = labeled[k]
                scores = score_tensor(model, it)
                if cfg.loss == "classification":
                    loss = classification_loss(scores, best)
                else:
                    loss = ranking_loss(scores, phi)
                loss = ad.scalar_mul(1.0 / len(batch), loss)
                ad.backward(loss)
                batch_loss += loss.data[0, 0]
            if not math.isfinite(batch_loss):
                raise ad.TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b}")
            grads = ad.collect_grads(params)
            ad.adam_step(params, grads, state)
            total_loss += batch_loss * len(batch)
        train_loss = total_loss / len(labeled)

        if val:
            val_gap = mean_gap_of_choices(table, val, greedy_indices(model, val))
        else:
            val_gap = math.nan
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_gap": val_gap})
        if val and val_gap < best_val - 1e-12:
            best_val = val_gap
            best_snapshot = _clone_params(params)

    if val:
        _restore_params(params, best_snapshot)
    return model, history


def export_history_csv(history, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_gap"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_loss"])),
                        repr(float(row["val_gap"]))])
