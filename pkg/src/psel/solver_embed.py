"""Solver embeddings: score unseen solvers without finetuning.

Each solver is represented by the instances it wins with the largest
margin over the runner-up. A momentum-averaged shadow copy of the
instance encoder turns those instances into tokens; a two-layer summary
transformer (self-attention, then cross-attention from a learnable
summary token) pools them into one embedding per solver. A pair head
scores (instance representation, solver embedding) pairs, so a new
solver only needs its embedding computed, never a weight update.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .checkpoint import load_checkpoint, save_checkpoint
from .instances import ConfigError, DomainError, RoutingInstance
from .model import SCALE_NORM, build_labels, mean_gap_of_choices, ranking_loss
from .zoo import PerformanceTable

logger = logging.getLogger("psel")


class EmbeddingError(ValueError):
    pass


@dataclass
class SolverFeature:
    solver_id: str
    embedding: np.ndarray            # (1, D)
    representative_ids: list


@dataclass
class MomentumTokenizer:
    """Shadow copy of the encoder parameters, moved by momentum only."""

    momentum: float
    shadow: dict                     # name -> ndarray

    def validate(self) -> "MomentumTokenizer":
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum {self.momentum} outside [0, 1)")
        return self


def make_tokenizer(params: dict, keys, momentum: float = 0.99) -> MomentumTokenizer:
    tok = MomentumTokenizer(momentum=momentum,
                            shadow={k: params[k].data.copy() for k in keys})
    return tok.validate()


def momentum_update(tok: MomentumTokenizer, params: dict) -> MomentumTokenizer:
    m = tok.momentum
    for k, shadow in tok.shadow.items():
        live = params[k].data
        if live.shape != shadow.shape:
            raise DomainError(f"shape drift for shadow parameter {k!r}")
        shadow *= m
        shadow += (1.0 - m) * live
    return tok


def representative_instances(table: PerformanceTable, solver_id: str,
                             fraction: float = 0.01) -> list:
    """Instance ids the solver wins with the largest runner-up margin.

    Margin is own objective / second-smallest row objective, ascending;
    ties order by instance id so the result is stable under row
    permutation of the table.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction {fraction} outside (0, 1]")
    try:
        j = table.solver_ids.index(solver_id)
    except ValueError:
        raise DomainError(f"solver {solver_id!r} not in table") from None
    obj = table.objective
    finite = np.where(np.isfinite(obj), obj, np.inf)
    rowmin = finite.min(axis=1)
    wins = np.flatnonzero(obj[:, j] <= rowmin + 1e-9)
    if wins.size == 0:
        raise EmbeddingError(
            f"solver {solver_id!r} never attains a row minimum; "
            "it cannot be embedded")
    if obj.shape[1] >= 2:
        runner_up = np.partition(finite[wins], 1, axis=1)[:, 1]
        with np.errstate(invalid="ignore"):
            ratios = np.where(runner_up > 0, obj[wins, j] / runner_up, 0.0)
        ratios = np.where(np.isfinite(ratios), ratios, 0.0)
    else:
        ratios = np.zeros(wins.size)
    ids = np.array([table.instance_ids[i] for i in wins])
    order = np.lexsort((ids, ratios))
    count = max(1, int(math.floor(fraction * wins.size)))
    return [str(ids[i]) for i in order[:count]]


# ---------------------------------------------------------------------------
# summary transformer

def _concat_rows(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.transpose(ad.concat_cols(ad.transpose(a), ad.transpose(b)))


def init_summary_params(params: dict, cfg_sum: enc.EncoderConfig, rng) -> None:
    d = cfg_sum.embed_dim
    params["summ.token"] = ad.param(
        rng.normal(0.0, 1.0 / math.sqrt(d), (1, d)), "summ.token")
    enc.init_attention_layer(params, "summ.self", cfg_sum, rng)
    enc.init_attention_layer(params, "summ.cross", cfg_sum, rng)


def _cross_attention(query: ad.Tensor, keys: ad.Tensor, params: dict,
                     prefix: str, cfg: enc.EncoderConfig) -> ad.Tensor:
    d, heads = cfg.embed_dim, cfg.heads
    dk = d // heads
    inv_sqrt = 1.0 / math.sqrt(dk)
    head_outs = []
    for i in range(heads):
        q = ad.matmul(query, params[f"{prefix}.q{i}"])
        k = ad.matmul(keys, params[f"{prefix}.k{i}"])
        v = ad.matmul(keys, params[f"{prefix}.v{i}"])
        att = ad.row_softmax(ad.scalar_mul(inv_sqrt, ad.matmul(q, ad.transpose(k))))
        head_outs.append(ad.matmul(att, v))
    mha = ad.matmul(ad.concat_cols(*head_outs), params[f"{prefix}.out"])
    alpha = params[f"{prefix}.alpha"]
    h_hat = ad.add(query, ad.scale(alpha, mha))
    ff = ad.matmul(ad.relu(ad.broadcast_add_row(
        ad.matmul(h_hat, params[f"{prefix}.ff1"]), params[f"{prefix}.ff1b"])),
        params[f"{prefix}.ff2"])
    ff = ad.broadcast_add_row(ff, params[f"{prefix}.ff2b"])
    return ad.add(h_hat, ad.scale(alpha, ff))


def solver_embed(tokens, params: dict, cfg_sum: enc.EncoderConfig) -> ad.Tensor:
    """Pool instance tokens into one solver embedding, shape (1, D).

    Layer 1 runs self-attention over the summary token stacked with every
    token; layer 2 attends from the updated summary row over the updated
    token rows only. Both layers start as exact identities (ReZero), so an
    untrained stack returns the summary token itself.
    """
    tokens = tokens if isinstance(tokens, ad.Tensor) else ad.tensor(tokens)
    r = tokens.shape[0]
    if r == 0:
        raise EmbeddingError("cannot embed a solver from zero tokens")
    h = _concat_rows(params["summ.token"], tokens)
    h = enc.attention_layer(h, params, "summ.self", cfg_sum)
    summary = ad.gather_rows(h, np.array([0]))
    rest = ad.gather_rows(h, np.arange(1, r + 1))
    return _cross_attention(summary, rest, params, "summ.cross", cfg_sum)


# ---------------------------------------------------------------------------
# pair scoring system

@dataclass
class EmbeddingSystem:
    kind: str
    encoder_cfg: enc.EncoderConfig
    summary_cfg: enc.EncoderConfig
    params: dict
    tokenizer: MomentumTokenizer
    head_hidden: int = 256
    rep_fraction: float = 0.01
    solver_features: dict = field(default_factory=dict)   # id -> SolverFeature
    solver_order: list = field(default_factory=list)

    @property
    def rep_dim(self) -> int:
        return self.encoder_cfg.rep_dim()


def init_embedding_system(kind: str, encoder_cfg: enc.EncoderConfig,
                          seed: int = 0, head_hidden: int = 256,
                          momentum: float = 0.99, summary_heads: int = 4,
                          summary_ff: Optional[int] = None,
                          rep_fraction: float = 0.01) -> EmbeddingSystem:
    rng = np.random.default_rng(seed)
    encoder_cfg.validate()
    in_dim = 3 if kind == "CVRP" else 2
    params = enc.init_encoder_params(encoder_cfg, in_dim, rng)
    encoder_keys = sorted(params)
    d = encoder_cfg.rep_dim()
    if d % summary_heads != 0:
        raise ConfigError(
            f"summary width {d} not divisible by {summary_heads} heads")
    summary_cfg = enc.EncoderConfig(
        embed_dim=d, heads=summary_heads,
        ff_hidden=summary_ff or 2 * d, mode=encoder_cfg.mode)
    init_summary_params(params, summary_cfg, rng)
    h = head_hidden
    d_in = 2 * d + 1                 # instance rep, solver embedding, scale
    params["pair.w1"] = ad.param(rng.normal(0, 1 / math.sqrt(d_in), (d_in, h)), "pair.w1")
    params["pair.b1"] = ad.param(np.zeros((1, h)), "pair.b1")
    params["pair.w2"] = ad.param(rng.normal(0, 1 / math.sqrt(h), (h, h)), "pair.w2")
    params["pair.b2"] = ad.param(np.zeros((1, h)), "pair.b2")
    params["pair.w3"] = ad.param(rng.normal(0, 1 / math.sqrt(h), (h, 1)), "pair.w3")
    params["pair.b3"] = ad.param(np.zeros((1, 1)), "pair.b3")
    tok = make_tokenizer(params, encoder_keys, momentum)
    return EmbeddingSystem(kind=kind, encoder_cfg=encoder_cfg,
                           summary_cfg=summary_cfg, params=params,
                           tokenizer=tok, head_hidden=head_hidden,
                           rep_fraction=rep_fraction)


def shadow_encode(system: EmbeddingSystem, instance: RoutingInstance) -> np.ndarray:
    """Instance token from the shadow encoder; never part of the tape."""
    frozen = {k: ad.tensor(v) for k, v in system.tokenizer.shadow.items()}
    return enc.encode(instance, frozen, system.encoder_cfg).data


def pair_score(instance_rep: ad.Tensor, solver_embedding: ad.Tensor,
               params: dict, scale_feat: float) -> ad.Tensor:
    x = ad.concat_cols(instance_rep, solver_embedding,
                       ad.tensor([[scale_feat]]))
    h1 = ad.tanh(ad.broadcast_add_row(ad.matmul(x, params["pair.w1"]),
                                      params["pair.b1"]))
    h2 = ad.tanh(ad.broadcast_add_row(ad.matmul(h1, params["pair.w2"]),
                                      params["pair.b2"]))
    return ad.broadcast_add_row(ad.matmul(h2, params["pair.w3"]),
                                params["pair.b3"])


def solver_tokens(system: EmbeddingSystem, table: PerformanceTable,
                  instances_by_id: dict, solver_id: str) -> tuple:
    reps = representative_instances(table, solver_id, system.rep_fraction)
    missing = [r for r in reps if r not in instances_by_id]
    if missing:
        raise DomainError(f"representative instances not provided: {missing}")
    tokens = np.vstack([shadow_encode(system, instances_by_id[r])
                        for r in reps])
    return tokens, reps


def compute_solver_feature(system: EmbeddingSystem, table: PerformanceTable,
                           instances_by_id: dict, solver_id: str) -> SolverFeature:
    tokens, reps = solver_tokens(system, table, instances_by_id, solver_id)
    emb = solver_embed(tokens, system.params, system.summary_cfg)
    return SolverFeature(solver_id=solver_id, embedding=emb.data.copy(),
                         representative_ids=reps)


def embedding_scores_tensor(system: EmbeddingSystem, instance: RoutingInstance,
                            embeddings: list) -> ad.Tensor:
    """Scores over the given solver embeddings, shape (1, M), on the tape."""
    if instance.kind != system.kind:
        raise DomainError(
            f"system for {system.kind} cannot score a {instance.kind} instance")
    rep = enc.encode(instance, system.params, system.encoder_cfg)
    scale_feat = instance.scale / SCALE_NORM
    cols = [pair_score(rep, e, system.params, scale_feat) for e in embeddings]
    return cols[0] if len(cols) == 1 else ad.concat_cols(*cols)


def embedding_scores(system: EmbeddingSystem, instance: RoutingInstance) -> np.ndarray:
    embs = [ad.tensor(system.solver_features[s].embedding)
            for s in system.solver_order]
    return embedding_scores_tensor(system, instance, embs).data[0].copy()


def refresh_solver_features(system: EmbeddingSystem, table: PerformanceTable,
                            instances_by_id: dict, solver_ids) -> None:
    system.solver_order = list(solver_ids)
    system.solver_features = {
        s: compute_solver_feature(system, table, instances_by_id, s)
        for s in solver_ids}


def integrate_unseen_solver(system: EmbeddingSystem, solver_id: str,
                            table: PerformanceTable,
                            instances_by_id: dict) -> EmbeddingSystem:
    """Extend a frozen system with one more solver via its embedding only."""
    if solver_id in system.solver_features:
        raise DomainError(f"solver {solver_id!r} is already integrated")
    feature = compute_solver_feature(system, table, instances_by_id, solver_id)
    extended = copy.copy(system)
    extended.solver_features = dict(system.solver_features)
    extended.solver_order = list(system.solver_order)
    extended.solver_features[solver_id] = feature
    extended.solver_order.append(solver_id)
    return extended


# ---------------------------------------------------------------------------
# training

def train_embedding_system(system: EmbeddingSystem, train_set, table,
                           cfg, val_set=None):
    """Ranking-loss training of encoder, summary transformer, and pair head.

    Solver embeddings are rebuilt from shadow tokens every batch; the
    shadow itself drifts by momentum after each optimizer step. Returns
    (trained system, history) like the fixed-zoo trainer.
    """
    cfg.validate()
    if cfg.loss != "ranking":
        raise ConfigError("the pair-scoring system trains with the ranking loss")
    system = copy.deepcopy(system)
    params = system.params
    solver_ids = list(table.solver_ids)
    idx = table.row_index()
    by_id = {it.id: it for it in train_set}
    if val_set is not None:
        for it in val_set:
            by_id.setdefault(it.id, it)

    labeled = []
    for it in train_set:
        row = table.objective[idx[it.id]]
        try:
            _, phi = build_labels(row)
        except ValueError:
            logger.warning("excluding %s from training: all solvers failed", it.id)
            continue
        labeled.append((it, phi))
    if not labeled:
        raise ad.TrainingError("no trainable instances (all rows failed)")

    rep_cache = {s: representative_instances(table, s, system.rep_fraction)
                 for s in solver_ids}
    val = list(val_set) if val_set is not None else []
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_val = math.inf
    best_snapshot = {k: v.data.copy() for k, v in params.items()}
    best_shadow = {k: v.copy() for k, v in system.tokenizer.shadow.items()}

    def current_embeddings():
        embs = []
        for s in solver_ids:
            tokens = np.vstack([shadow_encode(system, by_id[r])
                                for r in rep_cache[s]])
            embs.append(solver_embed(tokens, params, system.summary_cfg))
        return embs

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labeled))
        total_loss = 0.0
        n_batches = math.ceil(len(labeled) / cfg.batch_size)
        for b in range(n_batches):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            ad.zero_grads(params)
            embs = current_embeddings()
            batch_loss = 0.0
            for k in batch:
                it, phi = labeled[k]
                scores = embedding_scores_tensor(system, it, embs)
                loss = ad.scalar_mul(1.0 / len(batch),
                                     ranking_loss(scores, phi))
                ad.backward(loss)
                batch_loss += loss.data[0, 0]
            if not math.isfinite(batch_loss):
                raise ad.TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b}")
            ad.adam_step(params, ad.collect_grads(params), state)
            momentum_update(system.tokenizer, params)
            total_loss += batch_loss * len(batch)
        train_loss = total_loss / len(labeled)

        if val:
            refresh_solver_features(system, table, by_id, solver_ids)
            choices = [int(np.argmax(embedding_scores(system, it)))
                       for it in val]
            val_gap = mean_gap_of_choices(table, val, choices)
        else:
            val_gap = math.nan
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_gap": val_gap})
        if val and val_gap < best_val - 1e-12:
            best_val = val_gap
            best_snapshot = {k: v.data.copy() for k, v in params.items()}
            best_shadow = {k: v.copy() for k, v in system.tokenizer.shadow.items()}

    if val:
        for k, v in best_snapshot.items():
            params[k].data[:] = v
        for k, v in best_shadow.items():
            system.tokenizer.shadow[k][:] = v
    refresh_solver_features(system, table, by_id, solver_ids)
    return system, history


# ---------------------------------------------------------------------------
# persistence

def save_solver_features(path: str, features: list) -> None:
    meta = {
        "contents": "solver-features",
        "solver_ids": [f.solver_id for f in features],
        "representatives": {f.solver_id: list(f.representative_ids)
                            for f in features},
    }
    arrays = {f"emb.{f.solver_id}": f.embedding for f in features}
    save_checkpoint(path, meta, arrays)


def load_solver_features(path: str) -> list:
    meta, arrays = load_checkpoint(path)
    if meta.get("contents") != "solver-features":
        raise DomainError(f"{path} does not hold solver features")
    return [SolverFeature(solver_id=s, embedding=arrays[f"emb.{s}"],
                          representative_ids=meta["representatives"][s])
            for s in meta["solver_ids"]]
