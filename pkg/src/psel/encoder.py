"""Graph attention encoders for routing instances.

Two variants share the attention layer: a flat stack whose representation
is the mean of the last layer's node embeddings, and a hierarchical
encoder that interleaves attention blocks with score-based node pooling
and sums per-level readouts. Residual branches carry a per-layer learnable
ReZero scalar initialized to zero, so a fresh encoder is an exact
identity stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .instances import DomainError, RoutingInstance


@dataclass
class EncoderConfig:
    embed_dim: int = 128
    heads: int = 8
    ff_hidden: int = 512
    flat_layers: int = 4
    hier_blocks: int = 2
    layers_per_block: int = 2
    pool_ratio: float = 0.8
    mode: str = "hierarchical"        # "flat" | "hierarchical"

    def validate(self) -> "EncoderConfig":
        if self.embed_dim % self.heads != 0:
            raise DomainError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not (0.0 < self.pool_ratio < 1.0):
            raise DomainError(f"pool_ratio must be in (0,1), got {self.pool_ratio}")
        if self.hier_blocks < 1:
            raise DomainError("hier_blocks must be >= 1")
        if self.mode not in ("flat", "hierarchical"):
            raise DomainError(f"unknown encoder mode {self.mode!r}")
        return self

    def rep_dim(self) -> int:
        return self.embed_dim if self.mode == "flat" else 2 * self.embed_dim


def instance_input(instance: RoutingInstance) -> np.ndarray:
    """Raw node features: coords, plus the demand column for CVRP."""
    if instance.kind == "CVRP":
        return np.column_stack([instance.coords, instance.demands])
    return instance.coords


def _init(rng, rows, cols):
    return rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, cols))


def init_attention_layer(params: dict, prefix: str, cfg: EncoderConfig, rng) -> None:
    d, heads, ff = cfg.embed_dim, cfg.heads, cfg.ff_hidden
    dk = d // heads
    for h in range(heads):
        params[f"{prefix}.q{h}"] = ad.param(_init(rng, d, dk), f"{prefix}.q{h}")
        params[f"{prefix}.k{h}"] = ad.param(_init(rng, d, dk), f"{prefix}.k{h}")
        params[f"{prefix}.v{h}"] = ad.param(_init(rng, d, dk), f"{prefix}.v{h}")
    params[f"{prefix}.out"] = ad.param(_init(rng, d, d), f"{prefix}.out")
    params[f"{prefix}.ff1"] = ad.param(_init(rng, d, ff), f"{prefix}.ff1")
    params[f"{prefix}.ff1b"] = ad.param(np.zeros((1, ff)), f"{prefix}.ff1b")
    params[f"{prefix}.ff2"] = ad.param(_init(rng, ff, d), f"{prefix}.ff2")
    params[f"{prefix}.ff2b"] = ad.param(np.zeros((1, d)), f"{prefix}.ff2b")
    params[f"{prefix}.alpha"] = ad.param(np.zeros((1, 1)), f"{prefix}.alpha")


def init_encoder_params(cfg: EncoderConfig, in_dim: int, rng) -> dict:
    cfg.validate()
    if in_dim not in (2, 3):
        raise DomainError(f"raw node features must have width 2 or 3, got {in_dim}")
    params: dict = {}
    params["embed.W"] = ad.param(_init(rng, in_dim, cfg.embed_dim), "embed.W")
    if cfg.mode == "flat":
        for i in range(cfg.flat_layers):
            init_attention_layer(params, f"flat.l{i}", cfg, rng)
    else:
        for b in range(cfg.hier_blocks):
            for j in range(cfg.layers_per_block):
                init_attention_layer(params, f"hier.b{b}.l{j}", cfg, rng)
            init_attention_layer(params, f"hier.b{b}.score", cfg, rng)
            params[f"hier.b{b}.Wscore"] = ad.param(
                _init(rng, cfg.embed_dim, 1), f"hier.b{b}.Wscore")
    return params


def embed_nodes(x: np.ndarray, params: dict) -> ad.Tensor:
    w = params["embed.W"]
    if x.shape[1] != w.shape[0]:
        raise DomainError(
            f"raw feature width {x.shape[1]} does not match embedding {w.shape[0]}")
    return ad.matmul(ad.tensor(x), w)


def attention_layer(h: ad.Tensor, params: dict, prefix: str,
                    cfg: EncoderConfig) -> ad.Tensor:
    d, heads = cfg.embed_dim, cfg.heads
    dk = d // heads
    inv_sqrt = 1.0 / math.sqrt(dk)
    head_outs = []
    for i in range(heads):
        q = ad.matmul(h, params[f"{prefix}.q{i}"])
        k = ad.matmul(h, params[f"{prefix}.k{i}"])
        v = ad.matmul(h, params[f"{prefix}.v{i}"])
        att = ad.row_softmax(ad.scalar_mul(inv_sqrt, ad.matmul(q, ad.transpose(k))))
        head_outs.append(ad.matmul(att, v))
    mha = ad.matmul(ad.concat_cols(*head_outs), params[f"{prefix}.out"])
    alpha = params[f"{prefix}.alpha"]
    h_hat = ad.add(h, ad.scale(alpha, mha))
    ff = ad.matmul(ad.relu(ad.broadcast_add_row(
        ad.matmul(h_hat, params[f"{prefix}.ff1"]), params[f"{prefix}.ff1b"])),
        params[f"{prefix}.ff2"])
    ff = ad.broadcast_add_row(ff, params[f"{prefix}.ff2b"])
    return ad.add(h_hat, ad.scale(alpha, ff))


def _readout(h: ad.Tensor) -> ad.Tensor:
    return ad.tanh(ad.concat_cols(ad.mean_rows(h), ad.max_cols(h)))


def pooled_count(n_prev: int, ratio: float) -> int:
    return max(1, int(math.floor(ratio * n_prev)))


def pool_block(h: ad.Tensor, params: dict, prefix: str, cfg: EncoderConfig):
    """One hierarchical block: attention layers, readout, score pooling.

    Returns (pooled embeddings, block readout o_l, kept row indices).
    """
    for j in range(cfg.layers_per_block):
        h = attention_layer(h, params, f"{prefix}.l{j}", cfg)
    o_l = _readout(h)
    scored = attention_layer(h, params, f"{prefix}.score", cfg)
    z = ad.tanh(ad.matmul(scored, params[f"{prefix}.Wscore"]))
    n_prev = h.shape[0]
    n_keep = pooled_count(n_prev, cfg.pool_ratio)
    scores = z.data[:, 0]
    order = np.lexsort((np.arange(n_prev), -scores))   # score desc, index asc
    kept = np.sort(order[:n_keep])
    pooled = ad.gather_rows(ad.broadcast_add_col(h, z), kept)
    return pooled, o_l, kept


def flat_encode(x: np.ndarray, params: dict, cfg: EncoderConfig) -> ad.Tensor:
    h = embed_nodes(x, params)
    for i in range(cfg.flat_layers):
        h = attention_layer(h, params, f"flat.l{i}", cfg)
    return ad.mean_rows(h)


def hier_encode(x: np.ndarray, params: dict, cfg: EncoderConfig) -> ad.Tensor:
    h = embed_nodes(x, params)
    total = None
    for b in range(cfg.hier_blocks):
        h, o_l, _ = pool_block(h, params, f"hier.b{b}", cfg)
        total = o_l if total is None else ad.add(total, o_l)
    return ad.add(total, _readout(h))


def encode(instance: RoutingInstance, params: dict, cfg: EncoderConfig) -> ad.Tensor:
    x = instance_input(instance)
    if cfg.mode == "flat":
        return flat_encode(x, params, cfg)
    return hier_encode(x, params, cfg)
