"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 header length, a JSON
header, then raw float64 arrays back to back in the order the header
declares. The same container stores selection-model parameters and solver
feature tables.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .instances import ParseError, UnsupportedFormatError

MAGIC = b"PSELCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str, meta: dict, arrays: dict) -> None:
    """Write a metadata dict plus named float64 arrays; byte-deterministic."""
    names = sorted(arrays)
    header = dict(meta)
    header["arrays"] = [[n, list(np.asarray(arrays[n]).shape)] for n in names]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            a = np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64))
            fh.write(a.tobytes())


def load_checkpoint(path: str):
    """Read back (meta, arrays); rejects foreign, truncated, or future files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version > FORMAT_VERSION:
        raise UnsupportedFormatError(
            f"{path}: checkpoint format version {version} is newer than "
            f"supported version {FORMAT_VERSION}")
    off = len(MAGIC) + 12
    if off + hlen > len(raw):
        raise ParseError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint header: {exc}") from None
    off += hlen
    arrays = {}
    for name, shape in header.pop("arrays", []):
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise ParseError(f"{path}: truncated array {name!r}")
        arr = np.frombuffer(raw[off:off + nbytes], dtype=np.float64).copy()
        arrays[name] = arr.reshape(shape)
        off += nbytes
    if off != len(raw):
        raise ParseError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


# ---------------------------------------------------------------------------
# selection-model wrappers

def save_model(path: str, model) -> None:
    cfg = model.encoder_cfg
    meta = {
        "contents": "selection-model",
        "kind": model.kind,
        "encoder_mode": model.encoder_mode,
        "solver_ids": list(model.solver_ids),
        "head_hidden": model.head_hidden,
        "encoder_cfg": None if cfg is None else {
            "embed_dim": cfg.embed_dim, "heads": cfg.heads,
            "ff_hidden": cfg.ff_hidden, "flat_layers": cfg.flat_layers,
            "hier_blocks": cfg.hier_blocks,
            "layers_per_block": cfg.layers_per_block,
            "pool_ratio": cfg.pool_ratio, "mode": cfg.mode,
        },
        "feature_norm": None if model.feature_norm is None else
            [list(map(float, model.feature_norm[0])),
             list(map(float, model.feature_norm[1]))],
    }
    save_checkpoint(path, meta, {k: v.data for k, v in model.params.items()})


def load_model(path: str):
    from .model import SelectionModel
    meta, arrays = load_checkpoint(path)
    if meta.get("contents") != "selection-model":
        raise ParseError(
            f"{path}: checkpoint holds {meta.get('contents')!r}, "
            "not a selection model")
    raw_cfg = meta["encoder_cfg"]
    cfg: Optional[enc.EncoderConfig] = None
    if raw_cfg is not None:
        cfg = enc.EncoderConfig(**raw_cfg).validate()
    norm = meta["feature_norm"]
    if norm is not None:
        norm = (np.array(norm[0]), np.array(norm[1]))
    model = SelectionModel(
        solver_ids=list(meta["solver_ids"]), kind=meta["kind"],
        encoder_mode=meta["encoder_mode"], encoder_cfg=cfg,
        head_hidden=int(meta["head_hidden"]), feature_norm=norm)
    model.params = {k: ad.param(v, k) for k, v in arrays.items()}
    return model
