"""Transformer definition: config, weight container, deterministic random
models, the LZWT weight file format, and the single-layer forward pass over an
arbitrary live token subset.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError, WeightFormatError
from .tensor_nn import (
    F32,
    AttentionProbs,
    as_matrix,
    attention,
    gated_mlp,
    matmul,
    rms_norm,
    rope_apply,
)

LZWT_MAGIC = b"LZWT"
LZWT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_position: int

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def validate(self) -> None:
        if self.num_layers < 2:
            raise ConfigError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_ff < 1:
            raise ConfigError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.max_position < 1:
            raise ConfigError(f"max_position must be >= 1, got {self.max_position}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.head_dim % 2 != 0:
            raise ConfigError(
                f"head_dim {self.head_dim} must be even for rotary embedding")


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm_gain: np.ndarray
    mlp_norm_gain: np.ndarray


@dataclass
class ModelWeights:
    embedding: np.ndarray                 # (vocab, d_model)
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray           # (d_model,)
    unembedding: Optional[np.ndarray] = None  # None means tied to embedding


@dataclass
class LayerOutput:
    hidden: np.ndarray   # (live, d_model)
    keys: np.ndarray     # (live, d_model), rotary-encoded
    values: np.ndarray   # (live, d_model)
    probs: AttentionProbs


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (config.vocab_size, d),
        "final_norm.gain": (d,),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "mlp.w_gate"] = (d, ff)
        shapes[p + "mlp.w_up"] = (d, ff)
        shapes[p + "mlp.w_down"] = (ff, d)
        shapes[p + "attn_norm.gain"] = (d,)
        shapes[p + "mlp_norm.gain"] = (d,)
    return shapes


def _tensor_map(weights: ModelWeights) -> dict[str, np.ndarray]:
    tensors = {
        "embed.weight": weights.embedding,
        "final_norm.gain": weights.final_norm_gain,
    }
    for i, lw in enumerate(weights.layers):
        p = f"layers.{i}."
        tensors[p + "attn.wq"] = lw.wq
        tensors[p + "attn.wk"] = lw.wk
        tensors[p + "attn.wv"] = lw.wv
        tensors[p + "attn.wo"] = lw.wo
        tensors[p + "mlp.w_gate"] = lw.w_gate
        tensors[p + "mlp.w_up"] = lw.w_up
        tensors[p + "mlp.w_down"] = lw.w_down
        tensors[p + "attn_norm.gain"] = lw.attn_norm_gain
        tensors[p + "mlp_norm.gain"] = lw.mlp_norm_gain
    if weights.unembedding is not None:
        tensors["unembed.weight"] = weights.unembedding
    return tensors


def generate_random_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights: projections and embeddings are N(0, 1) scaled by
    1/sqrt(d_model); norm gains start at one so activations stay O(1) and the
    attention maps of a random model are neither saturated nor flat.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    scale = F32(1.0 / math.sqrt(config.d_model))

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols), dtype=F32) * scale

    d, ff = config.d_model, config.d_ff
    embedding = mat(config.vocab_size, d)
    layers = []
    for _ in range(config.num_layers):
        layers.append(LayerWeights(
            wq=mat(d, d), wk=mat(d, d), wv=mat(d, d), wo=mat(d, d),
            w_gate=mat(d, ff), w_up=mat(d, ff), w_down=mat(ff, d),
            attn_norm_gain=np.ones(d, dtype=F32),
            mlp_norm_gain=np.ones(d, dtype=F32),
        ))
    return ModelWeights(embedding=embedding, layers=layers,
                        final_norm_gain=np.ones(d, dtype=F32))


def save_model(path, config: ModelConfig, weights: ModelWeights) -> None:
    """Write an LZWT weight file atomically.

    Layout: magic "LZWT", u32 version (little-endian), u64 header length,
    compact JSON header with sorted keys {config fields, tied_unembedding,
    tensor directory name -> {dtype "f32", shape, offset, length}}, raw
    little-endian row-major float32 payloads in sorted tensor-name order, then
    CRC32 of the payload. The encoding is canonical: identical tensors always
    produce identical bytes.
    """
    config.validate()
    tensors = _tensor_map(weights)
    expected = _expected_shapes(config)
    if weights.unembedding is not None:
        expected["unembed.weight"] = (config.vocab_size, config.d_model)
    if set(tensors) != set(expected):
        raise ShapeError("weight tensors do not match the config's layer layout")

    directory: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=F32)
        if arr.shape != expected[name]:
            raise ShapeError(
                f"tensor {name}: shape {arr.shape}, config implies {expected[name]}")
        if not np.isfinite(arr).all():
            raise ShapeError(f"tensor {name} contains non-finite entries")
        raw = arr.astype("<f4", copy=False).tobytes()
        directory[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": {
            "num_layers": config.num_layers,
            "num_heads": config.num_heads,
            "d_model": config.d_model,
            "d_ff": config.d_ff,
            "vocab_size": config.vocab_size,
            "max_position": config.max_position,
        },
        "tied_unembedding": weights.unembedding is None,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join([
        LZWT_MAGIC,
        struct.pack("<I", LZWT_VERSION),
        struct.pack("<Q", len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path) -> tuple[ModelConfig, ModelWeights]:
    """Read an LZWT file back; verifies magic, version, CRC32, and shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != LZWT_MAGIC:
        raise WeightFormatError("not an LZWT file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != LZWT_VERSION:
        raise WeightFormatError(f"unsupported LZWT version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if header_end + 4 > len(blob):
        raise WeightFormatError("truncated LZWT file (header extends past end)")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"malformed LZWT header: {exc}") from exc

    payload = blob[header_end:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc_stored:
        raise WeightFormatError("LZWT payload checksum mismatch")

    try:
        cfg = header["config"]
        config = ModelConfig(
            num_layers=int(cfg["num_layers"]),
            num_heads=int(cfg["num_heads"]),
            d_model=int(cfg["d_model"]),
            d_ff=int(cfg["d_ff"]),
            vocab_size=int(cfg["vocab_size"]),
            max_position=int(cfg["max_position"]),
        )
        tied = bool(header["tied_unembedding"])
        directory = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightFormatError(f"incomplete LZWT header: {exc}") from exc
    try:
        config.validate()
    except ConfigError as exc:
        raise WeightFormatError(f"invalid config in LZWT header: {exc}") from exc

    expected = _expected_shapes(config)
    if not tied:
        expected["unembed.weight"] = (config.vocab_size, config.d_model)
    if set(directory) != set(expected):
        missing = sorted(set(expected) - set(directory))
        extra = sorted(set(directory) - set(expected))
        raise WeightFormatError(
            f"tensor directory mismatch: missing {missing}, unexpected {extra}")

    arrays: dict[str, np.ndarray] = {}
    for name, entry in directory.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            length = int(entry["length"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightFormatError(f"bad directory entry for {name}: {exc}") from exc
        if dtype != "f32":
            raise WeightFormatError(f"tensor {name}: unsupported dtype {dtype!r}")
        if shape != expected[name]:
            raise WeightFormatError(
                f"tensor {name}: shape {shape}, config implies {expected[name]}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if length != 4 * n or off < 0 or off + length > len(payload):
            raise WeightFormatError(f"tensor {name}: offset/length outside payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off)
        arr = arr.reshape(shape).astype(F32)
        if not np.isfinite(arr).all():
            raise WeightFormatError(f"tensor {name} contains non-finite entries")
        arrays[name] = arr

    layers = []
    for i in range(config.num_layers):
        p = f"layers.{i}."
        layers.append(LayerWeights(
            wq=arrays[p + "attn.wq"], wk=arrays[p + "attn.wk"],
            wv=arrays[p + "attn.wv"], wo=arrays[p + "attn.wo"],
            w_gate=arrays[p + "mlp.w_gate"], w_up=arrays[p + "mlp.w_up"],
            w_down=arrays[p + "mlp.w_down"],
            attn_norm_gain=arrays[p + "attn_norm.gain"],
            mlp_norm_gain=arrays[p + "mlp_norm.gain"],
        ))
    weights = ModelWeights(
        embedding=arrays["embed.weight"],
        layers=layers,
        final_norm_gain=arrays["final_norm.gain"],
        unembedding=None if tied else arrays["unembed.weight"],
    )
    return config, weights


def embed(weights: ModelWeights, token_ids: Sequence[int]) -> np.ndarray:
    """Embedding rows for token_ids, one row per id (0 rows for an empty list)."""
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.ndim != 1:
        raise InputError(f"token ids must be a flat sequence, got shape {ids.shape}")
    vocab = weights.embedding.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id out of range for vocab {vocab}")
    if ids.size == 0:
        return np.empty((0, weights.embedding.shape[1]), dtype=F32)
    return weights.embedding[ids].copy()


def layer_forward(config: ModelConfig, weights: ModelWeights, layer_index: int,
                  live_hidden, live_positions,
                  context_keys=None, context_values=None,
                  context_positions=None) -> LayerOutput:
    """One pre-norm decoder layer over the live tokens.

    live_hidden rows are the live tokens' input states in ascending position
    order. context_* carry cached rotary-encoded keys and raw values of tokens
    that are attended to but not recomputed this step; they may be None/empty.
    Cache mutation is the engine's job, so this function is pure: it returns
    the live tokens' new hidden states, their fresh key/value rows for cache
    insertion, and the attention probabilities over the merged key set.
    """
    if not 0 <= layer_index < config.num_layers:
        raise InputError(f"layer index {layer_index} out of range")
    lw = weights.layers[layer_index]
    h = as_matrix(live_hidden, "live_hidden")
    live_pos = np.asarray(live_positions, dtype=np.int64)
    if live_pos.shape != (h.shape[0],):
        raise ShapeError(
            f"live_positions shape {live_pos.shape} does not match {h.shape[0]} rows")

    normed = rms_norm(h, lw.attn_norm_gain)
    q = rope_apply(matmul(normed, lw.wq), live_pos, config.head_dim)
    k = rope_apply(matmul(normed, lw.wk), live_pos, config.head_dim)
    v = matmul(normed, lw.wv)

    if context_positions is not None and len(context_positions) > 0:
        ctx_pos = np.asarray(context_positions, dtype=np.int64)
        ctx_k = as_matrix(context_keys, "context_keys")
        ctx_v = as_matrix(context_values, "context_values")
        if ctx_k.shape[0] != ctx_pos.shape[0] or ctx_v.shape[0] != ctx_pos.shape[0]:
            raise ShapeError("context rows do not match context_positions")
        if np.intersect1d(ctx_pos, live_pos).size:
            raise InputError("live and context token positions overlap")
        all_pos = np.concatenate([ctx_pos, live_pos])
        order = np.argsort(all_pos, kind="stable")
        all_pos = all_pos[order]
        all_k = np.concatenate([ctx_k, k])[order]
        all_v = np.concatenate([ctx_v, v])[order]
    else:
        all_pos, all_k, all_v = live_pos, k, v

    attn_out, probs = attention(q, all_k, all_v, live_pos, all_pos, config.num_heads)
    h_attn = h + matmul(attn_out, lw.wo)
    h_out = h_attn + gated_mlp(rms_norm(h_attn, lw.mlp_norm_gain),
                               lw.w_gate, lw.w_up, lw.w_down)
    return LayerOutput(hidden=h_out, keys=k, values=v, probs=probs)


def logits(weights: ModelWeights, final_hidden_row) -> np.ndarray:
    """Vocabulary scores for one final-norm'd hidden row (tied unembedding by
    default)."""
    row = np.ascontiguousarray(final_hidden_row, dtype=F32).reshape(1, -1)
    table = weights.embedding if weights.unembedding is None else weights.unembedding
    if row.shape[1] != table.shape[1]:
        raise ShapeError(f"hidden width {row.shape[1]} != model width {table.shape[1]}")
    return matmul(row, np.ascontiguousarray(table.T))[0]
