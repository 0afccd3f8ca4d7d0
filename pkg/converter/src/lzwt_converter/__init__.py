"""Standalone converter from checkpoint archives of named arrays to the LZWT
weight format used by the lazyinfer runtime.

Sources: a .npz archive or a directory of .npy files. Both native LZWT tensor
names and HF-Llama-style decoder names are accepted; HF projection matrices
are transposed from (out, in) to the runtime's input-major (in, out) layout.

The writer is an independent implementation of the documented byte format
(magic "LZWT", u32 version, u64 header length, canonical sorted-keys JSON
header, sorted little-endian float32 payloads, trailing payload CRC32), and a
tiny reference forward pass lives here so converted checkpoints can be checked
for drift without the runtime installed.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import struct
import sys
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

LZWT_MAGIC = b"LZWT"
LZWT_VERSION = 1

CONFIG_FIELDS = ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size",
                 "max_position")


class ConversionError(Exception):
    pass


# -- name mapping -------------------------------------------------------------

# (source pattern, target template, transpose). Patterns anchor the whole name;
# the first group, when present, is the layer index.
_HF_RULES = [
    (r"model\.embed_tokens\.weight", "embed.weight", False),
    (r"model\.layers\.(\d+)\.self_attn\.q_proj\.weight", "layers.{i}.attn.wq", True),
    (r"model\.layers\.(\d+)\.self_attn\.k_proj\.weight", "layers.{i}.attn.wk", True),
    (r"model\.layers\.(\d+)\.self_attn\.v_proj\.weight", "layers.{i}.attn.wv", True),
    (r"model\.layers\.(\d+)\.self_attn\.o_proj\.weight", "layers.{i}.attn.wo", True),
    (r"model\.layers\.(\d+)\.mlp\.gate_proj\.weight", "layers.{i}.mlp.w_gate", True),
    (r"model\.layers\.(\d+)\.mlp\.up_proj\.weight", "layers.{i}.mlp.w_up", True),
    (r"model\.layers\.(\d+)\.mlp\.down_proj\.weight", "layers.{i}.mlp.w_down", True),
    (r"model\.layers\.(\d+)\.input_layernorm\.weight", "layers.{i}.attn_norm.gain", False),
    (r"model\.layers\.(\d+)\.post_attention_layernorm\.weight",
     "layers.{i}.mlp_norm.gain", False),
    (r"model\.norm\.weight", "final_norm.gain", False),
    (r"lm_head\.weight", "unembed.weight", False),
]

_NATIVE_RULES = [
    (r"embed\.weight", "embed.weight", False),
    (r"layers\.(\d+)\.attn\.w([qkvo])", "layers.{i}.attn.w{g2}", False),
    (r"layers\.(\d+)\.mlp\.w_(gate|up|down)", "layers.{i}.mlp.w_{g2}", False),
    (r"layers\.(\d+)\.(attn|mlp)_norm\.gain", "layers.{i}.{g2}_norm.gain", False),
    (r"final_norm\.gain", "final_norm.gain", False),
    (r"unembed\.weight", "unembed.weight", False),
]

# buffers commonly present in checkpoints that have no LZWT counterpart
_IGNORABLE = re.compile(r".*(rotary_emb\.inv_freq|attention\.masked_bias|"
                        r"attention\.bias)$")


def map_tensor_names(source_names) -> tuple[dict[str, str], list[str], list[str]]:
    """Map source tensor names onto LZWT names.

    Returns (source -> target, ignored sources, duplicate targets).
    """
    mapping: dict[str, str] = {}
    ignored: list[str] = []
    seen_targets: dict[str, str] = {}
    duplicates: list[str] = []
    rules = [(re.compile(p), t, tr) for p, t, tr in _NATIVE_RULES + _HF_RULES]
    for name in source_names:
        target = None
        for pattern, template, _tr in rules:
            m = pattern.fullmatch(name)
            if m:
                groups = m.groups()
                target = template
                if groups:
                    target = target.replace("{i}", groups[0])
                    if len(groups) > 1:
                        target = target.replace("{g2}", groups[1])
                break
        if target is None:
            ignored.append(name)
            continue
        if target in seen_targets:
            duplicates.append(f"{target} (from {seen_targets[target]} and {name})")
        seen_targets[target] = name
        mapping[name] = target
    return mapping, ignored, duplicates


def _needs_transpose(source_name: str) -> bool:
    for pattern, _t, transpose in _HF_RULES:
        if transpose and re.fullmatch(pattern, source_name):
            return True
    return False


# -- source loading -----------------------------------------------------------

def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read named arrays from a .npz archive or a directory of .npy files."""
    if os.path.isdir(path):
        arrays = {}
        for entry in sorted(os.listdir(path)):
            if entry.endswith(".npy"):
                arrays[entry[:-4]] = np.load(os.path.join(path, entry))
        if not arrays:
            raise ConversionError(f"no .npy files in directory {path!r}")
        return arrays
    if path.endswith(".npz"):
        with np.load(path) as archive:
            return {name: archive[name] for name in archive.files}
    raise ConversionError(
        f"unsupported checkpoint source {path!r} (want .npz or a directory of .npy)")


def _to_f32(name: str, arr: np.ndarray) -> np.ndarray:
    """Deterministic cast to float32; half-precision sources upcast exactly."""
    if arr.dtype.kind != "f":
        raise ConversionError(f"tensor {name}: dtype {arr.dtype} is not a float type")
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(out).all():
        raise ConversionError(f"tensor {name}: non-finite entries after float32 cast")
    return out


# -- config inference ---------------------------------------------------------

def required_tensor_shapes(config: dict) -> dict[str, tuple[int, ...]]:
    d, ff = config["d_model"], config["d_ff"]
    shapes = {
        "embed.weight": (config["vocab_size"], d),
        "final_norm.gain": (d,),
    }
    for i in range(config["num_layers"]):
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


def infer_config(tensors: dict[str, np.ndarray], num_heads: int,
                 max_position: int = 8192,
                 overrides: Optional[dict] = None) -> dict:
    """Derive the model config from tensor shapes; explicit overrides are
    validated against the shapes rather than trusted."""
    if "embed.weight" not in tensors:
        raise ConversionError("checkpoint resolves no embed.weight tensor")
    vocab, d_model = tensors["embed.weight"].shape
    layer_ids = sorted({int(m.group(1)) for name in tensors
                        for m in [re.match(r"layers\.(\d+)\.", name)] if m})
    if not layer_ids:
        raise ConversionError("checkpoint resolves no per-layer tensors")
    num_layers = layer_ids[-1] + 1
    if layer_ids != list(range(num_layers)):
        missing = sorted(set(range(num_layers)) - set(layer_ids))
        raise ConversionError(f"layer indices are not contiguous; missing {missing}")
    gate = tensors.get("layers.0.mlp.w_gate")
    if gate is None:
        raise ConversionError("checkpoint resolves no layers.0.mlp.w_gate tensor")
    d_ff = gate.shape[1]
    config = {
        "num_layers": int(num_layers),
        "num_heads": int(num_heads),
        "d_model": int(d_model),
        "d_ff": int(d_ff),
        "vocab_size": int(vocab),
        "max_position": int(max_position),
    }
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("num_heads", "max_position"):
            config[key] = int(value)
        elif config[key] != value:
            raise ConversionError(
                f"override {key}={value} contradicts checkpoint shape-derived "
                f"value {config[key]}")
    if config["num_heads"] < 1 or d_model % config["num_heads"] != 0:
        raise ConversionError(
            f"d_model {d_model} does not split into {config['num_heads']} heads")
    if (d_model // config["num_heads"]) % 2 != 0:
        raise ConversionError(
            f"head_dim {d_model // config['num_heads']} must be even")
    if config["num_layers"] < 2:
        raise ConversionError("runtime needs at least 2 layers")
    return config


def validate_tensors(config: dict, tensors: dict[str, np.ndarray]) -> bool:
    """Check completeness and shapes; returns whether an unembedding is
    present (untied)."""
    expected = required_tensor_shapes(config)
    untied = "unembed.weight" in tensors
    if untied:
        expected["unembed.weight"] = (config["vocab_size"], config["d_model"])
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ConversionError(
            f"checkpoint is missing {len(missing)} required tensors: "
            + ", ".join(missing))
    for name, want in expected.items():
        got = tuple(tensors[name].shape)
        if got != want:
            raise ConversionError(
                f"tensor {name}: source shape {got}, config implies {want}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise ConversionError(f"unexpected mapped tensors: {', '.join(extra)}")
    return untied


# -- LZWT writing and reading -------------------------------------------------

def write_lzwt(path: str, config: dict, tensors: dict[str, np.ndarray],
               tied_unembedding: bool) -> None:
    """Canonical LZWT encoding: identical tensors give identical bytes."""
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        raw = arr.astype("<f4", copy=False).tobytes()
        directory[name] = {"dtype": "f32", "shape": list(arr.shape),
                           "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": {k: int(config[k]) for k in CONFIG_FIELDS},
        "tied_unembedding": bool(tied_unembedding),
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    blob = b"".join([
        LZWT_MAGIC,
        struct.pack("<I", LZWT_VERSION),
        struct.pack("<Q", len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_lzwt(path: str) -> tuple[dict, dict[str, np.ndarray], bool]:
    """Converter-side reader, used for self-checks."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != LZWT_MAGIC:
        raise ConversionError("not an LZWT file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != LZWT_VERSION:
        raise ConversionError(f"unsupported LZWT version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    payload = blob[16 + hlen:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise ConversionError("payload checksum mismatch")
    tensors = {}
    for name, entry in header["tensors"].items():
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=entry["offset"])
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return header["config"], tensors, bool(header["tied_unembedding"])


# -- reference forward pass ---------------------------------------------------

def reference_forward(config: dict, tensors: dict[str, np.ndarray],
                      token_ids) -> np.ndarray:
    """Logits of the last token after a full forward pass.

    Independent implementation of the runtime architecture (RMS norm with eps
    1e-5, adjacent-pair rotary embedding base 10000, causal attention scaled
    by 1/sqrt(head_dim), SiLU-gated MLP, tied unembedding unless an
    unembed.weight tensor exists), so converted checkpoints can be validated
    for drift against the runtime.
    """
    ids = np.asarray(list(token_ids), dtype=np.int64)
    heads = config["num_heads"]
    hd = config["d_model"] // heads
    positions = np.arange(ids.size)

    def rms(x, gain):
        denom = np.sqrt((x ** 2).mean(axis=1, keepdims=True) + 1e-5)
        return x / denom * gain

    def rope(x):
        rows, width = x.shape
        half = hd // 2
        z = x.reshape(rows, width // hd, half, 2)
        z = z[..., 0] + 1j * z[..., 1]
        ang = (positions[:, None].astype(np.float64)
               * 10000.0 ** (-2.0 * np.arange(half) / hd)[None, :])
        rot = z * np.exp(1j * ang)[:, None, :]
        return np.stack([rot.real, rot.imag], axis=-1).reshape(rows, width)

    h = tensors["embed.weight"][ids].astype(np.float64)
    mask = positions[None, :] <= positions[:, None]
    for i in range(config["num_layers"]):
        p = f"layers.{i}."
        normed = rms(h, tensors[p + "attn_norm.gain"].astype(np.float64))
        q = rope(normed @ tensors[p + "attn.wq"].astype(np.float64))
        k = rope(normed @ tensors[p + "attn.wk"].astype(np.float64))
        v = normed @ tensors[p + "attn.wv"].astype(np.float64)
        attn = np.empty_like(h)
        for head in range(heads):
            sl = slice(head * hd, (head + 1) * hd)
            scores = np.where(mask, (q[:, sl] @ k[:, sl].T) / np.sqrt(hd), -np.inf)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            attn[:, sl] = probs @ v[:, sl]
        h = h + attn @ tensors[p + "attn.wo"].astype(np.float64)
        normed = rms(h, tensors[p + "mlp_norm.gain"].astype(np.float64))
        a = normed @ tensors[p + "mlp.w_gate"].astype(np.float64)
        gate = a / (1.0 + np.exp(-np.clip(a, -60, 60)))
        up = normed @ tensors[p + "mlp.w_up"].astype(np.float64)
        h = h + (gate * up) @ tensors[p + "mlp.w_down"].astype(np.float64)

    final = rms(h[-1:], tensors["final_norm.gain"].astype(np.float64))
    table = tensors.get("unembed.weight", tensors["embed.weight"])
    return (final @ table.astype(np.float64).T)[0].astype(np.float32)


# -- conversion driver ----------------------------------------------------------

@dataclass
class ConversionResult:
    config: dict
    tensor_names: list[str]
    ignored_sources: list[str]
    tied_unembedding: bool


def convert(source_path: str, out_path: str, num_heads: int,
            max_position: int = 8192,
            overrides: Optional[dict] = None) -> ConversionResult:
    """Read a checkpoint, map names, infer and validate the config, write LZWT."""
    source = load_checkpoint(source_path)
    mapping, ignored, duplicates = map_tensor_names(source.keys())
    if duplicates:
        raise ConversionError("duplicate target tensors: " + "; ".join(duplicates))
    real_ignored = [n for n in ignored if not _IGNORABLE.match(n)]
    if real_ignored:
        raise ConversionError(
            "unresolved source tensors (no LZWT mapping): "
            + ", ".join(sorted(real_ignored)))
    tensors = {}
    for src_name, target in mapping.items():
        arr = _to_f32(src_name, source[src_name])
        if _needs_transpose(src_name):
            arr = np.ascontiguousarray(arr.T)
        tensors[target] = arr
    config = infer_config(tensors, num_heads, max_position, overrides)
    untied = validate_tensors(config, tensors)
    write_lzwt(out_path, config, tensors, tied_unembedding=not untied)
    return ConversionResult(config=config, tensor_names=sorted(tensors),
                            ignored_sources=sorted(set(ignored) - set(real_ignored)),
                            tied_unembedding=not untied)


def selfcheck(source_path: str, out_path: str) -> None:
    """Re-read the written file and compare every value with the source."""
    source = load_checkpoint(source_path)
    mapping, _ignored, _dups = map_tensor_names(source.keys())
    _config, written, _tied = read_lzwt(out_path)
    for src_name, target in mapping.items():
        want = _to_f32(src_name, source[src_name])
        if _needs_transpose(src_name):
            want = want.T
        if not np.array_equal(written[target], want):
            raise ConversionError(f"self-check failed: {target} differs from source")


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="lzwt-convert",
        description="Convert a checkpoint (.npz or directory of .npy) to LZWT")
    parser.add_argument("--source", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--heads", type=int, required=True,
                        help="attention head count (not inferable from shapes)")
    parser.add_argument("--layers", type=int, help="expected layer count (check)")
    parser.add_argument("--dim", type=int, help="expected model width (check)")
    parser.add_argument("--ff", type=int, help="expected MLP width (check)")
    parser.add_argument("--vocab", type=int, help="expected vocab size (check)")
    parser.add_argument("--max-position", type=int, default=8192)
    parser.add_argument("--selfcheck", action="store_true",
                        help="re-read the output and compare all values")
    args = parser.parse_args(argv)
    overrides = {"num_layers": args.layers, "d_model": args.dim,
                 "d_ff": args.ff, "vocab_size": args.vocab}
    try:
        result = convert(args.source, args.out, num_heads=args.heads,
                         max_position=args.max_position, overrides=overrides)
        if args.selfcheck:
            selfcheck(args.source, args.out)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    cfg = result.config
    tied = "tied" if result.tied_unembedding else "untied"
    print(f"wrote {args.out}: {cfg['num_layers']} layers, d_model "
          f"{cfg['d_model']}, d_ff {cfg['d_ff']}, vocab {cfg['vocab_size']}, "
          f"{len(result.tensor_names)} tensors, {tied} unembedding")
    if result.ignored_sources:
        print(f"ignored buffers: {', '.join(result.ignored_sources)}",
              file=sys.stderr)
    if args.selfcheck:
        print("self-check ok: all values preserved exactly")
    return 0


if __name__ == "__main__":
    sys.exit(main())
