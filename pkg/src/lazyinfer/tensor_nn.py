"""Dense numerical kernels: matmul, softmax, RMS norm, rotary embedding,
masked attention over explicit key sets, and the gated MLP.

Conventions:
  * Public matrices are float32, C-contiguous, shaped (rows, cols).
  * Kernels accumulate in float64 and round once on output. Every output
    element is then independent of BLAS blocking and batch shape, which is
    what makes incremental decoding bit-reproducible against full recompute.
  * Positions passed to rope/attention are original token indices; pruning
    never renumbers a token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRowError, ShapeError

F32 = np.float32
F64 = np.float64

ROPE_BASE = 10000.0
RMS_EPS = 1e-5


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=F32)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {m.shape}")
    return m


def _as_positions(p, n: int, name: str) -> np.ndarray:
    pos = np.asarray(p, dtype=np.int64)
    if pos.shape != (n,):
        raise ShapeError(f"{name} must have shape ({n},), got {pos.shape}")
    return pos


@dataclass
class AttentionProbs:
    """Per-head attention probabilities plus the identity of each key column.

    probs has shape (heads, queries, keys). Masked entries are exactly 0 and
    every (head, query) row sums to 1. key_positions[j] is the original token
    index behind column j; columns are in ascending position order when the
    caller supplies them that way (the model layer always does).
    """

    probs: np.ndarray
    query_positions: np.ndarray
    key_positions: np.ndarray

    @property
    def heads(self) -> int:
        return self.probs.shape[0]

    @property
    def num_queries(self) -> int:
        return self.probs.shape[1]

    @property
    def num_keys(self) -> int:
        return self.probs.shape[2]


def matmul(a, b) -> np.ndarray:
    """Matrix product of two float32 matrices.

    Accumulates in float64 and rounds once, so the result equals a sequential
    per-element dot product after rounding regardless of operand shapes.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return (a.astype(F64) @ b.astype(F64)).astype(F32)


def softmax_rows(x, mask=None) -> np.ndarray:
    """Row-wise softmax with max-subtraction; masked entries get exactly 0.

    mask is a boolean array of x's shape, True where an entry participates.
    Raises DegenerateRowError if any row has no unmasked entry.
    """
    x = as_matrix(x, "x")
    z = x.astype(F64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match {x.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        z = np.where(mask, z, -np.inf)
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z.astype(F32)


def rms_norm(x, gain) -> np.ndarray:
    """Scale each row by 1/sqrt(mean of squares + 1e-5), then by gain."""
    x = as_matrix(x, "x")
    gain = np.ascontiguousarray(gain, dtype=F32)
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"gain shape {gain.shape} does not match width {x.shape[1]}")
    z = x.astype(F64)
    inv = 1.0 / np.sqrt(np.mean(z * z, axis=1, keepdims=True) + RMS_EPS)
    return (z * inv * gain.astype(F64)).astype(F32)


def rope_apply(x, positions, head_dim: int) -> np.ndarray:
    """Rotary position embedding over adjacent dimension pairs, base 10000.

    positions are absolute token indices. Rows may span several heads; every
    head_dim-wide block is rotated with the same frequencies.
    """
    x = as_matrix(x, "x")
    if head_dim <= 0 or head_dim % 2 != 0:
        raise ConfigError(f"head_dim must be a positive even number, got {head_dim}")
    if x.shape[1] % head_dim != 0:
        raise ShapeError(f"width {x.shape[1]} is not a multiple of head_dim {head_dim}")
    pos = _as_positions(positions, x.shape[0], "positions").astype(F64)
    half = head_dim // 2
    freqs = ROPE_BASE ** (-2.0 * np.arange(half, dtype=F64) / head_dim)
    ang = pos[:, None] * freqs[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    z = x.astype(F64).reshape(x.shape[0], -1, half, 2)
    even, odd = z[..., 0], z[..., 1]
    out = np.empty_like(z)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(x.shape).astype(F32)


def attention(queries, keys, values, query_positions, key_positions,
              num_heads: int) -> tuple[np.ndarray, AttentionProbs]:
    """Masked multi-head scaled dot-product attention over an explicit key set.

    Queries and keys arrive already position-encoded. A query at original
    position p sees exactly the keys at positions <= p; excluded entries never
    enter the softmax. Scale is 1/sqrt(head_dim).

    Returns the concatenated head outputs (queries x d_model) and the per-head
    probabilities, which callers use for importance scoring.
    """
    q = as_matrix(queries, "queries")
    k = as_matrix(keys, "keys")
    v = as_matrix(values, "values")
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"width mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key count {k.shape[0]} != value count {v.shape[0]}")
    if num_heads <= 0 or d % num_heads != 0:
        raise ShapeError(f"width {d} does not split into {num_heads} heads")
    nq, nk = q.shape[0], k.shape[0]
    qpos = _as_positions(query_positions, nq, "query_positions")
    kpos = _as_positions(key_positions, nk, "key_positions")
    if nk == 0 or nq == 0:
        raise DegenerateRowError("attention requires at least one query and one key")

    hd = d // num_heads
    scale = 1.0 / math.sqrt(hd)
    qh = np.ascontiguousarray(q.astype(F64).reshape(nq, num_heads, hd).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.astype(F64).reshape(nk, num_heads, hd).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.astype(F64).reshape(nk, num_heads, hd).transpose(1, 0, 2))
    out = np.empty((nq, d), dtype=F32)

    sorted_inputs = (np.all(qpos[1:] >= qpos[:-1]) and np.all(kpos[1:] >= kpos[:-1]))
    if sorted_inputs:
        # causal structure: each query sees a prefix of the keys, so work in
        # row blocks over only that prefix (roughly halves a full prefill)
        ends = np.searchsorted(kpos, qpos, side="right")
        if ends.min() == 0:
            bad = int(np.flatnonzero(ends == 0)[0])
            raise DegenerateRowError(
                f"query at position {int(qpos[bad])} sees no keys")
        probs = np.zeros((num_heads, nq, nk), dtype=F32)
        block = 512
        for r0 in range(0, nq, block):
            r1 = min(r0 + block, nq)
            width = int(ends[r1 - 1])
            masked = np.arange(width)[None, :] >= ends[r0:r1, None]
            for h in range(num_heads):
                scores = qh[h][r0:r1] @ kh[h][:width].T
                scores *= scale
                np.copyto(scores, -np.inf, where=masked)
                scores -= scores.max(axis=1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=1, keepdims=True)
                probs[h, r0:r1, :width] = scores
                out[r0:r1, h * hd:(h + 1) * hd] = (scores @ vh[h][:width]).astype(F32)
    else:
        visible = kpos[None, :] <= qpos[:, None]
        if not visible.any(axis=1).all():
            bad = int(np.flatnonzero(~visible.any(axis=1))[0])
            raise DegenerateRowError(
                f"query at position {int(qpos[bad])} sees no keys")
        hidden = ~visible
        probs = np.empty((num_heads, nq, nk), dtype=F32)
        scores = np.empty((nq, nk), dtype=F64)
        for h in range(num_heads):
            np.matmul(qh[h], kh[h].T, out=scores)
            scores *= scale
            np.copyto(scores, -np.inf, where=hidden)
            scores -= scores.max(axis=1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=1, keepdims=True)
            probs[h] = scores
            out[:, h * hd:(h + 1) * hd] = (scores @ vh[h]).astype(F32)
    return out, AttentionProbs(probs=probs, query_positions=qpos.copy(),
                               key_positions=kpos.copy())


def gated_mlp(x, w_gate, w_up, w_down) -> np.ndarray:
    """SiLU-gated MLP: (silu(x @ w_gate) * (x @ w_up)) @ w_down."""
    x = as_matrix(x, "x")
    wg = as_matrix(w_gate, "w_gate")
    wu = as_matrix(w_up, "w_up")
    wd = as_matrix(w_down, "w_down")
    d, ff = wg.shape
    if x.shape[1] != d or wu.shape != (d, ff) or wd.shape[0] != ff:
        raise ShapeError(
            f"mlp shapes inconsistent: x {x.shape}, gate {wg.shape}, "
            f"up {wu.shape}, down {wd.shape}")
    z = x.astype(F64)
    a = z @ wg.astype(F64)
    # silu(a) = a * sigmoid(a), branched so exp never overflows
    nonneg = a >= 0
    ex = np.exp(np.where(nonneg, -a, a))
    gate = a * np.where(nonneg, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    up = z @ wu.astype(F64)
    return ((gate * up) @ wd.astype(F64)).astype(F32)
