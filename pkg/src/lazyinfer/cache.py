"""Per-layer KV cache, aux cache of pruned tokens' hidden states, and frontier
tracking.

The frontier of token i is the first layer whose KV for i is still missing.
Two structural rules make revival cheap and testable:

  * prefix coverage: the layers holding token i's KV are exactly [0, frontier).
    Inserting is only legal at the frontier, so coverage stays contiguous and
    the frontier never decreases.
  * aux discipline: when a live token is dropped at layer l, its input hidden
    state for layer l is parked in the aux store. Reading it back is
    non-destructive; only inserting KV at layer l (i.e. actually computing the
    layer) consumes the entry, so an aborted step cannot lose state. A token
    has at most one aux entry at a time.
"""

from __future__ import annotations

import numpy as np

from .errors import InvariantViolation, MissingAuxError, MissingKvError
from .tensor_nn import F32


class LayeredCaches:
    def __init__(self, num_layers: int, d_model: int):
        if num_layers < 1 or d_model < 1:
            raise InvariantViolation("caches need num_layers >= 1 and d_model >= 1")
        self.num_layers = num_layers
        self.d_model = d_model
        self._keys: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]
        self._values: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]
        self._aux: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]
        self._frontier: dict[int, int] = {}
        self._aux_layer: dict[int, int] = {}

    def frontier(self, token: int) -> int:
        return self._frontier.get(token, 0)

    def tokens(self) -> list[int]:
        """All tokens with any cached state, ascending."""
        return sorted(self._frontier)

    def _row(self, row, what: str) -> np.ndarray:
        arr = np.ascontiguousarray(row, dtype=F32)
        if arr.shape != (self.d_model,):
            raise InvariantViolation(f"{what} row has shape {arr.shape}, "
                                     f"want ({self.d_model},)")
        return arr

    def kv_insert(self, layer: int, token: int, key_row, value_row) -> None:
        """Store one token's KV at its frontier layer and advance the frontier.

        Any aux entry parked at this layer for the token is consumed.
        """
        fr = self.frontier(token)
        if layer != fr:
            raise InvariantViolation(
                f"kv_insert at layer {layer} for token {token}, but its frontier "
                f"is {fr}; insertion may only extend the prefix")
        if layer >= self.num_layers:
            raise InvariantViolation(f"layer {layer} out of range")
        self._keys[layer][token] = self._row(key_row, "key")
        self._values[layer][token] = self._row(value_row, "value")
        self._frontier[token] = layer + 1
        if self._aux_layer.get(token) == layer:
            del self._aux[layer][token]
            del self._aux_layer[token]

    def kv_gather(self, layer: int, tokens) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cached (keys, values, positions) for the tokens, ascending by position.

        Every requested token must have frontier > layer; otherwise the caller
        should have revived it instead of gathering.
        """
        toks = sorted(set(int(t) for t in tokens))
        keys = np.empty((len(toks), self.d_model), dtype=F32)
        values = np.empty((len(toks), self.d_model), dtype=F32)
        krows, vrows = self._keys[layer], self._values[layer]
        for i, t in enumerate(toks):
            row = krows.get(t)
            if row is None:
                raise MissingKvError(
                    f"token {t} has no KV at layer {layer} "
                    f"(frontier {self.frontier(t)})")
            keys[i] = row
            values[i] = vrows[t]
        return keys, values, np.asarray(toks, dtype=np.int64)

    def aux_store(self, layer: int, token: int, hidden_row) -> None:
        """Park a dropped token's input hidden state for layer = its frontier."""
        fr = self.frontier(token)
        if layer != fr:
            raise InvariantViolation(
                f"aux_store at layer {layer} for token {token}, but its frontier "
                f"is {fr}")
        if layer >= self.num_layers:
            raise InvariantViolation(
                f"token {token} is fully computed (frontier {fr}); nothing to park")
        if token in self._aux_layer:
            raise InvariantViolation(
                f"token {token} already has an aux entry at layer "
                f"{self._aux_layer[token]}")
        self._aux[layer][token] = self._row(hidden_row, "aux hidden").copy()
        self._aux_layer[token] = layer

    def aux_take(self, layer: int, token: int) -> np.ndarray:
        """Read a parked hidden state. Non-destructive: the entry stays until
        kv_insert at this layer consumes it, so a failed step loses nothing.
        """
        row = self._aux[layer].get(token) if 0 <= layer < self.num_layers else None
        if row is None:
            raise MissingAuxError(f"no aux entry for token {token} at layer {layer}")
        return row

    def verify_invariants(self) -> list[str]:
        """Check prefix coverage and aux discipline; returns violations, empty
        when the caches are consistent. Reports rather than raising so tests
        and the verify command can aggregate.
        """
        problems: list[str] = []
        tokens = set(self._frontier)
        for layer_map in self._keys:
            tokens.update(layer_map)
        for layer_map in self._aux:
            tokens.update(layer_map)

        for t in sorted(tokens):
            fr = self.frontier(t)
            if not 0 <= fr <= self.num_layers:
                problems.append(f"token {t}: frontier {fr} out of range")
                continue
            for l in range(self.num_layers):
                has_kv = t in self._keys[l]
                if l < fr and not has_kv:
                    problems.append(
                        f"token {t}: missing KV at layer {l} below frontier {fr}")
                if l >= fr and has_kv:
                    problems.append(
                        f"token {t}: stray KV at layer {l} at/above frontier {fr}")
                if (t in self._values[l]) != has_kv:
                    problems.append(f"token {t}: key/value stores disagree at layer {l}")

        seen_aux: dict[int, list[int]] = {}
        for l, layer_map in enumerate(self._aux):
            for t in layer_map:
                seen_aux.setdefault(t, []).append(l)
        for t, layers in sorted(seen_aux.items()):
            if len(layers) > 1:
                problems.append(f"token {t}: aux entries at several layers {layers}")
            for l in layers:
                if self.frontier(t) != l:
                    problems.append(
                        f"token {t}: aux entry at layer {l} but frontier is "
                        f"{self.frontier(t)}")
                if l >= self.num_layers:
                    problems.append(f"token {t}: aux entry at out-of-range layer {l}")
            if self._aux_layer.get(t) != layers[0] and len(layers) == 1:
                problems.append(f"token {t}: aux index out of sync")
        for t in self._aux_layer:
            if t not in seen_aux:
                problems.append(f"token {t}: aux index points at a missing entry")
        return problems

    def dump(self) -> dict:
        """JSON-ready snapshot of frontiers and per-layer KV/aux token lists."""
        return {
            "frontiers": {str(t): self._frontier[t] for t in sorted(self._frontier)},
            "kv": {str(l): sorted(self._keys[l]) for l in range(self.num_layers)},
            "aux": {str(l): sorted(self._aux[l]) for l in range(self.num_layers)},
        }
