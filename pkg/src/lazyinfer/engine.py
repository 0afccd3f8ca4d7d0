"""Generation orchestrator: prefill with progressive pruning, per-step dynamic
re-selection during decoding, revival of pruned tokens from the aux cache,
greedy decoding, and a complete compute-event ledger.

Step semantics (token indices are absolute positions, prompt then generated):

  * Prefill starts with every prompt token live. At a boundary (layer, f) the
    keep set is selected from layer-1's attention row of the last prompt
    token; dropped tokens park their hidden state in the aux cache at `layer`
    and vanish from all deeper layers this step.
  * Each decode step starts with only the newest token live. Layers below the
    first boundary attend to every computed token. At a boundary the keep set
    is re-selected from scratch; a kept token whose frontier equals the
    boundary layer is revived: its parked hidden state re-enters the live set
    and is computed onward (never re-run through earlier layers). A live token
    dropped at a deeper boundary parks its state there.
  * Protected tokens (last prompt token, all generated tokens) are never
    scored away; pruning the query would break next-token prediction.

Because a token is only computed at its frontier and the frontier only grows,
every (token, layer) pair is computed at most once per generation; the ledger
records each event and the engine aborts loudly on any second one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .cache import LayeredCaches
from .errors import InputError, InvariantViolation
from .model import ModelConfig, ModelWeights, embed, layer_forward, logits
from .pruning import (
    PruningSchedule,
    importance_scores,
    random_keep_set,
    select_keep_set,
    validate_schedule,
)
from .tensor_nn import rms_norm

BOS_ID = 256
EOS_ID = 257
TEXT_VOCAB = 258

# keep-set override hook: (step, boundary_layer, scores, protected) -> tokens or None
KeepOverride = Callable[[int, int, dict[int, float], set[int]], Optional[Iterable[int]]]


def tokenize(data) -> list[int]:
    """Byte-level ids: BOS then one id per byte. str input is encoded UTF-8."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return [BOS_ID] + list(bytes(data))


def detokenize(ids: Sequence[int]) -> bytes:
    """Inverse of tokenize: drops BOS/EOS markers, rejects out-of-vocab ids."""
    out = bytearray()
    for t in ids:
        t = int(t)
        if not 0 <= t < TEXT_VOCAB:
            raise InputError(f"token id {t} outside byte-level vocab {TEXT_VOCAB}")
        if t < 256:
            out.append(t)
    return bytes(out)


def greedy_sample(logit_vector) -> int:
    """Argmax token id; ties resolve to the lowest id."""
    v = np.asarray(logit_vector)
    if v.ndim != 1 or v.size == 0:
        raise InputError("logits must be a non-empty vector")
    return int(np.argmax(v))


class ComputeLedger:
    """Per-(token, layer) compute events with the step each first happened,
    plus per-step per-layer live-set sizes."""

    def __init__(self, num_layers: int):
        self.num_layers = num_layers
        self.counts: dict[tuple[int, int], int] = {}
        self.step_of: dict[tuple[int, int], int] = {}
        self.live_sizes: list[list[int]] = []

    def begin_step(self) -> None:
        self.live_sizes.append([0] * self.num_layers)

    def note_live(self, layer: int, size: int) -> None:
        self.live_sizes[-1][layer] = size

    def record(self, token: int, layer: int, step: int) -> int:
        key = (token, layer)
        n = self.counts.get(key, 0) + 1
        self.counts[key] = n
        self.step_of.setdefault(key, step)
        return n

    def total_events(self) -> int:
        return sum(self.counts.values())

    def prompt_events(self, prompt_len: int) -> int:
        return sum(n for (t, _l), n in self.counts.items() if t < prompt_len)

    def violations(self) -> list[str]:
        return [f"token {t} layer {l} computed {n} times"
                for (t, l), n in sorted(self.counts.items()) if n > 1]


@dataclass
class StepTrace:
    """What one step actually did, for tests and the verify command."""

    step: int
    live_tokens: list[list[int]] = field(default_factory=list)   # per layer
    context_sizes: list[int] = field(default_factory=list)       # per layer
    keep_sets: dict[int, set[int]] = field(default_factory=dict)  # boundary layer -> keep
    revivals: list[tuple[int, int, np.ndarray]] = field(default_factory=list)


class GenerationSession:
    """One generation over one prompt; owns its caches and ledger.

    A session is single-threaded; run independent sessions in parallel over
    the same (immutable) weights if you need concurrency.
    """

    def __init__(self, config: ModelConfig, weights: ModelWeights,
                 schedule: Optional[PruningSchedule] = None,
                 keep_override: Optional[KeepOverride] = None,
                 capture_scores: bool = False):
        config.validate()
        self.schedule = schedule or PruningSchedule()
        validate_schedule(self.schedule, config)
        self.config = config
        self.weights = weights
        self.caches = LayeredCaches(config.num_layers, config.d_model)
        self.ledger = ComputeLedger(config.num_layers)
        self.keep_override = keep_override
        self.capture_scores = capture_scores
        self.layer_scores: list[dict[int, float]] = []  # prefill, per layer
        self.prompt_ids: Optional[list[int]] = None
        self.generated_ids: list[int] = []
        self.steps_done = 0
        self.first_token_logits: Optional[np.ndarray] = None
        self.final_hidden_rows: list[np.ndarray] = []  # newest token, last layer, per step
        self.last_trace: Optional[StepTrace] = None
        policy = self.schedule.policy
        if policy == "lazy":
            self._boundaries = dict(self.schedule.boundaries)
        elif policy == "static":
            self._boundaries = {self.schedule.static_score_layer + 1:
                                self.schedule.static_keep_fraction}
        else:
            self._boundaries = {}
        self._fixed_context: Optional[set[int]] = None  # random/static keep set

    # -- shared helpers ----------------------------------------------------

    def _protected(self) -> set[int]:
        n = len(self.prompt_ids)
        return {n - 1} | set(range(n, n + len(self.generated_ids)))

    def _record(self, token: int, layer: int, step: int) -> None:
        if self.ledger.record(token, layer, step) > 1:
            raise InvariantViolation(
                f"token {token} recomputed at layer {layer} (step {step})")

    def _apply_boundary(self, step, layer, fraction, live, hidden, key_context,
                        protected, prev_probs, allow_revive, trace=None):
        """Select the keep set at a boundary, park dropped live tokens, revive
        kept tokens whose frontier is this layer. Returns the new live list,
        hidden matrix, and keep set."""
        candidates = sorted(t for t in key_context if t not in protected)
        query_row = prev_probs.num_queries - 1  # newest token is the last live row
        scores = importance_scores(prev_probs, query_row, candidates)
        keep = None
        if self.keep_override is not None:
            keep = self.keep_override(step, layer, scores, set(protected))
        if keep is None:
            keep = select_keep_set(scores, fraction, protected)
        else:
            keep = set(int(t) for t in keep) | protected
            if keep - key_context:
                raise InputError(
                    f"keep override selected tokens outside the key context: "
                    f"{sorted(keep - key_context)}")

        kept_rows: list[tuple[int, np.ndarray]] = []
        for i, tok in enumerate(live):
            if tok in keep:
                kept_rows.append((tok, hidden[i]))
            else:
                self.caches.aux_store(layer, tok, hidden[i])

        if allow_revive:
            live_set = set(live)
            for tok in sorted(keep - live_set):
                fr = self.caches.frontier(tok)
                if fr < layer:
                    raise InvariantViolation(
                        f"kept token {tok} has frontier {fr} below boundary layer "
                        f"{layer}; nested selection was violated")
                if fr == layer:
                    row = self.caches.aux_take(layer, tok)
                    kept_rows.append((tok, row))
                    if trace is not None:
                        trace.revivals.append((tok, layer, row.copy()))

        kept_rows.sort(key=lambda pair: pair[0])
        new_live = [tok for tok, _ in kept_rows]
        new_hidden = np.stack([row for _, row in kept_rows])
        if trace is not None:
            trace.keep_sets[layer] = set(keep)
        return new_live, new_hidden, set(keep)

    def _run_layers(self, step, live, hidden, key_context, protected,
                    boundaries, allow_revive, gather_context, trace=None):
        """Drive all layers of one step; returns the final hidden matrix and
        the final live list."""
        prev_probs = None
        for layer in range(self.config.num_layers):
            fraction = boundaries.get(layer)
            if fraction is not None:
                live, hidden, key_context = self._apply_boundary(
                    step, layer, fraction, live, hidden, key_context,
                    protected, prev_probs, allow_revive, trace)
                if step == 0 and self.schedule.policy == "static":
                    self._fixed_context = set(key_context)
            if gather_context:
                ctx_tokens = sorted(key_context - set(live))
                ck, cv, cpos = self.caches.kv_gather(layer, ctx_tokens)
                out = layer_forward(self.config, self.weights, layer, hidden,
                                    np.asarray(live, dtype=np.int64), ck, cv, cpos)
            else:
                out = layer_forward(self.config, self.weights, layer, hidden,
                                    np.asarray(live, dtype=np.int64))
            for i, tok in enumerate(live):
                self.caches.kv_insert(layer, tok, out.keys[i], out.values[i])
                self._record(tok, layer, step)
            self.ledger.note_live(layer, len(live))
            if trace is not None:
                trace.live_tokens.append(list(live))
                trace.context_sizes.append(len(key_context))
            if step == 0 and self.capture_scores:
                self.layer_scores.append(
                    importance_scores(out.probs, len(live) - 1, list(live)))
            prev_probs = out.probs
            hidden = out.hidden
        return hidden, live

    def _emit(self, hidden) -> int:
        """Final norm + unembedding on the newest token's row, then greedy."""
        self.final_hidden_rows.append(hidden[-1].copy())
        final = rms_norm(hidden[-1:], self.weights.final_norm_gain)
        vocab_scores = logits(self.weights, final[0])
        if self.first_token_logits is None:
            self.first_token_logits = vocab_scores.copy()
        token = greedy_sample(vocab_scores)
        self.generated_ids.append(token)
        self.steps_done += 1
        return token

    # -- the two inference stages -------------------------------------------

    def prefill(self, prompt_ids: Sequence[int]) -> int:
        """Compute KV for the prompt (pruning along the way) and emit the first
        token."""
        if self.prompt_ids is not None:
            raise InputError("session already prefilled")
        ids = [int(t) for t in prompt_ids]
        if not ids:
            raise InputError("prompt must not be empty")
        if len(ids) > self.config.max_position:
            raise InputError(
                f"prompt length {len(ids)} exceeds max_position "
                f"{self.config.max_position}")
        self.prompt_ids = ids
        n = len(ids)
        protected = {n - 1}

        live = list(range(n))
        hidden = embed(self.weights, ids)
        if self.schedule.policy == "random":
            keep = random_keep_set(range(n), self.schedule.drop_ratio,
                                   self.schedule.seed, protected)
            live = sorted(keep)
            hidden = hidden[np.asarray(live)]
            self._fixed_context = set(live)

        trace = StepTrace(step=0)
        self.ledger.begin_step()
        hidden, live = self._run_layers(
            step=0, live=live, hidden=hidden, key_context=set(live),
            protected=protected, boundaries=self._boundaries,
            allow_revive=False, gather_context=False, trace=trace)
        self.last_trace = trace
        return self._emit(hidden)

    def decode_step(self) -> int:
        """One decoding step: newest token live, dynamic re-selection at each
        boundary, revival from the aux cache where needed."""
        if self.steps_done == 0:
            raise InputError("prefill must run before decoding")
        n = len(self.prompt_ids)
        newest = n + len(self.generated_ids) - 1
        if newest >= self.config.max_position:
            raise InputError(
                f"position {newest} exceeds max_position {self.config.max_position}")
        protected = self._protected()
        step = self.steps_done

        live = [newest]
        hidden = embed(self.weights, [self.generated_ids[-1]])
        if self._fixed_context is not None:
            key_context = set(self._fixed_context) | protected
        else:
            key_context = set(range(newest + 1))
        boundaries = self._boundaries if self.schedule.policy == "lazy" else {}

        trace = StepTrace(step=step)
        self.ledger.begin_step()
        hidden, live = self._run_layers(
            step=step, live=live, hidden=hidden, key_context=key_context,
            protected=protected, boundaries=boundaries,
            allow_revive=True, gather_context=True, trace=trace)
        self.last_trace = trace
        return self._emit(hidden)

    def generate(self, prompt_ids: Sequence[int], max_new_tokens: int,
                 stop_ids: Iterable[int] = ()) -> tuple[list[int], float, float]:
        """Prefill then decode until max_new_tokens or a stop id; returns
        (generated ids, ttft seconds, total seconds)."""
        if max_new_tokens < 1:
            raise InputError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
        stop = set(int(t) for t in stop_ids)
        t0 = time.perf_counter()
        token = self.prefill(prompt_ids)
        ttft = time.perf_counter() - t0
        while len(self.generated_ids) < max_new_tokens and token not in stop:
            token = self.decode_step()
        total = time.perf_counter() - t0
        return list(self.generated_ids), ttft, total

    def verify(self) -> list[str]:
        """Cache invariants plus the ledger's at-most-once rule."""
        return self.caches.verify_invariants() + self.ledger.violations()
