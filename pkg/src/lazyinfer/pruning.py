"""Token-importance scoring, top-fraction keep-set selection, the progressive
pruning schedule, and the baseline policies (none, random drop, static prune).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, InputError
from .tensor_nn import AttentionProbs

POLICIES = ("none", "lazy", "random", "static")
_POLICY_ALIASES = {"baseline": "none"}


@dataclass(frozen=True)
class PruningSchedule:
    """Pruning policy plus its knobs.

    boundaries is an ordered tuple of (layer, keep_fraction): starting at
    `layer`, only the keep set selected from layer-1's attention map is
    computed. Only the lazy policy uses boundaries; random uses drop_ratio and
    seed, static uses static_score_layer and static_keep_fraction.
    """

    policy: str = "none"
    boundaries: tuple[tuple[int, float], ...] = ()
    drop_ratio: float = 0.0
    seed: int = 0
    static_score_layer: Optional[int] = None
    static_keep_fraction: float = 1.0

    def __post_init__(self):
        policy = _POLICY_ALIASES.get(self.policy, self.policy)
        object.__setattr__(self, "policy", policy)
        object.__setattr__(
            self, "boundaries",
            tuple((int(l), float(f)) for l, f in self.boundaries))


def parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """Parse the CLI schedule grammar `layer:fraction[,layer:fraction]*`."""
    text = (text or "").strip()
    if not text:
        return ()
    boundaries = []
    for part in text.split(","):
        piece = part.strip()
        try:
            layer_s, frac_s = piece.split(":")
            boundaries.append((int(layer_s), float(frac_s)))
        except ValueError as exc:
            raise ConfigError(f"bad schedule entry {piece!r}, want layer:fraction") from exc
    return tuple(boundaries)


def format_schedule(boundaries: Iterable[tuple[int, float]]) -> str:
    return ",".join(f"{l}:{f:g}" for l, f in boundaries)


def validate_schedule(schedule: PruningSchedule, config) -> None:
    """Check schedule consistency against a model config; ConfigError names the
    offending boundary or field."""
    if schedule.policy not in POLICIES:
        raise ConfigError(f"unknown policy {schedule.policy!r}")
    if schedule.policy == "lazy":
        prev = 0
        for layer, frac in schedule.boundaries:
            if not 1 <= layer <= config.num_layers - 1:
                raise ConfigError(
                    f"boundary ({layer}, {frac:g}): layer must be in "
                    f"[1, {config.num_layers - 1}]; layer 0 has no prior attention map")
            if layer <= prev:
                raise ConfigError(
                    f"boundary ({layer}, {frac:g}): layers must be strictly increasing")
            if not 0.0 < frac <= 1.0:
                raise ConfigError(
                    f"boundary ({layer}, {frac:g}): keep fraction must be in (0, 1]")
            prev = layer
    elif schedule.boundaries:
        raise ConfigError(f"policy {schedule.policy!r} does not take boundaries")
    if schedule.policy == "random":
        if not 0.0 <= schedule.drop_ratio < 1.0:
            raise ConfigError(f"drop_ratio must be in [0, 1), got {schedule.drop_ratio}")
    if schedule.policy == "static":
        s = schedule.static_score_layer
        if s is None or not 0 <= s <= config.num_layers - 2:
            raise ConfigError(
                f"static_score_layer must be in [0, {config.num_layers - 2}], got {s}")
        if not 0.0 < schedule.static_keep_fraction <= 1.0:
            raise ConfigError(
                f"static keep fraction must be in (0, 1], "
                f"got {schedule.static_keep_fraction}")


def keep_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), reading the fraction at its decimal precision.

    Plain float math would make 0.7 of 10 come out as 8 (binary 0.7 is a hair
    above 7/10); Fraction(str(f)) pins the intended decimal value.
    """
    if n <= 0:
        return 0
    return min(n, math.ceil(Fraction(str(fraction)) * n))


def importance_scores(probs: AttentionProbs, query_row: int,
                      candidate_tokens) -> dict[int, float]:
    """Mean over heads of the query row's attention probability on each
    candidate. query_row must be the newest token's row; candidates are token
    indices that must appear among the key columns.
    """
    if not 0 <= query_row < probs.num_queries:
        raise InputError(f"query row {query_row} out of range")
    column = {int(pos): j for j, pos in enumerate(probs.key_positions)}
    mean_row = probs.probs[:, query_row, :].astype(np.float64).mean(axis=0)
    scores: dict[int, float] = {}
    for t in candidate_tokens:
        j = column.get(int(t))
        if j is None:
            raise InputError(f"candidate token {t} is not among the attention keys")
        scores[int(t)] = float(mean_row[j])
    return scores


def select_keep_set(scores: dict[int, float], keep_fraction: float,
                    protected) -> set[int]:
    """Top keep_fraction of the scored candidates, plus all protected tokens.

    Candidates are the scored tokens minus protected; ceil(f * |candidates|)
    survive. Ties break toward the higher score, then the lower token index,
    so selection is deterministic.
    """
    protected = set(int(t) for t in protected)
    candidates = [t for t in scores if t not in protected]
    if not candidates and not protected:
        raise InputError("nothing to select: no candidates and no protected tokens")
    k = keep_count(keep_fraction, len(candidates))
    ranked = sorted(candidates, key=lambda t: (-scores[t], t))
    return set(ranked[:k]) | protected


def random_keep_set(prompt_tokens, drop_ratio: float, seed: int,
                    protected) -> set[int]:
    """Seeded uniform sample of ceil((1 - drop_ratio) * N) prompt tokens, plus
    protected. Decided once per generation, before prefill."""
    if not 0.0 <= drop_ratio < 1.0:
        raise InputError(f"drop_ratio must be in [0, 1), got {drop_ratio}")
    candidates = sorted(int(t) for t in prompt_tokens)
    n = len(candidates)
    # ceil((1-r)*n) == n - floor(r*n), exact in the decimal reading of r
    k = n - math.floor(Fraction(str(drop_ratio)) * n)
    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=k, replace=False) if n else np.empty(0, dtype=int)
    return {candidates[i] for i in picked} | {int(t) for t in protected}


def static_keep_set(scores: dict[int, float], keep_fraction: float,
                    protected) -> set[int]:
    """Selection rule shared with select_keep_set; the static policy applies it
    once during prefill and reuses the set for all layers and steps."""
    return select_keep_set(scores, keep_fraction, protected)
