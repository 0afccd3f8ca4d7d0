"""Metrics and experiment runners: TTFT and generation walltime, percent of
prompt tokens computed, cumulative per-layer usage, fidelity proxies against
the baseline, attention-sparsity profiling, and the single-boundary sweep.

Timed runs are serialized on one thread; walltime fields are the only
non-deterministic part of any report.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import ComputeLedger, GenerationSession, KeepOverride
from .errors import InputError
from .model import ModelConfig, ModelWeights
from .pruning import PruningSchedule, format_schedule

TIMING_FIELDS = ("ttft_seconds", "total_seconds")


@dataclass
class GenerationReport:
    policy: str
    prompt_length: int
    generated_ids: list[int]
    ttft_seconds: float
    total_seconds: float
    prompt_compute_events: int
    percent_prompt_tokens_computed: float
    cumulative_usage: list[list[float]]   # [step][layer]
    live_sizes: list[list[int]]           # [step][layer]
    schedule: str
    seeds: dict
    policy_params: dict
    max_new_tokens: int
    stop_ids: list[int]
    first_token_logits: list[float]

    def to_dict(self) -> dict:
        return asdict(self)

    def comparable_dict(self) -> dict:
        """Report fields minus walltime, for determinism checks."""
        d = self.to_dict()
        for key in TIMING_FIELDS:
            d.pop(key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationReport":
        return cls(**d)


@dataclass
class FidelityResult:
    token_match_rate: float
    first_token_agreement: bool
    first_logit_divergence: float


@dataclass
class TimingResult:
    mean_seconds: float
    stdev_seconds: float
    samples: list[float]


@dataclass
class SweepCell:
    prune_layer: int
    keep_fraction: float
    fidelity: float
    ttft_speedup: float
    percent_computed: float


@dataclass
class LayerProfile:
    layer: int
    scores: list[float]            # ascending token order, sums to ~1
    bin_edges: list[float]
    counts: list[int]
    below: dict[float, float]      # threshold -> fraction of tokens under it


def percent_prompt_tokens_computed(ledger: ComputeLedger, prompt_len: int,
                                   num_layers: int) -> float:
    """100 * (prompt-token compute events) / (N * L)."""
    return 100.0 * ledger.prompt_events(prompt_len) / (prompt_len * num_layers)


def cumulative_usage_series(ledger: ComputeLedger, prompt_len: int,
                            num_layers: int) -> list[list[float]]:
    """For each step t and layer l, the fraction of prompt tokens computed at
    layer l in steps <= t."""
    steps = len(ledger.live_sizes)
    new_events = [[0] * num_layers for _ in range(steps)]
    for (token, layer), step in ledger.step_of.items():
        if token < prompt_len:
            new_events[step][layer] += 1
    series = []
    running = [0] * num_layers
    for t in range(steps):
        running = [running[l] + new_events[t][l] for l in range(num_layers)]
        series.append([running[l] / prompt_len for l in range(num_layers)])
    return series


def _policy_label(schedule: PruningSchedule) -> str:
    return "baseline" if schedule.policy == "none" else schedule.policy


def run_generation(config: ModelConfig, weights: ModelWeights,
                   prompt_ids: Sequence[int], schedule: PruningSchedule,
                   max_new_tokens: int, stop_ids: Iterable[int] = (),
                   keep_override: Optional[KeepOverride] = None,
                   policy_label: Optional[str] = None) -> GenerationReport:
    """Run one full generation and assemble its report."""
    session = GenerationSession(config, weights, schedule, keep_override=keep_override)
    ids, ttft, total = session.generate(prompt_ids, max_new_tokens, stop_ids)
    n = len(session.prompt_ids)
    params = {}
    seeds = {}
    if schedule.policy == "random":
        params["drop_ratio"] = schedule.drop_ratio
        seeds["policy_seed"] = schedule.seed
    if schedule.policy == "static":
        params["static_score_layer"] = schedule.static_score_layer
        params["static_keep_fraction"] = schedule.static_keep_fraction
    return GenerationReport(
        policy=policy_label or _policy_label(schedule),
        prompt_length=n,
        generated_ids=ids,
        ttft_seconds=ttft,
        total_seconds=total,
        prompt_compute_events=session.ledger.prompt_events(n),
        percent_prompt_tokens_computed=percent_prompt_tokens_computed(
            session.ledger, n, config.num_layers),
        cumulative_usage=cumulative_usage_series(session.ledger, n, config.num_layers),
        live_sizes=[list(row) for row in session.ledger.live_sizes],
        schedule=format_schedule(schedule.boundaries),
        seeds=seeds,
        policy_params=params,
        max_new_tokens=max_new_tokens,
        stop_ids=sorted(int(t) for t in stop_ids),
        first_token_logits=[float(x) for x in session.first_token_logits],
    )


def measure_ttft(config: ModelConfig, weights: ModelWeights,
                 prompt_ids: Sequence[int], schedule: PruningSchedule,
                 repeats: int, warmup: int = 5) -> TimingResult:
    """Wall-clock around prefill only; warmup runs are executed and discarded."""
    if repeats < 1:
        raise InputError(f"repeats must be >= 1, got {repeats}")
    for _ in range(warmup):
        GenerationSession(config, weights, schedule).prefill(prompt_ids)
    samples = []
    for _ in range(repeats):
        session = GenerationSession(config, weights, schedule)
        t0 = time.perf_counter()
        session.prefill(prompt_ids)
        samples.append(time.perf_counter() - t0)
    return TimingResult(
        mean_seconds=statistics.fmean(samples),
        stdev_seconds=statistics.stdev(samples) if len(samples) > 1 else 0.0,
        samples=samples,
    )


def measure_generation(config: ModelConfig, weights: ModelWeights,
                       prompt_ids: Sequence[int], schedule: PruningSchedule,
                       max_new_tokens: int, repeats: int,
                       warmup: int = 5, stop_ids: Iterable[int] = ()) -> TimingResult:
    """Wall-clock around the whole generation loop, warmups excluded."""
    if repeats < 1:
        raise InputError(f"repeats must be >= 1, got {repeats}")
    for _ in range(warmup):
        GenerationSession(config, weights, schedule).generate(
            prompt_ids, max_new_tokens, stop_ids)
    samples = []
    for _ in range(repeats):
        session = GenerationSession(config, weights, schedule)
        t0 = time.perf_counter()
        session.generate(prompt_ids, max_new_tokens, stop_ids)
        samples.append(time.perf_counter() - t0)
    return TimingResult(
        mean_seconds=statistics.fmean(samples),
        stdev_seconds=statistics.stdev(samples) if len(samples) > 1 else 0.0,
        samples=samples,
    )


def _softmax64(v: np.ndarray) -> np.ndarray:
    z = np.asarray(v, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def fidelity(baseline_report: GenerationReport,
             policy_report: GenerationReport) -> FidelityResult:
    """Prefix agreement of generated ids plus the KL divergence of the policy's
    first-token distribution from the baseline's."""
    a = baseline_report.generated_ids
    b = policy_report.generated_ids
    lcp = 0
    for x, y in zip(a, b):
        if x != y:
            break
        lcp += 1
    denom = max(len(a), len(b))
    rate = lcp / denom if denom else 1.0
    p = _softmax64(np.array(policy_report.first_token_logits))
    q = _softmax64(np.array(baseline_report.first_token_logits))
    kl = float(np.sum(p * (np.log(p) - np.log(q))))
    return FidelityResult(
        token_match_rate=rate,
        first_token_agreement=bool(a and b and a[0] == b[0]),
        first_logit_divergence=kl,
    )


def attention_profile(config: ModelConfig, weights: ModelWeights,
                      prompt_ids: Sequence[int], bins: int = 20,
                      thresholds: Optional[Sequence[float]] = None) -> list[LayerProfile]:
    """Per-layer importance-score histograms for the first-token prediction.

    Runs an unpruned prefill so every layer scores every prompt token; the
    default sparsity threshold is 1/N (a uniform map would put every token
    exactly there).
    """
    session = GenerationSession(config, weights, PruningSchedule(),
                                capture_scores=True)
    session.prefill(prompt_ids)
    n = len(session.prompt_ids)
    thr = [1.0 / n] if thresholds is None else [float(t) for t in thresholds]
    profiles = []
    for layer, score_map in enumerate(session.layer_scores):
        vec = np.array([score_map[t] for t in sorted(score_map)], dtype=np.float64)
        counts, edges = np.histogram(vec, bins=bins, range=(0.0, 1.0))
        profiles.append(LayerProfile(
            layer=layer,
            scores=[float(x) for x in vec],
            bin_edges=[float(x) for x in edges],
            counts=[int(c) for c in counts],
            below={t: float(np.mean(vec < t)) for t in thr},
        ))
    return profiles


def profile_to_csv(profiles: list[LayerProfile]) -> str:
    lines = ["layer,bin_low,bin_high,count"]
    for p in profiles:
        for i, c in enumerate(p.counts):
            lines.append(f"{p.layer},{p.bin_edges[i]:g},{p.bin_edges[i + 1]:g},{c}")
    return "\n".join(lines) + "\n"


def run_sweep(config: ModelConfig, weights: ModelWeights,
              prompts: Sequence[Sequence[int]], layer_grid: Sequence[int],
              fraction_grid: Sequence[float],
              max_new_tokens: int = 1) -> list[SweepCell]:
    """Single-boundary (layer, fraction) grid, averaged over the corpus.

    Defaults to one generated token so percent_computed stays prefill-only and
    matches the closed-form event count; fidelity is then first-token prefix
    agreement.
    """
    if not prompts:
        raise InputError("sweep needs at least one prompt")
    baselines = [run_generation(config, weights, p, PruningSchedule(),
                                max_new_tokens) for p in prompts]
    cells = []
    for layer in layer_grid:
        for frac in fraction_grid:
            schedule = PruningSchedule(policy="lazy", boundaries=((layer, frac),))
            fids, speedups, percents = [], [], []
            for base, prompt in zip(baselines, prompts):
                rep = run_generation(config, weights, prompt, schedule,
                                     max_new_tokens)
                fids.append(fidelity(base, rep).token_match_rate)
                speedups.append(base.ttft_seconds / rep.ttft_seconds)
                percents.append(rep.percent_prompt_tokens_computed)
            cells.append(SweepCell(
                prune_layer=int(layer),
                keep_fraction=float(frac),
                fidelity=statistics.fmean(fids),
                ttft_speedup=statistics.fmean(speedups),
                percent_computed=statistics.fmean(percents),
            ))
    return cells


def sweep_to_csv(cells: list[SweepCell]) -> str:
    lines = ["prune_layer,keep_fraction,fidelity,ttft_speedup,percent_computed"]
    for c in cells:
        lines.append(f"{c.prune_layer},{c.keep_fraction:g},{c.fidelity:.6f},"
                     f"{c.ttft_speedup:.4f},{c.percent_computed:.6f}")
    return "\n".join(lines) + "\n"
