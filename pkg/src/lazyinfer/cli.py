"""Command-line entry point.

Subcommands: gen-model, run, bench, sweep, profile, verify. All experiment
knobs are flags so runs are self-describing in their reports. Exit codes:
0 success, 1 usage/config, 2 runtime invariant violation, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from . import bench as bench_mod
from .engine import EOS_ID, GenerationSession, detokenize, tokenize
from .errors import (
    ConfigError,
    InputError,
    InvariantViolation,
    LazyInferError,
    WeightFormatError,
)
from .model import ModelConfig, generate_random_model, load_model, save_model
from .pruning import PruningSchedule, parse_schedule

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVARIANT = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _atomic_write(path: str, data) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", default="baseline",
                   choices=["baseline", "lazy", "random", "static"])
    p.add_argument("--schedule", default="",
                   help="lazy boundaries, e.g. '4:0.7,8:0.4'")
    p.add_argument("--drop-ratio", type=float, default=0.5,
                   help="random policy: fraction of prompt tokens dropped")
    p.add_argument("--seed", type=int, default=0,
                   help="random policy sampling seed")
    p.add_argument("--static-layer", type=int, default=1,
                   help="static policy: layer whose attention map scores tokens")
    p.add_argument("--static-keep", type=float, default=0.5,
                   help="static policy: keep fraction")


def _schedule_from_args(args) -> PruningSchedule:
    if args.policy == "lazy":
        return PruningSchedule(policy="lazy", boundaries=parse_schedule(args.schedule))
    if args.policy == "random":
        return PruningSchedule(policy="random", drop_ratio=args.drop_ratio,
                               seed=args.seed)
    if args.policy == "static":
        return PruningSchedule(policy="static", static_score_layer=args.static_layer,
                               static_keep_fraction=args.static_keep)
    return PruningSchedule()


def _add_prompt_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--prompt", help="inline prompt text")
    src.add_argument("--prompt-file", help="file of raw prompt bytes")


def _prompt_ids(args, config: ModelConfig, max_new: int) -> list[int]:
    if args.prompt is not None:
        data = args.prompt.encode("utf-8")
    else:
        with open(args.prompt_file, "rb") as fh:
            data = fh.read()
    ids = tokenize(data)
    budget = config.max_position - max_new
    if budget < 1:
        raise ConfigError(
            f"max_new {max_new} leaves no room under max_position "
            f"{config.max_position}")
    if len(ids) > budget:
        print(f"warning: prompt truncated from the left, {len(ids)} -> {budget} "
              f"tokens (recent context is kept)", file=sys.stderr)
        ids = ids[len(ids) - budget:]
    return ids


def _load_corpus(path: str) -> list[tuple[str, bytes]]:
    names = sorted(n for n in os.listdir(path)
                   if os.path.isfile(os.path.join(path, n)))
    if not names:
        raise InputError(f"corpus directory {path!r} has no files")
    out = []
    for name in names:
        with open(os.path.join(path, name), "rb") as fh:
            out.append((name, fh.read()))
    return out


def _cmd_gen_model(args) -> int:
    config = ModelConfig(
        num_layers=args.layers, num_heads=args.heads, d_model=args.dim,
        d_ff=args.ff if args.ff is not None else 4 * args.dim,
        vocab_size=args.vocab, max_position=args.max_position)
    weights = generate_random_model(config, args.seed)
    save_model(args.out, config, weights)
    print(f"wrote {args.out} ({config.num_layers} layers, d_model "
          f"{config.d_model}, vocab {config.vocab_size})")
    return EXIT_OK


def _cmd_run(args) -> int:
    config, weights = load_model(args.model)
    schedule = _schedule_from_args(args)
    ids = _prompt_ids(args, config, args.max_new)
    report = bench_mod.run_generation(
        config, weights, ids, schedule, args.max_new,
        stop_ids=args.stop_id or ())
    text = detokenize(report.generated_ids).decode("utf-8", errors="replace")
    print(text)
    print(f"[{report.policy}] {len(report.generated_ids)} tokens, "
          f"ttft {report.ttft_seconds * 1e3:.1f} ms, total "
          f"{report.total_seconds * 1e3:.1f} ms, "
          f"{report.percent_prompt_tokens_computed:.2f}% of prompt computed",
          file=sys.stderr)
    if args.out:
        _atomic_write(args.out, json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _cmd_bench(args) -> int:
    config, weights = load_model(args.model)
    corpus = _load_corpus(args.corpus)
    prompts = []
    for _, data in corpus:
        ids = tokenize(data)
        budget = config.max_position - args.max_new
        prompts.append(ids[max(0, len(ids) - budget):])

    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if "baseline" not in policies:
        policies = ["baseline"] + policies

    class _A:  # reuse the schedule builder for each policy label
        pass

    rows = []
    base_reports = []
    base_ttft = []
    base_total = []
    for label in policies:
        a = _A()
        a.policy = label
        a.schedule, a.drop_ratio, a.seed = args.schedule, args.drop_ratio, args.seed
        a.static_layer, a.static_keep = args.static_layer, args.static_keep
        schedule = _schedule_from_args(a)
        reports = [bench_mod.run_generation(config, weights, p, schedule,
                                            args.max_new, policy_label=label)
                   for p in prompts]
        ttfts = [bench_mod.measure_ttft(config, weights, p, schedule,
                                        args.repeats, args.warmup).mean_seconds
                 for p in prompts]
        totals = [bench_mod.measure_generation(config, weights, p, schedule,
                                               args.max_new, args.repeats,
                                               args.warmup).mean_seconds
                  for p in prompts]
        if label == "baseline":
            base_reports, base_ttft, base_total = reports, ttfts, totals
        fids = [bench_mod.fidelity(b, r) for b, r in zip(base_reports, reports)]
        row = {
            "policy": label,
            "ttft_speedup": sum(b / t for b, t in zip(base_ttft, ttfts)) / len(ttfts),
            "generation_speedup": sum(b / t for b, t in
                                      zip(base_total, totals)) / len(totals),
            "percent_prompt_tokens_computed": sum(
                r.percent_prompt_tokens_computed for r in reports) / len(reports),
            "fidelity_match_rate": sum(f.token_match_rate for f in fids) / len(fids),
            "fidelity_first_token_agreement": sum(
                f.first_token_agreement for f in fids) / len(fids),
            "fidelity_kl": sum(f.first_logit_divergence for f in fids) / len(fids),
            "ttft_seconds": ttfts,
            "total_seconds": totals,
        }
        rows.append(row)
        print(f"{label}: ttft_speedup {row['ttft_speedup']:.2f}x, "
              f"generation_speedup {row['generation_speedup']:.2f}x, "
              f"{row['percent_prompt_tokens_computed']:.2f}% computed, "
              f"fidelity {row['fidelity_match_rate']:.3f}")

    if args.out_json:
        payload = {"corpus": [name for name, _ in corpus],
                   "max_new_tokens": args.max_new, "repeats": args.repeats,
                   "warmup": args.warmup, "policies": rows}
        _atomic_write(args.out_json, json.dumps(payload, indent=2) + "\n")
    if args.out_csv:
        lines = ["policy,ttft_speedup,generation_speedup,percent_computed,"
                 "fidelity_match_rate,fidelity_kl"]
        for r in rows:
            lines.append(f"{r['policy']},{r['ttft_speedup']:.4f},"
                         f"{r['generation_speedup']:.4f},"
                         f"{r['percent_prompt_tokens_computed']:.4f},"
                         f"{r['fidelity_match_rate']:.6f},{r['fidelity_kl']:.6g}")
        _atomic_write(args.out_csv, "\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config, weights = load_model(args.model)
    corpus = _load_corpus(args.corpus)
    budget = config.max_position - args.max_new
    prompts = [tokenize(data)[-budget:] for _, data in corpus]
    layers = [int(x) for x in args.layers.split(",") if x.strip()]
    fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
    if not layers or not fractions:
        raise ConfigError("sweep needs --layers and --fractions")
    cells = bench_mod.run_sweep(config, weights, prompts, layers, fractions,
                                args.max_new)
    csv = bench_mod.sweep_to_csv(cells)
    if args.out:
        _atomic_write(args.out, csv)
    else:
        sys.stdout.write(csv)
    return EXIT_OK


def _cmd_profile(args) -> int:
    config, weights = load_model(args.model)
    ids = _prompt_ids(args, config, 1)
    thresholds = ([float(t) for t in args.thresholds.split(",")]
                  if args.thresholds else None)
    profiles = bench_mod.attention_profile(config, weights, ids,
                                           bins=args.bins, thresholds=thresholds)
    csv = bench_mod.profile_to_csv(profiles)
    if args.out:
        _atomic_write(args.out, csv)
    else:
        sys.stdout.write(csv)
    for p in profiles:
        frac = ", ".join(f"<{t:g}: {f:.3f}" for t, f in p.below.items())
        print(f"layer {p.layer}: {frac}", file=sys.stderr)
    return EXIT_OK


def _cmd_verify(args) -> int:
    config, weights = load_model(args.model)
    schedule = _schedule_from_args(args)
    ids = _prompt_ids(args, config, args.max_new)
    session = GenerationSession(config, weights, schedule)
    violations = []

    token = session.prefill(ids)
    violations += [f"step 0: {v}" for v in session.verify()]
    while len(session.generated_ids) < args.max_new and token != EOS_ID:
        token = session.decode_step()
        violations += [f"step {session.steps_done - 1}: {v}"
                       for v in session.verify()]
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        print(f"FAIL: {len(violations)} invariant violations", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"ok: {session.steps_done} steps, "
          f"{session.ledger.total_events()} compute events, invariants hold")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lazyinfer",
                     description="CPU transformer runtime with progressive "
                                 "token pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded random LZWT model")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--ff", type=int, default=None, help="default 4*dim")
    p.add_argument("--vocab", type=int, default=258)
    p.add_argument("--max-position", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_model)

    p = sub.add_parser("run", help="generate from one prompt, write a report")
    p.add_argument("--model", required=True)
    _add_prompt_flags(p)
    _add_policy_flags(p)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--stop-id", type=int, action="append")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bench", help="timed comparison over a prompt corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="directory of prompt files")
    p.add_argument("--policies", default="baseline,lazy")
    _add_policy_flags(p)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sweep", help="single-boundary layer x fraction grid")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--layers", required=True, help="e.g. '2,4,6,8,10'")
    p.add_argument("--fractions", required=True, help="e.g. '1.0,0.7,0.4,0.1'")
    p.add_argument("--max-new", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("profile", help="per-layer attention sparsity histograms")
    p.add_argument("--model", required=True)
    _add_prompt_flags(p)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--thresholds", help="comma-separated score thresholds")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("verify", help="run a generation, checking invariants "
                                      "after every step")
    p.add_argument("--model", required=True)
    _add_prompt_flags(p)
    _add_policy_flags(p)
    p.add_argument("--max-new", type=int, default=8)
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help or usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, WeightFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LazyInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
