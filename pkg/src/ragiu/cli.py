"""Command-line entry point: gen-stream, train, eval, gradcheck, bench.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file-format
error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import ConfigError, CorpusError, FormatError, NumericAbort, ParameterError, ProbeError
from .formats import RunConfig, read_corpus, write_corpus
from .gradsuite import gradient_suite
from .harness import METRICS, STRATEGIES, MetricsReport, evaluate_round, run_experiment, synth_stream, train_rounds

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(args, msg: str):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def run_config(args, **flags) -> RunConfig:
    """Config file values, then --set pairs, then dedicated flags."""
    overrides = dict(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in flags.items() if v is not None})
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_mapping(overrides)


def _write_text(path, text: str):
    Path(path).write_text(text, encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_gen_stream(args) -> int:
    cfg = run_config(
        args, rounds=args.rounds, initial_facts=args.facts, facts_per_round=args.facts_per_round,
        overwrite_fraction=args.overwrite, paraphrases=args.paraphrases, answer_vocab=args.answer_vocab,
    )
    stream = synth_stream(cfg.stream_config())
    out = args.out or "stream.jsonl"
    write_corpus(stream, out)
    _log(args, f"wrote {len(stream.records)} records over {len(stream)} rounds to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args, eta=args.eta, beta=args.beta)
    stream = read_corpus(args.corpus)
    model_cfg = cfg.model_config()
    if stream.config is not None and stream.config.answer_vocab != model_cfg.answer_vocab:
        raise ConfigError(
            f"corpus uses {stream.config.answer_vocab} answers but the model is configured for {model_cfg.answer_vocab}"
        )
    out = args.out or cfg["out"] or "model.ckpt"
    log_path = args.log or cfg["log"] or str(out) + ".log.jsonl"
    system = None
    with open(log_path, "w", encoding="utf-8") as log:
        for r, system, losses, seconds in train_rounds(args.strategy, stream, cfg.train_config(), model_cfg, cfg["seed"]):
            for b, parts in enumerate(losses):
                log.write(json.dumps({"round": r, "batch": b, **parts.as_dict()}) + "\n")
            mean = np.mean([p.l_total for p in losses]) if losses else float("nan")
            _log(args, f"round {r}: {len(losses)} batches, mean l_total {mean:.4f} ({seconds:.2f}s)")
    checkpoint.save(system, out)
    _log(args, f"checkpoint written to {out}")
    return EXIT_OK


def _report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "metric", "value"])
    for r, m, v in rows:
        w.writerow([r, m, "" if v is None else repr(v)])
    return buf.getvalue()


def cmd_eval(args) -> int:
    run_config(args)  # validates --config and --set even though eval only reads files
    system = checkpoint.load(args.checkpoint)
    stream = read_corpus(args.corpus)
    r = len(stream) if args.round is None else args.round
    if not 1 <= r <= len(stream):
        raise ConfigError(f"round {r} outside [1, {len(stream)}]")
    metrics = evaluate_round(system, stream, r, args.window)
    report = MetricsReport("checkpoint", 0 if args.seed is None else args.seed)
    for m in METRICS:
        report.series(m).append(metrics[m])
    doc = {**report.to_dict(), "round": r, "checkpoint": str(args.checkpoint), "corpus": str(args.corpus)}
    out = Path(args.out or "metrics.json")
    _write_text(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_text(out.with_suffix(".csv"), _report_csv((r, m, metrics[m]) for m in METRICS))
    for m in METRICS:
        _log(args, f"{m:>20}: {metrics[m]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    worst = gradient_suite(range(start, start + args.seeds), args.dims, args.h)
    failed = [g for g, e in worst.items() if not e < args.tol]
    print(f"{'group':<10} {'max rel err':>12}  status")
    for g, e in worst.items():
        print(f"{g:<10} {e:>12.3e}  {'FAIL' if g in failed else 'ok'}")
    _log(args, f"{args.seeds} seeds at dims {args.dims} in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_USAGE
    return EXIT_OK


def bench_reports(strategies, seeds, cfg: RunConfig) -> list[MetricsReport]:
    """One report per (strategy, seed), in that order."""
    stream_cfg = cfg.stream_config()
    reports = []
    for strategy in strategies:
        for seed in seeds:
            s_cfg = dataclasses.replace(stream_cfg, seed=seed)
            reports.append(
                run_experiment(strategy, s_cfg, cfg.train_config(), cfg.model_config(), cfg["window"], seed=seed)
            )
    return reports


def bench_summary(reports: list[MetricsReport]) -> dict:
    by_strategy: dict = {}
    for rep in reports:
        by_strategy.setdefault(rep.strategy, []).append(rep)
    summary = {}
    for strategy, reps in by_strategy.items():
        block = {"seeds": [r.seed for r in reps], "metrics": {}}
        for m in METRICS:
            rounds = len(reps[0].series(m))
            mean, sd = [], []
            for i in range(rounds):
                vals = [r.series(m)[i] for r in reps if r.series(m)[i] is not None]
                mean.append(float(np.mean(vals)) if vals else None)
                sd.append(float(np.std(vals)) if vals else None)
            block["metrics"][m] = {"mean": mean, "sd": sd}
        summary[strategy] = block
    return summary


def bench_csv(reports: list[MetricsReport], summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "seed", "round", "metric", "value"])
    for rep in reports:
        for row in rep.rows():
            w.writerow([*row[:4], "" if row[4] is None else repr(row[4])])
    for strategy, block in summary.items():
        for m, stats in block["metrics"].items():
            for stat in ("mean", "sd"):
                for r, v in enumerate(stats[stat], start=1):
                    w.writerow([strategy, stat, r, m, "" if v is None else repr(v)])
    return buf.getvalue()


def cmd_bench(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if not strategies or unknown:
        raise UsageError(f"unknown strategy {', '.join(unknown) or '(none)'}; valid: {', '.join(STRATEGIES)}")
    cfg = run_config(args)
    seeds = list(range(cfg["seed"], cfg["seed"] + args.seeds))
    t0 = time.perf_counter()
    reports = bench_reports(strategies, seeds, cfg)
    summary = bench_summary(reports)
    prefix = Path(args.out or "bench")
    doc = {
        "config": cfg.values,
        "strategies": summary,
        "runs": [rep.to_dict() for rep in reports],
    }
    _write_text(prefix.with_suffix(".json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_text(prefix.with_suffix(".csv"), bench_csv(reports, summary))
    for strategy, block in summary.items():
        finals = {m: block["metrics"][m]["mean"][-1] for m in METRICS}
        _log(args, f"{strategy:>15}: " + "  ".join(f"{m}={v:.3f}" for m, v in finals.items() if v is not None))
    _log(args, f"bench finished in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="flat key = value config file")
    shared.add_argument("--seed", type=int, help="run seed (overrides the config)")
    shared.add_argument("--out", help="output path")
    shared.add_argument("--quiet", action="store_true", help="suppress progress on stderr")
    shared.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE", help="override one config key")

    parser = _Parser(prog="ragiu", description="Online-updating retrieval-augmented model toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-stream", parents=[shared], help="write a synthetic knowledge stream")
    p.add_argument("--rounds", type=int)
    p.add_argument("--facts", type=int, help="facts introduced in round 1")
    p.add_argument("--facts-per-round", type=int, help="fresh facts in each later round")
    p.add_argument("--overwrite", type=float, help="fraction of facts_per_round overwritten each later round")
    p.add_argument("--paraphrases", type=int)
    p.add_argument("--answer-vocab", type=int)
    p.set_defaults(func=cmd_gen_stream)

    p = sub.add_parser("train", parents=[shared], help="stream a corpus through the online updater")
    p.add_argument("--corpus", required=True)
    p.add_argument("--log", help="per-batch loss log (default: <out>.log.jsonl)")
    p.add_argument("--eta", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--strategy", default="ours", choices=STRATEGIES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--round", type=int, help="round to evaluate at (default: last)")
    p.add_argument("--window", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[shared], help="compare update strategies over several seeds")
    p.add_argument("--strategies", default="ours,naive_finetune")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, FormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"I/O error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except ProbeError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
