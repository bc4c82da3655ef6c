"""Command-line entry point: ``mcout <subcommand> ...``.

Exit codes: 0 success, 1 contract or config error, 2 I/O or format error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .ablation import AblationGrid, format_table, run_ablation
from .analysis import STAT_COLUMNS, TRACE_COLUMNS, analyze_latents, write_csv
from .checkpoint import CheckpointFormatError
from .config import RunConfig, parse_key_values
from .data import DatasetSpec, generate_dataset, load_jsonl, save_jsonl
from .errors import MCOUTError, NumericalAbort
from .training import evaluate, load_model, run_training

logger = logging.getLogger("mcout")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _cmd_gen_data(args):
    with open(args.spec, encoding="utf-8") as fh:
        spec = DatasetSpec(**parse_key_values(fh.read(), DatasetSpec, args.spec))
    os.makedirs(args.out, exist_ok=True)
    samples = generate_dataset(spec)
    path = os.path.join(args.out, "data.jsonl")
    save_jsonl(samples, path)
    with open(os.path.join(args.out, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    print(f"wrote {len(samples)} samples to {path}")


def _cmd_train(args):
    cfg = RunConfig.from_file(args.config)

    def progress(entry):
        if entry["step"] % args.log_every == 0:
            print(f"step {entry['step']:>6d}  lr {entry['lr']:.3e}  total {entry['total']:.4f}  "
                  f"final {entry['final']:.4f}", flush=True)

    result = run_training(cfg, args.out, resume=args.resume, progress=progress)
    print(f"finished after {result.total_steps} steps; checkpoint {os.path.join(args.out, 'final.bin')}")


def _cmd_eval(args):
    model, cfg, _ = load_model(args.ckpt)
    samples = load_jsonl(args.data)
    report = evaluate(model, samples, cfg, mode=args.mode)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _cmd_analyze(args):
    model, cfg, _ = load_model(args.ckpt)
    samples = load_jsonl(args.data)
    stats, rows = analyze_latents(model, samples, args.nt, args.variant, cfg, n_samples=args.n_samples)
    write_csv(args.out, stats, STAT_COLUMNS)
    trace = args.trace or os.path.splitext(args.out)[0] + "_trace.csv"
    write_csv(trace, rows, TRACE_COLUMNS)
    print(f"wrote {len(stats)} iteration rows to {args.out} and {len(rows)} sample rows to {trace}")


def _cmd_ablate(args):
    cfg = RunConfig.from_file(args.config)
    grid = AblationGrid.from_file(args.grid) if args.grid else AblationGrid()
    results = run_ablation(cfg, grid, args.out, n_jobs=args.jobs)
    print(format_table(results), end="")
    failed = [r.name for r in results if r.status != "ok"]
    if failed:
        print(f"{len(failed)} cell(s) failed: {', '.join(failed)}", file=sys.stderr)


def build_parser():
    p = argparse.ArgumentParser(prog="mcout", description="Continuous-thought reasoning on a toy vision-language model.")
    p.add_argument("-v", "--verbose", action="store_true", help="enable debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="key-value dataset spec file")
    g.add_argument("--out", required=True, help="output directory (data.jsonl is written there)")
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="key-value run config file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("open", "choice"), default=None)
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("analyze", help="per-iteration latent statistics")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--nt", type=int, required=True, help="number of thoughts")
    a.add_argument("--variant", choices=("base", "multi"), required=True)
    a.add_argument("--out", required=True, help="aggregate CSV path")
    a.add_argument("--trace", help="per-sample CSV path (default: <out>_trace.csv)")
    a.add_argument("--n-samples", type=int, default=100)
    a.set_defaults(func=_cmd_analyze)

    b = sub.add_parser("ablate", help="run an ablation grid")
    b.add_argument("--config", required=True)
    b.add_argument("--grid", help="key-value grid file (mu, n_thoughts, variants, include_baseline)")
    b.add_argument("--out", required=True)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MCOUTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
