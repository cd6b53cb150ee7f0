"""Command-line entry point: ``qatforge <command> ...``.

Tables and CSV go to stdout. When the config names an output directory (or
``--out`` is given) the CSV files and figures are written there as well.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, harness
from .data import gen_synthetic

log = logging.getLogger("qatforge")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_json(args.config)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _write(out_dir, name: str, text: str) -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def cmd_train(args) -> int:
    from . import plotting

    cfg = _config(args)
    run = harness.run_experiment(cfg)
    row = run.row
    csv_text = harness.rows_to_csv([row])
    print(harness.rows_to_table([row]), end="")
    print(csv_text, end="")
    if cfg.output_dir:
        stem = f"{row.model}_{row.label}_seed{row.seed}"
        _write(cfg.output_dir, f"{stem}.csv", csv_text)
        _write(cfg.output_dir, f"{stem}_loss.csv", "step,loss\n" + "".join(
            f"{i},{v!r}\n" for i, v in enumerate(run.losses)))
        if run.losses:
            plotting.loss_figure(run.losses, Path(cfg.output_dir) / f"{stem}_loss.png", title=stem)
    if row.error:
        print(f"error: {row.error}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    from . import plotting

    cfg = _config(args)
    rows = harness.sweep(cfg, args.seeds, save_checkpoints=bool(cfg.output_dir))
    csv_text = harness.rows_to_csv(rows)
    print(harness.rows_to_table(rows), end="")
    print(csv_text, end="")
    models = list(cfg.sweep_models)
    if {"large", "small"} <= set(models) and not any(r.error for r in rows):
        checks = harness.ordering_checks(rows)
        for name in ("int8_close", "i4wa_worst", "small_degrades_more"):
            per_seed = getattr(checks, name)
            flags = " ".join(f"{s}:{'y' if v else 'n'}" for s, v in per_seed.items())
            print(f"# {name}: {flags} -> {'PASS' if checks.majority(per_seed) else 'FAIL'}")
    if cfg.output_dir:
        _write(cfg.output_dir, "sweep.csv", csv_text)
        _write(cfg.output_dir, "sweep.txt", harness.rows_to_table(rows))
        plotting.sweep_figure(rows, Path(cfg.output_dir) / "sweep.png")
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"error: {r.model}/{r.label} seed {r.seed}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_size(args) -> int:
    contents = checkpoint.read(args.checkpoint)
    print(contents.ledger.to_csv(), end="")
    return 0


def cmd_bench(args) -> int:
    from . import plotting

    cfg = _config(args)
    rows = harness.bench_timing(cfg, steps=args.steps, warmup=args.warmup)
    csv_text = harness.bench_to_csv(rows)
    print(csv_text, end="")
    if cfg.output_dir:
        _write(cfg.output_dir, "bench.csv", csv_text)
        plotting.bench_figure(rows, Path(cfg.output_dir) / "bench.png")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = gen_synthetic(cfg.task, cfg.train.seed)
    counts = np.bincount(ds.y_eval, minlength=cfg.task.num_classes)
    summary = {
        "task": cfg.task.to_dict(),
        "seed": cfg.train.seed,
        "train": len(ds.x_train),
        "eval": len(ds.x_eval),
        "eval_class_counts": counts.tolist(),
        "majority_baseline": float(counts.max() / counts.sum()),
    }
    print(json.dumps(summary, indent=2))
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / "dataset.npz", x_train=ds.x_train, y_train=ds.y_train, x_eval=ds.x_eval, y_eval=ds.y_eval)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qatforge", description="Quantization-aware training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help="output directory (overrides output.dir in the config)")
        s.set_defaults(fn=fn)
        return s

    with_config("train", cmd_train, "train one configuration from scratch")
    s = with_config("sweep", cmd_sweep, "all precision configs on the large and small models")
    s.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated seeds, e.g. 0,1,2")
    s = with_config("bench", cmd_bench, "median step time for the float, native and fake paths")
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    with_config("gen-data", cmd_gen_data, "generate the synthetic dataset")
    s = sub.add_parser("size", help="print a checkpoint's size ledger as CSV")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(fn=cmd_size)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"qatforge {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
