"""Command-line interface.

Commands: train, eval, extract, count, gradcheck, plot. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage/configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import gradcheck as gc
from .config import ConfigError, RunConfig
from .data import compute_normalization
from .network import build_ddnn, count_flops, count_params, extract_subnet, human_count
from .tensor import NonFiniteError, set_checked
from .trainer import evaluate, run_experiment

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--out", help="output directory/file override")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--deterministic", action="store_const", const=True,
                        help="bit-reproducible mode (zeroes wall-clock columns)")
    parser.add_argument("--checked", action="store_const", const=True,
                        help="screen every primitive for NaN/Inf inputs")


def _resolve_config(args, extra_pairs=()) -> RunConfig:
    overrides = list(extra_pairs) + list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"out={args.out}")
    if args.deterministic:
        overrides.append("deterministic=true")
    if args.checked:
        overrides.append("checked=true")
    run = RunConfig.from_sources(args.config, overrides)
    set_checked(run.checked)
    return run


def cmd_train(args) -> int:
    run = _resolve_config(args)
    net_cfg = run.to_net_config()
    specs = run.to_subnet_specs()
    train_cfg = run.to_train_config(len(specs))
    train_images, test_images = run.load_dataset()

    out_dir = Path(run.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = run.resolved_text()
    (out_dir / "config.resolved").write_text(resolved)

    ddnn = build_ddnn(net_cfg, specs, seed=run.seed, tap_stages=run.tap_stage_indices())
    summary = run_experiment(
        ddnn, train_images, test_images, train_cfg, out_dir,
        deterministic=run.deterministic,
        checkpoint_meta={"config": resolved, "config_hash": ckpt.config_hash(resolved)},
        log=lambda msg: print(msg, flush=True),
    )
    print(f"metrics: {summary['metrics']}")
    for name, res in summary["nets"].items():
        print(f"{name}: best top-1 err {res['best_err']:.2f}% (epoch {res['best_epoch']})")
    return EXIT_OK


def _rebuild_from_checkpoint(path, args, extra=()):
    tensors, meta = ckpt.load_checkpoint(path)
    if "config" not in meta:
        raise ckpt.CheckpointError(f"{path}: checkpoint has no embedded config")
    fd, cfg_path = tempfile.mkstemp(suffix=".cfg")
    # --out names the command's output artifact, not the run directory
    saved_config, saved_out = args.config, args.out
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(meta["config"])
        args.config, args.out = cfg_path, None
        run = _resolve_config(args, extra)
    finally:
        args.config, args.out = saved_config, saved_out
        os.unlink(cfg_path)
    ddnn = build_ddnn(run.to_net_config(), run.to_subnet_specs(), seed=run.seed,
                      tap_stages=run.tap_stage_indices())
    ddnn.load_state(tensors)
    return ddnn, run, meta


def cmd_eval(args) -> int:
    ddnn, run, _ = _rebuild_from_checkpoint(args.checkpoint, args)
    train_images, test_images = run.load_dataset()
    normalization = compute_normalization(train_images)
    results = evaluate(ddnn, test_images, normalization=normalization)
    for res in results:
        print(f"{res.net}: top-1 err {res.top1_err:.2f}%  ce {res.ce:.4f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    ddnn, run, meta = _rebuild_from_checkpoint(args.checkpoint, args)
    k = args.subnet
    standalone = extract_subnet(ddnn, k)
    out_path = Path(args.out or f"subnet{k}.ckpt")

    sub_run = dataclasses.replace(run, subnets=(),
                                  stage_blocks=standalone.cfg.stage_blocks)
    resolved = sub_run.resolved_text()
    ckpt.save_checkpoint(out_path, standalone.named_state(),
                         {"config": resolved, "config_hash": ckpt.config_hash(resolved),
                          "extracted_from": str(args.checkpoint), "subnet_index": k})

    full_cfg = ddnn.cfg
    prefixes = ddnn.prefixes_of(k)
    full_p = count_params(full_cfg)
    sub_p = count_params(full_cfg, prefixes)
    full_f = count_flops(full_cfg)
    sub_f = count_flops(full_cfg, prefix_blocks=prefixes)
    print(f"wrote {out_path}")
    dropped = []
    for si, (kept, total) in enumerate(zip(prefixes, full_cfg.stage_blocks), start=1):
        if kept < total:
            blocks = ",".join(str(j) for j in range(kept + 1, total + 1))
            dropped.append(f"stage{si}:{{{blocks}}}")
    print("dropped blocks: " + (" ".join(dropped) if dropped else "none"))
    print(f"params: {human_count(sub_p)} vs full {human_count(full_p)} "
          f"({100 * (full_p - sub_p) / full_p:.1f}% removed)")
    print(f"flops:  {human_count(sub_f)} vs full {human_count(full_f)} "
          f"({100 * (full_f - sub_f) / full_f:.1f}% removed)")
    return EXIT_OK


def cmd_count(args) -> int:
    run = _resolve_config(args)
    cfg = run.to_net_config()
    specs = run.to_subnet_specs()
    rows = [("full", None)] + [(f"sub{k}", spec.prefix_blocks)
                               for k, spec in enumerate(specs, start=1)]
    print(f"{'net':8s} {'blocks':16s} {'params':>12s} {'flops':>12s}")
    for name, prefix in rows:
        blocks = prefix if prefix is not None else cfg.stage_blocks
        p = count_params(cfg, prefix)
        f = count_flops(cfg, prefix_blocks=prefix)
        print(f"{name:8s} {str(list(blocks)):16s} {human_count(p):>12s} {human_count(f):>12s}"
              f"   ({p} / {f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(args.scope, seeds=args.seeds)
    worst_failures = 0
    for res in results:
        status = "PASS" if res.ok else "FAIL"
        print(f"{status} {res.scope:7s} {res.name:22s} max rel err {res.max_rel_err:.3e} "
              f"(tol {res.tolerance:g})")
        worst_failures += 0 if res.ok else 1
    print(f"{len(results) - worst_failures}/{len(results)} gradient checks passed")
    return EXIT_OK if worst_failures == 0 else EXIT_RUNTIME


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def cmd_plot(args) -> int:
    rows = []
    with open(args.metrics, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise ValueError(f"{args.metrics}: no data rows")
    series: dict = {}
    split = args.split
    for row in rows:
        if row["split"] != split:
            continue
        series.setdefault(row["net_name"], []).append(
            (int(row["epoch"]), float(row["top1_err"])))
    if not series:
        raise ValueError(f"{args.metrics}: no rows for split {split!r}")
    out_path = Path(args.out or "errors.svg")
    out_path.write_text(_render_svg(series, f"top-1 error ({split})"))
    print(f"wrote {out_path} ({len(series)} series)")
    return EXIT_OK


def _render_svg(series: dict, title: str) -> str:
    width, height, margin = 640, 440, 56
    xs = [e for pts in series.values() for e, _ in pts]
    ys = [v for pts in series.values() for _, v in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, max(max(ys), 1e-9)
    x_span = max(x_hi - x_lo, 1)

    def sx(e):
        return margin + (e - x_lo) / x_span * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">epoch</text>',
        f'<text x="16" y="{height / 2:.0f}" font-size="12" '
        f'transform="rotate(-90 16 {height / 2:.0f})" text-anchor="middle">top-1 err %</text>',
    ]
    for tick in range(5):
        v = y_lo + (y_hi - y_lo) * tick / 4
        parts.append(f'<text x="{margin - 6}" y="{sy(v) + 4:.1f}" text-anchor="end" '
                     f'font-size="10">{v:.1f}</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in sorted(pts))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 14 * i + 10}" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddnn",
                                     description="depth-level dynamic network training and pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per the configuration")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    p.add_argument("checkpoint")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("extract", help="write a standalone pruned sub-net checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--subnet", type=int, required=True, help="net index (0 = full net)")
    _add_common(p)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("count", help="print parameter/FLOP table for a configuration")
    _add_common(p)
    p.set_defaults(fn=cmd_count)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("scope", nargs="?", default="all", choices=("all",) + gc.SCOPES)
    p.add_argument("--seeds", type=int, default=gc.DEFAULT_SEEDS)
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plot", help="render error-rate curves from a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--split", default="test", choices=("train", "test"))
    _add_common(p)
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, IndexError, ckpt.CheckpointError,
            NonFiniteError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
