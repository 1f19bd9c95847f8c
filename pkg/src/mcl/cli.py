"""``mcl`` command line: generate, train, ablate, verify.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 runtime error (divergence, unwritable output).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import trainer as T
from .data import write_csv
from .model import save_checkpoint

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("mcl")


def _setup_logging() -> None:
    levels = {"debug": logging.DEBUG, "info": logging.INFO}
    root = logging.getLogger("mcl")
    root.setLevel(levels.get(os.environ.get("MCL_LOG", "").strip().lower(), logging.WARNING))
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def _load(args) -> C.RunConfig:
    cfg = C.load_config(args.config, args.override)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=C.parse_seeds(args.seeds))
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _echo(cfg: C.RunConfig) -> list[str]:
    return ["", "[config]"] + [f"{k} = {v}" for k, v in C.flatten(cfg).items()]


def cmd_generate(args) -> int:
    cfg = _load(args)
    seed = cfg.seed_list()[0]
    source, target = C.DatasetFactory(cfg.data)(seed)
    out = str(args.out)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(f"{out}_source.csv", source)
    write_csv(f"{out}_target.csv", target)
    print(f"wrote {out}_source.csv ({len(source.y)} rows) and {out}_target.csv ({len(target.y)} rows)")
    return EXIT_OK


def _train_one(cfg: C.RunConfig, seed: int, out: Path, suffix: str):
    run_cfg = C.with_seed(cfg, seed)
    source, target = C.DatasetFactory(cfg.data)(seed)
    metrics = out / f"metrics{suffix}.csv"
    try:
        res = T.train_run(run_cfg.train, source, target)
    except T.DivergenceError as err:
        _write(metrics, T.metrics_csv(err.history or []))
        raise
    _write(metrics, T.metrics_csv(res.history))
    save_checkpoint(out / f"final{suffix}.ckpt", res.state.model, res.state.bank.snapshot())
    return res


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seed_list()
    multi = len(seeds) > 1
    lines, accs, mcas = [], [], []
    for seed in seeds:
        try:
            res = _train_one(cfg, seed, out, f"_seed{seed}" if multi else "")
        except T.DivergenceError as err:
            print(f"error: training diverged (seed {seed}): {err}", file=sys.stderr)
            _write(out / "summary.txt", "\n".join([f"seed {seed}: diverged: {err}", *_echo(cfg)]) + "\n")
            return EXIT_RUNTIME
        ev = res.evaluation
        accs.append(ev.overall)
        mcas.append(ev.mca)
        prefix = f"seed {seed}: " if multi else ""
        lines.append(f"{prefix}accuracy = {ev.overall:.6f}")
        lines.append(f"{prefix}mca = {ev.mca:.6f}")
        log.info("seed %d: accuracy %.4f mca %.4f", seed, ev.overall, ev.mca)
    if multi:
        lines.append(f"accuracy_mean = {np.mean(accs):.6f} +- {np.std(accs):.6f}")
        lines.append(f"mca_mean = {np.mean(mcas):.6f} +- {np.std(mcas):.6f}")
    _write(out / "summary.txt", "\n".join(lines + _echo(cfg)) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    cells = T.ablation_grid(cfg.train, C.DatasetFactory(cfg.data), cfg.seed_list(), args.grid, args.jobs)
    # one file per cell, merged afterwards in grid order
    for cell in cells:
        _write(cells_dir / f"{cell.config_id}_seed{cell.seed}.csv", T.ablation_csv([cell]))
    _write(out / "ablation.csv", T.ablation_csv(cells))
    summary = T.ablation_summary(cells)
    lines = [f"{r['config_id']:<22} {r['acc_mean']:.4f} +- {r['acc_std']:.4f}  mca {r['mca_mean']:.4f}  "
             f"({r['description']}, {r['n_seeds']} seeds)" for r in summary]
    _write(out / "ablation_summary.txt", "\n".join(lines + _echo(cfg)) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run_all()
    print(verify.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcl", description="Consistency-regularized domain adaptation on synthetic shifts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seeds", help="comma-separated seed list")

    common(sub.add_parser("generate", help="write source/target CSVs"), "output path prefix")
    common(sub.add_parser("train", help="train and evaluate"), "output directory")
    ablate = sub.add_parser("ablate", help="run the ablation grid")
    common(ablate, "output directory")
    ablate.add_argument("--grid", choices=("tab4", "tab5", "all"), default="all")
    ablate.add_argument("--jobs", type=int, default=1)
    sub.add_parser("verify", help="run the property suite")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
