"""Command line entry point: ``nearby3d {mask,bench,train,sample}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .attention import Extent, read_pgm, write_mask
from .codec import read_tokens, write_tokens
from .errors import ContractError, FormatError, NumericError, ShapeError
from .model import PRESETS, load_checkpoint, param_count, sample, save_checkpoint
from .train import TASK_KINDS, V2V, toy_dataset, train_toy, write_loss_csv

log = logging.getLogger("nearby3d")

TRAINABLE_PRESETS = ("toy", "grad-check")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _dims(text: str) -> tuple[int, int, int]:
    vals = _ints(text)
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers, got {text!r}")
    return vals


def _extent(text: str) -> Extent:
    try:
        return Extent.parse(text)
    except (ContractError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nearby3d", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask", help="write an attention mask as PGM + CSV")
    m.add_argument("--dims", type=_dims, required=True)
    m.add_argument("--mech", choices=bench.MECHANISMS, required=True)
    m.add_argument("--extent", type=_extent, default=Extent(3, 3, 3))
    m.add_argument("--block", type=_dims, default=(2, 2, 2))
    m.add_argument("--causal", action="store_true")
    m.add_argument("--out", default=None, help="output prefix (default: mask_<mech>)")

    b = sub.add_parser("bench", help="count and time attention mechanisms")
    b.add_argument("--dims", type=_dims, action="append", required=True,
                   help="grid dims; repeat the flag for several grids")
    b.add_argument("--mech", default=",".join(bench.MECHANISMS),
                   help="comma separated mechanisms")
    b.add_argument("--extent", type=_extent, default=Extent(3, 3, 3))
    b.add_argument("--block", type=_dims, default=(2, 2, 2))
    b.add_argument("--causal", action="store_true")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", default="bench.csv")

    t = sub.add_parser("train", help="train a preset on the synthetic three-task set")
    t.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--out", default=None, help="checkpoint path (default: <preset>.n3ck)")
    t.add_argument("--loss-csv", default=None, help="loss trace path (default: <checkpoint>.loss.csv)")

    s = sub.add_parser("sample", help="generate token grids from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="only used to refuse paper-scale sampling")
    s.add_argument("--task", choices=("all",) + TASK_KINDS, default="all")
    s.add_argument("--text", type=_ints, default=None, help="caption ids overriding the synthetic one")
    s.add_argument("--given", default=None, help="N3TG file whose first frame seeds video prediction")
    s.add_argument("--strategy", choices=("greedy", "temperature"), default="greedy")
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="sample", help="output prefix")
    return parser


def _refuse_paper_scale(preset: str) -> int:
    print(f"preset {preset!r} is configuration only: {param_count(PRESETS[preset]()):,} parameters; "
          "refusing to run", file=sys.stderr)
    return 2


def cmd_mask(args) -> int:
    mask = bench.build_mask(args.mech, args.dims, args.extent, args.block, args.causal)
    prefix = args.out or f"mask_{args.mech}"
    pgm, csv_path = write_mask(prefix, mask)
    if not np.array_equal(read_pgm(pgm) == 0, mask.bits):
        raise FormatError(f"{pgm}: read-back does not match the mask")
    log.info("wrote %s and %s (%d attended pairs)", pgm, csv_path, bench.count_pairs(mask))
    return 0


def cmd_bench(args) -> int:
    mechs = [m.strip() for m in args.mech.split(",") if m.strip()]
    unknown = [m for m in mechs if m not in bench.MECHANISMS]
    if unknown:
        raise ContractError(f"unknown mechanism(s) {unknown}")
    reports = bench.run_bench(args.dims, mechs, args.repeats, args.seed, args.extent, args.block,
                              causal=args.causal, workers=args.workers)
    bench.write_report_csv(args.out, reports)
    log.info("wrote %s (%d rows)", args.out, len(reports))
    return 0


def cmd_train(args) -> int:
    if args.preset not in TRAINABLE_PRESETS:
        return _refuse_paper_scale(args.preset)
    config = PRESETS[args.preset]()
    out = Path(args.out or f"{args.preset}.n3ck")
    loss_csv = Path(args.loss_csv or f"{out}.loss.csv")

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.6f", step, loss)

    params, trace = train_toy(config, toy_dataset(config), args.steps, args.seed, progress=progress)
    save_checkpoint(out, config, params)
    write_loss_csv(loss_csv, trace)
    load_checkpoint(out)
    log.info("wrote %s and %s", out, loss_csv)
    return 0


def cmd_sample(args) -> int:
    if args.preset is not None and args.preset not in TRAINABLE_PRESETS:
        return _refuse_paper_scale(args.preset)
    config, params = load_checkpoint(args.ckpt)
    examples = {ex.kind: ex for ex in toy_dataset(config)}
    kinds = TASK_KINDS if args.task == "all" else (args.task,)
    for kind in kinds:
        ex = examples[kind]
        cond, prefix = ex.condition, ex.prefix
        if args.text is not None and kind != V2V:
            cond = list(args.text)
        if args.given is not None and kind == V2V:
            given = read_tokens(args.given)
            h, w, _ = given.dims
            prefix = given.ids[: h * w]
        grid = sample(cond, ex.target.dims, config, params, args.strategy, args.temperature,
                      args.seed, prefix=prefix)
        path = Path(f"{args.out}_{kind.lower()}.n3tg")
        write_tokens(path, grid)
        Path(f"{args.out}_{kind.lower()}.txt").write_text(grid.dump(), encoding="utf-8")
        if read_tokens(path) != grid:
            raise FormatError(f"{path}: read-back does not match the sample")
        print(f"{kind}: {' '.join(map(str, grid.ids))}")
    return 0


COMMANDS = {"mask": cmd_mask, "bench": cmd_bench, "train": cmd_train, "sample": cmd_sample}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ContractError, ShapeError, FormatError, NumericError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
