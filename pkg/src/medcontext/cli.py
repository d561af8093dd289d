"""Command line: generate-data, train, eval, ablate, grad-check.

Configuration precedence, lowest first: built-in defaults, ``--config`` file,
``--set section.key=value`` overrides, dedicated flags such as ``--seed``.
Exit status is 0 on success, 2 for configuration errors and 1 for any other
failure; a failed command leaves a ``FAILED`` marker in its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, gradsuite
from . import experiment as ex
from .config import RunConfig, resolve
from .errors import ConfigError, MedContextError
from .metrics import write_report
from .trainer import load_checkpoint

log = logging.getLogger("medcontext")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="line-oriented 'section.key = value' file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (run.seed)")


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    flags = {
        "steps": "train.steps",
        "shots": "data.shots",
        "mask_ratio": "train.mask_ratio",
        "beta": "loss.beta",
        "lr": "train.lr",
    }
    for attr, key in flags.items():
        if getattr(args, attr, None) is not None:
            out[key] = repr(getattr(args, attr))
    if getattr(args, "baseline", False):
        out["loss.include_msl"] = "false"
        out["loss.include_cl"] = "false"
    if getattr(args, "no_teacher", False):
        out["train.use_teacher"] = "false"
    return out


def _resolve(args: argparse.Namespace) -> RunConfig:
    return resolve(args.config, _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="medcontext", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"medcontext {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a phantom dataset and its manifest")
    _config_args(g)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one run")
    _config_args(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--shots", type=int, help="train on a seeded subset of this many volumes")
    t.add_argument("--mask-ratio", type=float)
    t.add_argument("--beta", type=float, help="weight of the consistency term")
    t.add_argument("--lr", type=float)
    t.add_argument("--baseline", action="store_true", help="supervised loss only")
    t.add_argument("--no-teacher", action="store_true", help="drop the EMA teacher and its consistency term")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.mctx")
    t.add_argument("--stop-at", type=int, help="stop after this step (checkpoint is still written)")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--use-teacher", action="store_true")
    e.add_argument("--ground-truth", action="store_true", help="score labels against themselves (self-check)")
    e.add_argument("--hd-percentile", type=float, default=95.0)

    a = sub.add_parser("ablate", help="sweep mask ratio, loss terms or beta with shared seeds")
    _config_args(a)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--ratios", type=_floats, default=(), help=f"e.g. {','.join(map(str, ex.RATIO_GRID))}")
    a.add_argument("--ratio-grid", action="store_true", help="use the standard ratio grid")
    a.add_argument("--toggles", type=lambda s: tuple(x for x in s.split(",") if x), default=(),
                   help=f"subset of {','.join(ex.LOSS_GRID)}")
    a.add_argument("--toggle-grid", action="store_true", help="use all loss-term toggles")
    a.add_argument("--betas", type=_floats, default=())
    a.add_argument("--seeds", type=_ints, default=(0,), help="shared by every cell")
    a.add_argument("--steps", type=int)
    a.add_argument("--shots", type=int)

    c = sub.add_parser("grad-check", help="finite-difference check of every op and a tiny network")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--ops", type=lambda s: tuple(x for x in s.split(",") if x), default=(),
                   help="restrict to these cases")
    c.add_argument("--out", type=Path, help="also write the report here")
    return ap


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args) -> int:
    cfg = _resolve(args)
    manifest = ex.write_dataset(cfg, args.out)
    (Path(args.out) / ex.FAILED).unlink(missing_ok=True)
    (Path(args.out) / "config.resolved").write_text(cfg.dumps())
    print(f"wrote {len(manifest['ids'])} volumes to {args.out} "
          f"({len(manifest['split']['train'])} train / {len(manifest['split']['test'])} test)")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    train = ex.training_subset(ex.load_split(args.data, "train"), cfg)
    start = time.perf_counter()
    bundle, rows = ex.train_run(cfg, train, args.out, resume=args.resume, stop_at=args.stop_at)
    if rows:
        last = rows[-1]
        print(f"step {bundle.step}/{cfg.train.steps}  loss {last['loss_total']:.4f}  "
              f"sup {last['loss_sup']:.4f}  ({time.perf_counter() - start:.1f}s)")
    else:
        print(f"nothing to do: checkpoint already at step {bundle.step}")
    return 0


def cmd_eval(args) -> int:
    samples = ex.load_split(args.data, args.split)
    bundle = None
    if not args.ground_truth:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --ground-truth is given")
        bundle = load_checkpoint(args.checkpoint)
    rows = ex.evaluate(bundle, samples, args.use_teacher, args.hd_percentile, args.ground_truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / ex.FAILED).unlink(missing_ok=True)
    weights = "ground_truth" if args.ground_truth else ("teacher" if args.use_teacher else "student")
    stem = f"eval_{args.split}_{weights}"
    summary = write_report(rows, out / f"{stem}.csv", out / f"{stem}.json", {
        "version": __version__,
        "weights": weights,
        "split": args.split,
        "checkpoint": None if args.checkpoint is None else str(args.checkpoint),
        "volumes": [s.sample_id for s in samples],
        "hd_percentile": args.hd_percentile,
    })
    for r in rows:
        hd = "undefined" if r.hd95 is None else f"{r.hd95:.3f}"
        print(f"class {r.label}: dsc {r.dsc:.4f}  hd95 {hd}")
    print(f"mean dsc {summary['mean_dsc']:.4f} ({weights} weights)")
    return 0


ABLATION_COLUMNS = ("cell", "knob", "value", "seeds", "mean_dsc", "std_dsc", "mean_hd95")


def format_table(rows: Sequence[dict]) -> str:
    lines = ["| cell | seeds | DSC (%) | HD95 (mm) |", "|---|---|---|---|"]
    for r in rows:
        hd = "n/a" if r["mean_hd95"] is None else f"{r['mean_hd95']:.2f}"
        lines.append(f"| {r['cell']} | {r['seeds']} | {100 * r['mean_dsc']:.2f} ± {100 * r['std_dsc']:.2f} | {hd} |")
    return "\n".join(lines)


def run_ablation(base: RunConfig, cells: Sequence[ex.Cell], seeds: Sequence[int], train, test, out_dir) -> list[dict]:
    """Train and evaluate every cell under every seed; one aggregated row per cell."""
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    out = Path(out_dir)
    rows = []
    for cell in cells:
        dscs, hds = [], []
        for seed in seeds:
            cfg = ex.cell_config(base, cell, seed)
            run_dir = out / "cells" / cell.name.replace("=", "_") / f"seed{seed}"
            bundle, _ = ex.train_run(cfg, ex.training_subset(train, cfg), run_dir)
            res = ex.evaluate(bundle, test, hd_percentile=cfg.hd_percentile)
            dscs.append(ex.mean_dsc(res))
            hd = ex.mean_hd95(res)
            if hd is not None:
                hds.append(hd)
            log.info("%s seed %d: dsc %.4f", cell.name, seed, dscs[-1])
        rows.append({
            "cell": cell.name,
            "knob": cell.knob,
            "value": cell.value,
            "seeds": " ".join(map(str, seeds)),
            "mean_dsc": float(np.mean(dscs)),
            "std_dsc": float(np.std(dscs)),
            "mean_hd95": float(np.mean(hds)) if hds else None,
        })
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_COLUMNS})
    (out / "ablation.md").write_text(format_table(rows) + "\n")
    return rows


def cmd_ablate(args) -> int:
    base = _resolve(args)
    ratios = tuple(args.ratios) + (ex.RATIO_GRID if args.ratio_grid else ())
    toggles = tuple(args.toggles) + (tuple(ex.LOSS_GRID) if args.toggle_grid else ())
    cells = ex.sweep_cells(ratios, toggles, args.betas)
    train = ex.load_split(args.data, "train")
    test = ex.load_split(args.data, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / ex.FAILED).unlink(missing_ok=True)
    (out / "config.resolved").write_text(base.dumps())
    rows = run_ablation(base, cells, args.seeds, train, test, out)
    print(format_table(rows))
    return 0


def cmd_grad_check(args) -> int:
    cases = gradsuite.CASES
    if args.ops:
        unknown = sorted(set(args.ops) - set(cases))
        if unknown:
            raise ConfigError(f"unknown grad-check cases {unknown}")
        cases = {k: cases[k] for k in args.ops}
    start = time.perf_counter()
    results = gradsuite.run_suite(args.seeds, cases)
    report = gradsuite.format_report(results)
    report += f"\n{sum(r.passed for r in results)}/{len(results)} passed in {time.perf_counter() - start:.1f}s"
    print(report)
    if args.out is not None:
        Path(args.out).write_text(report + "\n")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def _mark_failed(args, exc: BaseException) -> None:
    out = getattr(args, "out", None)
    if out is None or args.command == "grad-check":
        return
    try:
        Path(out).mkdir(parents=True, exist_ok=True)
        Path(out, ex.FAILED).write_text(json.dumps({
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
            "version": __version__,
        }, indent=2) + "\n")
    except OSError:
        pass


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _mark_failed(args, exc)
        print(f"medcontext: configuration error: {exc}", file=sys.stderr)
        return 2
    except (MedContextError, ValueError, ArithmeticError, OSError) as exc:
        _mark_failed(args, exc)
        print(f"medcontext: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
