"""Run plumbing shared by the command line and the acceptance harness.

A run directory holds ``config.resolved``, ``metrics.csv``, ``checkpoint.mctx``
and ``summary.json``. A dataset directory holds MCVX volume pairs plus a
``manifest.json`` listing ids, the split and the generating configuration.
"""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, with_overrides
from .data import (
    DatasetSplit,
    VolumeSample,
    generate_dataset,
    load_sample,
    make_split,
    save_sample,
    subset,
)
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .metrics import ClassReport, aggregate, evaluate_volume
from .trainer import (
    CheckpointBundle,
    fit,
    init_bundle,
    load_checkpoint,
    predict_sample,
    save_checkpoint,
)


MANIFEST = "manifest.json"
FAILED = "FAILED"


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    train: list[VolumeSample]
    test: list[VolumeSample]
    split: DatasetSplit


def build_dataset(cfg: RunConfig) -> Dataset:
    """Generate the phantom set in memory and split it with ``run.seed``."""
    d = cfg.data
    samples = generate_dataset(d.phantom, d.n_train + d.n_test)
    split = make_split([s.sample_id for s in samples], d.n_train, d.n_test, cfg.seed)
    by_id = {s.sample_id: s for s in samples}
    return Dataset([by_id[i] for i in split.train], [by_id[i] for i in split.test], split)


def write_dataset(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    files = {}
    for s in ds.train + ds.test:
        files[s.sample_id] = list(save_sample(s, out))
    manifest = {
        "format": "medcontext-dataset",
        "version": __version__,
        "seed": cfg.seed,
        "phantom": cfg.data.phantom.to_dict(),
        "ids": sorted(files),
        "split": {"train": list(ds.split.train), "test": list(ds.split.test)},
        "files": {k: files[k] for k in sorted(files)},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
        manifest["split"]["train"], manifest["split"]["test"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from None
    return manifest


def load_split(data_dir, part: str) -> list[VolumeSample]:
    manifest = read_manifest(data_dir)
    if part == "all":
        ids = list(manifest["split"]["train"]) + list(manifest["split"]["test"])
    elif part in ("train", "test"):
        ids = list(manifest["split"][part])
    else:
        raise ContractError(f"unknown split {part!r}")
    return [load_sample(data_dir, i) for i in ids]


def check_samples(samples: Sequence[VolumeSample], cfg: RunConfig) -> None:
    """Fail before any training step if the data cannot feed the configured net."""
    if not samples:
        raise ContractError("no samples selected")
    extents = {s.image.shape for s in samples}
    if len(extents) != 1:
        raise ShapeError(f"volumes have differing extents {sorted(extents)}")
    cfg.net.check_extents(next(iter(extents)))
    top = max(int(s.labels.max()) for s in samples)
    if top >= cfg.net.num_classes:
        raise ContractError(f"label {top} present but the network predicts {cfg.net.num_classes} classes")


def training_subset(train: Sequence[VolumeSample], cfg: RunConfig) -> list[VolumeSample]:
    if cfg.data.shots <= 0:
        return list(train)
    keep = set(subset([s.sample_id for s in train], cfg.data.shots, cfg.seed))
    return [s for s in train if s.sample_id in keep]


# ---------------------------------------------------------------------------
# runs


def provenance(cfg: RunConfig) -> dict:
    text = cfg.dumps()
    return {
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def bundle_for(cfg: RunConfig) -> CheckpointBundle:
    return init_bundle(cfg.net, cfg.train, cfg.loss)


def train_run(cfg: RunConfig, samples: Sequence[VolumeSample], out_dir=None, resume: bool = False,
              stop_at: Optional[int] = None) -> tuple[CheckpointBundle, list[dict]]:
    """Train (or continue) a run; with ``out_dir`` every artifact is written there."""
    check_samples(samples, cfg)
    out = Path(out_dir) if out_dir is not None else None
    bundle = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED).unlink(missing_ok=True)
        ckpt = out / "checkpoint.mctx"
        if resume:
            if not ckpt.exists():
                raise ConfigError(f"--resume given but {ckpt} does not exist")
            bundle = load_checkpoint(ckpt)
            if (bundle.net, bundle.train, bundle.loss) != (cfg.net, cfg.train, cfg.loss):
                raise ConfigError("checkpoint configuration differs from the resolved configuration")
        else:
            (out / "metrics.csv").unlink(missing_ok=True)
        (out / "config.resolved").write_text(cfg.dumps())
    if bundle is None:
        bundle = bundle_for(cfg)
    until = cfg.train.steps if stop_at is None else min(stop_at, cfg.train.steps)
    if until < bundle.step:
        raise ContractError(f"checkpoint is at step {bundle.step}, cannot stop at {until}")
    rows = fit(bundle, samples, None if out is None else out / "metrics.csv", until=until)
    if out is not None:
        save_checkpoint(bundle, out / "checkpoint.mctx")
        summary = {
            **provenance(cfg),
            "step": bundle.step,
            "steps_total": cfg.train.steps,
            "train_ids": [s.sample_id for s in samples],
            "last": rows[-1] if rows else None,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return bundle, rows


def evaluate(bundle: Optional[CheckpointBundle], samples: Sequence[VolumeSample], use_teacher: bool = False,
             hd_percentile: float = 95.0, ground_truth: bool = False) -> list[ClassReport]:
    """Per-class means over ``samples``; ``ground_truth`` scores the labels against themselves."""
    if not samples:
        raise ContractError("no samples to evaluate")
    if ground_truth:
        num_classes = max(int(s.labels.max()) for s in samples) + 1
    else:
        num_classes = bundle.net.num_classes
        for s in samples:
            bundle.net.check_extents(s.image.shape)
    reports = []
    for s in samples:
        pred = s.labels if ground_truth else predict_sample(bundle, s, use_teacher)
        reports.append(evaluate_volume(s.labels, pred, num_classes, s.spacing, hd_percentile))
    return aggregate(reports, num_classes)


def mean_dsc(rows: Sequence[ClassReport]) -> float:
    vals = [r.dsc for r in rows if r.present]
    return float(np.mean(vals)) if vals else float("nan")


def mean_hd95(rows: Sequence[ClassReport]) -> Optional[float]:
    vals = [r.hd95 for r in rows if r.present and r.hd95 is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# ablation grids

RATIO_GRID = (0.3, 0.4, 0.5, 0.6, 0.8)
LOSS_GRID = {
    "msl_only": {"loss.include_msl": "true", "loss.include_cl": "false"},
    "cl_only": {"loss.include_msl": "false", "loss.include_cl": "true"},
    "msl_cl": {"loss.include_msl": "true", "loss.include_cl": "true"},
}


@dataclass(frozen=True)
class Cell:
    name: str
    knob: str
    value: str
    overrides: tuple[tuple[str, str], ...]


def sweep_cells(ratios: Sequence[float] = (), toggles: Sequence[str] = (), betas: Sequence[float] = ()) -> list[Cell]:
    """One cell per swept value; each cell changes only its own knob."""
    cells = [Cell(f"ratio={r:g}", "mask_ratio", f"{r:g}", (("train.mask_ratio", repr(float(r))),)) for r in ratios]
    for t in toggles:
        if t not in LOSS_GRID:
            raise ContractError(f"unknown loss toggle {t!r}; choose from {sorted(LOSS_GRID)}")
        cells.append(Cell(t, "loss_terms", t, tuple(LOSS_GRID[t].items())))
    cells += [Cell(f"beta={b:g}", "beta", f"{b:g}", (("loss.beta", repr(float(b))),)) for b in betas]
    if not cells:
        raise ContractError("empty ablation sweep")
    if len({c.name for c in cells}) != len(cells):
        raise ContractError("duplicate cells in the ablation sweep")
    return cells


def cell_config(base: RunConfig, cell: Cell, seed: int) -> RunConfig:
    return with_overrides(base, {"run.seed": str(seed), **dict(cell.overrides)})
