"""Experiment orchestration: the ablation matrix and the alpha sweep.

Each matrix cell is an end-to-end run (pretrain variant, detector training,
three evaluation protocols). Pretraining checkpoints are shared between
cells that differ only downstream, and every cell failure is recorded
without stopping the remaining cells.
"""

from __future__ import annotations

import csv
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import ExperimentConfig, canonical_json
from .data import DatasetSplit, generate_dataset
from .detection import train_detector
from .evaluation import evaluate
from .grounding import pretrain

METRICS = ("base_map", "target_map", "generalized_base_map", "generalized_target_map", "all_map")


@dataclass(frozen=True)
class CellSpec:
    name: str
    pretrain_kind: str | None  # "full", "no-grounding", "no-auxiliary", "noisy", or None
    no_transfer_v2l: bool = False
    unfreeze_v2l: bool = False


ABLATION_CELLS: dict[str, CellSpec] = {
    "full": CellSpec("full", "full"),
    "no-pretraining": CellSpec("no-pretraining", None),
    "no-grounding": CellSpec("no-grounding", "no-grounding"),
    "no-auxiliary": CellSpec("no-auxiliary", "no-auxiliary"),
    "no-transfer-v2l": CellSpec("no-transfer-v2l", "full", no_transfer_v2l=True),
    "unfreeze-v2l": CellSpec("unfreeze-v2l", "full", unfreeze_v2l=True),
    "noisy-captions": CellSpec("noisy-captions", "noisy"),
}

DEFAULT_CELLS = ("full", "no-pretraining", "no-grounding", "no-auxiliary",
                 "no-transfer-v2l", "unfreeze-v2l")


@dataclass
class CellResult:
    cell: str
    seed: int
    metrics: dict = field(default_factory=dict)
    error: str = ""


def _dataset_for(config: ExperimentConfig, seed: int, noisy: bool,
                 cache: dict) -> DatasetSplit:
    key = (seed, noisy)
    if key not in cache:
        cfg = config
        if noisy:
            cfg = ExperimentConfig.from_dict(config.to_dict())
            cfg.data.caption_noise = 0.2
        cache[key] = generate_dataset(cfg, seed=seed)
    return cache[key]


def _pretrain_for(config: ExperimentConfig, seed: int, kind: str, out_dir: Path,
                  dataset_cache: dict, ckpt_cache: dict, quiet: bool) -> Checkpoint:
    key = (seed, kind)
    if key not in ckpt_cache:
        path = out_dir / f"pretrain_{kind}_seed{seed}.ovck"
        dataset = _dataset_for(config, seed, noisy=(kind == "noisy"), cache=dataset_cache)
        if not quiet:
            print(f"[matrix] pretraining ({kind}, seed {seed})", flush=True)
        pretrain(
            dataset,
            config,
            no_grounding=(kind == "no-grounding"),
            no_auxiliary=(kind == "no-auxiliary"),
            seed=seed,
            out_path=path,
            log_path=out_dir / f"pretrain_{kind}_seed{seed}.csv",
            quiet=quiet,
        )
        ckpt_cache[key] = load_checkpoint(path)
    return ckpt_cache[key]


def run_cell(spec: CellSpec, config: ExperimentConfig, seed: int, out_dir: Path,
             dataset_cache: dict, ckpt_cache: dict, quiet: bool = True) -> CellResult:
    dataset = _dataset_for(config, seed, noisy=False, cache=dataset_cache)
    pretrained = None
    if spec.pretrain_kind is not None:
        pretrained = _pretrain_for(config, seed, spec.pretrain_kind, out_dir,
                                   dataset_cache, ckpt_cache, quiet)
    if not quiet:
        print(f"[matrix] training detector ({spec.name}, seed {seed})", flush=True)
    result = train_detector(
        dataset,
        config,
        pretrained=pretrained,
        no_transfer_v2l=spec.no_transfer_v2l,
        unfreeze_v2l=spec.unfreeze_v2l,
        seed=seed,
        out_path=out_dir / f"detector_{spec.name}_seed{seed}.ovck",
        quiet=quiet,
    )
    metrics: dict = {}
    for protocol in ("base", "target", "generalized"):
        report = evaluate(result.model, dataset, protocol)
        for k, v in report.summary.items():
            if k != "protocol":
                metrics[k] = v
    return CellResult(cell=spec.name, seed=seed, metrics=metrics)


@dataclass
class MatrixResult:
    rows: list[CellResult]
    aggregate: dict

    def cell_metric(self, cell: str, metric: str) -> list[float]:
        return [r.metrics[metric] for r in self.rows if r.cell == cell and not r.error]


def run_matrix(config: ExperimentConfig, cells: list[str], seeds: list[int], out_dir,
               quiet: bool = True) -> MatrixResult:
    """Run every (cell, seed) end to end; failures are recorded, not fatal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    unknown = [c for c in cells if c not in ABLATION_CELLS]
    if unknown:
        raise ValueError(f"unknown ablation cells: {unknown}; known: {sorted(ABLATION_CELLS)}")
    rows: list[CellResult] = []
    for seed in seeds:
        dataset_cache: dict = {}
        ckpt_cache: dict = {}
        for cell in cells:
            try:
                rows.append(run_cell(ABLATION_CELLS[cell], config, seed, out,
                                     dataset_cache, ckpt_cache, quiet=quiet))
            except Exception:
                rows.append(CellResult(cell=cell, seed=seed, error=traceback.format_exc(limit=6)))
            if not quiet and rows[-1].metrics:
                print(f"[matrix] {cell} seed {seed}: "
                      + " ".join(f"{k}={v:.4f}" for k, v in rows[-1].metrics.items()
                                 if v is not None), flush=True)
    aggregate = {}
    for cell in cells:
        ok = [r for r in rows if r.cell == cell and not r.error]
        agg = {}
        for metric in METRICS:
            values = [r.metrics.get(metric) for r in ok]
            values = [v for v in values if v is not None]
            if values:
                agg[metric] = {
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values)),
                    "values": values,
                }
        aggregate[cell] = {"metrics": agg, "failures": sum(1 for r in rows if r.cell == cell and r.error)}
    result = MatrixResult(rows=rows, aggregate=aggregate)
    write_matrix_reports(result, config, out)
    return result


def write_matrix_reports(result: MatrixResult, config: ExperimentConfig, out: Path) -> None:
    payload = {
        "config_full_hash": config.full_hash(),
        "structural_hash": config.structural_hash(),
        "cells": result.aggregate,
        "rows": [
            {"cell": r.cell, "seed": r.seed, "metrics": r.metrics, "error": r.error}
            for r in result.rows
        ],
    }
    (out / "matrix.json").write_text(canonical_json(payload) + "\n", encoding="utf-8")
    with open(out / "matrix.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "seed"] + list(METRICS) + ["error"])
        for r in result.rows:
            writer.writerow([r.cell, r.seed]
                            + [("" if r.metrics.get(m) is None else f"{r.metrics[m]:.6f}")
                               for m in METRICS]
                            + [r.error.replace("\n", " | ") if r.error else ""])


def alpha_sweep(config: ExperimentConfig, alphas: list[float], out_dir,
                seed: int | None = None, quiet: bool = True) -> dict:
    """Base/target mAP per background weight, reusing one pretraining run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seed if seed is None else seed
    dataset_cache: dict = {}
    ckpt_cache: dict = {}
    pretrained = _pretrain_for(config, seed, "full", out, dataset_cache, ckpt_cache, quiet)
    dataset = _dataset_for(config, seed, noisy=False, cache=dataset_cache)
    rows = []
    for alpha in alphas:
        if not quiet:
            print(f"[sweep] alpha={alpha}", flush=True)
        result = train_detector(dataset, config, pretrained=pretrained, alpha=float(alpha),
                                seed=seed, out_path=out / f"detector_alpha{alpha}.ovck")
        base = evaluate(result.model, dataset, "base").summary["base_map"]
        target = evaluate(result.model, dataset, "target").summary["target_map"]
        rows.append({"alpha": float(alpha), "base_map": base, "target_map": target})
    best = max(rows, key=lambda r: (r["target_map"] if r["target_map"] is not None else -1.0))
    payload = {
        "config_full_hash": config.full_hash(),
        "seed": seed,
        "rows": rows,
        "best_alpha_by_target_map": best["alpha"],
    }
    (out / "alpha_sweep.json").write_text(canonical_json(payload) + "\n", encoding="utf-8")
    with open(out / "alpha_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["alpha", "base_map", "target_map", "best"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**{k: ("" if v is None else v) for k, v in r.items()},
                             "best": "yes" if r["alpha"] == best["alpha"] else ""})
    return payload
