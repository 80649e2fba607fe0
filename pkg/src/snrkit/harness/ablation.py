"""Scheme x seed sweeps producing the comparison table."""
from __future__ import annotations

import json
import re
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import evalkit
from ..data import DatasetManifest, DatasetSpec, generate_from_spec
from .evaluate import divergence, evaluate
from .schedule import ConfigError, TrainConfig
from .train import load_checkpoint, train_run

DEFAULT_SCHEMES = (
    "Baseline", "Baseline-A-IN", "Baseline-IN", "Baseline-SNR",
    "SNR w/o L_SNR", "SNR w/o L+", "SNR w/o L-", "SNR_conv", "SNR_g2",
    "SNR-stage1", "SNR-stage2", "SNR-stage3", "SNR-stage4",
)


@dataclass
class AblationMatrix:
    schemes: list[str] = field(default_factory=lambda: list(DEFAULT_SCHEMES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    target_domains: list[int] = field(default_factory=lambda: [2])
    divergence_domains: list[int] | None = None
    dataset: str = ""
    dataset_spec: dict | None = None
    train: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationMatrix":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown matrix keys {sorted(unknown)}")
        m = cls(**d)
        if not m.schemes or not m.seeds or not m.target_domains:
            raise ConfigError("matrix needs schemes, seeds and target domains")
        if not m.dataset and m.dataset_spec is None:
            raise ConfigError("matrix needs a dataset path or a dataset_spec")
        return m


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_")


def cell_metrics(ckpt_dir: Path, manifest: DatasetManifest, targets: Sequence[int], div_domains) -> dict:
    """Everything reported for one cell, recomputed from the stored checkpoint."""
    model, _ = load_checkpoint(ckpt_dir)
    out = {"targets": {str(t): evaluate(model, manifest, t) for t in targets}}
    if div_domains:
        out["divergence_per_stage"] = divergence(model, manifest, *div_domains).per_stage
    return out


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(cells: list[dict], schemes, targets) -> list[dict]:
    rows = []
    for scheme in schemes:
        ok = [c for c in cells if c["scheme"] == scheme and "error" not in c]
        for t in targets:
            row = {"scheme": scheme, "target_domain": int(t), "n_seeds": len(ok)}
            if ok:
                row["mAP_mean"], row["mAP_std"] = _mean_std([c["targets"][str(t)]["mAP"] for c in ok])
                row["rank1_mean"], row["rank1_std"] = _mean_std([c["targets"][str(t)]["cmc"]["1"] for c in ok])
                if "divergence_per_stage" in ok[0]:
                    row["divergence_per_stage"] = np.mean([c["divergence_per_stage"] for c in ok], axis=0).tolist()
            rows.append(row)
    return rows


def run_ablation(matrix: AblationMatrix, out_dir, log=print) -> dict:
    """Train and evaluate every (scheme, seed) cell; failing cells are recorded, not fatal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if matrix.dataset:
        manifest = DatasetManifest.read(Path(matrix.dataset) / "manifest.jsonl")
    else:
        manifest = generate_from_spec(DatasetSpec.from_dict(matrix.dataset_spec), out / "data")
    base = TrainConfig.from_dict(matrix.train)
    cells = []
    for scheme in matrix.schemes:
        for seed in matrix.seeds:
            cell_dir = out / slug(scheme) / f"seed{seed}"
            cell = {"scheme": scheme, "seed": seed}
            try:
                tc = replace(base, scheme=scheme, seed=seed)
                train_run(tc, manifest, cell_dir)
                cell.update(cell_metrics(cell_dir / "checkpoint", manifest, matrix.target_domains, matrix.divergence_domains))
            except Exception as e:  # one broken cell must not end the sweep
                cell["error"] = f"{type(e).__name__}: {e}"
                (cell_dir).mkdir(parents=True, exist_ok=True)
                (cell_dir / "error.txt").write_text(traceback.format_exc())
            cells.append(cell)
            if log:
                log(json.dumps({k: v for k, v in cell.items() if k != "targets"} | _headline(cell)))
    report = {
        "rows": summarize(cells, matrix.schemes, matrix.target_domains),
        "cells": cells,
        "train": base.to_dict(),
    }
    return report


def _headline(cell: dict) -> dict:
    if "targets" not in cell:
        return {}
    return {f"t{t}": {"mAP": round(m["mAP"], 4), "r1": round(m["cmc"]["1"], 4)} for t, m in cell["targets"].items()}


def write_ablation_report(report: dict, out_dir, csv: bool = False) -> None:
    out = Path(out_dir)
    evalkit.write_report(report, out / "report.json", out / "report.csv" if csv else None)
