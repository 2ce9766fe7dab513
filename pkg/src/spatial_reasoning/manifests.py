"""Experiment manifests: declarative sweeps of pretraining + linear evaluation.

A manifest is a YAML document::

    name: sweep_patch_size_tiny_imagenet
    output_dir: results/patch_size
    seeds: [0, 1, 2]
    task: tiny_imagenet           # defaults to run.dataset
    run:   {flat RunConfig keys}
    probe: {flat ProbeConfig keys}
    sweep: {axis: [values, ...]}  # run keys, probe keys, or ``variant``
    reference: {source: ..., points: [{<axis values>, values: [...], mean, std}]}
    ci: false                     # full-scale; never run as part of the test suite

``variant`` is one of ``spatial`` (rescaled patches), ``additive``,
``relational`` (N=0 baseline) and ``random`` (untrained encoder).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import yaml

from .datasets import DatasetId, task_by_name
from .errors import ConfigurationError
from .evaluation import EvalResult, ProbeConfig, linear_probe, random_encoder
from .model import load_checkpoint
from .training import RunConfig, load_pretrain_data, pretrain

log = logging.getLogger(__name__)

VARIANTS = ("spatial", "additive", "relational", "random")
_TOP_LEVEL = {"name", "description", "output_dir", "seeds", "task", "run", "probe", "sweep", "reference",
              "ci", "data_root", "variant"}
_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_PROBE_KEYS = {f.name for f in dataclasses.fields(ProbeConfig)}

CSV_COLUMNS = ["manifest", "manifest_hash", "point", "seed", "variant", "task", "dataset", "M", "K", "N",
               "patch_size_px", "patch_mode", "epochs", "n_patches", "affine_augment", "test_accuracy",
               "train_accuracy", "status", "error", "run_hash"]


@dataclass
class SweepPoint:
    index: int
    axes: dict
    variant: str
    run: RunConfig
    probe: ProbeConfig
    task: str


@dataclass
class ExperimentManifest:
    name: str
    output_dir: str = "results"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    task: Optional[str] = None
    run: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    reference: Optional[dict] = None
    description: str = ""
    ci: bool = True
    data_root: Optional[str] = None
    variant: str = "spatial"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentManifest":
        unknown = sorted(set(data) - _TOP_LEVEL)
        if unknown:
            raise ConfigurationError(f"unknown manifest keys: {unknown}")
        if "name" not in data:
            raise ConfigurationError("manifest needs a name")
        m = cls(**data)
        m.validate()
        return m

    @classmethod
    def load(cls, path_or_name) -> "ExperimentManifest":
        path = Path(path_or_name)
        if not path.exists():
            path = builtin_manifest_path(str(path_or_name))
        data = yaml.safe_load(path.read_text()) or {}
        return cls.from_dict(data)

    def validate(self):
        bad = sorted(set(self.run) - _RUN_KEYS)
        if bad:
            raise ConfigurationError(f"unknown run config keys: {bad}")
        bad = sorted(set(self.probe) - _PROBE_KEYS)
        if bad:
            raise ConfigurationError(f"unknown probe config keys: {bad}")
        bad = sorted(set(self.sweep) - _RUN_KEYS - _PROBE_KEYS - {"variant"})
        if bad:
            raise ConfigurationError(f"unknown sweep axes: {bad}")
        for axis, values in self.sweep.items():
            if not isinstance(values, list) or not values:
                raise ConfigurationError(f"sweep axis {axis!r} needs a non-empty list of values")
        for v in self.sweep.get("variant", [self.variant]):
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        # every point must expand to a valid configuration
        self.points()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        content = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "data_root", "description")}
        return hashlib.sha256(json.dumps(content, sort_keys=True, default=str).encode()).hexdigest()[:12]

    def points(self) -> List[SweepPoint]:
        axes = list(self.sweep)
        out = []
        for i, combo in enumerate(itertools.product(*(self.sweep[a] for a in axes))):
            values = dict(zip(axes, combo))
            variant = values.get("variant", self.variant)
            run = dict(self.run)
            probe = dict(self.probe)
            for k, v in values.items():
                if k in _RUN_KEYS:
                    run[k] = v
                elif k in _PROBE_KEYS:
                    probe[k] = v
            if variant == "additive":
                run["patch_mode"] = "additive"
                probe["n_patches"] = 0
            elif variant == "relational":
                run["N"] = 0
                probe["n_patches"] = 0
            elif variant == "random" and "n_patches" not in values:
                probe["n_patches"] = 0
            else:
                run.setdefault("patch_mode", "rescaled")
            run.pop("seed", None)
            run.pop("output_dir", None)
            out.append(SweepPoint(i, values, variant, RunConfig.from_dict(run), ProbeConfig.from_dict(probe),
                                  self.task or run.get("dataset", "cifar10")))
        return out


def builtin_manifest_dir() -> Path:
    return Path(str(resources.files("spatial_reasoning") / "configs"))


def builtin_manifest_path(name: str) -> Path:
    path = builtin_manifest_dir() / (name if name.endswith(".yaml") else f"{name}.yaml")
    if not path.exists():
        raise ConfigurationError(f"no manifest file or built-in manifest named {name!r}")
    return path


def list_builtin_manifests() -> List[str]:
    return sorted(p.stem for p in builtin_manifest_dir().glob("*.yaml"))


def _execute_point(point: SweepPoint, seed: int, manifest: ExperimentManifest, out_dir: Path,
                   cache: dict) -> EvalResult:
    task = task_by_name(point.task)
    data_root = manifest.data_root
    run = point.run.replace(seed=seed, data_root=data_root or point.run.data_root)
    probe = dataclasses.replace(point.probe, seed=seed)
    if point.variant == "random":
        data_key = (run.dataset, run.pretrain_limit, seed, run.data_root)
        if data_key not in cache:
            cache[data_key] = load_pretrain_data(run)
        _, mean, std = cache[data_key]
        encoder = random_encoder(run.resolved_architecture, run.image_side, mean, std, seed)
        if probe.n_patches and not probe.patch_size_px:
            probe = dataclasses.replace(probe, patch_size_px=run.patch_size_px)
        return linear_probe(encoder, task, probe, data_root=run.data_root)
    run_dir = out_dir / "runs" / f"{run.hash()}"
    run = run.replace(output_dir=str(run_dir))
    final = run_dir / "checkpoints" / f"ckpt_{run.epochs:04d}.pt"
    if final.exists() and load_checkpoint(final).config_hash == run.hash():
        ckpt_path = final
    else:
        ckpt_path = pretrain(run, manifest_hash=manifest.hash()).checkpoint_path
    return linear_probe(ckpt_path, task, probe, data_root=run.data_root)


def run_manifest(manifest: ExperimentManifest, out_dir=None,
                 executor: Optional[Callable[[SweepPoint, int], EvalResult]] = None) -> Path:
    """Execute every (point, seed), write ``results.csv`` and figures; returns the CSV path.

    A failing point is recorded with ``status=failed`` and the sweep continues.
    ``executor`` replaces the default pretrain-then-probe step (used in tests).
    """
    out_dir = Path(out_dir or manifest.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mhash = manifest.hash()
    (out_dir / "manifest.yaml").write_text(yaml.safe_dump({**manifest.to_dict(), "manifest_hash": mhash},
                                                          sort_keys=False))
    cache: dict = {}
    rows = []
    for point in manifest.points():
        for seed in manifest.seeds:
            row = {
                "manifest": manifest.name, "manifest_hash": mhash, "point": point.index, "seed": seed,
                "variant": point.variant, "task": point.task, "dataset": point.run.dataset,
                "M": point.run.M, "K": point.run.K, "N": point.run.N, "patch_size_px": point.run.patch_size_px,
                "patch_mode": point.run.patch_mode, "epochs": point.run.epochs,
                "n_patches": point.probe.n_patches, "affine_augment": point.probe.affine_augment,
                "run_hash": point.run.replace(seed=seed).hash(),
            }
            try:
                res = executor(point, seed) if executor else _execute_point(point, seed, manifest, out_dir, cache)
                row.update(test_accuracy=round(res.test_accuracy, 6), train_accuracy=round(res.train_accuracy, 6),
                           status="ok", error="")
            except Exception as exc:  # keep sweeping; the failure is part of the record
                log.exception("point %d seed %d failed", point.index, seed)
                row.update(test_accuracy="", train_accuracy="", status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    csv_path = out_dir / "results.csv"
    write_results(csv_path, rows)
    if rows:
        from .report import render_report

        render_report([csv_path], out_dir, manifest=manifest)
    return csv_path


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def reference_table(manifest: ExperimentManifest):
    """Reference numbers as a DataFrame: axis columns plus ``mean``/``std``/``min``/``max``."""
    import pandas as pd

    if not manifest.reference:
        return pd.DataFrame()
    rows = []
    for pt in manifest.reference.get("points", []):
        row = {k: v for k, v in pt.items() if k not in ("values", "mean", "std")}
        values = pt.get("values")
        if values:
            vals = np.asarray(values, dtype=float)
            row.update(mean=float(vals.mean()), std=float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                       min=float(vals.min()), max=float(vals.max()))
        else:
            row.update(mean=float(pt["mean"]), std=float(pt.get("std", np.nan)), min=np.nan, max=np.nan)
        rows.append(row)
    return pd.DataFrame(rows)
