"""Assemble result CSVs into summary tables and figures."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from .plotting import sweep_figure

_PREFERRED_X = ("patch_size_px", "N", "n_patches", "variant")
_CANDIDATE_AXES = ("patch_size_px", "N", "n_patches", "affine_augment", "variant", "patch_mode", "task")


def load_results(paths: Sequence) -> pd.DataFrame:
    frames = [pd.read_csv(p) for p in paths]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def summarize_results(df: pd.DataFrame, axes: List[str]) -> pd.DataFrame:
    """Per-point mean, sample std, min, max and seed count over successful rows."""
    ok = df[df["status"] == "ok"].copy()
    ok["test_accuracy"] = ok["test_accuracy"].astype(float)
    ok["train_accuracy"] = ok["train_accuracy"].astype(float)
    keys = ["manifest", "manifest_hash"] + axes
    if ok.empty:
        return pd.DataFrame(columns=keys + ["mean", "std", "min", "max", "train_mean", "n"])
    g = ok.groupby(keys, sort=True)
    out = g["test_accuracy"].agg(mean="mean", std="std", min="min", max="max", n="count").reset_index()
    out["train_mean"] = g["train_accuracy"].mean().to_numpy()
    return out


def _axes_for(df: pd.DataFrame, manifest=None) -> List[str]:
    if manifest is not None and manifest.sweep:
        return list(manifest.sweep)
    varying = [c for c in _CANDIDATE_AXES if c in df and df[c].nunique(dropna=False) > 1]
    return varying or ["variant"]


def render_report(csv_paths: Sequence, out_dir, manifest=None) -> dict:
    """Write ``summary.csv``, ``summary.md`` and one PNG per manifest; returns written paths."""
    from .manifests import reference_table

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    df = load_results(csv_paths)
    written = {"figures": []}
    if df.empty:
        pd.DataFrame().to_csv(out_dir / "summary.csv", index=False)
        written["summary"] = out_dir / "summary.csv"
        return written
    summaries = []
    for (name, mhash), part in df.groupby(["manifest", "manifest_hash"], sort=True):
        m = manifest if manifest is not None and manifest.name == name else None
        axes = _axes_for(part, m)
        summary = summarize_results(part, axes)
        summaries.append(summary)
        if summary.empty:
            continue
        x = next((a for a in _PREFERRED_X if a in axes), axes[0])
        rest = [a for a in axes if a != x]
        series = rest[0] if rest else None
        ref = reference_table(m) if m is not None else None
        fig = sweep_figure(summary, x, out_dir / f"{name}.png", series=series, reference=ref,
                           title=name, manifest_hash=str(mhash))
        written["figures"].append(fig)
    table = pd.concat(summaries, ignore_index=True) if summaries else pd.DataFrame()
    table.to_csv(out_dir / "summary.csv", index=False)
    (out_dir / "summary.md").write_text(_markdown(table))
    written["summary"] = out_dir / "summary.csv"
    return written


def _markdown(table: pd.DataFrame) -> str:
    if table.empty:
        return "(no successful runs)\n"
    cols = list(table.columns)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for _, row in table.iterrows():
        cells = [f"{v:.2f}" if isinstance(v, float) else str(v) for v in row.tolist()]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_reference(manifest, out_dir) -> Optional[Path]:
    """Plot a manifest's documented reference numbers on their own."""
    from .manifests import reference_table

    ref = reference_table(manifest)
    if ref.empty:
        return None
    axes = [a for a in manifest.sweep if a in ref] or [c for c in ref.columns if c not in ("mean", "std", "min", "max")]
    if not axes:
        ref = ref.assign(variant=manifest.variant)
        axes = ["variant"]
    x = next((a for a in _PREFERRED_X if a in axes), axes[0])
    rest = [a for a in axes if a != x]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ref.to_csv(out_dir / f"{manifest.name}_reference.csv", index=False)
    return sweep_figure(ref.fillna({"min": ref["mean"], "max": ref["mean"]}), x,
                        out_dir / f"{manifest.name}_reference.png", series=rest[0] if rest else None,
                        title=f"{manifest.name} (reference)", manifest_hash=manifest.hash())
