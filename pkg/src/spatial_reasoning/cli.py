"""Command line entry points.

    spatial-reasoning pretrain --config run.yaml [--set key=value ...]
    spatial-reasoning linear-eval --checkpoint ckpt.pt --task cifar10 --n-patches 9 --seeds 0,1,2
    spatial-reasoning embed --checkpoint ckpt.pt --n-patches 9 --out train.emb
    spatial-reasoning verify-pairs 64 4 3
    spatial-reasoning dump-pairs 4 4 3 --out pairs.csv
    spatial-reasoning run-manifest sweep_patch_size_tiny_imagenet --out results/
    spatial-reasoning report results/results.csv --out report/
    spatial-reasoning ingest cifar10 --out cifar10_manifest.json

Dataset files are read from ``--data-root`` or ``$SR_DATA_ROOT``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .aggregation import (aggregate, brute_force_pairs, build_provenance, pair_set, representation_count,
                          total_pair_count, RepresentationBatch)
from .errors import ConfigurationError

log = logging.getLogger("spatial_reasoning")


def _parse_set(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


def cmd_pretrain(args):
    from .training import RunConfig, pretrain

    data = yaml.safe_load(Path(args.config).read_text()) or {}
    data.update(_parse_set(args.set))
    if args.data_root:
        data["data_root"] = args.data_root
    config = RunConfig.from_dict(data)
    result = pretrain(config)
    print(json.dumps({"checkpoint": str(result.checkpoint_path), "steps": len(result.log),
                      "final_l_total": result.log[-1].l_total if result.log else None,
                      "config_hash": config.hash()}))
    return 0


def cmd_linear_eval(args):
    from .datasets import task_by_name
    from .evaluation import ProbeConfig, linear_probe, seed_sweep
    from .model import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    probe_data = yaml.safe_load(Path(args.probe_config).read_text()) if args.probe_config else {}
    probe_data.update(n_patches=args.n_patches, affine_augment=args.affine)
    probe = ProbeConfig.from_dict(probe_data)
    task = task_by_name(args.task)
    seeds = [int(s) for s in args.seeds.split(",")]

    def run(seed):
        return linear_probe(ckpt, task, dataclasses.replace(probe, seed=seed), data_root=args.data_root)

    result = run(seeds[0]) if len(seeds) == 1 else seed_sweep(run, seeds)
    payload = {"checkpoint": str(args.checkpoint), "task": task.name, "n_patches": probe.n_patches,
               "affine_augment": probe.affine_augment, "manifest_hash": ckpt.manifest_hash or "",
               **result.to_dict()}
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["checkpoint", "task", "n_patches", "affine_augment", "mean", "std", "seeds",
                            "per_seed", "complete", "manifest_hash"])
            w.writerow([args.checkpoint, task.name, probe.n_patches, probe.affine_augment,
                        f"{result.mean:.4f}", f"{result.std:.4f}", args.seeds,
                        ";".join(f"{r['test_accuracy']:.4f}" for r in result.per_seed), result.complete,
                        ckpt.manifest_hash or ""])
    return 0 if result.complete else 1


def cmd_embed(args):
    from .datasets import IMAGE_SIDE, DatasetId, load_split
    from .model import load_checkpoint
    from .representation import compose_representation, make_grid, write_embeddings

    ckpt = load_checkpoint(args.checkpoint)
    dataset = args.dataset or ckpt.config["dataset"]
    data = load_split(dataset, args.data_root, args.split)
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    side = IMAGE_SIDE[DatasetId.parse(dataset)]
    size = args.patch_size or ckpt.config.get("patch_size_px")
    grid = make_grid(side, size, args.n_patches, seed=args.grid_seed) if args.n_patches else None
    vectors = compose_representation(data.images, ckpt, grid).numpy()
    write_embeddings(args.out, vectors, ckpt.feature_dim, args.n_patches, labels=data.labels)
    print(json.dumps({"out": args.out, "rows": int(vectors.shape[0]), "width": int(vectors.shape[1]),
                      "feature_dim": ckpt.feature_dim, "n_patches": args.n_patches}))
    return 0


def verify_pairs(M: int, K: int, N: int, stream=None) -> bool:
    """Compare the closed form, the constructive aggregation and the exhaustive enumerator."""
    stream = stream or sys.stdout
    formula = total_pair_count(M, K, N)
    prov = build_provenance(M, K, N, _dummy_specs(M, N))
    pairs = aggregate(RepresentationBatch(None, prov), M, K, N)
    oracle = brute_force_pairs(prov, M)
    same_set = pair_set(pairs) == oracle
    ok = formula == len(pairs) == len(oracle) and same_set
    counts = pairs.counts()
    print(f"M={M} K={K} N={N} representations={representation_count(M, K, N)}", file=stream)
    print(f"formula={formula} aggregated={len(pairs)} enumerated={len(oracle)} "
          f"patch_pairs={counts['PATCH']} identical_pair_sets={same_set} -> {'OK' if ok else 'MISMATCH'}",
          file=stream)
    return ok


def _dummy_specs(M, N, side=32, size=8, seed=0):
    from .patching import sample_patch_positions

    if N == 0:
        return None
    rng = np.random.default_rng(seed)
    return [sample_patch_positions(side, N, size, rng, image_index=m) for m in range(M)]


def cmd_verify_pairs(args):
    return 0 if verify_pairs(args.M, args.K, args.N) else 1


def cmd_dump_pairs(args):
    prov = build_provenance(args.M, args.K, args.N,
                            _dummy_specs(args.M, args.N, args.side, args.patch_size, args.seed))
    pairs = aggregate(RepresentationBatch(None, prov), args.M, args.K, args.N)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["left", "right", "kind", "class_target", "dx", "dy"])
        for row in pairs.rows():
            w.writerow(row)
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_run_manifest(args):
    from .manifests import ExperimentManifest, run_manifest

    manifest = ExperimentManifest.load(args.manifest)
    if args.data_root:
        manifest.data_root = args.data_root
    path = run_manifest(manifest, args.out)
    print(json.dumps({"results": str(path), "manifest_hash": manifest.hash()}))
    return 0


def cmd_report(args):
    from .manifests import ExperimentManifest
    from .report import render_reference, render_report

    manifest = ExperimentManifest.load(args.manifest) if args.manifest else None
    written = {}
    if args.results:
        written = render_report(args.results, args.out, manifest=manifest)
    if manifest is not None and args.reference:
        written["reference"] = render_reference(manifest, args.out)
    print(json.dumps({k: [str(p) for p in v] if isinstance(v, list) else str(v) for k, v in written.items()}))
    return 0


def cmd_list_manifests(args):
    from .manifests import ExperimentManifest, list_builtin_manifests

    for name in list_builtin_manifests():
        m = ExperimentManifest.load(name)
        print(f"{name:40s} {'ci' if m.ci else 'manual':8s} {m.description}")
    return 0


def cmd_ingest(args):
    from .datasets import write_ingestion_manifest

    manifest = write_ingestion_manifest(args.out, args.dataset, args.data_root,
                                        allow_checksum_mismatch=args.allow_checksum_mismatch)
    print(json.dumps({k: manifest[k] for k in ("dataset", "splits")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatial-reasoning", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="self-supervised pretraining from a flat YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="override config keys")
    s.add_argument("--data-root")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("linear-eval", help="frozen-backbone linear probe")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--n-patches", type=int, default=9)
    s.add_argument("--affine", action="store_true")
    s.add_argument("--seeds", default="0")
    s.add_argument("--probe-config")
    s.add_argument("--data-root")
    s.add_argument("--out", help="write EvalResult JSON here")
    s.add_argument("--csv", help="append a summary row to this CSV")
    s.set_defaults(func=cmd_linear_eval)

    s = sub.add_parser("embed", help="write composite representations to a binary file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n-patches", type=int, default=9)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", default="test")
    s.add_argument("--limit", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--grid-seed", type=int, default=0)
    s.add_argument("--data-root")
    s.set_defaults(func=cmd_embed)

    for name, func, helptext in (("verify-pairs", cmd_verify_pairs, "audit pair counts against enumeration"),
                                 ("dump-pairs", cmd_dump_pairs, "write the pair table as CSV")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("M", type=int)
        s.add_argument("K", type=int)
        s.add_argument("N", type=int)
        if name == "dump-pairs":
            s.add_argument("--out")
            s.add_argument("--side", type=int, default=32)
            s.add_argument("--patch-size", type=int, default=13)
            s.add_argument("--seed", type=int, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("run-manifest", help="run a sweep manifest (file or built-in name)")
    s.add_argument("manifest")
    s.add_argument("--out")
    s.add_argument("--data-root")
    s.set_defaults(func=cmd_run_manifest)

    s = sub.add_parser("report", help="summaries and figures from result CSVs")
    s.add_argument("results", nargs="*")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.add_argument("--reference", action="store_true", help="also plot the manifest's reference numbers")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("list-manifests", help="list built-in manifests")
    s.set_defaults(func=cmd_list_manifests)

    s = sub.add_parser("ingest", help="verify a dataset and write its ingestion manifest")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--data-root")
    s.add_argument("--allow-checksum-mismatch", action="store_true")
    s.set_defaults(func=cmd_ingest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
