"""Operator entry points: prepare, train, eval, ablate, permtest, export, serve, synth."""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import asdict
from pathlib import Path


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--device", default="cpu", help="compute device (cpu only in this build)")
    p.add_argument("--toy", action="store_true", help="reduced-scale mode: 64px inputs, 1/8 widths")
    p.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cystodx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="rasterize polygon annotations and split the manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True, help="directory of LabelMe JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)

    p = sub.add_parser("ablate", help="run the base config plus named toggles")
    p.add_argument("--config", required=True)
    p.add_argument("--toggles", default="", help="comma-separated, atoms joined by '+'")
    _add_common(p)

    p = sub.add_parser("permtest", help="label-permutation significance test for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export", help="export a checkpoint to a portable serialized graph")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--registry", required=True)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic blob corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=24)
    p.add_argument("--side", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subtype", action="store_true")
    p.add_argument("--labelme", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    from . import dataio

    manifest = dataio.load_manifest(args.manifest)
    ann_dir = Path(args.annotations)
    out_dir = Path(args.out)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    new_records = []
    for rec in manifest.records:
        img_path = manifest.resolve(rec.image_path)
        if not img_path.exists():
            raise FileNotFoundError(f"image file missing for record {rec.id!r}: {img_path}")
        pixels = dataio.load_image(img_path)
        mask_rel = rec.mask_path
        if rec.tumor_label == 1 and mask_rel is None:
            ann_path = ann_dir / f"{rec.id}.json"
            if not ann_path.exists():
                raise FileNotFoundError(f"no annotation for tumor record {rec.id!r}: {ann_path}")
            try:
                polys = dataio.load_labelme(ann_path, clamp_to=pixels.shape[:2])
                mask = dataio.polygon_to_mask(polys, pixels.shape[0], pixels.shape[1])
            except Exception as e:
                raise ValueError(f"invalid annotation {ann_path}: {e}") from e
            mask_rel = f"masks/{rec.id}.png"
            dataio.save_mask(mask, out_dir / mask_rel)
        from dataclasses import replace

        new_records.append(
            replace(rec, image_path=str(img_path.resolve()), mask_path=mask_rel)
        )

    prepared = dataio.DatasetManifest(tuple(new_records), out_dir)
    dataio.validate_manifest(prepared)
    prepared = dataio.patient_split(prepared, seed=args.seed)
    dataio.save_manifest(prepared, out_dir / "manifest.json")
    print(f"prepared {len(prepared)} records -> {out_dir / 'manifest.json'}")
    return 0


def _load_split_arrays(cfg, task: str):
    from . import dataio
    from .train import load_arrays

    if cfg.manifest is None:
        raise ValueError("config has no data.manifest entry")
    manifest = dataio.load_manifest(cfg.manifest)
    if all(r.split == "unassigned" for r in manifest.records):
        manifest = dataio.patient_split(manifest, seed=cfg.train.seed)
    side = cfg.model.input_side
    return (
        load_arrays(manifest.subset("train"), task, side),
        load_arrays(manifest.subset("val"), task, side),
        manifest,
    )


def _write_report(report, out_dir: Path, name: str):
    from dataclasses import is_dataclass

    def default(o):
        import numpy as np

        if is_dataclass(o):
            return asdict(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not serializable: {type(o)}")

    with open(out_dir / name, "w") as f:
        json.dump(asdict(report), f, indent=2, default=default)


def cmd_train(args) -> int:
    from .config import load_experiment_config, save_experiment_config
    from .nnblocks import build_model, save_checkpoint
    from .train import fit

    cfg = load_experiment_config(args.config, seed=args.seed, toy=args.toy, out_dir=args.out)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shutil.copy(args.config, out_dir / "config.yaml")
    save_experiment_config(cfg, out_dir / "config.resolved.yaml")

    train_data, val_data, _ = _load_split_arrays(cfg, cfg.model.task)
    model = build_model(cfg.model, seed=cfg.train.seed)
    ckpt, report = fit(model, train_data, val_data, cfg.train)
    save_checkpoint(ckpt, out_dir / "checkpoint")
    _write_report(report, out_dir, "report.json")
    print(f"best epoch {report.best_epoch}; checkpoint -> {out_dir / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    from . import dataio
    from .nnblocks import build_from_checkpoint, load_checkpoint
    from .train import evaluate, load_arrays

    ckpt = load_checkpoint(args.checkpoint)
    model = build_from_checkpoint(ckpt)
    manifest = dataio.load_manifest(args.manifest)
    if args.split != "all":
        manifest = manifest.subset(args.split)
    if len(manifest) == 0:
        raise ValueError(f"no records in split {args.split!r}")
    data = load_arrays(manifest, ckpt.config.task, ckpt.config.input_side)
    report = evaluate(model, data, ckpt.config.task, threshold=args.threshold)
    line = "  ".join(f"{k}={v:.4f}" for k, v in sorted(report.scalars.items()))
    print(f"{ckpt.config.task} [{args.split}] {line}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_report(report, out_dir, "metrics.json")
    return 0


def cmd_ablate(args) -> int:
    from .config import load_experiment_config, save_experiment_config
    from .train import ablate, format_ablation_table

    cfg = load_experiment_config(args.config, seed=args.seed, toy=args.toy, out_dir=args.out)
    toggles = [t for t in (args.toggles.split(",") if args.toggles else cfg.toggles) if t]
    train_data, val_data, _ = _load_split_arrays(cfg, cfg.model.task)
    reports = ablate(cfg.model, cfg.train, toggles, train_data, val_data)
    table = format_ablation_table(reports)
    print(table)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shutil.copy(args.config, out_dir / "config.yaml")
    save_experiment_config(cfg, out_dir / "config.resolved.yaml")
    (out_dir / "ablation.txt").write_text(table + "\n")
    rows = [
        {"name": r.name, "metrics": (r.metrics.scalars if r.metrics else {}),
         "first_batch_hash": r.first_batch_hash, "best_epoch": r.best_epoch}
        for r in reports
    ]
    with open(out_dir / "ablation.json", "w") as f:
        json.dump(rows, f, indent=2)
    return 0


def cmd_permtest(args) -> int:
    from . import dataio
    from .metrics import permutation_test
    from .nnblocks import build_from_checkpoint, load_checkpoint
    from .train import load_arrays, predict_scores

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.task != "classify":
        raise ValueError("permtest operates on classification checkpoints")
    model = build_from_checkpoint(ckpt)
    manifest = dataio.load_manifest(args.manifest)
    if args.split != "all":
        manifest = manifest.subset(args.split)
    data = load_arrays(manifest, "classify", ckpt.config.input_side)
    scores = predict_scores(model, data)
    result = permutation_test(scores, data.labels.astype(int), n=args.n, seed=args.seed)
    print(f"observed_auc={result.observed:.4f} p_value={result.p_value:.6f} n={result.n_perms}")
    return 0


def cmd_export(args) -> int:
    from .nnblocks import export_torchscript, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    path = export_torchscript(ckpt, args.out)
    print(f"exported serialized graph -> {path}")
    return 0


def cmd_serve(args) -> int:
    from .serve import run_server

    run_server(args.registry, host=args.host, port=args.port, workers=args.workers)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_blob_corpus

    path = write_blob_corpus(
        args.out, n=args.n, side=args.side, seed=args.seed,
        with_subtype=args.subtype, with_labelme=args.labelme,
    )
    print(f"synthetic corpus -> {path}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "permtest": cmd_permtest,
    "export": cmd_export,
    "serve": cmd_serve,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
