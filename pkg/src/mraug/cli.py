"""Command-line entry point: ``mraug <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np
import yaml

from . import orchestrator as orch
from . import phantom as ph
from .errors import ConfigError, MraugError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("mraug")


def _section(path, key) -> dict:
    if not path:
        return {}
    cfg = yaml.safe_load(Path(path).read_text()) or {}
    section = cfg.get(key, {}) if isinstance(cfg, dict) else None
    if not isinstance(section, dict):
        raise ConfigError(f"'{key}' must be a mapping", f"{path}:{key}")
    return section


def _overrides(args, *names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def cmd_phantom(args):
    spec = ph.PhantomSpec(subjects=args.subjects, slices_per_subject=args.slices, seed=args.seed)
    if args.vendor not in ph.VENDOR_STYLES[args.role]:
        raise ConfigError(f"unknown vendor {args.vendor!r}", "--vendor")
    style = ph.VENDOR_STYLES[args.role][args.vendor]
    manifest = ph.make_phantom_domain(spec, style, args.dataset, args.vendor, validation_only=args.validation_only)
    path = orch.write_manifest(args.out, manifest)
    print(f"{path}: {len(manifest)} slices {manifest.counts()}")


def cmd_prep(args):
    from .imaging import DatasetManifest, Volume, load_nifti, manifest_from_volumes, normalize_volume

    img = load_nifti(args.image)
    brain = load_nifti(args.brain).voxels > 0.5 if args.brain else img.voxels > 0
    lesion = load_nifti(args.lesion).voxels > 0.5 if args.lesion else None
    v = normalize_volume(Volume(img.voxels, img.spacing, brain, lesion,
                                {"dataset": args.dataset, "vendor": args.vendor, "subject": args.subject}))
    manifest = manifest_from_volumes([v], args.fraction, validation_only=args.validation_only)
    if args.append and Path(args.out).exists():
        manifest = DatasetManifest.from_records(orch.read_manifest(args.out).records() + manifest.records())
    orch.write_manifest(args.out, manifest)
    print(f"{args.out}: {len(manifest)} slices")


def cmd_translate(args):
    from .imaging import TranslationMode, label_image_record
    from .translation import CycleTrainConfig, train_translation

    cfg = {**_section(args.config, "translation"), **_overrides(args, "epochs", "decay_start", "ngf", "ndf", "seed")}
    cfg = CycleTrainConfig(**cfg)
    mode = TranslationMode.parse(args.mode)
    source = orch.read_manifest(args.source).records()
    if mode is TranslationMode.LABEL2IMAGE:
        source = [label_image_record(r) for r in source]
    target = orch.read_manifest(args.target).records()
    result = train_translation(cfg, source, target, args.out, log=log.info, mode=mode)
    print(f"{args.out}/final.dsfg generator={result.meta['generator_id']}")


def cmd_generate(args):
    from .imaging import TranslationMode, label_image_record
    from .nncore import load_checkpoint
    from .translation import dcgan_sample, generate_synthetic, params_digest

    sets, meta = load_checkpoint(args.checkpoint)
    if "dcgan_g" in sets:
        out = dcgan_sample(sets["dcgan_g"], args.samples, seed=args.seed)
    else:
        if not args.source:
            raise ConfigError("--source is required for translation checkpoints", "--source")
        mode = TranslationMode.parse(meta.get("mode", "image2image"))
        source = orch.read_manifest(args.source).records()
        if mode is TranslationMode.LABEL2IMAGE:
            source = [label_image_record(r) for r in source]
        out = generate_synthetic(sets["g_s2t"], source, mode, params_digest(sets["g_s2t"]),
                                 dataset=args.dataset, vendor=args.vendor)
    orch.write_manifest(args.out, out)
    print(f"{args.out}: {len(out)} slices")


def cmd_segment_train(args):
    from .segmentation import SegTrainConfig, train_segmentation

    cfg = SegTrainConfig(**{**_section(args.config, "segmentation"),
                            **_overrides(args, "epochs", "batch", "base", "seed")})
    records = [r for m in args.train for r in orch.read_manifest(m).records()]
    result = train_segmentation(cfg, records, args.out, log=log.info)
    print(f"{args.out}/final.dsfg domains={sorted(result.consumed_domains)}")


def _unet(path):
    from .nncore import load_checkpoint

    sets, _ = load_checkpoint(path)
    if "unet" not in sets:
        raise ConfigError("checkpoint holds no U-Net", str(path))
    return sets["unet"]


def cmd_segment_predict(args):
    from .imaging import Volume, load_nifti, normalize_volume, write_nifti
    from .segmentation import predict_volume

    img = load_nifti(args.image)
    brain = load_nifti(args.brain).voxels > 0.5 if args.brain else None
    v = normalize_volume(Volume(img.voxels, img.spacing, brain))
    mask = predict_volume(_unet(args.checkpoint), v, args.fraction)
    write_nifti(args.out, mask.astype(np.uint8), img.spacing)
    print(f"{args.out}: {int(mask.sum())} lesion voxels")


def cmd_evaluate(args):
    from .evaluate import evaluate_model
    from .imaging import volumes_from_manifest
    from .segmentation import predict_volume

    volumes = volumes_from_manifest(orch.read_manifest(args.manifest))
    report = evaluate_model(partial(predict_volume, _unet(args.checkpoint)), volumes, name=str(args.checkpoint))
    report.write_csv(args.out)
    print(report.to_text(), end="")


def cmd_fid(args):
    import csv

    from .fid import TAPS, FeatureExtractor, fid_table

    ref = orch.read_manifest(args.reference)
    sets = {Path(p).stem: orch.read_manifest(p) for p in args.sets}
    table = fid_table(sets, ref, FeatureExtractor(seed=args.seed))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["set", *TAPS])
        for name, row in table.items():
            w.writerow([name, *[f"{row[t]:.4f}" for t in TAPS]])
    print(Path(args.out).read_text(), end="")


def cmd_embed(args):
    from .embedding import pca_reduce, tsne_embed
    from .fid import FeatureExtractor

    rng = np.random.default_rng(args.seed)
    images, tags = [], []
    for path in args.sets:
        recs = orch.read_manifest(path).records()
        idx = np.sort(rng.choice(len(recs), size=min(args.per_set, len(recs)), replace=False))
        images += [recs[i].image for i in idx]
        tags += [Path(path).stem] * len(idx)
    feats = FeatureExtractor(seed=0).features(np.stack(images))[2048]
    reduced = pca_reduce(feats, min(args.pca, len(feats) - 1, feats.shape[1]))
    res = tsne_embed(reduced, perplexity=args.perplexity, iterations=args.iterations, seed=args.seed, tags=tags)
    print(res.write_csv(args.out))


def _load_plan(args):
    plan = orch.plan_from_config(args.config)
    if args.seed is not None:
        plan.seed = args.seed
    if args.out is not None:
        plan.output = args.out
    return plan


def cmd_plan(args):
    plan = _load_plan(args)
    print(json.dumps({"config_hash": plan.config_hash(),
                      "jobs": [{"name": j.name, "kind": j.kind, "deps": j.deps} for j in plan.jobs]}, indent=1))


def cmd_run(args):
    plan = _load_plan(args)
    ledger = orch.run_plan(plan, resume=args.resume)
    failed = ledger.failed()
    for name, job in ledger.jobs.items():
        print(f"{job['status']:8s} {name}")
    if not failed:
        orch.emit_report_bundle(ledger)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_report(args):
    ledger = Path(args.ledger)
    if ledger.is_dir():
        ledger = ledger / "ledger.json"
    for kind, path in orch.emit_report_bundle(ledger, args.out).items():
        print(f"{kind}: {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mraug", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--role", choices=["source", "target"], default="source")
    p.add_argument("--dataset", default="SRC")
    p.add_argument("--vendor", default="GE")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--slices", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validation-only", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("prep", help="slice a NIfTI volume into a manifest")
    p.add_argument("--image", required=True)
    p.add_argument("--brain")
    p.add_argument("--lesion")
    p.add_argument("--dataset", required=True)
    p.add_argument("--vendor", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--validation-only", action="store_true")
    p.add_argument("--append", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("translate", help="train a cycle-consistent translation pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--mode", default="image2image")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-start", type=int)
    p.add_argument("--ngf", type=int)
    p.add_argument("--ndf", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("generate", help="synthesize a labeled set from a generator checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source")
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--dataset", default="SYN")
    p.add_argument("--vendor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment-train", help="train the lesion U-Net")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment_train)

    p = sub.add_parser("segment-predict", help="predict a lesion mask for a NIfTI volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--brain")
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment_predict)

    p = sub.add_parser("evaluate", help="score a U-Net on a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fid", help="FID of each set against a reference at every tap")
    p.add_argument("--reference", required=True)
    p.add_argument("--sets", nargs="+", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("embed", help="2-D t-SNE of deep features")
    p.add_argument("--sets", nargs="+", required=True)
    p.add_argument("--per-set", type=int, default=60)
    p.add_argument("--pca", type=int, default=1024)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    for name, func, text in (("plan", cmd_plan, "print the expanded job grid"),
                             ("run", cmd_run, "execute an experiment config")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name == "run":
            p.add_argument("--resume", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="regenerate tables and plots from a run ledger")
    p.add_argument("--ledger", required=True, help="ledger.json or its run directory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        code = args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MraugError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
