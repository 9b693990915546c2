"""Command-line entry point: ``afif4 <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import convnet
from .datagen import DIFFICULTIES, KINDS, AugmentConfig, DegradeSpec, augment_10x, augment_landmarks, degrade
from .facepatch import FaceDetection, parse_detection_record
from .foggy import MembraneSolveConfig, foggy_face, region_from_landmarks, solve_membrane
from .harness.config import ConfigError, PipelineConfig, load_config
from .harness.metrics import DetectionCounts, detection_metrics, f_measure
from .harness.pipeline import (
    accuracy_percent,
    load_bundle,
    predict_records,
    run_cross_dataset,
    run_crossval,
    run_evaluation,
    run_training,
    save_bundle,
)
from .harness.protocol import FoldPlan, make_folds
from .harness.report import CrossCell, DetectionRow, RunReport, emit_report, parse_csv
from .illum import build_surround, default_scale, ssr_enhance
from .imagecore import (
    N_LANDMARKS,
    DatasetManifest,
    ImageBuffer,
    LandmarkSet,
    SampleRecord,
    load_image,
    parse_manifest,
    save_image,
    write_manifest,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm", ".ppm"}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    return load_config(args.config, **overrides)


def _fold_plan(manifest: DatasetManifest, cfg: PipelineConfig) -> FoldPlan:
    if any(r.fold is not None for r in manifest.records):
        return FoldPlan.from_manifest(manifest, seed=cfg.seed)
    return make_folds(manifest, cfg.folds, cfg.seed)


def read_landmarks(path) -> FaceDetection:
    """Landmarks from a detection record line or a bare list of 34 numbers."""
    text = Path(path).read_text(encoding="utf-8")
    toks = text.split()
    if len(toks) == 2 * N_LANDMARKS:
        return FaceDetection.from_landmarks(LandmarkSet(np.reshape([float(t) for t in toks], (-1, 2))))
    det = parse_detection_record(" ".join(toks))
    if det is None:
        raise ValueError(f"{path}: no landmarks found")
    return det


# --------------------------------------------------------------------------
# subcommands


def cmd_folds(args, cfg):
    manifest = parse_manifest(args.manifest)
    plan = make_folds(manifest, args.k or cfg.folds, cfg.seed)
    out = plan.apply(manifest)
    write_manifest(DatasetManifest(out.records, out.name, out.base_dir), args.out)
    print(f"{len(plan.assignments)} samples in {plan.k} folds, {len(plan.discarded)} discarded")


def cmd_train(args, cfg):
    manifest = parse_manifest(args.manifest)
    plan = _fold_plan(manifest, cfg)
    bundle = run_training(manifest, plan, args.fold, cfg, log=_log)
    save_bundle(bundle, args.out)
    print(f"bundle written to {args.out}")


def cmd_eval(args, cfg):
    bundle = load_bundle(args.bundle)
    manifest = parse_manifest(args.manifest)
    if "config" in bundle.meta:
        cfg = PipelineConfig.from_mapping(bundle.meta["config"])
    if args.fold is None:
        records = list(manifest.records)
        acc = accuracy_percent(predict_records(bundle, manifest, records, cfg),
                               [r.gender for r in records])
    else:
        acc = run_evaluation(bundle, manifest, _fold_plan(manifest, cfg), args.fold, cfg)
    print(f"accuracy {acc:.2f}%")


def cmd_crossval(args, cfg):
    manifest = parse_manifest(args.manifest)
    if args.test:
        test = parse_manifest(args.test)
        acc = run_cross_dataset(manifest, test, cfg, log=_log)
        report = RunReport(dataset=f"{manifest.name} -> {test.name}",
                           cross_dataset=[CrossCell(manifest.name, test.name, acc)],
                           config=cfg.as_dict(), seeds={"master": cfg.seed})
        print(f"cross-dataset accuracy {acc:.2f}%")
    else:
        report = run_crossval(manifest, cfg, _fold_plan(manifest, cfg), args.bundles, log=_log)
        print(f"mean accuracy {report.mean_accuracy:.2f}% over {len(report.fold_accuracies)} folds")
    if args.json:
        emit_report(report, args.json, "json")
    if args.report:
        emit_report(report, args.report, args.format)


def cmd_metrics(args, cfg):
    if args.tp is not None:
        recall, precision, f = detection_metrics(DetectionCounts(args.tp, args.fp, args.fn))
    elif args.recall is not None and args.precision is not None:
        recall, precision = args.recall, args.precision
        f = f_measure(recall, precision)
    else:
        raise SystemExit("metrics: give --tp/--fp/--fn or --recall/--precision")
    print(f"recall {recall:.2f}%  precision {precision:.2f}%  F-measure {f:.2f}%")
    if args.report:
        emit_report(RunReport(detection=[DetectionRow(args.dataset, recall, precision, f)]),
                    args.report, args.format)


def cmd_ssr(args, cfg):
    img = load_image(args.inp)
    g = args.g or cfg.ssr_scale or default_scale(img.width, img.height)
    save_image(ssr_enhance(img, build_surround(g), args.eps or cfg.ssr_eps), args.out)


def cmd_foggy(args, cfg):
    img = load_image(args.inp)
    det = read_landmarks(args.landmarks)
    mcfg = MembraneSolveConfig(args.method or cfg.membrane_method, args.tol or cfg.membrane_tolerance,
                               cfg.membrane_max_iterations)
    if args.size:
        out = foggy_face(img, det, mcfg, args.size)
    else:
        out = solve_membrane(img, region_from_landmarks(det.landmarks, img.width, img.height), mcfg)
    save_image(out, args.out)


def _inputs(path: Path) -> tuple[DatasetManifest | None, list[Path]]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return None, files
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return None, [path]
    manifest = parse_manifest(path)
    return manifest, [Path(manifest.resolve(r)) for r in manifest.records]


def cmd_augment(args, cfg):
    manifest, files = _inputs(Path(args.inp))
    out_dir = Path(args.out)
    acfg = AugmentConfig(cfg.augment_shift)
    records = []
    for i, path in enumerate(files):
        img = load_image(path)
        outs = augment_10x(img, acfg)
        rec = manifest.records[i] if manifest else None
        lms = (augment_landmarks(rec.landmarks, img.width, img.height, acfg)
               if rec is not None and rec.landmarks is not None else [None] * len(outs))
        for j, (aug, lm) in enumerate(zip(outs, lms)):
            name = f"{path.stem}_aug{j}.png"
            save_image(aug, out_dir / name)
            if rec is not None:
                records.append(replace(rec, image_path=name, landmarks=lm))
    if manifest is not None:
        write_manifest(DatasetManifest(tuple(records), f"{manifest.name}-augmented", str(out_dir)),
                       out_dir / "manifest.tsv")
    print(f"{len(files)} images -> {10 * len(files)} augmented images in {out_dir}")


def cmd_degrade(args, cfg):
    manifest, files = _inputs(Path(args.inp))
    out_dir = Path(args.out)
    single = manifest is None and len(files) == 1 and out_dir.suffix.lower() in IMAGE_SUFFIXES
    params = {}
    if args.kind.startswith("occlude"):
        params = {"margin": cfg.occlusion_margin, "fill": cfg.occlusion_fill}
    records = []
    for i, path in enumerate(files):
        rec: SampleRecord | None = manifest.records[i] if manifest else None
        spec = DegradeSpec(args.kind, args.difficulty, args.seed_img + i, params)
        lm = rec.landmarks if rec is not None else None
        out = degrade(load_image(path), spec, lm)
        if single:
            save_image(out, out_dir)
            continue
        name = f"{path.stem}_{args.kind}_{args.difficulty}.png"
        save_image(out, out_dir / name)
        if rec is not None:
            records.append(replace(rec, image_path=name))
    if manifest is not None:
        write_manifest(DatasetManifest(tuple(records), f"{manifest.name}-{args.kind}-{args.difficulty}",
                                       str(out_dir)), out_dir / "manifest.tsv")
    print(f"{len(files)} images degraded ({args.kind}, {args.difficulty}) into {out_dir}")


def cmd_gradcheck(args, cfg):
    if args.fc_only:
        spec = convnet.NetworkSpec(args.size, args.channels,
                                   (convnet.fc(8), convnet.RELU, convnet.fc(2), convnet.SOFTMAX))
    else:
        spec = convnet.tiny_spec(args.size, args.channels)
    rng = np.random.default_rng(cfg.seed)
    img = ImageBuffer(rng.random((args.size, args.size, args.channels)))
    err = convnet.gradient_check(spec, img, 1, args.eps, seed=cfg.seed)
    verdict = "pass" if err < args.threshold else "FAIL"
    print(f"{spec.n_params()} parameters, max relative error {err:.3e} "
          f"(threshold {args.threshold:g}): {verdict}")
    if err >= args.threshold:
        raise SystemExit(1)


def cmd_report(args, cfg):
    src = Path(args.inp)
    text = src.read_text(encoding="utf-8")
    if src.suffix.lower() == ".csv":
        report = parse_csv(text)
    else:
        report = RunReport.from_json(text)
    emit_report(report, args.out, args.format)


def cmd_synth(args, cfg):
    from .synthetic import write_dataset
    m = write_dataset(args.out, args.n, cfg.seed, args.size, args.invert, name=args.name)
    print(f"{len(m)} synthetic faces written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="master seed")
        g.add_argument("--config", default=default, help="key=value configuration file")
        g.add_argument("--preset", choices=sorted(convnet.PRESETS), default=default,
                       help="network preset")
        return g

    # Flags are accepted before or after the subcommand; SUPPRESS keeps the
    # subcommand copy from clobbering a value given before it.
    common = global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="afif4", description=__doc__, parents=[global_flags(None)])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("folds", cmd_folds, "assign class-balanced folds to a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int)

    sp = add("train", cmd_train, "train a model bundle on all folds but one")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fold", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a bundle on a test fold (or a whole manifest)")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fold", type=int)

    sp = add("crossval", cmd_crossval, "k-fold run, or cross-dataset with --test")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--test", help="evaluate on this manifest after training on all of --manifest")
    sp.add_argument("--bundles", help="directory for per-fold bundles")
    sp.add_argument("--report")
    sp.add_argument("--format", default="markdown", choices=("markdown", "md", "csv", "json"))
    sp.add_argument("--json", help="also write the report as JSON")

    sp = add("metrics", cmd_metrics, "detection recall / precision / F-measure")
    sp.add_argument("--tp", type=int)
    sp.add_argument("--fp", type=int, default=0)
    sp.add_argument("--fn", type=int, default=0)
    sp.add_argument("--recall", type=float)
    sp.add_argument("--precision", type=float)
    sp.add_argument("--dataset", default="")
    sp.add_argument("--report")
    sp.add_argument("--format", default="markdown", choices=("markdown", "md", "csv", "json"))

    sp = add("ssr", cmd_ssr, "single scale retinex enhancement")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--g", type=float)
    sp.add_argument("--eps", type=float)

    sp = add("foggy", cmd_foggy, "foggy-face synthesis")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--method", choices=("cg", "gs", "dense"))
    sp.add_argument("--tol", type=float)
    sp.add_argument("--size", type=int, help="resize the result to size x size")

    sp = add("augment", cmd_augment, "10x translation/flip augmentation")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)

    sp = add("degrade", cmd_degrade, "synthetic degradations")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True,
                    help="output directory, or an image file when --in is a single image")
    sp.add_argument("--kind", required=True, choices=KINDS)
    sp.add_argument("--difficulty", default="medium", choices=DIFFICULTIES)
    sp.add_argument("--seed-img", dest="seed_img", type=int, default=0,
                    help="noise seed of the first image (incremented per image)")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--channels", type=int, default=1)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--fc-only", action="store_true")
    sp.add_argument("--threshold", type=float, default=1e-3)

    sp = add("report", cmd_report, "render a JSON/CSV report as markdown, csv or json")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", default="markdown", choices=("markdown", "md", "csv", "json"))

    sp = add("synth", cmd_synth, "write a procedural two-class face dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=400)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--name", default="synthetic")
    sp.add_argument("--invert", action="store_true", help="swap the recorded labels")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"afif4 {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
