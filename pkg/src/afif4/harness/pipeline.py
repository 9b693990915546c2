"""End-to-end training and evaluation of the feature-fusion classifier."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, MutableMapping, Sequence

import numpy as np

from .. import convnet
from ..datagen import augment_10x
from ..facepatch import ExternalDetector, FaceDetection, detect_all_faces, extract_patch_set
from ..foggy import foggy_face
from ..fusion import (
    FeatureScore,
    FusionModel,
    LinearDiscriminant,
    load_fusion,
    predict_fusion_batch,
    save_fusion,
    train_fusion,
)
from ..illum import build_surround
from ..imagecore import FEMALE, MALE, DatasetManifest, ImageBuffer, SampleRecord, load_image
from .config import PipelineConfig
from .protocol import FoldPlan, make_folds, make_splits, testing_records, training_records
from .report import RunReport

BUNDLE_VERSION = 1
NETWORKS = ("face", "eye", "nose", "mouth")
# Offsets added to the master seed so each network's init and batches are independent
# of training order (sequential and threaded runs agree).
SEED_OFFSETS = {"face": 1009, "eye": 2003, "nose": 3001, "mouth": 4001, "split": 17}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str, sample: str | None = None):
        self.stage = stage
        self.sample = sample
        where = f" [sample {sample}]" if sample else ""
        super().__init__(f"{stage}{where}: {message}")


@dataclass(frozen=True, eq=False)
class FeatureImages:
    """Network inputs for one sample: foggy face and the four local patches."""

    face: ImageBuffer
    left_eye: ImageBuffer
    right_eye: ImageBuffer
    nose: ImageBuffer
    mouth: ImageBuffer


@dataclass(eq=False)
class ModelBundle:
    networks: dict[str, convnet.NetworkState]
    fusion: FusionModel
    meta: dict = field(default_factory=dict)

    def inverted(self) -> "ModelBundle":
        """Same bundle with the final discriminant's decision negated."""
        d = self.fusion.discriminant
        flipped = LinearDiscriminant(-d.weights, -d.bias, d.shrinkage)
        fusion = FusionModel(self.fusion.ensembles, flipped, self.fusion.local_labels)
        return ModelBundle(self.networks, fusion, {**self.meta, "inverted": True})


def save_bundle(bundle: ModelBundle, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name in NETWORKS:
        convnet.save_network(bundle.networks[name], out / f"{name}.afnn")
    save_fusion(bundle.fusion, out / "fusion.affu")
    (out / "bundle.json").write_text(json.dumps(bundle.meta, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return out


def load_bundle(directory) -> ModelBundle:
    d = Path(directory)
    meta = json.loads((d / "bundle.json").read_text(encoding="utf-8"))
    if meta.get("bundle_version") != BUNDLE_VERSION:
        raise PipelineError("load", f"unsupported bundle version {meta.get('bundle_version')!r}")
    nets = {name: convnet.load_network(d / f"{name}.afnn") for name in NETWORKS}
    return ModelBundle(nets, load_fusion(d / "fusion.affu"), meta)


def bundle_bytes(directory) -> dict[str, bytes]:
    d = Path(directory)
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


# --------------------------------------------------------------------------
# feature extraction


def _match_channels(img: ImageBuffer, channels: int) -> ImageBuffer:
    if img.channels == channels:
        return img
    if channels == 3:
        return ImageBuffer(np.repeat(img.pixels, 3, axis=2))
    return ImageBuffer(img.pixels.mean(axis=2, keepdims=True))


def detect(record: SampleRecord, img: ImageBuffer, cfg: PipelineConfig) -> FaceDetection:
    if record.landmarks is not None:
        return FaceDetection.from_landmarks(record.landmarks.clipped(img.width, img.height))
    if not cfg.detector:
        raise PipelineError("detect", "no landmarks and no detector configured", record.image_path)
    surround = build_surround(cfg.ssr_scale) if cfg.ssr_scale else None
    found = detect_all_faces(img, ExternalDetector(cfg.detector), cfg.mask_fill,
                             cfg.max_faces, surround, cfg.ssr_eps)
    if not found:
        raise PipelineError("detect", "no face found", record.image_path)
    return found[0]


def extract_features(manifest: DatasetManifest, record: SampleRecord,
                     cfg: PipelineConfig) -> FeatureImages:
    spec = cfg.network_spec()
    size = spec.input_size
    path = manifest.resolve(record)
    try:
        img = _match_channels(load_image(path), spec.channels)
    except (OSError, ValueError) as exc:
        raise PipelineError("load", str(exc), record.image_path) from exc
    det = detect(record, img, cfg)
    try:
        patches = extract_patch_set(img, det, cfg.patch_margin, size)
        fog = foggy_face(img, det, cfg.membrane(), size)
    except (ValueError, RuntimeError) as exc:
        raise PipelineError("features", str(exc), record.image_path) from exc
    return FeatureImages(fog, patches.left_eye, patches.right_eye, patches.nose, patches.mouth)


FeatureCache = MutableMapping[str, FeatureImages]


def features_for(manifest: DatasetManifest, records: Sequence[SampleRecord], cfg: PipelineConfig,
                 cache: FeatureCache | None = None) -> list[FeatureImages]:
    out = []
    for rec in records:
        key = manifest.resolve(rec)
        if cache is not None and key in cache:
            out.append(cache[key])
            continue
        feats = extract_features(manifest, rec, cfg)
        if cache is not None:
            cache[key] = feats
        out.append(feats)
    return out


def _network_inputs(name: str, feats: FeatureImages) -> list[ImageBuffer]:
    if name == "face":
        return [feats.face]
    if name == "eye":
        return [feats.left_eye, feats.right_eye]
    return [getattr(feats, name)]


def score_samples(networks: Mapping[str, convnet.NetworkState],
                  feats: Sequence[FeatureImages]) -> list[list[FeatureScore]]:
    """Five signed scores per sample; both eye patches go through the shared eye network."""
    columns = {
        "face": ("face", [f.face for f in feats]),
        "eye-left": ("eye", [f.left_eye for f in feats]),
        "eye-right": ("eye", [f.right_eye for f in feats]),
        "nose": ("nose", [f.nose for f in feats]),
        "mouth": ("mouth", [f.mouth for f in feats]),
    }
    scored = {label: convnet.predict_scores(networks[net], imgs)
              for label, (net, imgs) in columns.items()}
    return [[FeatureScore(label, *scored[label][i]) for label in columns]
            for i in range(len(feats))]


# --------------------------------------------------------------------------
# training / evaluation


def _train_network(name: str, samples, cfg: PipelineConfig) -> convnet.NetworkState:
    seed = cfg.seed + SEED_OFFSETS[name]
    init = convnet.init_network(cfg.network_spec(), seed, cfg.init_scale)
    try:
        return convnet.train(init, samples, cfg.train_config(seed))
    except (ValueError, FloatingPointError) as exc:
        raise PipelineError(f"train-{name}", str(exc)) from exc


def _require_both_classes(stage: str, labels: Sequence[int]) -> None:
    if not (MALE in labels and FEMALE in labels):
        raise PipelineError(stage, "portion holds a single class; need more training samples")


def train_on_records(manifest: DatasetManifest, records: Sequence[SampleRecord],
                     cfg: PipelineConfig, cache: FeatureCache | None = None,
                     log: Callable[[str], None] | None = None) -> ModelBundle:
    log = log or (lambda msg: None)
    split = make_splits(records, cfg.seed + SEED_OFFSETS["split"], [r.gender for r in records])
    feats = features_for(manifest, records, cfg, cache)
    labels = [r.gender for r in records]

    cnn_idx = split.cnn
    train_sets = {}
    for name in NETWORKS:
        samples = []
        for i in cnn_idx:
            for img in _network_inputs(name, feats[i]):
                variants = augment_10x(img, cfg.augment_config()) if cfg.augment else [img]
                samples.extend((v, labels[i]) for v in variants)
        train_sets[name] = samples
    log(f"training {len(NETWORKS)} networks on {len(cnn_idx)} samples "
        f"({'with' if cfg.augment else 'without'} 10x augmentation)")
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trained = list(pool.map(lambda n: _train_network(n, train_sets[n], cfg), NETWORKS))
    else:
        trained = [_train_network(n, train_sets[n], cfg) for n in NETWORKS]
    networks = dict(zip(NETWORKS, trained))

    ada_labels = [labels[i] for i in split.adaboost]
    fus_labels = [labels[i] for i in split.fusion]
    _require_both_classes("adaboost", ada_labels)
    _require_both_classes("fusion", fus_labels)
    ada_scores = score_samples(networks, [feats[i] for i in split.adaboost])
    fus_scores = score_samples(networks, [feats[i] for i in split.fusion])
    log(f"fusion: {len(ada_labels)} AdaBoost samples, {len(fus_labels)} discriminant samples")
    try:
        fusion = train_fusion(ada_scores, ada_labels, cfg.boost_rounds, cfg.lda_shrinkage,
                              fus_scores, fus_labels)
    except ValueError as exc:
        raise PipelineError("fusion", str(exc)) from exc
    meta = {
        "bundle_version": BUNDLE_VERSION,
        "network_format": convnet.FORMAT_VERSION,
        "preset": cfg.preset,
        "master_seed": cfg.seed,
        "network_seeds": {n: cfg.seed + SEED_OFFSETS[n] for n in NETWORKS},
        "split_seed": cfg.seed + SEED_OFFSETS["split"],
        "split_sizes": [len(split.cnn), len(split.adaboost), len(split.fusion)],
        "config": cfg.as_dict(),
    }
    return ModelBundle(networks, fusion, meta)


def run_training(manifest: DatasetManifest, fold_plan: FoldPlan, fold_id: int,
                 cfg: PipelineConfig | None = None, cache: FeatureCache | None = None,
                 log=None) -> ModelBundle:
    cfg = cfg or PipelineConfig()
    records = training_records(manifest, fold_plan, fold_id)
    bundle = train_on_records(manifest, records, cfg, cache, log)
    bundle.meta.update({"fold": fold_id, "folds": fold_plan.k, "fold_seed": fold_plan.seed,
                        "dataset": manifest.name})
    return bundle


def predict_records(bundle: ModelBundle, manifest: DatasetManifest,
                    records: Sequence[SampleRecord], cfg: PipelineConfig | None = None,
                    cache: FeatureCache | None = None) -> np.ndarray:
    cfg = cfg or _bundle_config(bundle)
    feats = features_for(manifest, records, cfg, cache)
    return predict_fusion_batch(bundle.fusion, score_samples(bundle.networks, feats))


def _bundle_config(bundle: ModelBundle) -> PipelineConfig:
    stored = bundle.meta.get("config")
    return PipelineConfig.from_mapping(stored) if stored else PipelineConfig()


def accuracy_percent(predicted: Sequence[int], labels: Sequence[int]) -> float:
    if len(labels) == 0:
        raise PipelineError("evaluate", "no test samples")
    return 100.0 * float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def run_evaluation(bundle: ModelBundle, manifest: DatasetManifest, fold_plan: FoldPlan,
                   fold_id: int, cfg: PipelineConfig | None = None,
                   cache: FeatureCache | None = None) -> float:
    records = testing_records(manifest, fold_plan, fold_id)
    preds = predict_records(bundle, manifest, records, cfg, cache)
    return accuracy_percent(preds, [r.gender for r in records])


def run_cross_dataset(train_manifest: DatasetManifest, test_manifest: DatasetManifest,
                      cfg: PipelineConfig | None = None, log=None) -> float:
    """Train on every record of one dataset and report accuracy on every record of another."""
    cfg = cfg or PipelineConfig()
    bundle = train_on_records(train_manifest, list(train_manifest.records), cfg, log=log)
    preds = predict_records(bundle, test_manifest, list(test_manifest.records), cfg)
    return accuracy_percent(preds, [r.gender for r in test_manifest.records])


def run_crossval(manifest: DatasetManifest, cfg: PipelineConfig | None = None,
                 fold_plan: FoldPlan | None = None, bundle_dir=None, log=None) -> RunReport:
    """k-fold cross-validation; optionally writes one bundle per fold under ``bundle_dir``."""
    cfg = cfg or PipelineConfig()
    log = log or (lambda msg: None)
    plan = fold_plan or make_folds(manifest, cfg.folds, cfg.seed)
    cache: dict[str, FeatureImages] = {}
    accs = []
    for fold in range(plan.k):
        log(f"fold {fold + 1}/{plan.k}")
        bundle = run_training(manifest, plan, fold, cfg, cache, log)
        if bundle_dir is not None:
            save_bundle(bundle, Path(bundle_dir) / f"fold{fold}")
        acc = run_evaluation(bundle, manifest, plan, fold, cfg, cache)
        log(f"fold {fold}: accuracy {acc:.2f}%")
        accs.append(acc)
    return RunReport.from_folds(
        accs, dataset=manifest.name, config=cfg.as_dict(),
        seeds={"master": cfg.seed, "folds": plan.seed,
               **{n: cfg.seed + SEED_OFFSETS[n] for n in NETWORKS}},
        discarded=len(plan.discarded))
