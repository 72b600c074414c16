"""Command-line entry point.

    spinefrac phantom-gen   --out CORPUS
    spinefrac build-labels  --annotations DIR --volumes DIR --out DIR
    spinefrac train         --corpus CORPUS --out RUN_DIR
    spinefrac infer         --volume IMAGE --checkpoint MODEL --out MAP
    spinefrac aggregate     --map MAP --mode {patient,vertebra} [--annotations CSV] --out RECORDS
    spinefrac evaluate      --corpus CORPUS --out REPORT_DIR

Every command takes ``--config`` (YAML or JSON), ``--seed``, ``--workers``
and ``--out``. Failures print one JSON error record on stderr and exit
nonzero: 2 for usage or configuration errors, 3 for unreadable or
incompatible files, 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import corpus
from .aggregator import PatientHyperparams, patient_detect, perturb_centroids, vertebra_score, write_records
from .evaluator import EvalConfig, plot_overlay, run_cross_validation, write_report
from .labels import AnnotationParseError, AnnotationValidationError, build_label_volume, parse_annotations
from .network import CheckpointFormatError, NetworkConfig, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, generate_corpus
from .trainer import ConfigError, ProbabilityMap, TrainingCase, TrainingConfig, infer_volume, train
from .volume_io import Volume, VolumeFormatError, load_volume, preprocess, resampled_shape, save_volume

log = logging.getLogger("spinefrac")

EXIT_ERROR, EXIT_USAGE, EXIT_FORMAT = 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class AggregationConfig:
    probability_threshold: float = 0.5
    noise_threshold: int = 100
    cube_size: int = 10
    sigma_mm: float = 5.0
    centroid_noise_mm: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown aggregation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    target_spacing: float = 1.0
    seed: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        net = dict(d.get("network") or {})
        variant = net.pop("variant", "3D")
        try:
            network = NetworkConfig.for_variant(variant, **net)
        except TypeError as exc:
            raise ConfigError(f"network: {exc}") from exc
        cfg = cls(
            phantom=PhantomSpec.from_dict(d.get("phantom") or {}),
            network=network,
            training=TrainingConfig.from_dict(d.get("training") or {}),
            aggregation=AggregationConfig.from_dict(d.get("aggregation") or {}),
            evaluation=EvalConfig.from_dict(d.get("evaluation") or {}),
            target_spacing=float(d.get("target_spacing", 1.0)),
            seed=d.get("seed"),
        )
        return cfg.with_seed(cfg.seed)

    def with_seed(self, seed) -> "ExperimentConfig":
        """One seed drives the phantom, training and evaluation streams."""
        if seed is None:
            return self
        seed = int(seed)
        return replace(
            self,
            seed=seed,
            phantom=replace(self.phantom, seed=seed),
            training=replace(self.training, seed=seed),
            evaluation=replace(self.evaluation, seed=seed),
        )


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def _split_validation(cases, fraction: float, seed: int):
    """Stratified validation hold-out for single-model training."""
    rng = np.random.default_rng([seed, 31])
    val = []
    for positive in (False, True):
        group = [c for c in cases if c.positive == positive]
        n = int(np.floor(fraction * len(group) + 0.5))
        if fraction > 0 and group and n == 0 and len(group) > 1:
            n = 1
        val += [group[i].case_id for i in rng.choice(len(group), size=min(n, len(group)), replace=False)]
    return val


def cmd_phantom_gen(cfg: ExperimentConfig, out, workers: int = 1) -> dict:
    manifest = generate_corpus(cfg.phantom, out, workers=workers)
    return {"corpus": str(out), "n_cases": len(manifest["cases"])}


def _case_sources(annotations_dir: Path, volumes_dir: Path):
    """(case_id, annotation file, volume file) from case directories or flat files."""
    found = []
    for sub in sorted(p for p in annotations_dir.iterdir() if p.is_dir()):
        if (sub / corpus.ANNOTATION_FILE).exists():
            found.append((sub.name, sub / corpus.ANNOTATION_FILE))
    found += [(p.stem, p) for p in sorted(annotations_dir.glob("*.csv"))]
    out = []
    for case_id, ann in found:
        for vol in (volumes_dir / case_id / corpus.IMAGE_FILE, volumes_dir / f"{case_id}.nii"):
            if vol.exists():
                out.append((case_id, ann, vol))
                break
        else:
            raise FileNotFoundError(f"no volume for case {case_id} under {volumes_dir}")
    return out


def cmd_build_labels(cfg: ExperimentConfig, annotations_dir, volumes_dir, out, workers: int = 1) -> dict:
    """Label volumes on the resampled grid of each case's image."""
    out = Path(out)
    sources = _case_sources(Path(annotations_dir), Path(volumes_dir))

    def one(src):
        case_id, ann_path, vol_path = src
        vol = load_volume(vol_path)
        shape = resampled_shape(vol.shape, vol.spacing, cfg.target_spacing)
        ref = Volume(np.zeros(shape, np.uint8), (cfg.target_spacing,) * 3, vol.origin)
        labels = build_label_volume(
            parse_annotations(ann_path, case_id=case_id), ref, cfg.phantom.label_radii_mm, cfg.phantom.label_flatten
        )
        (out / case_id).mkdir(parents=True, exist_ok=True)
        save_volume(labels, out / case_id / corpus.LABEL_FILE)
        return case_id

    with ThreadPoolExecutor(max(workers, 1)) as pool:
        done = list(pool.map(one, sources))
    return {"out": str(out), "cases": done}


def cmd_train(cfg: ExperimentConfig, corpus_dir, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cases = corpus.load_corpus(corpus_dir, cfg.target_spacing)
    if not cases:
        raise UsageError(f"corpus {corpus_dir} has no cases")
    val_ids = set(_split_validation(cases, cfg.evaluation.val_fraction, cfg.training.seed))
    tcases = [TrainingCase(c.case_id, c.image, c.labels) for c in cases if c.case_id not in val_ids]
    vcases = [TrainingCase(c.case_id, c.image, c.labels) for c in cases if c.case_id in val_ids]
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    weights, history = train(tcases, vcases, cfg.network, cfg.training, keep_best=cfg.evaluation.keep_best,
                             log_path=log_path)
    meta = {
        "training": cfg.training.to_dict(),
        "train_ids": [c.case_id for c in tcases],
        "val_ids": [c.case_id for c in vcases],
        "best_epoch": history.best_epoch,
        "target_spacing": cfg.target_spacing,
    }
    save_checkpoint(out / "model.npz", cfg.network, weights, meta)
    return {"checkpoint": str(out / "model.npz"), "log": str(log_path), "epochs": len(history)}


def cmd_infer(cfg: ExperimentConfig, volume, checkpoint, out) -> dict:
    net_cfg, weights, meta = load_checkpoint(checkpoint)
    image = preprocess(load_volume(volume), meta.get("target_spacing", cfg.target_spacing))
    pmap = infer_volume(image, net_cfg, weights, cfg.evaluation.tile)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    pmap.save(out)
    return {"map": str(out), "shape": list(pmap.shape)}


def cmd_aggregate(cfg: ExperimentConfig, map_path, mode: str, out, annotations=None, case_id=None) -> list[dict]:
    pmap = ProbabilityMap.load(map_path)
    agg = cfg.aggregation
    case_id = case_id or Path(map_path).name.split(".")[0]
    if mode == "patient":
        hp = PatientHyperparams(agg.probability_threshold, agg.noise_threshold)
        res = patient_detect(pmap, hp)
        records = [{
            "case_id": case_id,
            "probability_threshold": hp.probability_threshold,
            "noise_threshold": hp.noise_threshold,
            "fracture_voxel_count": res.fracture_voxel_count,
            "n_components": len(res.components),
            "decision": res.decision,
        }]
    elif mode == "vertebra":
        if annotations is None:
            raise UsageError("vertebra mode needs --annotations")
        ann = parse_annotations(annotations, case_id=case_id)
        ref = Volume(pmap.fracture, pmap.spacing, pmap.origin)
        visible = [a for a in ann if ref.contains_point(a.centroid)]
        rng = np.random.default_rng([cfg.seed or 0, 7])
        noisy = perturb_centroids([a.centroid for a in visible], agg.centroid_noise_mm, rng, ref.world_bounds())
        records = []
        for a, c in zip(visible, noisy):
            vs = vertebra_score(pmap, c, agg.cube_size, agg.sigma_mm, a.name)
            records.append({"case_id": case_id, "vertebra": a.name, "score": vs.score, "grade": a.grade,
                            "centroid_used": list(vs.centroid)})
    else:
        raise UsageError(f"unknown mode {mode!r}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.unlink(missing_ok=True)
    write_records(records, out)
    return records


def cmd_evaluate(cfg: ExperimentConfig, corpus_dir, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cases = corpus.load_corpus(corpus_dir, cfg.target_spacing)

    def on_fold(fold, weights, held_out, maps):
        save_checkpoint(out / f"fold{fold.index}.npz", cfg.network, weights, {"fold": fold.index})
        for case in held_out[:2]:
            plot_overlay(case.image, maps[case.case_id], out / f"overlay_{case.case_id}.png")

    report = run_cross_validation(cases, cfg.network, cfg.training, cfg.evaluation, on_fold)
    write_report(report, out)
    return {
        "report": str(out / "report.json"),
        "digest": report["digest"],
        "patient_auc": report["patient"]["auc"],
        "vertebra_auc": report["vertebra"]["auc"],
    }


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", required=True)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="spinefrac", description="Vertebral fracture detection on 3D volumes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("phantom-gen", parents=[common], help="write a synthetic corpus")
    p = sub.add_parser("build-labels", parents=[common], help="label volumes from centroid annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--volumes", required=True)
    p = sub.add_parser("train", parents=[common], help="train one model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, help="overrides training.epochs")
    p = sub.add_parser("infer", parents=[common], help="probability map for one volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("aggregate", parents=[common], help="patient or vertebra decisions from a map")
    p.add_argument("--map", required=True)
    p.add_argument("--mode", choices=("patient", "vertebra"), required=True)
    p.add_argument("--annotations")
    p.add_argument("--case-id")
    p = sub.add_parser("evaluate", parents=[common], help="cross-validation report")
    p.add_argument("--corpus", required=True)
    return parser


def run(argv=None) -> dict | list:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = load_config(args.config).with_seed(args.seed)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.command == "phantom-gen":
        return cmd_phantom_gen(cfg, args.out, args.workers)
    if args.command == "build-labels":
        return cmd_build_labels(cfg, args.annotations, args.volumes, args.out, args.workers)
    if args.command == "train":
        if args.epochs is not None:
            cfg = replace(cfg, training=TrainingConfig.from_dict({**cfg.training.to_dict(), "epochs": args.epochs}))
        return cmd_train(cfg, args.corpus, args.out)
    if args.command == "infer":
        return cmd_infer(cfg, args.volume, args.checkpoint, args.out)
    if args.command == "aggregate":
        return cmd_aggregate(cfg, args.map, args.mode, args.out, args.annotations, args.case_id)
    return cmd_evaluate(cfg, args.corpus, args.out)


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (CheckpointFormatError, VolumeFormatError, AnnotationParseError, AnnotationValidationError,
                        OSError)):
        return EXIT_FORMAT
    if isinstance(exc, ValueError):
        return EXIT_USAGE
    return EXIT_ERROR


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit:
        raise
    except Exception as exc:
        code = _exit_code(exc)
        record = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        return code
    print(json.dumps({"status": "ok", "result": result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
