"""Main entry point for the chest X-ray triage engine."""

import argparse
import json
import logging
import signal
import sys
import threading
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import Config
from dataio import (
    ManifestError,
    SampleRecord,
    SplitError,
    audit_manifest,
    compute_class_stats,
    generate_synthetic,
    load_manifest,
    records_in_split,
    split_by_patient,
    write_manifest,
)
from evaluation import (
    EvalReport,
    MetricError,
    default_grid,
    evaluate_multilabel,
    evaluate_triage,
    roc_auc,
    threshold_sweep,
)
from explain import ExplainError, dump_heatmap_csv, grad_cam, overlay
from label_map import NORMAL_LABEL, PATHOLOGY_LABELS, HarmonizationMap
from networks import (
    MULTIPATH_HEAD,
    TRIAGE_HEAD,
    BundleError,
    ModelBundle,
    build_multipath_net,
    build_triage_net,
    load_bundle,
    multipath_spec,
    transplant_extractor,
)
from pipeline import PipelineConfig, PipelineError, TriageEngine, run_batch, run_pipeline
from preprocess import ImagePreprocessor, PreprocessError, decode_image
from report_generator import ReportGenerator, plot_history, plot_roc_curves
from tensor_ops import TensorError
from training import (
    BatchLoader,
    TrainConfig,
    Trainer,
    TrainingError,
    compute_weights,
    make_loss,
    predict_dataset,
    run_lock,
    triage_class_weights,
)
from utils import sanitize_filename

DOMAIN_ERRORS = (
    BundleError,
    ExplainError,
    ManifestError,
    MetricError,
    PipelineError,
    PreprocessError,
    SplitError,
    TensorError,
    TrainingError,
    FileNotFoundError,
)

# Global shutdown event for graceful termination
shutdown_event = threading.Event()


def _shutdown_handler(signum, frame):
    """Handle SIGTERM/SIGINT for graceful shutdown."""
    sig_name = signal.Signals(signum).name
    logger = logging.getLogger(__name__)
    logger.info(f"Received {sig_name}, shutting down gracefully...")
    shutdown_event.set()


signal.signal(signal.SIGTERM, _shutdown_handler)
signal.signal(signal.SIGINT, _shutdown_handler)


def setup_logging(verbose: bool = False, log_dir: Optional[Path] = None) -> logging.Logger:
    """Configure logging.

    Args:
        verbose: Enable verbose logging
        log_dir: Directory for cxr_triage.log

    Returns:
        Configured logger
    """
    log_dir = log_dir or Config.get_project_root() / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)

    level = logging.DEBUG if verbose else logging.INFO

    formatter = logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s: %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
    )

    file_handler = logging.FileHandler(log_dir / "cxr_triage.log")
    file_handler.setFormatter(formatter)
    file_handler.setLevel(level)

    # stdout carries machine-readable results
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(level)

    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        if getattr(handler, "_cxr_triage", False):
            root_logger.removeHandler(handler)
            handler.close()
    for handler in (file_handler, console_handler):
        handler._cxr_triage = True
        root_logger.addHandler(handler)
    root_logger.setLevel(level)

    return root_logger


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _fail(error: str, details: Sequence[str]) -> int:
    print(json.dumps({"error": error, "details": list(details)}, sort_keys=True), file=sys.stderr)
    return 1


def _seed(args, config: Config) -> int:
    """--seed, then CXR_SEED, then 0."""
    if args.seed is not None:
        return args.seed
    return config.default_seed if config.default_seed is not None else 0


def _with_seed(cfg: TrainConfig, args) -> TrainConfig:
    return cfg if args.seed is None else replace(cfg, seed=args.seed)


def _out_dir(args, config: Config) -> Path:
    out = Path(args.out) if args.out else Path(config.get("output.dir", "output")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_records(args, config: Config) -> List[SampleRecord]:
    mapping_csv = config.get("data.harmonization_csv")
    mapping = HarmonizationMap.from_csv(mapping_csv) if mapping_csv else None
    return load_manifest(args.manifest, mapping)


def _root(args) -> Path:
    return Path(args.root) if args.root else Path(args.manifest).parent


def _network_size(config: Config) -> Dict[str, Any]:
    return {
        "width_scale": float(config.get("network.width_scale", 1.0)),
        "input_size": int(config.get("preprocess.target_size")[0]),
        "head_scale": float(config.get("network.head_scale", 1.0)),
    }


def _loaders(
    bundle: ModelBundle,
    train_records: List[SampleRecord],
    val_records: List[SampleRecord],
    train_targets: np.ndarray,
    val_targets: np.ndarray,
    root: Path,
    cfg: TrainConfig,
    config: Config,
):
    preprocessor = ImagePreprocessor(bundle.preprocessing)
    augment_cfg = config.augment_config() if cfg.augment else None
    train = BatchLoader(
        train_records, root, preprocessor, train_targets, cfg.batch_size, augment_cfg, cfg.seed, cfg.workers
    )
    val = BatchLoader(val_records, root, preprocessor, val_targets, cfg.batch_size, None, cfg.seed, cfg.workers)
    return train, val


def _triage_targets(records: Sequence[SampleRecord]) -> np.ndarray:
    abnormal = np.array([r.triage_target for r in records], dtype=np.float64)
    return np.stack([1.0 - abnormal, abnormal], axis=1) if len(records) else np.zeros((0, 2))


def _pathology_targets(records: Sequence[SampleRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, len(PATHOLOGY_LABELS)))
    return np.stack([r.pathology_target for r in records])


def _fit(trainer: Trainer, args, out: Path) -> int:
    with run_lock(out):
        if args.resume:
            trainer.resume(args.resume)
        result = trainer.fit()
    if result.history:
        frame = pd.DataFrame([asdict(r) for r in result.history])
        plot_history(frame, out / "history.png")
    if result.interrupted:
        return _fail("Interrupted", [f"checkpoint written to {result.checkpoint}"])
    last = result.history[-1] if result.history else None
    _emit(
        {
            "bundle": str(out / "best.bundle"),
            "epochs": len(result.history),
            "final_val_loss": last.val_loss if last else None,
            "final_val_auc": last.val_auc_macro if last else None,
        }
    )
    return 0


def cmd_gen_data(args, config: Config) -> int:
    synthetic = config.get("data.synthetic", {})
    out = _out_dir(args, config)
    records, _ = generate_synthetic(
        n_patients=args.n_patients or synthetic.get("n_patients", 600),
        image_size=args.image_size or synthetic.get("image_size", 96),
        seed=_seed(args, config),
        out_dir=out,
        max_images_per_patient=synthetic.get("max_images_per_patient", 2),
    )
    records = split_by_patient(records, config.get("data.split_fractions"), seed=_seed(args, config))
    write_manifest(records, out / "manifest.csv")
    counts = {s: len(records_in_split(records, s)) for s in ("train", "val", "test")}
    _emit({"manifest": str(out / "manifest.csv"), "images": len(records), "splits": counts})
    return 0


def cmd_train_triage(args, config: Config) -> int:
    cfg = _with_seed(config.train_config("stage1"), args)
    out = _out_dir(args, config)
    records = _load_records(args, config)
    train_records = records_in_split(records, "train")
    val_records = records_in_split(records, "val")

    bundle = build_triage_net(seed=cfg.seed, **_network_size(config))
    bundle.preprocessing = replace(config.preprocess_config(), dump_dir=None)
    bundle.threshold = cfg.threshold
    weights = None
    if cfg.class_weighted and train_records:
        stats = compute_class_stats(train_records)
        weights = triage_class_weights(stats, stats.class_names.index(NORMAL_LABEL))
    train, val = _loaders(
        bundle,
        train_records,
        val_records,
        _triage_targets(train_records),
        _triage_targets(val_records),
        _root(args),
        cfg,
        config,
    )
    trainer = Trainer(bundle, train, val, make_loss("categorical", weights), cfg, out, shutdown_event)
    return _fit(trainer, args, out)


def _stage2_records(records: Sequence[SampleRecord], split: str, include_normal: bool) -> List[SampleRecord]:
    selected = records_in_split(records, split)
    return selected if include_normal else [r for r in selected if not r.is_normal]


def cmd_train_classifier(args, config: Config) -> int:
    cfg = _with_seed(config.train_config("stage2"), args)
    out = _out_dir(args, config)
    records = _load_records(args, config)
    train_records = _stage2_records(records, "train", cfg.include_normal)
    val_records = _stage2_records(records, "val", cfg.include_normal)

    size = _network_size(config)
    if args.source:
        source = load_bundle(args.source, expected_head=TRIAGE_HEAD)
        bundle = transplant_extractor(source, multipath_spec(**size), seed=cfg.seed)
    else:
        bundle = build_multipath_net(seed=cfg.seed, **size)
    bundle.preprocessing = replace(config.preprocess_config(), dump_dir=None)
    bundle.threshold = cfg.threshold

    if not train_records:
        raise TrainingError("stage-2 training split is empty")
    stats = compute_class_stats(train_records)
    weights = compute_weights(stats, [stats.class_names.index(n) for n in PATHOLOGY_LABELS])
    train, val = _loaders(
        bundle,
        train_records,
        val_records,
        _pathology_targets(train_records),
        _pathology_targets(val_records),
        _root(args),
        cfg,
        config,
    )
    trainer = Trainer(bundle, train, val, make_loss("bce", weights), cfg, out, shutdown_event)
    return _fit(trainer, args, out)


def evaluate_bundle(
    bundle: ModelBundle, records: Sequence[SampleRecord], root: Path, threshold: float, batch_size: int = 16
):
    """(report, scores, labels, class names) for a bundle over ``records``."""
    preprocessor = ImagePreprocessor(bundle.preprocessing)
    if bundle.spec.head.kind == TRIAGE_HEAD:
        targets = _triage_targets(records)
        probs = predict_dataset(bundle, BatchLoader(records, root, preprocessor, targets, batch_size))
        report = evaluate_triage(probs, targets[:, 1], threshold, bundle.class_names)
        return report, probs[:, 1:], targets[:, 1:], [bundle.class_names[1]]
    targets = _pathology_targets(records)
    scores = predict_dataset(bundle, BatchLoader(records, root, preprocessor, targets, batch_size))
    report = evaluate_multilabel(scores, targets, bundle.class_names, threshold)
    return report, scores, targets, list(bundle.class_names)


def cmd_eval(args, config: Config) -> int:
    bundle = load_bundle(args.bundle)
    out = _out_dir(args, config)
    records = records_in_split(_load_records(args, config), args.split)
    if bundle.spec.head.kind == MULTIPATH_HEAD and not config.get("stage2.include_normal", False):
        records = [r for r in records if not r.is_normal]
    if not records:
        raise SplitError(f"no usable records in split '{args.split}'")
    threshold = args.threshold if args.threshold is not None else bundle.threshold

    report, scores, labels, names = evaluate_bundle(bundle, records, _root(args), threshold)
    ReportGenerator().write_all(report, out)
    np.savez(out / "scores.npz", scores=scores, labels=labels, class_names=np.array(names))
    sys.stdout.write(ReportGenerator().render(report, "text").decode("utf-8"))
    return 0


def _pipeline_config(args, config: Config) -> PipelineConfig:
    cfg = config.pipeline_config()
    overrides: Dict[str, Any] = {}
    if getattr(args, "stage1", None):
        overrides["stage1_bundle"] = args.stage1
    if getattr(args, "stage2", None):
        overrides["stage2_bundle"] = args.stage2
    if args.out:
        overrides["output_dir"] = args.out
    if getattr(args, "heatmaps", False):
        overrides["emit_heatmaps"] = True
    if getattr(args, "parallelism", None):
        overrides["parallelism"] = args.parallelism
    return replace(cfg, **overrides)


def cmd_infer(args, config: Config) -> int:
    cfg = _pipeline_config(args, config)
    verdict = run_pipeline(args.image, cfg)
    print(verdict.to_json())
    return 0


def cmd_batch(args, config: Config) -> int:
    cfg = _pipeline_config(args, config)
    engine = TriageEngine.from_config(cfg)
    result = run_batch(args.input, cfg, cfg.parallelism, engine, shutdown_event)
    _emit({**result.summary(), "verdicts": str(result.ndjson_path), "summary": str(result.summary_path)})
    return result.exit_code


def _target_index(target: Optional[str], class_names: List[str], scores: np.ndarray) -> int:
    if target is None:
        return int(np.argmax(scores))
    if target in class_names:
        return class_names.index(target)
    try:
        index = int(target)
    except ValueError:
        raise ExplainError(f"unknown class '{target}'; choose from {class_names}") from None
    if not 0 <= index < len(class_names):
        raise ExplainError(f"class index {index} out of range")
    return index


def cmd_gradcam(args, config: Config) -> int:
    bundle = load_bundle(args.bundle)
    out = _out_dir(args, config)
    x = ImagePreprocessor(bundle.preprocessing).process(decode_image(args.image))
    scores = bundle.predict(x[None])[0]
    index = _target_index(args.target, bundle.class_names, scores)

    heatmap = grad_cam(bundle, x, index, args.layer)
    stem = sanitize_filename(Path(args.image).stem)
    name = sanitize_filename(heatmap.class_name.replace("/", "-"))
    path = overlay(heatmap, x, out / f"{stem}_{name}.png")
    payload = {"overlay": str(path), "class": heatmap.class_name, "score": heatmap.score, "layer": heatmap.layer}
    if args.csv:
        payload["csv"] = str(dump_heatmap_csv(heatmap, args.csv))
    _emit(payload)
    return 0


def _load_scores(path: str):
    with np.load(path, allow_pickle=False) as data:
        return data["scores"], data["labels"], [str(n) for n in data["class_names"]]


def cmd_sweep_threshold(args, config: Config) -> int:
    scores, labels, names = _load_scores(args.scores)
    out = _out_dir(args, config)
    rows = threshold_sweep(scores, labels, default_grid(args.step), names)
    frame = pd.DataFrame(rows)
    frame.to_csv(out / "sweep.csv", index=False, lineterminator="\n")
    sys.stdout.write(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n")
    return 0


def cmd_report(args, config: Config) -> int:
    report = EvalReport.from_dict(json.loads(Path(args.report_json).read_text(encoding="utf-8")))
    out = _out_dir(args, config)
    generator = ReportGenerator()
    written = generator.write_all(report, out, args.format)
    if args.scores:
        scores, labels, names = _load_scores(args.scores)
        rocs = {}
        for i, name in enumerate(names):
            if 0 < labels[:, i].sum() < len(labels):
                rocs[name] = roc_auc(scores[:, i], labels[:, i])
        if rocs:
            written.append(plot_roc_curves(rocs, out / "roc.png"))
    if args.history:
        written.append(plot_history(pd.read_csv(args.history), out / "history.png"))
    _emit({"written": [str(p) for p in written]})
    return 0


def cmd_audit(args, config: Config) -> int:
    records = _load_records(args, config)
    report = audit_manifest(records, _root(args))
    _emit(report.to_dict())
    if not report.ok:
        return _fail(
            "AuditFailed",
            [
                f"{len(report.missing_files)} missing file(s)",
                f"{len(report.leaked_patients)} leaked patient(s)",
            ],
        )
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-triage": cmd_train_triage,
    "train-classifier": cmd_train_classifier,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "batch": cmd_batch,
    "gradcam": cmd_gradcam,
    "sweep-threshold": cmd_sweep_threshold,
    "report": cmd_report,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON config file")
    common.add_argument("--seed", type=int, help="Random seed (default: config or CXR_SEED)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")

    parser = argparse.ArgumentParser(description="Two-stage chest X-ray triage engine")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--n-patients", type=int)
    p.add_argument("--image-size", type=int)

    for name, help_text in (
        ("train-triage", "Train the Normal/Abnormal model"),
        ("train-classifier", "Train the pathology model"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--root", help="Image root (default: manifest directory)")
        p.add_argument("--resume", help="Checkpoint to continue from")
        if name == "train-classifier":
            p.add_argument("--source", help="Stage-1 bundle whose extractor is transplanted")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a bundle on a manifest split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("infer", parents=[common], help="Triage one image")
    p.add_argument("--image", required=True)
    p.add_argument("--stage1")
    p.add_argument("--stage2")
    p.add_argument("--heatmaps", action="store_true")

    p = sub.add_parser("batch", parents=[common], help="Triage a directory or manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--stage1")
    p.add_argument("--stage2")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--heatmaps", action="store_true")

    p = sub.add_parser("gradcam", parents=[common], help="Export a Grad-CAM overlay")
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target", help="Class name or index (default: top prediction)")
    p.add_argument("--layer", help="Layer to hook (default: the bundle's feature layer)")
    p.add_argument("--csv", help="Also write the raw heatmap grid as CSV")

    p = sub.add_parser("sweep-threshold", parents=[common], help="Metrics over a threshold grid")
    p.add_argument("--scores", required=True, help="scores.npz written by eval")
    p.add_argument("--step", type=float, default=0.05)

    p = sub.add_parser("report", parents=[common], help="Render an evaluation report")
    p.add_argument("--report-json", required=True, help="report.json written by eval")
    p.add_argument("--format", nargs="+", default=["text"], choices=["text", "csv", "json", "html"])
    p.add_argument("--scores", help="scores.npz for the ROC figure")
    p.add_argument("--history", help="history.csv for the training-curve figure")

    p = sub.add_parser("audit", parents=[common], help="Check a manifest for leakage and missing files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        config = Config(args.config)
    except (OSError, ValueError) as e:
        return _fail("ConfigError", [str(e)])
    setup_logging(args.verbose, config.log_dir)
    logger = logging.getLogger(__name__)

    ok, errors = config.validate()
    if not ok:
        for error in errors:
            logger.error(f"  - {error}")
        return _fail("ConfigError", errors)
    try:
        return COMMANDS[args.command](args, config)
    except DOMAIN_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return _fail(type(e).__name__, [str(e)])
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        shutdown_event.set()
        return 1


if __name__ == "__main__":
    sys.exit(main())
