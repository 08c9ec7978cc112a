"""Two-stage triage engine and batch processing."""

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from dataio import load_manifest, resolve_image_path
from explain import ExplainError, grad_cam, overlay
from label_map import PATHOLOGY_LABELS, TRIAGE_CLASSES
from networks import MULTIPATH_HEAD, TRIAGE_HEAD, IncompatibleBundleError, ModelBundle, load_bundle
from preprocess import ImagePreprocessor, PreprocessConfig, PreprocessError, decode_image
from tensor_ops import TensorError
from utils import sanitize_filename

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".pgm", ".tif", ".tiff", ".bmp")
SUMMARY_COLUMNS = ["image_id", "status", "verdict", "p_abnormal", "flagged", "error"]
ABNORMAL = TRIAGE_CLASSES[1]


class PipelineError(Exception):
    """Pipeline cannot be set up or an image cannot be triaged."""


@dataclass
class PipelineConfig:
    stage1_bundle: str = ""
    stage2_bundle: str = ""
    stage1_threshold: float = 0.5
    stage2_threshold: float = 0.5
    emit_heatmaps: bool = False
    output_dir: str = "output"
    include_timing: bool = False
    parallelism: int = 1
    dump_dir: Optional[str] = None

    def __post_init__(self):
        for name in ("stage1_threshold", "stage2_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise PipelineError(f"{name} must be in (0, 1), got {value}")
        if self.parallelism < 1:
            raise PipelineError(f"parallelism must be >= 1, got {self.parallelism}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class TriageVerdict:
    """Decision for one image. Stage-2 fields are set only for Abnormal verdicts."""

    image_id: str
    stage1_probs: Tuple[float, float]
    verdict: str
    stage2_scores: Optional[List[float]] = None
    flagged_pathologies: Optional[List[str]] = None
    heatmaps: Optional[Dict[str, str]] = None
    timing: Optional[Dict[str, float]] = None

    @property
    def abnormal(self) -> bool:
        return self.verdict == ABNORMAL

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "image_id": self.image_id,
            "stage1_probs": {"normal": self.stage1_probs[0], "abnormal": self.stage1_probs[1]},
            "verdict": self.verdict,
        }
        if self.abnormal:
            data["stage2_scores"] = dict(zip(PATHOLOGY_LABELS, self.stage2_scores or []))
            data["flagged_pathologies"] = list(self.flagged_pathologies or [])
        if self.heatmaps:
            data["heatmaps"] = dict(self.heatmaps)
        if self.timing is not None:
            data["timing"] = dict(self.timing)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class ErrorRecord:
    image_id: str
    error: str

    def to_dict(self) -> Dict[str, Any]:
        return {"schema_version": SCHEMA_VERSION, "image_id": self.image_id, "error": self.error}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class TriageEngine:
    """Holds both bundles read-only and gates stage 2 on the stage-1 score."""

    def __init__(self, stage1: ModelBundle, stage2: ModelBundle, cfg: PipelineConfig):
        """Initialize triage engine.

        Args:
            stage1: Normal/Abnormal bundle (2 outputs)
            stage2: Pathology bundle (8 outputs)
            cfg: Thresholds and output settings
        """
        if stage1.spec.head.kind != TRIAGE_HEAD or stage1.spec.output_units != len(TRIAGE_CLASSES):
            raise IncompatibleBundleError(
                f"stage-1 bundle must be a {len(TRIAGE_CLASSES)}-class {TRIAGE_HEAD}, "
                f"got {stage1.spec.output_units}-output {stage1.spec.head.kind}"
            )
        if stage2.spec.head.kind != MULTIPATH_HEAD or stage2.spec.output_units != len(PATHOLOGY_LABELS):
            raise IncompatibleBundleError(
                f"stage-2 bundle must be a {len(PATHOLOGY_LABELS)}-class {MULTIPATH_HEAD}, "
                f"got {stage2.spec.output_units}-output {stage2.spec.head.kind}"
            )
        self.stage1 = stage1
        self.stage2 = stage2
        self.cfg = cfg
        self.pre1 = ImagePreprocessor(self._with_dump(stage1.preprocessing))
        self.pre2 = ImagePreprocessor(self._with_dump(stage2.preprocessing))
        self._stage2_runs = 0
        self._lock = threading.Lock()

        logger.info(
            f"Initialized triage engine (stage-1 threshold {cfg.stage1_threshold}, "
            f"stage-2 threshold {cfg.stage2_threshold})"
        )

    def _with_dump(self, preprocessing: PreprocessConfig) -> PreprocessConfig:
        if not self.cfg.dump_dir:
            return preprocessing
        return replace(preprocessing, dump_dir=self.cfg.dump_dir)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "TriageEngine":
        if not cfg.stage1_bundle or not cfg.stage2_bundle:
            raise PipelineError("both stage1_bundle and stage2_bundle must be configured")
        stage1 = load_bundle(cfg.stage1_bundle, expected_head=TRIAGE_HEAD)
        stage2 = load_bundle(cfg.stage2_bundle, expected_head=MULTIPATH_HEAD)
        return cls(stage1, stage2, cfg)

    @property
    def stage2_runs(self) -> int:
        with self._lock:
            return self._stage2_runs

    def classify(self, image: np.ndarray, image_id: str = "image") -> TriageVerdict:
        """Stage 1 always; stage 2 iff P(abnormal) >= stage-1 threshold."""
        timing: Dict[str, float] = {}
        started = time.perf_counter()
        stem = sanitize_filename(image_id.replace("/", "_"))
        x1 = self.pre1.process(image, name=f"{stem}_stage1")
        probs = self.stage1.predict(x1[None])[0]
        timing["stage1"] = time.perf_counter() - started
        p_normal, p_abnormal = float(probs[0]), float(probs[1])

        if p_abnormal < self.cfg.stage1_threshold:
            verdict = TriageVerdict(image_id, (p_normal, p_abnormal), TRIAGE_CLASSES[0])
        else:
            started = time.perf_counter()
            x2 = self.pre2.process(image, name=f"{stem}_stage2")
            scores = self.stage2.predict(x2[None])[0]
            timing["stage2"] = time.perf_counter() - started
            with self._lock:
                self._stage2_runs += 1
            flagged = [
                name for name, s in zip(PATHOLOGY_LABELS, scores) if s >= self.cfg.stage2_threshold
            ]
            verdict = TriageVerdict(
                image_id,
                (p_normal, p_abnormal),
                ABNORMAL,
                stage2_scores=[float(s) for s in scores],
                flagged_pathologies=flagged,
            )
            if self.cfg.emit_heatmaps:
                verdict.heatmaps = self._heatmaps(image_id, x1, x2, flagged)

        if self.cfg.include_timing:
            verdict.timing = timing
        logger.debug(f"{image_id}: {verdict.verdict} (P(abnormal)={p_abnormal:.4f})")
        return verdict

    def _heatmaps(
        self, image_id: str, x1: np.ndarray, x2: np.ndarray, flagged: List[str]
    ) -> Dict[str, str]:
        out_dir = Path(self.cfg.output_dir) / "heatmaps"
        stem = sanitize_filename(image_id.replace("/", "_"))
        paths = {}
        heat = grad_cam(self.stage1, x1, TRIAGE_CLASSES.index(ABNORMAL))
        paths[ABNORMAL] = str(overlay(heat, x1, out_dir / f"{stem}_{ABNORMAL}.png"))
        for name in flagged:
            heat = grad_cam(self.stage2, x2, PATHOLOGY_LABELS.index(name))
            target = out_dir / f"{stem}_{sanitize_filename(name.replace('/', '-'))}.png"
            paths[name] = str(overlay(heat, x2, target))
        return paths

    def process_path(self, path: Union[str, Path], image_id: Optional[str] = None) -> Union[TriageVerdict, ErrorRecord]:
        """Triage one file; decode or preprocessing failures become error records."""
        image_id = image_id or Path(path).name
        try:
            image = decode_image(path)
        except (PreprocessError, OSError) as e:
            logger.error(f"✗ {image_id}: {e}")
            return ErrorRecord(image_id, str(e))
        try:
            return self.classify(image, image_id)
        except (PreprocessError, TensorError, ExplainError, OSError) as e:
            logger.error(f"✗ {image_id}: {e}")
            return ErrorRecord(image_id, str(e))


def run_pipeline(
    image: Union[str, Path, np.ndarray], cfg: PipelineConfig, engine: Optional[TriageEngine] = None
) -> TriageVerdict:
    """Triage a single image given as a path or a decoded array."""
    engine = engine or TriageEngine.from_config(cfg)
    if isinstance(image, np.ndarray):
        return engine.classify(image)
    result = engine.process_path(image)
    if isinstance(result, ErrorRecord):
        raise PipelineError(f"Cannot triage {result.image_id}: {result.error}")
    return result


def collect_inputs(source: Union[str, Path]) -> List[Tuple[str, Path]]:
    """(image id, path) pairs sorted by id, from a directory or a manifest CSV."""
    source = Path(source)
    if source.is_dir():
        items = []
        for path in source.rglob("*"):
            if not path.is_file():
                continue
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                logger.debug(f"Skipping non-image file {path}")
                continue
            items.append((path.relative_to(source).as_posix(), path))
    elif source.is_file():
        records = load_manifest(source)
        items = [(r.image_path, resolve_image_path(r, source.parent)) for r in records]
    else:
        raise PipelineError(f"Input not found: {source}")
    ids = [image_id for image_id, _ in items]
    if len(set(ids)) != len(ids):
        raise PipelineError(f"duplicate image ids in {source}")
    return sorted(items, key=lambda item: item[0])


@dataclass
class BatchResult:
    verdicts: List[TriageVerdict] = field(default_factory=list)
    errors: List[ErrorRecord] = field(default_factory=list)
    ndjson_path: Optional[Path] = None
    summary_path: Optional[Path] = None
    interrupted: bool = False

    @property
    def processed(self) -> int:
        return len(self.verdicts)

    @property
    def exit_code(self) -> int:
        return 1 if self.errors or self.interrupted else 0

    def summary(self) -> Dict[str, int]:
        abnormal = sum(1 for v in self.verdicts if v.abnormal)
        return {
            "processed": self.processed,
            "normal": self.processed - abnormal,
            "abnormal": abnormal,
            "errors": len(self.errors),
        }


def _summary_row(record: Union[TriageVerdict, ErrorRecord]) -> Dict[str, Any]:
    if isinstance(record, ErrorRecord):
        return {"image_id": record.image_id, "status": "error", "error": record.error}
    return {
        "image_id": record.image_id,
        "status": "ok",
        "verdict": record.verdict,
        "p_abnormal": record.stage1_probs[1],
        "flagged": ";".join(record.flagged_pathologies or []),
    }


def run_batch(
    source: Union[str, Path],
    cfg: PipelineConfig,
    parallelism: Optional[int] = None,
    engine: Optional[TriageEngine] = None,
    shutdown_event: Optional[threading.Event] = None,
) -> BatchResult:
    """Triage every image under ``source`` with a worker pool.

    Writes ``verdicts.ndjson`` (verdicts and error records, sorted by image id)
    and ``summary.csv`` to the configured output directory. Output bytes do
    not depend on ``parallelism``.
    """
    engine = engine or TriageEngine.from_config(cfg)
    workers = parallelism or cfg.parallelism
    items = collect_inputs(source)
    logger.info(f"Starting batch of {len(items)} image(s) with {workers} worker(s)...")

    results: Dict[str, Union[TriageVerdict, ErrorRecord]] = {}
    interrupted = False
    if items:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_id = {
                executor.submit(engine.process_path, path, image_id): image_id
                for image_id, path in items
            }
            for future in as_completed(future_to_id):
                if shutdown_event and shutdown_event.is_set():
                    logger.info("Shutdown requested, cancelling remaining images...")
                    for f in future_to_id:
                        f.cancel()
                    interrupted = True
                    break
                results[future_to_id[future]] = future.result()

    ordered = [results[image_id] for image_id, _ in items if image_id in results]
    result = BatchResult(
        verdicts=[r for r in ordered if isinstance(r, TriageVerdict)],
        errors=[r for r in ordered if isinstance(r, ErrorRecord)],
        interrupted=interrupted,
    )

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.ndjson_path = out_dir / "verdicts.ndjson"
    result.ndjson_path.write_text("".join(r.to_json() + "\n" for r in ordered), encoding="utf-8")
    result.summary_path = out_dir / "summary.csv"
    frame = pd.DataFrame([_summary_row(r) for r in ordered], columns=SUMMARY_COLUMNS)
    frame.to_csv(result.summary_path, index=False, lineterminator="\n")
    (out_dir / "summary.json").write_text(json.dumps(result.summary(), sort_keys=True) + "\n")

    counts = result.summary()
    logger.info(
        f"Batch complete: {counts['processed']} processed "
        f"({counts['abnormal']} abnormal), {counts['errors']} failed"
    )
    return result
