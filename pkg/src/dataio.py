"""Manifest loading, patient-grouped splitting, class statistics and synthetic data."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from label_map import LABEL_SPACE, NORMAL_LABEL, PATHOLOGY_LABELS, HarmonizationMap
from utils import derive_rng

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["image_path", "patient_id", "source", "split", "labels", "view"]
SPLITS = ("train", "val", "test", "unassigned")
DEFAULT_FRACTIONS = (0.70, 0.20, 0.10)
NORMAL_INDEX = LABEL_SPACE.index(NORMAL_LABEL)


class ManifestError(Exception):
    """Manifest row failed validation."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row
        self.message = message


class SplitError(Exception):
    """Records cannot be split as requested."""


@dataclass
class SampleRecord:
    """One image with its patient, source and multi-hot labels."""

    image_path: str
    patient_id: str
    source: str
    split: str
    labels: np.ndarray
    view: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != (len(LABEL_SPACE),):
            raise ValueError(f"labels must have length {len(LABEL_SPACE)}")
        if self.labels[NORMAL_INDEX] and self.labels[:NORMAL_INDEX].any():
            raise ValueError("Normal is mutually exclusive with pathology labels")

    @property
    def label_names(self) -> List[str]:
        return [name for name, flag in zip(LABEL_SPACE, self.labels) if flag]

    @property
    def is_normal(self) -> bool:
        return bool(self.labels[NORMAL_INDEX])

    @property
    def triage_target(self) -> int:
        """0 for Normal, 1 for any pathology."""
        return 0 if self.is_normal else 1

    @property
    def pathology_target(self) -> np.ndarray:
        return self.labels[:NORMAL_INDEX].astype(np.float64)


def encode_labels(names: Sequence[str]) -> np.ndarray:
    vec = np.zeros(len(LABEL_SPACE), dtype=np.int8)
    for name in names:
        vec[LABEL_SPACE.index(name)] = 1
    return vec


def _parse_row(
    row_number: int, row: Dict[str, str], mapping: Optional[HarmonizationMap]
) -> Optional[SampleRecord]:
    for column in ("image_path", "patient_id"):
        if not row[column].strip():
            raise ManifestError(row_number, f"empty {column}")
    split = row["split"].strip() or "unassigned"
    if split not in SPLITS:
        raise ManifestError(row_number, f"unknown split '{split}'")

    raw = [part.strip() for part in row["labels"].split("|") if part.strip()]
    if not raw:
        raise ManifestError(row_number, "labels field is empty")

    names: List[str] = []
    for label in raw:
        if mapping is None:
            if label not in LABEL_SPACE:
                raise ManifestError(row_number, f"unknown label '{label}'")
            mapped = [label]
        else:
            mapped, reason = mapping.map_label(label, row["source"])
            if not mapped:
                logger.warning(f"Row {row_number}: dropping label '{label}' ({reason})")
        for name in mapped:
            if name not in names:
                names.append(name)

    if not names:
        logger.warning(f"Row {row_number}: no labels left after harmonization, sample dropped")
        return None
    if NORMAL_LABEL in names and len(names) > 1:
        raise ManifestError(
            row_number, f"Normal cannot be combined with pathologies ({'|'.join(names)})"
        )
    return SampleRecord(
        image_path=row["image_path"].strip(),
        patient_id=row["patient_id"].strip(),
        source=row["source"].strip(),
        split=split,
        labels=encode_labels(names),
        view=row["view"].strip(),
    )


def load_manifest(
    path: Union[str, Path], mapping: Optional[HarmonizationMap] = None
) -> List[SampleRecord]:
    """Read and validate a manifest CSV.

    Without ``mapping`` only canonical label names are accepted. With a
    ``mapping`` source labels are harmonized first and out-of-scope labels
    are dropped.

    Raises:
        ManifestError: Addressed by file row (the header is row 1)
    """
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ManifestError(1, "manifest is empty") from None
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestError(1, f"missing column(s): {', '.join(missing)}")

    records = []
    for index, row in enumerate(df[MANIFEST_COLUMNS].to_dict("records")):
        record = _parse_row(index + 2, row, mapping)
        if record is not None:
            records.append(record)
    logger.info(f"Loaded {len(records)} record(s) from {path}")
    return records


def write_manifest(records: Sequence[SampleRecord], path: Union[str, Path]) -> None:
    rows = [
        {
            "image_path": r.image_path,
            "patient_id": r.patient_id,
            "source": r.source,
            "split": r.split,
            "labels": "|".join(r.label_names),
            "view": r.view,
        }
        for r in records
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(
        path, index=False, lineterminator="\n", encoding="utf-8"
    )


def records_in_split(records: Sequence[SampleRecord], split: str) -> List[SampleRecord]:
    return [r for r in records if r.split == split]


def resolve_image_path(record: SampleRecord, root: Union[str, Path]) -> Path:
    path = Path(record.image_path)
    return path if path.is_absolute() else Path(root) / path


def split_by_patient(
    records: Sequence[SampleRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> List[SampleRecord]:
    """Assign train/val/test so that each patient lands in exactly one split.

    Patients are shuffled with ``seed`` and laid end to end; a patient goes to
    the split whose cumulative target contains the midpoint of its samples.
    """
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    if not records:
        raise SplitError("no records to split")

    groups: Dict[str, List[int]] = {}
    for index, record in enumerate(records):
        groups.setdefault(record.patient_id, []).append(index)
    if len(groups) < 3:
        raise SplitError(f"need at least 3 patients to split, got {len(groups)}")

    patients = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(patients))
    total = len(records)
    bounds = np.cumsum(fractions) * total

    assigned: List[Optional[str]] = [None] * total
    cursor = 0
    for position in order:
        members = groups[patients[position]]
        midpoint = cursor + len(members) / 2.0
        split_index = int(np.searchsorted(bounds, midpoint, side="right"))
        split = ("train", "val", "test")[min(split_index, 2)]
        for index in members:
            assigned[index] = split
        cursor += len(members)

    result = [replace(r, split=s) for r, s in zip(records, assigned)]
    counts = {s: sum(1 for r in result if r.split == s) for s in ("train", "val", "test")}
    logger.info(f"Split {total} sample(s) from {len(groups)} patient(s): {counts}")
    return result


@dataclass
class ClassStats:
    """Per-class positive counts and frequencies over a record set."""

    positives: np.ndarray
    n_samples: int
    n_patients: int
    class_names: List[str] = field(default_factory=lambda: list(LABEL_SPACE))

    @classmethod
    def from_counts(
        cls, positives: Sequence[int], n_samples: int, n_patients: int
    ) -> "ClassStats":
        if n_samples <= 0:
            raise SplitError("class statistics need at least one sample")
        return cls(np.asarray(positives, dtype=np.int64), int(n_samples), int(n_patients))

    @property
    def negatives(self) -> np.ndarray:
        return self.n_samples - self.positives

    @property
    def freq_p(self) -> np.ndarray:
        return self.positives / self.n_samples

    @property
    def freq_n(self) -> np.ndarray:
        return 1.0 - self.freq_p

    @property
    def zero_positive(self) -> List[str]:
        return [n for n, c in zip(self.class_names, self.positives) if c == 0]

    @property
    def zero_negative(self) -> List[str]:
        return [n for n, c in zip(self.class_names, self.negatives) if c == 0]

    def __add__(self, other: "ClassStats") -> "ClassStats":
        return ClassStats.from_counts(
            self.positives + other.positives,
            self.n_samples + other.n_samples,
            self.n_patients + other.n_patients,
        )


def compute_class_stats(records: Sequence[SampleRecord]) -> ClassStats:
    """Counts and frequencies per label over ``records`` (normally the train split)."""
    if not records:
        raise SplitError("class statistics need at least one sample")
    matrix = np.stack([r.labels for r in records]).astype(np.int64)
    stats = ClassStats.from_counts(
        matrix.sum(axis=0), len(records), len({r.patient_id for r in records})
    )
    for name in stats.zero_positive:
        logger.warning(f"Class '{name}' has no positive samples")
    for name in stats.zero_negative:
        logger.warning(f"Class '{name}' has no negative samples")
    return stats


@dataclass
class AuditReport:
    """Sanity checks over a manifest before training."""

    split_counts: Dict[str, Dict[str, int]]
    duplicate_paths: List[str]
    missing_files: List[str]
    leaked_patients: List[str]
    empty_labels: List[str]

    @property
    def ok(self) -> bool:
        return not (self.missing_files or self.leaked_patients)

    def to_dict(self) -> Dict[str, object]:
        return {
            "ok": self.ok,
            "split_counts": self.split_counts,
            "duplicate_paths": self.duplicate_paths,
            "missing_files": self.missing_files,
            "leaked_patients": self.leaked_patients,
            "empty_labels": self.empty_labels,
        }


def audit_manifest(
    records: Sequence[SampleRecord], root: Optional[Union[str, Path]] = None
) -> AuditReport:
    """Class counts per split plus duplicate, missing-file and leakage checks."""
    split_counts: Dict[str, Dict[str, int]] = {}
    for record in records:
        counts = split_counts.setdefault(record.split, {name: 0 for name in LABEL_SPACE})
        for name in record.label_names:
            counts[name] += 1

    seen: Dict[str, int] = {}
    for record in records:
        seen[record.image_path] = seen.get(record.image_path, 0) + 1
    duplicates = sorted(p for p, n in seen.items() if n > 1)

    missing = []
    if root is not None:
        missing = sorted(
            r.image_path for r in records if not resolve_image_path(r, root).exists()
        )

    patient_splits: Dict[str, set] = {}
    for record in records:
        if record.split != "unassigned":
            patient_splits.setdefault(record.patient_id, set()).add(record.split)
    leaked = sorted(p for p, s in patient_splits.items() if len(s) > 1)

    empty = sorted(r.image_path for r in records if not r.labels.any())

    report = AuditReport(split_counts, duplicates, missing, leaked, empty)
    if leaked:
        logger.warning(f"{len(leaked)} patient(s) appear in more than one split")
    if missing:
        logger.warning(f"{len(missing)} image file(s) missing")
    return report


# ---------------------------------------------------------------------------
# Synthetic radiographs
# ---------------------------------------------------------------------------

FINDING_PRIMITIVES = {
    "Atelectasis": "plate_band",
    "Cardiomegaly": "enlarged_heart",
    "Consolidation": "dense_patch",
    "Nodule/Mass": "bright_ellipse",
    "Pleural thickening": "pleural_rim",
    "Pneumothorax": "apical_dark_band",
    "Pulmonary fibrosis": "reticular_lines",
    "Pneumonia": "texture_haze",
}


def default_mixture() -> Dict[str, float]:
    """Half Normal, the rest spread evenly over the pathologies."""
    share = 0.5 / len(PATHOLOGY_LABELS)
    return {**{name: share for name in PATHOLOGY_LABELS}, NORMAL_LABEL: 0.5}


def _allocate(mixture: Dict[str, float], n_samples: int) -> List[str]:
    names = list(mixture)
    weights = np.array([mixture[n] for n in names], dtype=np.float64)
    if (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("mixture weights must be non-negative with a positive sum")
    exact = weights / weights.sum() * n_samples
    counts = np.floor(exact).astype(int)
    for index in np.argsort(-(exact - counts), kind="stable")[: n_samples - counts.sum()]:
        counts[index] += 1
    return [name for name, count in zip(names, counts) for _ in range(count)]


def _ellipse(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _draw_radiograph(label: str, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, List[str]]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = float(size)
    img = np.full((size, size), 25.0)

    jitter = rng.uniform(-0.02, 0.02, size=4) * s
    left = _ellipse(yy, xx, 0.48 * s + jitter[0], 0.31 * s + jitter[1], 0.33 * s, 0.15 * s)
    right = _ellipse(yy, xx, 0.48 * s + jitter[2], 0.69 * s + jitter[3], 0.33 * s, 0.15 * s)
    lungs = left | right
    img[lungs] = 70.0

    heart_scale = 1.6 if label == "Cardiomegaly" else 1.0
    heart = _ellipse(yy, xx, 0.66 * s, 0.46 * s, 0.13 * s, 0.11 * s * heart_scale)
    img[heart] = 150.0
    img[(np.abs(xx - 0.5 * s) < 0.04 * s) & (yy < 0.6 * s)] = 160.0

    drawn: List[str] = []
    side = left if rng.random() < 0.5 else right
    side_cx = 0.31 * s if side is left else 0.69 * s

    if label == "Cardiomegaly":
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Nodule/Mass":
        cy = rng.uniform(0.3, 0.6) * s
        r = rng.uniform(0.03, 0.06) * s
        img[_ellipse(yy, xx, cy, side_cx, r, r) & lungs] += 90.0
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Pneumothorax":
        band = side & (yy < 0.15 * s + yy[side].min())
        img[band] = 8.0
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Pneumonia":
        haze = rng.normal(0.0, 1.0, size=(size // 8 + 1, size // 8 + 1))
        haze = np.kron(haze, np.ones((8, 8)))[:size, :size]
        lower = side & (yy > 0.45 * s)
        img[lower] += 35.0 + 12.0 * haze[lower]
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Atelectasis":
        row = rng.uniform(0.55, 0.7) * s
        img[side & (np.abs(yy - row) < 0.015 * s)] += 60.0
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Consolidation":
        patch = _ellipse(yy, xx, 0.65 * s, side_cx, 0.09 * s, 0.09 * s) & side
        img[patch] += 65.0
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Pleural thickening":
        inner = _ellipse(yy, xx, 0.48 * s, side_cx, 0.30 * s, 0.125 * s)
        img[side & ~inner] += 55.0
        drawn.append(FINDING_PRIMITIVES[label])
    elif label == "Pulmonary fibrosis":
        period = max(4, size // 16)
        grid = ((yy.astype(int) % period) == 0) | ((xx.astype(int) % period) == 0)
        img[lungs & grid] += 40.0
        drawn.append(FINDING_PRIMITIVES[label])

    img += rng.normal(0.0, 3.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), drawn


def generate_synthetic(
    n_patients: int,
    image_size: int = 256,
    seed: int = 0,
    out_dir: Union[str, Path] = "synthetic",
    mixture: Optional[Dict[str, float]] = None,
    max_images_per_patient: int = 2,
) -> Tuple[List[SampleRecord], Dict[str, List[str]]]:
    """Draw grayscale radiograph stand-ins with one finding type per image.

    Writes ``images/*.png``, ``manifest.csv`` (paths relative to ``out_dir``)
    and ``ledger.json`` listing the primitives drawn into each image.

    Returns:
        Tuple of (records, ledger keyed by image path)
    """
    if n_patients < 3:
        raise ValueError(f"n_patients must be >= 3, got {n_patients}")
    mixture = mixture or default_mixture()
    for name in mixture:
        if name not in LABEL_SPACE:
            raise ValueError(f"Mixture label '{name}' is not in the label space")

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    per_patient = rng.integers(1, max_images_per_patient + 1, size=n_patients)
    labels = _allocate(mixture, int(per_patient.sum()))
    labels = [labels[i] for i in rng.permutation(len(labels))]

    records: List[SampleRecord] = []
    ledger: Dict[str, List[str]] = {}
    index = 0
    for patient, count in enumerate(per_patient):
        for shot in range(int(count)):
            label = labels[index]
            pixels, drawn = _draw_radiograph(label, image_size, derive_rng(seed, index))
            rel_path = f"images/p{patient:05d}_s{shot}.png"
            Image.fromarray(pixels).save(out / rel_path)
            records.append(
                SampleRecord(
                    image_path=rel_path,
                    patient_id=f"p{patient:05d}",
                    source="synthetic",
                    split="unassigned",
                    labels=encode_labels([label]),
                    view="PA",
                )
            )
            ledger[rel_path] = drawn
            index += 1

    write_manifest(records, out / "manifest.csv")
    (out / "ledger.json").write_text(json.dumps(ledger, indent=2, sort_keys=True) + "\n")
    logger.info(f"Generated {len(records)} synthetic image(s) for {n_patients} patient(s) in {out}")
    return records, ledger
