"""Label harmonization from source-dataset vocabularies into the 9-label space."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd

logger = logging.getLogger(__name__)

PATHOLOGY_LABELS = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Nodule/Mass",
    "Pleural thickening",
    "Pneumothorax",
    "Pulmonary fibrosis",
    "Pneumonia",
]
NORMAL_LABEL = "Normal"
HARMONIZATION_COLUMNS = {"source", "source_label", "target_label"}
LABEL_SPACE = [*PATHOLOGY_LABELS, NORMAL_LABEL]
TRIAGE_CLASSES = ["Normal", "Abnormal"]

# Source vocabularies that differ from the canonical names. Keys are lower-cased.
_DEFAULT_ALIASES: Dict[str, List[str]] = {
    "mass": ["Nodule/Mass"],
    "nodule": ["Nodule/Mass"],
    "nodule/mass": ["Nodule/Mass"],
    "no finding": ["Normal"],
    "normal": ["Normal"],
    "fibrosis": ["Pulmonary fibrosis"],
    "pulmonary fibrosis": ["Pulmonary fibrosis"],
    "pleural_thickening": ["Pleural thickening"],
    "pleural thickening": ["Pleural thickening"],
    "atelectasis": ["Atelectasis"],
    "cardiomegaly": ["Cardiomegaly"],
    "consolidation": ["Consolidation"],
    "pneumothorax": ["Pneumothorax"],
    "pneumonia": ["Pneumonia"],
}

OUT_OF_SCOPE = "out-of-scope label"


class HarmonizationMap:
    """Maps (source, source_label) pairs onto canonical label names."""

    def __init__(self, extra: Optional[Dict[Tuple[str, str], List[str]]] = None):
        """Initialize the map with built-in aliases.

        Args:
            extra: Source-specific overrides keyed by (source, source_label)
        """
        self.aliases = {k: list(v) for k, v in _DEFAULT_ALIASES.items()}
        self.overrides: Dict[Tuple[str, str], List[str]] = {}
        for (source, label), targets in (extra or {}).items():
            self.add(source, label, targets)

        logger.debug(
            f"Harmonization map: {len(self.aliases)} aliases, {len(self.overrides)} overrides"
        )

    def add(self, source: str, source_label: str, targets: List[str]) -> None:
        for target in targets:
            if target not in LABEL_SPACE:
                raise ValueError(f"Mapping target '{target}' is not in the label space")
        self.overrides[(source.strip().lower(), source_label.strip().lower())] = list(targets)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "HarmonizationMap":
        """Load extra mappings from a ``source,source_label,target_label`` CSV.

        An empty target_label maps the source label to nothing.
        """
        mapping = cls()
        grouped: Dict[Tuple[str, str], List[str]] = {}
        try:
            df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
        except pd.errors.EmptyDataError:
            raise ValueError(f"Harmonization file {path} is empty") from None
        missing = HARMONIZATION_COLUMNS - set(df.columns)
        if missing:
            raise ValueError(f"Harmonization file {path} missing columns: {sorted(missing)}")
        for row in df.to_dict("records"):
            key = (row["source"], row["source_label"])
            target = row["target_label"].strip()
            grouped.setdefault(key, [])
            if target:
                grouped[key].append(target)
        for (source, label), targets in grouped.items():
            mapping.add(source, label, targets)
        logger.info(f"Loaded {len(grouped)} harmonization rule(s) from {path}")
        return mapping

    def map_label(self, source_label: str, source: str = "") -> Tuple[List[str], str]:
        """Map one source label.

        Returns:
            Tuple of (canonical names, reason); reason is empty when mapped
        """
        key = source_label.strip().lower()
        override = self.overrides.get((source.strip().lower(), key))
        if override is not None:
            return list(override), "" if override else "mapped to nothing by rule"
        if source_label in LABEL_SPACE:
            return [source_label], ""
        if key in self.aliases:
            return list(self.aliases[key]), ""
        return [], OUT_OF_SCOPE

    def harmonize(self, source_label: str, source: str = "") -> List[str]:
        labels, reason = self.map_label(source_label, source)
        if not labels:
            logger.warning(f"Dropping label '{source_label}' from source '{source}': {reason}")
        return labels


_default_map: Optional[HarmonizationMap] = None


def harmonize(
    source_label: str, source: str = "", mapping: Optional[HarmonizationMap] = None
) -> List[str]:
    """Map a source label into the label space (empty list when out of scope)."""
    global _default_map
    if mapping is None:
        if _default_map is None:
            _default_map = HarmonizationMap()
        mapping = _default_map
    return mapping.harmonize(source_label, source)
