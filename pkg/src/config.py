"""Configuration management for the triage engine."""

import copy
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from pipeline import PipelineConfig
from preprocess import AugmentConfig, PreprocessConfig
from training import COMPUTE_DTYPES, TrainConfig

STAGES = ("stage1", "stage2")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class Config:
    """Configuration manager for the triage engine."""

    @staticmethod
    def get_project_root() -> Path:
        """Get the logical project root, works for dev and bundled apps."""
        if getattr(sys, "frozen", False):
            return Path(sys.executable).parent
        return Path(__file__).parent.parent

    def __init__(self, config_path: Optional[Path] = None):
        """Initialize configuration.

        Args:
            config_path: Path to a YAML or JSON config file. Defaults to
                config.yaml in the project root.
        """
        self.project_root = self.get_project_root()
        self.config_path = Path(config_path) if config_path else self.project_root / "config.yaml"
        self.env_path = self.config_path.parent / ".env"

        load_dotenv(self.env_path)
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load the config file over the defaults (JSON parses as YAML)."""
        defaults = self._get_default_config()
        if not self.config_path.exists():
            return defaults

        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValueError(f"Cannot parse {self.config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ValueError(f"{self.config_path} must hold a mapping at the top level")
        return _deep_merge(defaults, loaded)

    def _get_default_config(self) -> Dict[str, Any]:
        """Return default configuration."""
        return {
            "preprocess": {
                "clahe_enabled": True,
                "clahe_clip": 2.0,
                "clahe_grid": [8, 8],
                "target_size": [224, 224],
                "dump_dir": None,
            },
            "augment": {
                "enabled": True,
                "hflip_prob": 0.5,
                "gain_range": [0.9, 1.1],
                "bias_range": [-0.1, 0.1],
                "crop_scale_range": [0.85, 1.0],
            },
            "network": {"width_scale": 1.0, "head_scale": 1.0},
            "stage1": {
                "two_phase": False,
                "epochs": 20,
                "lr0": 1e-3,
                "min_lr": 1e-5,
                "plateau_factor": 0.1,
                "plateau_patience": 2,
                "batch_size": 16,
                "seed": 0,
                "threshold": 0.5,
                "augment": True,
                "class_weighted": False,
                "workers": 4,
                "compute_dtype": "float32",
            },
            "stage2": {
                "two_phase": True,
                "phase1_epochs": 15,
                "phase2_epochs": 15,
                "lr0": 1e-3,
                "min_lr": 1e-5,
                "plateau_factor": 0.1,
                "plateau_patience": 2,
                "batch_size": 16,
                "seed": 0,
                "threshold": 0.5,
                "augment": True,
                "include_normal": False,
                "workers": 4,
                "compute_dtype": "float32",
            },
            "pipeline": {
                "stage1_bundle": "",
                "stage2_bundle": "",
                "stage1_threshold": 0.5,
                "stage2_threshold": 0.5,
                "emit_heatmaps": False,
                "output_dir": "output",
                "include_timing": False,
                "parallelism": 1,
            },
            "data": {
                "split_fractions": [0.7, 0.2, 0.1],
                "harmonization_csv": None,
                "synthetic": {
                    "n_patients": 600,
                    "image_size": 96,
                    "max_images_per_patient": 2,
                },
            },
            "output": {"dir": "output", "log_dir": "logs"},
        }

    def save(self):
        """Save current configuration to YAML file."""
        with open(self.config_path, "w", encoding="utf-8") as f:
            yaml.dump(self.config, f, default_flow_style=False, sort_keys=False)

    def get(self, key_path: str, default=None) -> Any:
        """Get configuration value by dot-separated path.

        Args:
            key_path: Dot-separated path (e.g., 'stage1.epochs')
            default: Default value if key not found

        Returns:
            Configuration value
        """
        keys = key_path.split(".")
        value = self.config

        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default

        return value

    def set(self, key_path: str, value: Any):
        """Set configuration value by dot-separated path.

        Args:
            key_path: Dot-separated path (e.g., 'pipeline.stage1_threshold')
            value: Value to set
        """
        keys = key_path.split(".")
        config = self.config

        for key in keys[:-1]:
            if key not in config:
                config[key] = {}
            config = config[key]

        config[keys[-1]] = value

    def get_env(self, key: str, default: Optional[str] = None) -> Optional[str]:
        """Get environment variable.

        Args:
            key: Environment variable name
            default: Default value if not found

        Returns:
            Environment variable value
        """
        return os.getenv(key, default)

    @property
    def log_dir(self) -> Path:
        """Log directory; CXR_LOG_DIR wins over output.log_dir."""
        path = self.get_env("CXR_LOG_DIR") or self.get("output.log_dir", "logs")
        path = Path(path).expanduser()
        return path if path.is_absolute() else self.project_root / path

    @property
    def default_workers(self) -> int:
        return int(self.get_env("CXR_WORKERS") or self.get("pipeline.parallelism", 1))

    @property
    def default_seed(self) -> Optional[int]:
        value = self.get_env("CXR_SEED")
        return int(value) if value else None

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig.from_dict(self.get("preprocess", {}))

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig.from_dict(self.get("augment", {}))

    def train_config(self, stage: str) -> TrainConfig:
        """TrainConfig for ``stage1`` or ``stage2``; CXR_SEED overrides the seed."""
        if stage not in STAGES:
            raise ValueError(f"Unknown stage: {stage}")
        data = dict(self.get(stage, {}))
        if self.default_seed is not None:
            data["seed"] = self.default_seed
        return TrainConfig.from_dict(data)

    def pipeline_config(self) -> PipelineConfig:
        data = dict(self.get("pipeline", {}))
        data.setdefault("dump_dir", self.get("preprocess.dump_dir"))
        if self.get_env("CXR_WORKERS"):
            data["parallelism"] = self.default_workers
        return PipelineConfig.from_dict(data)

    def validate(self) -> tuple[bool, list[str]]:
        """Validate configuration.

        Returns:
            Tuple of (is_valid, list_of_errors)
        """
        errors: List[str] = []

        for key in ("pipeline.stage1_threshold", "pipeline.stage2_threshold"):
            value = self.get(key)
            if not isinstance(value, (int, float)) or not 0.0 < value < 1.0:
                errors.append(f"{key} must be in (0, 1), got {value!r}")

        for stage in STAGES:
            lr0 = self.get(f"{stage}.lr0", 0)
            min_lr = self.get(f"{stage}.min_lr", 0)
            if not lr0 > min_lr > 0:
                errors.append(f"{stage}: need lr0 > min_lr > 0, got lr0={lr0}, min_lr={min_lr}")
            if self.get(f"{stage}.two_phase"):
                epochs = [self.get(f"{stage}.phase1_epochs", 0), self.get(f"{stage}.phase2_epochs", 0)]
            else:
                epochs = [self.get(f"{stage}.epochs", 0)]
            if min(epochs) < 1:
                errors.append(f"{stage}: epochs must be >= 1, got {epochs}")
            if self.get(f"{stage}.batch_size", 0) < 1:
                errors.append(f"{stage}: batch_size must be >= 1")
            threshold = self.get(f"{stage}.threshold", 0.5)
            if not 0.0 < threshold < 1.0:
                errors.append(f"{stage}: threshold must be in (0, 1), got {threshold}")
            dtype = self.get(f"{stage}.compute_dtype", "float32")
            if dtype not in COMPUTE_DTYPES:
                errors.append(f"{stage}.compute_dtype must be one of {list(COMPUTE_DTYPES)}, got {dtype!r}")

        fractions = self.get("data.split_fractions", [])
        if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
            errors.append(f"data.split_fractions must be three values summing to 1, got {fractions}")

        if self.get("preprocess.clahe_clip", 0) < 1.0:
            errors.append("preprocess.clahe_clip must be >= 1.0")
        grid = self.get("preprocess.clahe_grid", [])
        if len(grid) != 2 or min(grid) < 1:
            errors.append(f"preprocess.clahe_grid must be two positive ints, got {grid}")
        size = self.get("preprocess.target_size", [])
        if len(size) != 2 or min(size) < 1:
            errors.append(f"preprocess.target_size must be two positive ints, got {size}")
        elif size[0] != size[1]:
            errors.append(f"preprocess.target_size must be square for the networks, got {size}")

        if self.get("pipeline.parallelism", 1) < 1:
            errors.append("pipeline.parallelism must be >= 1")

        return (len(errors) == 0, errors)
