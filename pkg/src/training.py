"""Losses, Adam, plateau scheduling, batch loading and the trainer."""

import json
import logging
import math
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from dataio import ClassStats, SampleRecord, resolve_image_path
from evaluation import macro_auc
from networks import (
    EXTRACTOR_PREFIX,
    BundleCorruptError,
    ModelBundle,
    bundle_from_bytes,
    bundle_to_bytes,
    save_bundle,
)
from preprocess import AugmentConfig, ImagePreprocessor, augment, decode_image, to_network_input
from tensor_ops import LayerParams, NumericError, get_op_threads, set_op_threads
from utils import atomic_write_bytes, derive_rng, format_duration

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
HISTORY_COLUMNS = ["epoch", "phase", "lr", "train_loss", "val_loss", "val_auc_macro"]
_OPTS_MAGIC = b"OPTS"
_BEST_MAGIC = b"BEST"
COMPUTE_DTYPES = ("float32", "float64")


class TrainingError(Exception):
    """Training cannot continue."""


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class WeightedLossConfig:
    """Positive and negative weights per class."""

    w_p: np.ndarray
    w_n: np.ndarray
    class_names: List[str] = field(default_factory=list)


def compute_weights(stats: ClassStats, class_indices: Optional[Sequence[int]] = None) -> WeightedLossConfig:
    """Balance weights so that ``w_p * freq_p == w_n * freq_n`` for every class.

    Uses ``w_p = freq_n`` and ``w_n = freq_p``. A class without positives gets
    ``(1, 0)``.
    """
    indices = list(range(len(stats.positives))) if class_indices is None else list(class_indices)
    freq_p = stats.freq_p[indices]
    w_p = 1.0 - freq_p
    w_n = freq_p.copy()
    names = [stats.class_names[i] for i in indices]
    for i, name in enumerate(names):
        if stats.positives[indices[i]] == 0:
            logger.warning(f"Class '{name}' has no positives; using w_p=1, w_n=0")
            w_p[i], w_n[i] = 1.0, 0.0
    return WeightedLossConfig(w_p, w_n, names)


def _check_pair(scores: np.ndarray, labels: np.ndarray, what: str) -> None:
    if scores.shape != labels.shape:
        raise TrainingError(f"{what}: scores shape {scores.shape} != labels shape {labels.shape}")


def weighted_bce(
    scores: np.ndarray, labels: np.ndarray, weights: Optional[WeightedLossConfig] = None
) -> Tuple[float, np.ndarray]:
    """Weighted binary cross-entropy averaged over batch and classes.

    Returns:
        Tuple of (loss, gradient w.r.t. scores)
    """
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_pair(f, y, "weighted_bce")
    n_classes = f.shape[-1]
    w_p = np.ones(n_classes) if weights is None else np.asarray(weights.w_p, dtype=np.float64)
    w_n = np.ones(n_classes) if weights is None else np.asarray(weights.w_n, dtype=np.float64)
    if w_p.shape != (n_classes,):
        raise TrainingError(f"weighted_bce: {w_p.size} class weights for {n_classes} classes")

    clamped = np.clip(f, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_element = -(w_p * y * np.log(clamped) + w_n * (1.0 - y) * np.log(1.0 - clamped))
    loss = float(per_element.mean())
    grad = -(w_p * y / clamped - w_n * (1.0 - y) / (1.0 - clamped)) / f.size
    grad = np.where(clamped == f, grad, 0.0)
    return loss, grad


def bce_term_totals(
    scores: np.ndarray, labels: np.ndarray, weights: WeightedLossConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Summed positive-term and negative-term loss per class."""
    f = np.clip(np.asarray(scores, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    positive = -(weights.w_p * y * np.log(f)).sum(axis=0)
    negative = -(weights.w_n * (1.0 - y) * np.log(1.0 - f)).sum(axis=0)
    return positive, negative


def categorical_ce(
    probs: np.ndarray, onehot: np.ndarray, class_weights: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """Mean negative log-probability of the true class.

    Returns:
        Tuple of (loss, gradient w.r.t. probs)
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    _check_pair(p, y, "categorical_ce")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise TrainingError("categorical_ce: every label row must be one-hot")
    w = np.ones(p.shape[1]) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    sample_w = y @ w
    clamped = np.clip(p, PROB_CLAMP, 1.0)
    true_p = (clamped * y).sum(axis=1)
    loss = float(np.mean(-sample_w * np.log(true_p)))
    grad = -(y * sample_w[:, None]) / clamped / p.shape[0]
    return loss, grad


def triage_class_weights(stats: ClassStats, normal_index: int = -1) -> np.ndarray:
    """[w_normal, w_abnormal] with each class weighted by the other's frequency."""
    f_normal = float(stats.freq_p[normal_index])
    return np.array([1.0 - f_normal, f_normal])


# ---------------------------------------------------------------------------
# Optimizer and scheduler
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moments and step counts keyed by ``<param path>.<array>``."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)


def adam_step(
    params: Dict[str, LayerParams],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update; frozen parameter sets are skipped."""
    updates: List[Tuple[LayerParams, str, str, np.ndarray]] = []
    for name, layer_params in params.items():
        if not layer_params.trainable:
            continue
        for key, value in layer_params.optimizable().items():
            grad_key = f"{name}.{key}"
            grad = grads.get(grad_key)
            if grad is None:
                continue
            if grad.shape != value.shape:
                raise TrainingError(f"gradient for '{grad_key}' has shape {grad.shape}, expected {value.shape}")
            if not np.all(np.isfinite(grad)):
                bad = int(grad.size - np.count_nonzero(np.isfinite(grad)))
                raise TrainingError(
                    f"non-finite gradient for '{grad_key}' ({bad} of {grad.size} entries)"
                )
            updates.append((layer_params, key, grad_key, np.asarray(grad, dtype=np.float64)))

    for layer_params, key, grad_key, grad in updates:
        m = state.m.get(grad_key, np.zeros(grad.shape))
        v = state.v.get(grad_key, np.zeros(grad.shape))
        t = state.t.get(grad_key, 0) + 1
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        value = getattr(layer_params, key)
        setattr(layer_params, key, value - lr * m_hat / (np.sqrt(v_hat) + eps))
        state.m[grad_key], state.v[grad_key], state.t[grad_key] = m, v, t
    return state


class PlateauScheduler:
    """Cuts the learning rate when validation loss stops improving."""

    def __init__(
        self,
        lr: float = 1e-3,
        factor: float = 0.1,
        patience: int = 2,
        threshold: float = 1e-4,
        min_lr: float = 1e-5,
    ):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        """Record one epoch's validation loss; returns the lr for the next epoch."""
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                logger.info(f"Reducing learning rate {self.lr:.2e} -> {new_lr:.2e}")
            self.lr = new_lr
            self.wait = 0
        return self.lr

    def state_dict(self) -> Dict[str, Any]:
        return {"lr": self.lr, "best": self.best, "wait": self.wait}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.lr = float(state["lr"])
        self.best = float(state["best"])
        self.wait = int(state["wait"])


def plateau_scheduler_step(scheduler: PlateauScheduler, val_loss: float) -> float:
    return scheduler.step(val_loss)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-5
    two_phase: bool = True
    phase1_epochs: int = 15
    phase2_epochs: int = 15
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    threshold: float = 0.5
    workers: int = 1
    augment: bool = True
    class_weighted: bool = False
    include_normal: bool = False
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.compute_dtype not in COMPUTE_DTYPES:
            raise TrainingError(f"compute_dtype must be one of {COMPUTE_DTYPES}, got {self.compute_dtype!r}")
        if not self.lr0 > self.min_lr > 0:
            raise TrainingError(f"need lr0 > min_lr > 0, got lr0={self.lr0}, min_lr={self.min_lr}")
        epochs = (self.phase1_epochs, self.phase2_epochs) if self.two_phase else (self.epochs,)
        if min(epochs) < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise TrainingError(f"threshold must be in (0, 1), got {self.threshold}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class Phase:
    name: str
    epochs: int
    half_steps: bool
    freeze_extractor: bool


def plan_phases(cfg: TrainConfig) -> List[Phase]:
    if cfg.two_phase:
        return [
            Phase("phase1", cfg.phase1_epochs, half_steps=True, freeze_extractor=True),
            Phase("phase2", cfg.phase2_epochs, half_steps=False, freeze_extractor=False),
        ]
    return [Phase("train", cfg.epochs, half_steps=False, freeze_extractor=False)]


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------


class BatchLoader:
    """Turns records into (input, target) batches.

    Deterministic chain outputs are cached per record. Augmentation draws from
    a generator derived from (seed, phase, epoch, record index), so worker
    count never changes the batches.
    """

    def __init__(
        self,
        records: Sequence[SampleRecord],
        root: Union[str, Path],
        preprocessor: ImagePreprocessor,
        targets: np.ndarray,
        batch_size: int = 16,
        augment_cfg: Optional[AugmentConfig] = None,
        seed: int = 0,
        workers: int = 1,
    ):
        if len(records) != len(targets):
            raise TrainingError(f"{len(records)} records but {len(targets)} targets")
        self.records = list(records)
        self.root = Path(root)
        self.preprocessor = preprocessor
        self.targets = np.asarray(targets, dtype=np.float64)
        self.batch_size = batch_size
        self.augment_cfg = augment_cfg
        self.seed = seed
        self.workers = max(1, workers)
        self._cache: Dict[int, Tuple[np.ndarray, float]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.records) / self.batch_size)

    def _base(self, index: int) -> Tuple[np.ndarray, float]:
        with self._lock:
            hit = self._cache.get(index)
        if hit is not None:
            return hit
        record = self.records[index]
        pixels = decode_image(resolve_image_path(record, self.root))
        base = self.preprocessor.base_image(pixels)
        with self._lock:
            self._cache[index] = base
        return base

    def _sample(self, index: int, phase: int, epoch: int, train: bool) -> np.ndarray:
        image, max_value = self._base(index)
        if train and self.augment_cfg is not None and self.augment_cfg.enabled:
            rng = derive_rng(self.seed, phase, epoch, index)
            image, _ = augment(image, self.augment_cfg, rng, value_range=max_value)
        return to_network_input(image, max_value)

    def _stack(self, indices: Sequence[int], phase: int, epoch: int, train: bool) -> np.ndarray:
        if self.workers == 1:
            samples = [self._sample(i, phase, epoch, train) for i in indices]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                samples = list(executor.map(lambda i: self._sample(i, phase, epoch, train), indices))
        return np.stack(samples)

    def epoch_batches(
        self, phase: int, epoch: int, n_steps: Optional[int] = None, start_step: int = 0
    ) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
        """Shuffled, augmented batches for one training epoch.

        The next batch is assembled on a background thread while the caller
        trains on the current one.
        """
        order = derive_rng(self.seed, phase, epoch).permutation(len(self.records))
        n_steps = self.steps_per_epoch if n_steps is None else n_steps
        plan = []
        for step in range(start_step, n_steps):
            indices = order[step * self.batch_size : (step + 1) * self.batch_size]
            if len(indices) == 0:
                break
            plan.append((step, indices))
        if not plan:
            return
        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="prefetch") as prefetch:
            pending = prefetch.submit(self._stack, plan[0][1], phase, epoch, True)
            for position, (step, indices) in enumerate(plan):
                x = pending.result()
                if position + 1 < len(plan):
                    pending = prefetch.submit(self._stack, plan[position + 1][1], phase, epoch, True)
                yield step, x, self.targets[indices]

    def eval_batches(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Record-ordered, unaugmented batches."""
        for start in range(0, len(self.records), self.batch_size):
            indices = list(range(start, min(start + self.batch_size, len(self.records))))
            yield self._stack(indices, 0, 0, False), self.targets[indices]


def predict_dataset(bundle: ModelBundle, loader: BatchLoader, dtype: Any = np.float64) -> np.ndarray:
    """Inference-mode scores for every record, in record order."""
    outputs = [bundle.predict(x, dtype=dtype) for x, _ in loader.eval_batches()]
    if not outputs:
        return np.zeros((0, bundle.spec.output_units))
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float
    val_auc_macro: float


@dataclass
class TrainState:
    """Everything needed to continue a run from a step boundary."""

    phase_index: int = 0
    epoch_in_phase: int = 0
    step: int = 0
    loss_sum: float = 0.0
    n_batches: int = 0
    global_epoch: int = 0
    scheduler: Dict[str, Any] = field(default_factory=dict)
    optimizer: AdamState = field(default_factory=AdamState)
    best_val_loss: float = math.inf
    best_bundle: Optional[bytes] = None
    history: List[EpochRecord] = field(default_factory=list)
    seed: int = 0


def checkpoint_to_bytes(bundle: ModelBundle, state: TrainState) -> bytes:
    keys = sorted(state.optimizer.m)
    meta = {
        "phase_index": state.phase_index,
        "epoch_in_phase": state.epoch_in_phase,
        "step": state.step,
        "loss_sum": state.loss_sum,
        "n_batches": state.n_batches,
        "global_epoch": state.global_epoch,
        "scheduler": state.scheduler,
        "best_val_loss": state.best_val_loss if math.isfinite(state.best_val_loss) else None,
        "history": [asdict(r) for r in state.history],
        "rng": {"seed": state.seed, "streams": "derived per (phase, epoch, step)"},
        "moments": [
            {"key": k, "shape": list(state.optimizer.m[k].shape), "t": state.optimizer.t[k]}
            for k in keys
        ],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [bundle_to_bytes(bundle), _OPTS_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for k in keys:
        chunks.append(np.ascontiguousarray(state.optimizer.m[k], dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(state.optimizer.v[k], dtype="<f8").tobytes())
    best = state.best_bundle or b""
    chunks += [_BEST_MAGIC, struct.pack("<Q", len(best)), best]
    return b"".join(chunks)


def checkpoint_from_bytes(data: bytes) -> Tuple[ModelBundle, TrainState]:
    bundle, offset = bundle_from_bytes(data)
    if data[offset : offset + 4] != _OPTS_MAGIC or len(data) < offset + 8:
        raise BundleCorruptError("Checkpoint has no optimizer section")
    (meta_len,) = struct.unpack_from("<I", data, offset + 4)
    offset += 8
    try:
        meta = json.loads(data[offset : offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BundleCorruptError(f"Unreadable optimizer section: {e}") from e
    offset += meta_len

    optimizer = AdamState()
    for entry in meta["moments"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 16 * count > len(data):
            raise BundleCorruptError("Truncated optimizer moments")
        optimizer.m[entry["key"]] = np.frombuffer(data, "<f8", count, offset).reshape(shape).copy()
        offset += 8 * count
        optimizer.v[entry["key"]] = np.frombuffer(data, "<f8", count, offset).reshape(shape).copy()
        offset += 8 * count
        optimizer.t[entry["key"]] = int(entry["t"])

    if data[offset : offset + 4] != _BEST_MAGIC or len(data) < offset + 12:
        raise BundleCorruptError("Checkpoint has no best-bundle section")
    (best_len,) = struct.unpack_from("<Q", data, offset + 4)
    offset += 12
    if offset + best_len != len(data):
        raise BundleCorruptError("Checkpoint best-bundle section has the wrong length")
    best = data[offset : offset + best_len] or None

    best_val = meta["best_val_loss"]
    state = TrainState(
        phase_index=meta["phase_index"],
        epoch_in_phase=meta["epoch_in_phase"],
        step=meta["step"],
        loss_sum=meta["loss_sum"],
        n_batches=meta["n_batches"],
        global_epoch=meta["global_epoch"],
        scheduler=meta["scheduler"],
        optimizer=optimizer,
        best_val_loss=math.inf if best_val is None else float(best_val),
        best_bundle=best,
        history=[EpochRecord(**r) for r in meta["history"]],
        seed=int(meta["rng"]["seed"]),
    )
    return bundle, state


def save_checkpoint(path: Union[str, Path], bundle: ModelBundle, state: TrainState) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(bundle, state))
    logger.debug(f"Checkpoint written to {path}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelBundle, TrainState]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([asdict(r) for r in history], columns=HISTORY_COLUMNS).to_csv(
        path, index=False, lineterminator="\n"
    )


@contextmanager
def run_lock(out_dir: Union[str, Path]) -> Iterator[Path]:
    """Hold ``<out_dir>/train.lock`` for the duration of one training run."""
    path = Path(out_dir) / "train.lock"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise TrainingError(f"another training run holds {path}") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


def make_loss(kind: str, weights: Any = None) -> LossFn:
    """``categorical`` (softmax heads) or ``bce`` (sigmoid heads)."""
    if kind == "categorical":
        return lambda scores, targets: categorical_ce(scores, targets, weights)
    if kind == "bce":
        return lambda scores, targets: weighted_bce(scores, targets, weights)
    raise ValueError(f"Unknown loss kind: {kind}")


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: List[EpochRecord]
    interrupted: bool = False
    checkpoint: Optional[Path] = None


class Trainer:
    """Runs single-phase or freeze/fine-tune training on one bundle."""

    def __init__(
        self,
        bundle: ModelBundle,
        train_data: BatchLoader,
        val_data: BatchLoader,
        loss_fn: LossFn,
        cfg: TrainConfig,
        out_dir: Optional[Union[str, Path]] = None,
        shutdown_event: Optional[threading.Event] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    ):
        """Initialize trainer.

        Args:
            bundle: Model to train in place
            train_data: Loader over the training split
            val_data: Loader over the validation split
            loss_fn: Maps (scores, targets) to (loss, grad wrt scores)
            cfg: Training settings
            out_dir: Where checkpoints, history and the best bundle go
            shutdown_event: Stops training at the next step boundary when set
            on_epoch: Callback receiving each epoch's history record
        """
        if len(train_data) == 0:
            raise TrainingError("training split is empty")
        if len(val_data) == 0:
            raise TrainingError("validation split is empty")
        self.bundle = bundle
        self.train_data = train_data
        self.val_data = val_data
        self.loss_fn = loss_fn
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.shutdown_event = shutdown_event
        self.on_epoch = on_epoch
        self.phases = plan_phases(cfg)
        self.scheduler = PlateauScheduler(
            cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr
        )
        self.state = TrainState(seed=cfg.seed, scheduler=self.scheduler.state_dict())

        logger.info(
            f"Initialized trainer ({len(train_data)} train / {len(val_data)} val samples, "
            f"phases: {', '.join(f'{p.name}x{p.epochs}' for p in self.phases)})"
        )

    def _path(self, name: str) -> Optional[Path]:
        return self.out_dir / name if self.out_dir else None

    def resume(self, checkpoint: Union[str, Path]) -> None:
        """Continue from a checkpoint written by an earlier run of the same config."""
        bundle, state = load_checkpoint(checkpoint)
        if state.seed != self.cfg.seed:
            raise TrainingError(f"checkpoint seed {state.seed} != configured seed {self.cfg.seed}")
        self.bundle = bundle
        self.state = state
        self.scheduler.load_state_dict(state.scheduler)
        logger.info(
            f"Resuming from {checkpoint} (phase {state.phase_index + 1}, "
            f"epoch {state.epoch_in_phase + 1}, step {state.step})"
        )

    def _checkpoint(self, name: str) -> Optional[Path]:
        path = self._path(name)
        if path is not None:
            self.state.scheduler = self.scheduler.state_dict()
            save_checkpoint(path, self.bundle, self.state)
        return path

    def validate(self) -> Tuple[float, float]:
        scores = predict_dataset(self.bundle, self.val_data, dtype=self.cfg.compute_dtype)
        loss, _ = self.loss_fn(scores, self.val_data.targets)
        return loss, macro_auc(scores, self.val_data.targets)

    def _train_step(self, x: np.ndarray, y: np.ndarray, phase_index: int, epoch: int, step: int) -> float:
        graph = self.bundle.graph
        rng = derive_rng(self.cfg.seed, phase_index, epoch, step, 1)
        try:
            out, tape = graph.forward_with_tape(x, train=True, rng=rng, dtype=self.cfg.compute_dtype)
        except NumericError as e:
            path = self._checkpoint("abort.ckpt")
            raise TrainingError(f"{e} at epoch {epoch + 1}, step {step} (checkpoint: {path})") from e
        loss, grad = self.loss_fn(out, y)
        if not math.isfinite(loss):
            path = self._checkpoint("abort.ckpt")
            raise TrainingError(f"non-finite training loss at epoch {epoch + 1}, step {step} (checkpoint: {path})")
        # Nothing below the first trainable layer needs a gradient.
        _, grads = graph.backward(tape, grad, stop=min(graph.first_trainable(), len(graph.layers) - 1))
        try:
            adam_step(
                self.bundle.params,
                grads,
                self.state.optimizer,
                self.scheduler.lr,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.adam_eps,
            )
        except TrainingError:
            self._checkpoint("abort.ckpt")
            raise
        graph.snap_to_storage()
        return loss

    def fit(self) -> TrainResult:
        previous_threads = get_op_threads()
        set_op_threads(self.cfg.workers)
        try:
            return self._fit()
        finally:
            set_op_threads(previous_threads)

    def _fit(self) -> TrainResult:
        state = self.state
        full_steps = self.train_data.steps_per_epoch

        while state.phase_index < len(self.phases):
            phase = self.phases[state.phase_index]
            graph = self.bundle.graph
            if phase.freeze_extractor:
                graph.set_trainable(EXTRACTOR_PREFIX, False)
            else:
                graph.set_trainable("", True)
            n_steps = max(1, math.ceil(full_steps / 2)) if phase.half_steps else full_steps

            while state.epoch_in_phase < phase.epochs:
                started = time.monotonic()
                batches = self.train_data.epoch_batches(
                    state.phase_index, state.epoch_in_phase, n_steps, start_step=state.step
                )
                for step, x, y in batches:
                    if self.shutdown_event is not None and self.shutdown_event.is_set():
                        path = self._checkpoint("last.ckpt")
                        logger.warning(f"Shutdown requested, stopped at step {step} (checkpoint: {path})")
                        return TrainResult(self._best_or_current(), state.history, True, path)
                    state.loss_sum += self._train_step(
                        x, y, state.phase_index, state.epoch_in_phase, step
                    )
                    state.n_batches += 1
                    state.step = step + 1

                lr_used = self.scheduler.lr
                train_loss = state.loss_sum / max(state.n_batches, 1)
                val_loss, val_auc = self.validate()
                if not math.isfinite(val_loss):
                    path = self._checkpoint("abort.ckpt")
                    raise TrainingError(f"non-finite validation loss (checkpoint: {path})")
                state.global_epoch += 1
                record = EpochRecord(state.global_epoch, phase.name, lr_used, train_loss, val_loss, val_auc)
                state.history.append(record)
                if val_loss < state.best_val_loss:
                    state.best_val_loss = val_loss
                    state.best_bundle = bundle_to_bytes(self.bundle)
                self.scheduler.step(val_loss)

                logger.info(
                    f"Epoch {state.global_epoch} [{phase.name}] lr={lr_used:.1e} "
                    f"train_loss={train_loss:.4f} val_loss={val_loss:.4f} "
                    f"val_auc={val_auc:.4f} ({format_duration(time.monotonic() - started)})"
                )
                if self.on_epoch is not None:
                    self.on_epoch(record)

                state.epoch_in_phase += 1
                state.step = 0
                state.loss_sum = 0.0
                state.n_batches = 0
                self._checkpoint("last.ckpt")
                if self.out_dir is not None:
                    write_history(state.history, self.out_dir / "history.csv")

            state.phase_index += 1
            state.epoch_in_phase = 0

        best = self._best_or_current()
        if self.out_dir is not None:
            save_bundle(best, self.out_dir / "best.bundle")
        return TrainResult(best, state.history, False, self._path("last.ckpt"))

    def _best_or_current(self) -> ModelBundle:
        if self.state.best_bundle is None:
            return self.bundle
        best, _ = bundle_from_bytes(self.state.best_bundle)
        return best


def train_two_phase(
    bundle: ModelBundle,
    train_data: BatchLoader,
    val_data: BatchLoader,
    cfg: TrainConfig,
    loss_fn: LossFn,
    out_dir: Optional[Union[str, Path]] = None,
    shutdown_event: Optional[threading.Event] = None,
) -> TrainResult:
    """Frozen-extractor phase at half steps, then full fine-tuning."""
    if not cfg.two_phase:
        raise TrainingError("train_two_phase needs a two-phase TrainConfig")
    trainer = Trainer(bundle, train_data, val_data, loss_fn, cfg, out_dir, shutdown_event)
    return trainer.fit()
