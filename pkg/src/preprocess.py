"""Image decoding, CLAHE, resizing and augmentation for radiographs."""

import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from utils import sanitize_filename

logger = logging.getLogger(__name__)

HIST_BINS = 256
_GRAYSCALE_MODES = ("L", "1")
_WIDE_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N")


class PreprocessError(Exception):
    """Base class for preprocessing errors."""


class PreprocessConfigError(PreprocessError):
    """Invalid preprocessing parameters for the given image."""


class ImageFormatError(PreprocessError):
    """Image cannot be decoded as single-channel grayscale."""


@dataclass
class PreprocessConfig:
    """Deterministic chain settings stored alongside a model."""

    clahe_enabled: bool = True
    clahe_clip: float = 2.0
    clahe_grid: Tuple[int, int] = (8, 8)
    target_size: Tuple[int, int] = (224, 224)
    dump_dir: Optional[str] = None

    def __post_init__(self):
        self.clahe_grid = tuple(int(v) for v in self.clahe_grid)
        self.target_size = tuple(int(v) for v in self.target_size)
        if self.clahe_clip < 1.0:
            raise PreprocessConfigError(f"clahe_clip must be >= 1.0, got {self.clahe_clip}")
        if len(self.clahe_grid) != 2 or min(self.clahe_grid) < 1:
            raise PreprocessConfigError(f"clahe_grid must be two positive ints, got {self.clahe_grid}")
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise PreprocessConfigError(f"target_size must be positive, got {self.target_size}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("dump_dir")
        data["clahe_grid"] = list(self.clahe_grid)
        data["target_size"] = list(self.target_size)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PreprocessConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AugmentConfig:
    """Training-time augmentation ranges."""

    enabled: bool = True
    hflip_prob: float = 0.5
    gain_range: Tuple[float, float] = (0.9, 1.1)
    bias_range: Tuple[float, float] = (-0.1, 0.1)
    crop_scale_range: Tuple[float, float] = (0.85, 1.0)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AugmentConfig":
        known = {
            k: tuple(v) if isinstance(v, list) else v
            for k, v in data.items()
            if k in cls.__dataclass_fields__
        }
        return cls(**known)


@dataclass
class AppliedOp:
    """One augmentation step with its drawn parameters."""

    op: str
    params: Dict[str, Any] = field(default_factory=dict)


def decode_image(source: Union[str, Path, bytes]) -> np.ndarray:
    """Decode a grayscale PNG/JPEG/PGM into an 8-bit 2-D array.

    16-bit sources are rescaled from 0..65535 onto 0..255.
    """
    try:
        if isinstance(source, (bytes, bytearray)):
            img = Image.open(io.BytesIO(source))
        else:
            img = Image.open(source)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ImageFormatError(f"Cannot decode image: {e}") from e

    if img.mode in _GRAYSCALE_MODES:
        return np.asarray(img.convert("L"), dtype=np.uint8).copy()
    if img.mode in _WIDE_MODES:
        wide = np.asarray(img).astype(np.int64)
        if wide.min() < 0 or wide.max() > 65535:
            raise ImageFormatError(f"Wide image values outside 0..65535 (mode {img.mode})")
        return np.rint(wide * (255.0 / 65535.0)).astype(np.uint8)
    raise ImageFormatError(f"Expected a grayscale image, got mode {img.mode}")


def _max_value(image: np.ndarray) -> int:
    if image.dtype == np.uint8:
        return 255
    if image.dtype == np.uint16:
        return 65535
    raise ImageFormatError(f"Expected uint8 or uint16 intensities, got {image.dtype}")


def _tile_lut(hist: np.ndarray, n_pixels: int, clip: float, max_value: int) -> np.ndarray:
    limit = max(1, int(clip * n_pixels / HIST_BINS))
    excess = int(np.maximum(hist - limit, 0).sum())
    clipped = np.minimum(hist, limit)
    clipped += excess // HIST_BINS
    residual = excess % HIST_BINS
    if residual:
        step = max(HIST_BINS // residual, 1)
        clipped[: residual * step : step] += 1
    cdf = np.cumsum(clipped)
    return np.rint(cdf * (max_value / n_pixels))


def _interp_coords(size: int, tile: int, tiles: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = np.arange(size) / tile - 0.5
    lo = np.floor(pos).astype(np.intp)
    weight = pos - lo
    return np.clip(lo, 0, tiles - 1), np.clip(lo + 1, 0, tiles - 1), weight


def clahe(image: np.ndarray, clip: float = 2.0, grid: Tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Args:
        image: 2-D uint8 or uint16 intensity grid
        clip: Clip limit as a multiple of the mean bin height
        grid: Tile rows and columns

    Returns:
        Equalized grid with the input dtype
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ImageFormatError(f"clahe expects a 2-D image, got shape {img.shape}")
    max_value = _max_value(img)
    rows, cols = int(grid[0]), int(grid[1])
    if clip < 1.0 or rows < 1 or cols < 1:
        raise PreprocessConfigError(f"Invalid CLAHE parameters clip={clip}, grid={grid}")
    h, w = img.shape
    if h < rows or w < cols:
        raise PreprocessConfigError(f"Image {h}x{w} is smaller than the {rows}x{cols} tile grid")

    shift = 0 if max_value == 255 else 8
    bins = (img >> shift).astype(np.intp)

    # Pad bottom/right so tiles have equal size.
    pad_h = (rows - h % rows) % rows
    pad_w = (cols - w % cols) % cols
    padded = np.pad(bins, ((0, pad_h), (0, pad_w)), mode="reflect") if pad_h or pad_w else bins
    tile_h = padded.shape[0] // rows
    tile_w = padded.shape[1] // cols
    n_pixels = tile_h * tile_w

    luts = np.empty((rows, cols, HIST_BINS))
    for ty in range(rows):
        for tx in range(cols):
            tile = padded[ty * tile_h : (ty + 1) * tile_h, tx * tile_w : (tx + 1) * tile_w]
            hist = np.bincount(tile.ravel(), minlength=HIST_BINS)
            luts[ty, tx] = _tile_lut(hist, n_pixels, clip, max_value)

    y1, y2, wy = _interp_coords(h, tile_h, rows)
    x1, x2, wx = _interp_coords(w, tile_w, cols)
    wy = wy[:, None]
    v11 = luts[y1[:, None], x1[None, :], bins]
    v12 = luts[y1[:, None], x2[None, :], bins]
    v21 = luts[y2[:, None], x1[None, :], bins]
    v22 = luts[y2[:, None], x2[None, :], bins]
    out = (1.0 - wy) * ((1.0 - wx) * v11 + wx * v12) + wy * ((1.0 - wx) * v21 + wx * v22)
    return np.clip(np.rint(out), 0, max_value).astype(img.dtype)


def _axis_coords(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers; returns float64."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ImageFormatError(f"resize expects a 2-D image, got shape {img.shape}")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise PreprocessConfigError(f"Invalid resize target {target}")
    y0, y1, wy = _axis_coords(img.shape[0], th)
    x0, x1, wx = _axis_coords(img.shape[1], tw)
    wy = wy[:, None]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bottom * wy


def to_network_input(image: np.ndarray, max_value: Optional[float] = None) -> np.ndarray:
    """Replicate a grayscale image to 3 channels scaled into [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ImageFormatError(f"Expected a single-channel image, got shape {img.shape}")
    scale = float(max_value) if max_value is not None else float(_max_value(img))
    unit = np.clip(img.astype(np.float64) / scale, 0.0, 1.0)
    return np.repeat(unit[None, :, :], 3, axis=0)


def apply_hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def apply_brightness_contrast(
    image: np.ndarray, gain: float, bias: float, value_range: float
) -> np.ndarray:
    if gain == 1.0 and bias == 0.0:
        return image.copy()
    return np.clip(image * gain + bias, 0.0, value_range)


def apply_crop(image: np.ndarray, scale: float, offset_y: int, offset_x: int) -> np.ndarray:
    """Crop a window covering ``scale`` of the area and resize it back."""
    h, w = image.shape
    ch, cw = crop_size(image.shape, scale)
    window = image[offset_y : offset_y + ch, offset_x : offset_x + cw]
    if (ch, cw) == (h, w):
        return window.copy()
    return resize_bilinear(window, (h, w))


def crop_size(shape: Tuple[int, int], scale: float) -> Tuple[int, int]:
    side = float(np.sqrt(scale))
    h, w = shape
    return (min(h, max(2, int(round(h * side)))), min(w, max(2, int(round(w * side)))))


def augment(
    image: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    value_range: float = 1.0,
) -> Tuple[np.ndarray, List[AppliedOp]]:
    """Apply hflip, brightness/contrast and random crop with drawn parameters.

    A disabled config returns a copy of the input and an empty record.
    """
    out = np.asarray(image, dtype=np.float64)
    if not cfg.enabled:
        return out.copy(), []

    applied: List[AppliedOp] = []
    flip = bool(rng.random() < cfg.hflip_prob)
    if flip:
        out = apply_hflip(out)
    applied.append(AppliedOp("hflip", {"applied": flip}))

    gain = float(rng.uniform(*cfg.gain_range))
    bias = float(rng.uniform(*cfg.bias_range)) * value_range
    out = apply_brightness_contrast(out, gain, bias, value_range)
    applied.append(AppliedOp("brightness_contrast", {"gain": gain, "bias": bias}))

    scale = float(rng.uniform(*cfg.crop_scale_range))
    ch, cw = crop_size(out.shape, scale)
    oy = int(rng.integers(0, out.shape[0] - ch + 1))
    ox = int(rng.integers(0, out.shape[1] - cw + 1))
    out = apply_crop(out, scale, oy, ox)
    applied.append(AppliedOp("random_crop", {"scale": scale, "offset": [oy, ox]}))
    return out, applied


class ImagePreprocessor:
    """Runs the deterministic chain: CLAHE, resize, replicate, scale."""

    def __init__(self, cfg: Optional[PreprocessConfig] = None):
        """Initialize preprocessor.

        Args:
            cfg: Chain settings (defaults when omitted)
        """
        self.cfg = cfg or PreprocessConfig()
        logger.debug(
            f"Preprocessor: clahe={'on' if self.cfg.clahe_enabled else 'off'} "
            f"clip={self.cfg.clahe_clip} grid={self.cfg.clahe_grid} "
            f"target={self.cfg.target_size}"
        )

    def base_image(self, image: np.ndarray) -> Tuple[np.ndarray, float]:
        """CLAHE and resize only; returns (float image, value range)."""
        max_value = _max_value(np.asarray(image))
        img = image
        if self.cfg.clahe_enabled:
            img = clahe(img, self.cfg.clahe_clip, self.cfg.clahe_grid)
        return resize_bilinear(img, self.cfg.target_size), float(max_value)

    def process(self, image: np.ndarray, name: Optional[str] = None) -> np.ndarray:
        """Full deterministic chain to a (3, H, W) tensor."""
        base, max_value = self.base_image(image)
        tensor = to_network_input(base, max_value)
        if self.cfg.dump_dir and name:
            self._dump(tensor[0], name)
        return tensor

    def load(self, path: Union[str, Path]) -> np.ndarray:
        return self.process(decode_image(path), name=Path(path).stem)

    def _dump(self, unit_image: np.ndarray, name: str) -> None:
        out_dir = Path(self.cfg.dump_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        pixels = np.rint(unit_image * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(out_dir / f"{sanitize_filename(name)}.png")
