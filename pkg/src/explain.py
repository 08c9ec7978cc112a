"""Grad-CAM heatmaps and overlay export."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import matplotlib
import numpy as np
from PIL import Image, ImageDraw, ImageFont
from PIL.PngImagePlugin import PngInfo

from networks import ModelBundle
from preprocess import resize_bilinear
from tensor_ops import Graph

logger = logging.getLogger(__name__)

BLEND = 0.4


class ExplainError(Exception):
    """Heatmap cannot be produced or written."""


@dataclass
class Heatmap:
    """Class activation map at feature resolution and at input resolution."""

    grid: np.ndarray
    upsampled: np.ndarray
    target_class: int
    class_name: str
    score: float
    layer: str


def _resolve(
    model: Union[ModelBundle, Graph], layer_name: Optional[str]
) -> Tuple[Graph, str, Optional[str], List[str]]:
    if isinstance(model, ModelBundle):
        return (
            model.graph,
            layer_name or model.spec.cam_layer,
            model.spec.logit_layer,
            list(model.class_names),
        )
    if layer_name is None:
        raise ExplainError("layer_name is required when passing a bare graph")
    start = "head.output" if "head.output" in model.names else None
    return model, layer_name, start, []


def grad_cam(
    model: Union[ModelBundle, Graph],
    x: np.ndarray,
    target_class: int,
    layer_name: Optional[str] = None,
) -> Heatmap:
    """Grad-CAM for one image.

    Channel weights are the spatial mean of the target-class logit's gradient
    w.r.t. the hooked feature maps. The weighted sum is rectified and divided
    by its max; an all-zero map stays all zero.

    Args:
        model: Bundle (hooks its cam layer, scores at the logit) or bare graph
        x: (3, H, W) or (1, 3, H, W) input
        target_class: Output column to explain
        layer_name: Override for the hooked layer
    """
    graph, layer, start, class_names = _resolve(model, layer_name)
    batch = np.asarray(x, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[0] != 1:
        raise ExplainError(f"expected a single (3, H, W) image, got shape {np.shape(x)}")
    if layer not in graph.names:
        raise ExplainError(f"no layer named '{layer}' to hook")

    out, tape = graph.forward_with_tape(batch, train=False, capture=[layer])
    n_classes = out.shape[1]
    if not 0 <= target_class < n_classes:
        raise ExplainError(f"target class {target_class} out of range for {n_classes} outputs")

    start_index = graph.index_of(start) if start else len(graph.layers) - 1
    seed_grad = np.zeros(tape.output_shapes[start_index])
    seed_grad[0, target_class] = 1.0
    graph.backward(tape, seed_grad, start=start, stop=min(graph.index_of(layer), start_index))

    activations = tape.activations[layer][0]
    grads = tape.gradients[layer][0]
    if activations.ndim != 3:
        raise ExplainError(f"layer '{layer}' does not produce spatial feature maps")
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak

    upsampled = np.clip(resize_bilinear(cam, batch.shape[2:]), 0.0, 1.0)
    name = class_names[target_class] if class_names else str(target_class)
    logger.debug(f"Grad-CAM for '{name}' at layer '{layer}' (peak {peak:.3e})")
    return Heatmap(cam, upsampled, target_class, name, float(out[0, target_class]), layer)


def _to_unit_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img[0]
    if img.ndim != 2:
        raise ExplainError(f"overlay needs a 2-D image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def blend_heatmap(
    heatmap: Heatmap, image: np.ndarray, colormap: str = "jet", alpha: float = BLEND
) -> np.ndarray:
    """RGB uint8 blend; weight of the color layer is ``alpha * heat``."""
    base = _to_unit_gray(image)
    heat = heatmap.grid
    if heat.shape != base.shape:
        heat = np.clip(resize_bilinear(heat, base.shape), 0.0, 1.0)
    colors = matplotlib.colormaps[colormap](heat)[..., :3]
    weight = (alpha * heat)[..., None]
    rgb = base[..., None] * (1.0 - weight) + colors * weight
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def overlay(
    heatmap: Heatmap,
    image: np.ndarray,
    out_path: Union[str, Path],
    colormap: str = "jet",
    alpha: float = BLEND,
    annotate: bool = True,
) -> Path:
    """Write the blended heatmap as PNG, same size as ``image``.

    With ``annotate`` a footer strip inside the image shows class and score.
    Class and score are always stored as PNG text chunks.
    """
    pixels = blend_heatmap(heatmap, image, colormap, alpha)
    picture = Image.fromarray(pixels)
    label = f"{heatmap.class_name}: {heatmap.score:.3f}"
    if annotate:
        draw = ImageDraw.Draw(picture)
        font = ImageFont.load_default()
        strip = max(12, picture.height // 12)
        draw.rectangle([0, picture.height - strip, picture.width, picture.height], fill=(0, 0, 0))
        draw.text((4, picture.height - strip + 1), label, fill=(255, 255, 255), font=font)

    info = PngInfo()
    info.add_text("class", heatmap.class_name)
    info.add_text("score", f"{heatmap.score:.6f}")
    info.add_text("layer", heatmap.layer)
    path = Path(out_path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        picture.save(path, format="PNG", pnginfo=info)
    except OSError as e:
        raise ExplainError(f"Cannot write overlay to {path}: {e}") from e
    logger.debug(f"Overlay written to {path} ({label})")
    return path


def dump_heatmap_csv(heatmap: Heatmap, path: Union[str, Path]) -> Path:
    """Raw feature-resolution grid as comma-separated rows."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, heatmap.grid, delimiter=",", fmt="%.8f")
    except OSError as e:
        raise ExplainError(f"Cannot write heatmap CSV to {path}: {e}") from e
    return path
