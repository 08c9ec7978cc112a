"""Tests for Grad-CAM and overlay export."""

import numpy as np
import pytest
from PIL import Image

from explain import ExplainError, blend_heatmap, dump_heatmap_csv, grad_cam, overlay
from tensor_ops import Graph, init_conv_params, layer_forward, make_layer
from tensor_ops import LayerParams

SIZE = 32


def _image(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (3, SIZE, SIZE))


def _single_map_graph(seed=0):
    rng = np.random.default_rng(seed)
    conv = init_conv_params(rng, out_ch=1, in_ch=3, kernel=3)
    dense = LayerParams("dense", np.array([[0.7, -0.2]]), np.zeros(2))
    graph = Graph(
        [
            make_layer("conv2d", "features", conv, padding=1),
            make_layer("global_average_pool", "gap"),
            make_layer("dense", "scores", dense),
        ]
    )
    return graph, conv


def test_bundle_heatmap_shapes(toy_multipath):
    heatmap = grad_cam(toy_multipath, _image(), target_class=1)
    assert heatmap.upsampled.shape == (SIZE, SIZE)
    assert heatmap.layer == "head.transfer_act"
    assert heatmap.class_name == "Cardiomegaly"
    assert heatmap.grid.min() >= 0.0
    assert heatmap.grid.max() in (0.0, 1.0)
    assert 0.0 < heatmap.score < 1.0


def test_triage_bundle_uses_last_block(toy_triage):
    heatmap = grad_cam(toy_triage, _image(1), target_class=1)
    assert heatmap.layer == toy_triage.spec.cam_layer
    assert heatmap.class_name == "Abnormal"


def test_zero_gradient_gives_zero_map(toy_multipath):
    toy_multipath.params["head.output"].weights[...] = 0.0
    heatmap = grad_cam(toy_multipath, _image(), target_class=0)
    assert not heatmap.grid.any()
    assert not heatmap.upsampled.any()


def test_single_feature_map_is_rectified_activation():
    graph, conv = _single_map_graph()
    x = _image(2)
    heatmap = grad_cam(graph, x, target_class=0, layer_name="features")
    activation = np.maximum(layer_forward("conv2d", x[None], conv, padding=1)[0, 0], 0.0)
    assert activation.max() > 0
    assert np.allclose(heatmap.grid, activation / activation.max())


def test_negative_weight_flips_sign():
    graph, conv = _single_map_graph()
    x = _image(2)
    heatmap = grad_cam(graph, x, target_class=1, layer_name="features")
    activation = layer_forward("conv2d", x[None], conv, padding=1)[0, 0]
    expected = np.maximum(-activation, 0.0)
    assert np.allclose(heatmap.grid, expected / expected.max())


def test_positive_rescaling_of_head_leaves_map_unchanged(toy_multipath):
    x = _image(3)
    before = grad_cam(toy_multipath, x, target_class=4).grid
    toy_multipath.params["head.output"].weights[...] *= 3.5
    toy_multipath.params["head.output"].bias[...] *= 3.5
    after = grad_cam(toy_multipath, x, target_class=4).grid
    assert np.allclose(before, after)


def test_inference_leaves_weights_untouched(toy_multipath):
    snapshot = {k: v.copy() for k, v in toy_multipath.params["head.transfer_conv"].arrays().items()}
    grad_cam(toy_multipath, _image(), target_class=0)
    for key, value in toy_multipath.params["head.transfer_conv"].arrays().items():
        assert np.array_equal(value, snapshot[key])


def test_errors(toy_multipath):
    with pytest.raises(ExplainError, match="out of range"):
        grad_cam(toy_multipath, _image(), target_class=8)
    with pytest.raises(ExplainError, match="no layer"):
        grad_cam(toy_multipath, _image(), target_class=0, layer_name="nope")
    with pytest.raises(ExplainError):
        grad_cam(toy_multipath, np.zeros((2, 3, SIZE, SIZE)), target_class=0)
    with pytest.raises(ExplainError, match="spatial"):
        grad_cam(toy_multipath, _image(), target_class=0, layer_name="head.gap")
    graph, _ = _single_map_graph()
    with pytest.raises(ExplainError, match="layer_name"):
        grad_cam(graph, _image(), target_class=0)


def test_size_and_metadata(toy_multipath, tmp_path):
    heatmap = grad_cam(toy_multipath, _image(), target_class=2)
    original = (np.random.default_rng(0).random((80, 64)) * 255).astype(np.uint8)
    path = overlay(heatmap, original, tmp_path / "nested" / "cam.png")
    with Image.open(path) as img:
        assert img.size == (64, 80)
        assert img.mode == "RGB"
        assert img.text["class"] == "Consolidation"
        assert float(img.text["score"]) == pytest.approx(heatmap.score, abs=1e-6)
        assert img.text["layer"] == "head.transfer_act"


def test_zero_map_blend_is_plain_grayscale(toy_multipath, tmp_path):
    toy_multipath.params["head.output"].weights[...] = 0.0
    heatmap = grad_cam(toy_multipath, _image(), target_class=0)
    original = np.tile(np.arange(0, 256, 4, dtype=np.uint8), (32, 1))
    path = overlay(heatmap, original, tmp_path / "zero.png", annotate=False)
    with Image.open(path) as img:
        pixels = np.asarray(img)
    assert np.array_equal(pixels[..., 0], original)
    assert np.array_equal(pixels[..., 0], pixels[..., 2])


def test_blend_accepts_network_tensor(toy_multipath):
    x = _image()
    heatmap = grad_cam(toy_multipath, x, target_class=0)
    rgb = blend_heatmap(heatmap, x)
    assert rgb.shape == (SIZE, SIZE, 3)
    assert rgb.dtype == np.uint8


def test_unwritable_destination(toy_multipath, tmp_path):
    heatmap = grad_cam(toy_multipath, _image(), target_class=0)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExplainError):
        overlay(heatmap, _image()[0], blocker / "cam.png")


def test_csv_dump(toy_multipath, tmp_path):
    heatmap = grad_cam(toy_multipath, _image(), target_class=0)
    path = dump_heatmap_csv(heatmap, tmp_path / "cam.csv")
    loaded = np.loadtxt(path, delimiter=",", ndmin=2)
    assert loaded.shape == heatmap.grid.shape
    assert np.allclose(loaded, heatmap.grid, atol=1e-8)
