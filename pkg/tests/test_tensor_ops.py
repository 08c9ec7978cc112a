"""Tests for the tensor layers, graph and gradient checker."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tensor_ops import (
    BatchNorm,
    Conv2D,
    Dense,
    DepthwiseConv2D,
    Dropout,
    Flatten,
    GlobalAveragePool,
    Graph,
    GraphStateError,
    LayerParams,
    MBConvBlock,
    NumericError,
    ReLU,
    ShapeError,
    Sigmoid,
    Softmax,
    Swish,
    ZeroPadding2D,
    batch_map,
    conv2d_forward,
    depthwise_conv2d_forward,
    grad_check,
    init_batchnorm_params,
    init_conv_params,
    init_dense_params,
    init_depthwise_params,
    layer_forward,
    set_op_threads,
    softmax,
    to_storage_precision,
)
from utils import derive_rng

TOLERANCE = 1e-4


def _naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + (b[oi] if b is not None else 0.0)
    return out


def _bn_with_stats(rng, channels):
    params = init_batchnorm_params(channels)
    params.weights = rng.uniform(0.5, 1.5, channels)
    params.bias = rng.normal(0, 0.1, channels)
    params.running_mean = rng.normal(0, 0.2, channels)
    params.running_var = rng.uniform(0.5, 2.0, channels)
    return params


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loop(rng, stride, padding):
    x = rng.standard_normal((2, 3, 7, 6))
    params = init_conv_params(rng, 4, 3, 3)
    params.bias = rng.standard_normal(4)
    expected = _naive_conv(x, params.weights, params.bias, stride, padding)
    assert np.allclose(conv2d_forward(x, params, stride, padding), expected, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (2, 1)])
def test_pointwise_conv_matches_naive_loop(rng, stride, padding):
    x = rng.standard_normal((2, 5, 7, 6))
    params = init_conv_params(rng, 3, 5, 1)
    params.bias = rng.standard_normal(3)
    expected = _naive_conv(x, params.weights, params.bias, stride, padding)
    assert np.allclose(conv2d_forward(x, params, stride, padding), expected, atol=1e-12)


def test_depthwise_matches_per_channel_conv(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    params = init_depthwise_params(rng, 3, 3)
    out = depthwise_conv2d_forward(x, params, stride=2, padding=1)
    for c in range(3):
        single = _naive_conv(x[:, c : c + 1], params.weights[c][None, None], None, 2, 1)
        assert np.allclose(out[:, c : c + 1], single, atol=1e-12)


def test_conv_channel_mismatch_names_both_shapes(rng):
    params = init_conv_params(rng, 4, 3, 3)
    with pytest.raises(ShapeError, match=r"\(1, 2, 5, 5\).*\(4, 3, 3, 3\)"):
        conv2d_forward(np.zeros((1, 2, 5, 5)), params)


def test_conv_input_too_small(rng):
    params = init_conv_params(rng, 1, 1, 5)
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 3, 3)), params)


def test_softmax_rows_sum_to_one(rng):
    out = softmax(rng.standard_normal((5, 4)) * 50)
    assert np.allclose(out.sum(axis=1), 1.0)


@given(
    logits=arrays(np.float64, (3, 4), elements=st.floats(-30, 30)),
    shift=st.floats(-100, 100),
)
@settings(max_examples=50, deadline=None)
def test_softmax_shift_invariant(logits, shift):
    assert np.allclose(softmax(logits), softmax(logits + shift), atol=1e-12)


def test_storage_precision_is_float32_grid():
    arr = np.array([0.1, 1 / 3])
    snapped = to_storage_precision(arr)
    assert snapped.dtype == np.float64
    assert np.array_equal(snapped, arr.astype(np.float32).astype(np.float64))


def test_relu():
    out = layer_forward("relu", np.array([[-1.0, 0.0, 2.0]]))
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])


def test_dense_shapes(rng):
    params = init_dense_params(rng, 5, 3)
    assert layer_forward("dense", rng.standard_normal((4, 5)), params).shape == (4, 3)


def test_inference_batchnorm_uses_running_stats(rng):
    params = _bn_with_stats(rng, 3)
    x = rng.standard_normal((2, 3, 4, 4))
    out = layer_forward("batchnorm", x, params)
    view = (1, 3, 1, 1)
    expected = (x - params.running_mean.reshape(view)) / np.sqrt(
        params.running_var.reshape(view) + 1e-3
    ) * params.weights.reshape(view) + params.bias.reshape(view)
    assert np.allclose(out, expected)


def test_nan_input_rejected():
    with pytest.raises(NumericError):
        layer_forward("relu", np.array([[np.nan]]))


def test_dropout_is_identity_at_inference(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(layer_forward("dropout", x, rate=0.5), x)


def test_dropout_training_needs_rng():
    with pytest.raises(GraphStateError):
        layer_forward("dropout", np.ones((2, 2)), train=True, rate=0.5)


def test_dropout_training_scales_kept_units():
    out = layer_forward(
        "dropout", np.ones((50, 50)), train=True, rng=np.random.default_rng(0), rate=0.5
    )
    assert set(np.unique(out)) <= {0.0, 2.0}


@pytest.mark.parametrize("rate", [0.2, 0.3])
def test_dropout_preserves_expected_value(rate):
    x = np.array([[0.5, 1.0, 2.0, -3.0]])
    draws = np.concatenate(
        [
            layer_forward("dropout", x, train=True, rng=derive_rng(11, draw), rate=rate)
            for draw in range(10_000)
        ]
    )
    assert np.all(np.abs(draws.mean(axis=0) - x[0]) <= 0.02 * np.abs(x[0]))


def test_unknown_kind():
    with pytest.raises(ValueError):
        layer_forward("maxout", np.ones((1, 1)))


def test_running_stats_update_with_momentum(rng):
    params = init_batchnorm_params(2)
    layer = BatchNorm("bn", params)
    x = rng.standard_normal((8, 2, 3, 3)) * 2 + 1
    graph = Graph([layer])
    graph.forward(x, train=True)
    assert np.allclose(params.running_mean, 0.01 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(params.running_var, 0.99 + 0.01 * x.var(axis=(0, 2, 3)))


def test_frozen_batchnorm_keeps_stats(rng):
    params = _bn_with_stats(rng, 2)
    params.trainable = False
    before = params.copy()
    Graph([BatchNorm("bn", params)]).forward(rng.standard_normal((4, 2, 3, 3)), train=True)
    assert np.array_equal(params.running_mean, before.running_mean)
    assert np.array_equal(params.running_var, before.running_var)


def test_backward_without_forward(rng):
    graph = Graph([Dense("d", init_dense_params(rng, 2, 2))])
    with pytest.raises(GraphStateError):
        graph.backward(None, np.ones((1, 2)))


def test_backward_gradient_shape_checked(rng):
    graph = Graph([Dense("d", init_dense_params(rng, 2, 2))])
    _, tape = graph.forward_with_tape(np.ones((1, 2)))
    with pytest.raises(ShapeError):
        graph.backward(tape, np.ones((1, 3)))


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        Graph([ReLU("a"), ReLU("a")])


def test_frozen_layer_reports_no_grads(rng):
    params = init_dense_params(rng, 3, 2)
    graph = Graph([Dense("d", params)])
    graph.set_trainable("d", False)
    _, tape = graph.forward_with_tape(rng.standard_normal((2, 3)))
    dx, grads = graph.backward(tape, np.ones((2, 2)))
    assert grads == {}
    assert dx.shape == (2, 3)


def test_capture_records_activation_and_gradient(rng):
    graph = Graph([Dense("d", init_dense_params(rng, 3, 2)), ReLU("act")])
    _, tape = graph.forward_with_tape(rng.standard_normal((1, 3)), capture=["d"])
    graph.backward(tape, np.ones((1, 2)))
    assert tape.activations["d"].shape == (1, 2)
    assert tape.gradients["d"].shape == (1, 2)


def test_mbconv_residual_only_for_matching_stride_one(rng):
    assert MBConvBlock("a", 4, 4, 4, 3, 1, rng).residual
    assert not MBConvBlock("b", 4, 4, 4, 3, 2, rng).residual
    assert not MBConvBlock("c", 4, 6, 4, 3, 1, rng).residual


def test_mbconv_param_paths(rng):
    graph = Graph([MBConvBlock("extractor.stage1_block1", 2, 2, 2, 3, 1, rng)])
    names = set(graph.named_params())
    assert "extractor.stage1_block1.dw_conv" in names
    assert "extractor.stage1_block1.expand_conv" in names


def _single_layer_graphs(rng):
    conv = init_conv_params(rng, 3, 2, 3)
    conv.bias = rng.standard_normal(3) * 0.1
    return {
        "conv2d": (Graph([Conv2D("conv", conv, stride=2, padding=1)]), (2, 2, 6, 6)),
        "pointwise": (
            Graph([Conv2D("pw", init_conv_params(rng, 4, 3, 1), stride=2, padding=1)]),
            (2, 3, 5, 5),
        ),
        "depthwise": (
            Graph([DepthwiseConv2D("dw", init_depthwise_params(rng, 2, 3), stride=1, padding=1)]),
            (2, 2, 5, 5),
        ),
        "dense": (Graph([Dense("dense", init_dense_params(rng, 6, 4))]), (3, 6)),
        "batchnorm": (Graph([BatchNorm("bn", _bn_with_stats(rng, 2))]), (3, 2, 4, 4)),
        "relu": (Graph([ReLU("relu")]), (3, 5)),
        "swish": (Graph([Swish("swish")]), (3, 5)),
        "sigmoid": (Graph([Sigmoid("sigmoid")]), (3, 5)),
        "softmax": (Graph([Softmax("softmax")]), (3, 5)),
        "gap": (Graph([GlobalAveragePool("gap")]), (2, 3, 4, 4)),
        "pad": (Graph([ZeroPadding2D("pad", 1)]), (1, 2, 3, 3)),
        "flatten": (Graph([Flatten("flatten")]), (2, 2, 3, 3)),
        "mbconv": (Graph([MBConvBlock("mb", 3, 3, 2, 3, 1, rng)]), (2, 3, 5, 5)),
        "mbconv_stride2": (Graph([MBConvBlock("mb", 3, 4, 4, 3, 2, rng)]), (2, 3, 6, 6)),
    }


@pytest.mark.parametrize(
    "kind",
    [
        "conv2d",
        "pointwise",
        "depthwise",
        "dense",
        "batchnorm",
        "relu",
        "swish",
        "sigmoid",
        "softmax",
        "gap",
        "pad",
        "flatten",
        "mbconv",
        "mbconv_stride2",
    ],
)
def test_every_layer_kind(kind):
    rng = np.random.default_rng(42)
    graph, shape = _single_layer_graphs(rng)[kind]
    report = grad_check(graph, rng.standard_normal(shape), n_checks=100, seed=1)
    assert report.n_checks == 100
    assert report.max_rel_error <= TOLERANCE, report.per_layer


def test_batchnorm_training_mode():
    rng = np.random.default_rng(3)
    graph = Graph([BatchNorm("bn", _bn_with_stats(rng, 3))])
    report = grad_check(graph, rng.standard_normal((4, 3, 3, 3)), n_checks=100, train=True)
    assert report.max_rel_error <= TOLERANCE, report.per_layer


def test_dropout_training_mode():
    rng = np.random.default_rng(4)
    graph = Graph([Dense("d", init_dense_params(rng, 5, 4)), Dropout("drop", 0.3)])
    report = grad_check(graph, rng.standard_normal((3, 5)), n_checks=100, train=True)
    assert report.max_rel_error <= TOLERANCE, report.per_layer


def test_triage_network(toy_triage):
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32))
    report = grad_check(toy_triage.graph, x, n_checks=100, seed=2)
    assert report.max_rel_error <= TOLERANCE, report.per_layer


def test_multipath_network(toy_multipath):
    x = np.random.default_rng(1).uniform(0, 1, (2, 3, 32, 32))
    report = grad_check(toy_multipath.graph, x, n_checks=100, seed=3)
    assert report.max_rel_error <= TOLERANCE, report.per_layer


def test_parameters_restored_after_check(rng):
    params = init_dense_params(rng, 3, 2)
    before = params.copy()
    grad_check(Graph([Dense("d", params)]), rng.standard_normal((2, 3)), n_checks=20)
    assert np.array_equal(params.weights, before.weights)
    assert np.array_equal(params.bias, before.bias)


def test_frozen_parameters_not_checked(rng):
    graph = Graph([Dense("d", init_dense_params(rng, 3, 2))])
    graph.set_trainable("", False)
    report = grad_check(graph, rng.standard_normal((2, 3)), n_checks=10)
    assert set(report.per_layer) == {"input"}


def test_layer_params_rejects_unknown_kind():
    with pytest.raises(ValueError):
        LayerParams("lstm", np.zeros(1))


def test_set_array_shape_checked(rng):
    params = init_dense_params(rng, 3, 2)
    with pytest.raises(ShapeError):
        params.set_array("weights", np.zeros((2, 3)))


@pytest.fixture
def op_threads(monkeypatch):
    monkeypatch.setattr("tensor_ops.PARALLEL_MIN_ELEMENTS", 1)
    set_op_threads(4)
    yield
    set_op_threads(1)


def _mbconv_run(x, train):
    graph = Graph(
        [
            BatchNorm("bn", _bn_with_stats(np.random.default_rng(6), 3)),
            MBConvBlock("mb", 3, 4, 2, 3, 2, np.random.default_rng(6)),
            Swish("act"),
        ]
    )
    out, tape = graph.forward_with_tape(x, train=train, update_stats=False)
    dx, grads = graph.backward(tape, np.ones_like(out))
    return out, dx, grads


@pytest.mark.parametrize("train", [False, True])
def test_threaded_ops_match_single_thread(rng, train, op_threads):
    x = rng.standard_normal((5, 3, 8, 8))
    threaded = _mbconv_run(x, train)
    set_op_threads(1)
    single = _mbconv_run(x, train)
    assert np.allclose(threaded[0], single[0], rtol=1e-12, atol=1e-12)
    assert np.allclose(threaded[1], single[1], rtol=1e-12, atol=1e-12)
    assert threaded[2].keys() == single[2].keys()
    for key in single[2]:
        assert np.allclose(threaded[2][key], single[2][key], rtol=1e-12, atol=1e-12), key


def test_batch_map_broadcasts_singleton_batch(op_threads):
    x = np.arange(24.0).reshape(6, 4)
    scale = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert np.array_equal(batch_map(lambda a, b: a * b, x, scale), x * scale)


def test_float32_forward_tracks_float64(rng):
    graph = Graph([MBConvBlock("mb", 3, 3, 2, 3, 1, rng), GlobalAveragePool("gap")])
    x = rng.uniform(0, 1, (2, 3, 8, 8))
    out32, tape = graph.forward_with_tape(x, dtype=np.float32)
    out64 = graph.forward(x)
    assert out32.dtype == np.float32
    assert out64.dtype == np.float64
    assert np.allclose(out32, out64, atol=1e-5)
    _, grads = graph.backward(tape, np.ones(out32.shape))
    assert all(g.dtype == np.float32 for g in grads.values())


def test_first_trainable_skips_frozen_prefix(rng):
    graph = Graph(
        [
            Dense("frozen", init_dense_params(rng, 4, 4)),
            ReLU("act"),
            Dense("head", init_dense_params(rng, 4, 2)),
        ]
    )
    assert graph.first_trainable() == 0
    graph.set_trainable("frozen", False)
    assert graph.first_trainable() == 2
    graph.set_trainable("head", False)
    assert graph.first_trainable() == 3


def test_backward_stop_skips_lower_layers(rng):
    graph = Graph(
        [
            Dense("frozen", init_dense_params(rng, 4, 4)),
            ReLU("act"),
            Dense("head", init_dense_params(rng, 4, 2)),
        ]
    )
    graph.set_trainable("frozen", False)
    x = rng.standard_normal((3, 4))
    _, tape = graph.forward_with_tape(x)
    full_dx, full_grads = graph.backward(tape, np.ones((3, 2)))
    _, tape = graph.forward_with_tape(x)
    dx, grads = graph.backward(tape, np.ones((3, 2)), stop=graph.first_trainable())
    assert dx is None
    assert full_dx is not None
    assert grads.keys() == full_grads.keys() == {"head.weights", "head.bias"}
    for key in grads:
        assert np.array_equal(grads[key], full_grads[key])
