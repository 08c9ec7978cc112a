"""Dense tensor layers with explicit forward and backward passes.

Tensors are plain ``numpy`` arrays in NCHW layout (or ``(N, F)`` for dense
activations). Layers never keep per-call state on ``self``: ``forward`` returns
the output together with a cache, and ``backward`` consumes that cache. A
``Graph`` strings layers together and records caches on a ``Tape`` so that the
same graph can serve several concurrent inference calls.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

Tensor = np.ndarray

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3

PARAM_KINDS = ("conv2d", "depthwise_conv2d", "dense", "batchnorm")

# Below this many elements a batch-sliced op runs on the calling thread.
PARALLEL_MIN_ELEMENTS = 1 << 18

_op_pool: Optional[ThreadPoolExecutor] = None
_op_threads = 1
_op_pool_lock = threading.Lock()


class TensorError(Exception):
    """Base class for numerical-core errors."""


class ShapeError(TensorError):
    """Input or parameter shapes do not fit the layer."""


class NumericError(TensorError):
    """A NaN or Inf reached a layer boundary."""


class GraphStateError(TensorError):
    """Graph used out of order (e.g. backward without a recorded forward)."""


def check_finite(x: Tensor, where: str) -> None:
    """Raise ``NumericError`` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{bad} non-finite value(s) in {where}")


def to_storage_precision(arr: Tensor) -> Tensor:
    """Round a float64 array onto the float32 grid, keeping float64 dtype."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _cast(arr: Tensor, like: Tensor) -> Tensor:
    """``arr`` in the float dtype of ``like``; exact for parameters on the float32 grid."""
    return arr.astype(np.promote_types(like.dtype, np.float32), copy=False)


def set_op_threads(threads: int) -> None:
    """Number of threads elementwise layer ops split a batch across.

    numpy releases the GIL inside ufuncs, so batch slices run concurrently.
    Every slice computes exactly what the whole-batch call would, so results
    do not depend on the thread count.
    """
    global _op_pool, _op_threads
    threads = max(1, int(threads))
    with _op_pool_lock:
        if threads == _op_threads:
            return
        if _op_pool is not None:
            _op_pool.shutdown(wait=True)
        _op_pool = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="tensor-op") if threads > 1 else None
        _op_threads = threads
    logger.debug(f"Layer ops use {threads} thread(s)")


def get_op_threads() -> int:
    return _op_threads


def batch_map(fn: Callable[..., Tensor], *arrays: Tensor) -> Tensor:
    """Apply a per-sample ``fn`` to aligned batch slices of ``arrays``.

    Arrays whose leading dimension is 1 are broadcast to every slice.
    """
    n = max(a.shape[0] for a in arrays)
    pool = _op_pool
    if pool is None or n < 2 or arrays[0].size < PARALLEL_MIN_ELEMENTS:
        return fn(*arrays)
    bounds = np.linspace(0, n, min(_op_threads, n) + 1).astype(int)

    def run(lo: int, hi: int) -> Tensor:
        return fn(*(a if a.shape[0] == 1 else a[lo:hi] for a in arrays))

    futures = [pool.submit(run, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    return np.concatenate([f.result() for f in futures], axis=0)


@dataclass
class LayerParams:
    """Parameters of one parametric layer."""

    kind: str
    weights: Tensor
    bias: Optional[Tensor] = None
    running_mean: Optional[Tensor] = None
    running_var: Optional[Tensor] = None
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"Unknown parameter kind: {self.kind}")

    def arrays(self) -> Dict[str, Tensor]:
        """All stored arrays in canonical order (running stats included)."""
        out = {"weights": self.weights}
        for key in ("bias", "running_mean", "running_var"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def optimizable(self) -> Dict[str, Tensor]:
        """Arrays an optimizer may update."""
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def set_array(self, key: str, value: Tensor) -> None:
        current = getattr(self, key)
        if current is None or current.shape != value.shape:
            raise ShapeError(
                f"{self.kind} {key}: expected shape "
                f"{None if current is None else current.shape}, got {value.shape}"
            )
        setattr(self, key, np.ascontiguousarray(value, dtype=np.float64))

    def copy(self) -> "LayerParams":
        return LayerParams(
            kind=self.kind,
            weights=self.weights.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            running_mean=None if self.running_mean is None else self.running_mean.copy(),
            running_var=None if self.running_var is None else self.running_var.copy(),
            trainable=self.trainable,
        )


@dataclass
class RunContext:
    """Per-call execution flags."""

    train: bool = False
    rng: Optional[np.random.Generator] = None
    update_stats: bool = True


# ---------------------------------------------------------------------------
# Functional kernels
# ---------------------------------------------------------------------------


def _pad_spatial(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _output_size(size: int, kernel: int, stride: int, padding: int, what: str) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"{what}: spatial size {size} too small for kernel {kernel} "
            f"(stride {stride}, padding {padding})"
        )
    return out


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected NCHW input, got shape {x.shape}")


def conv2d_forward(x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with ``params.weights`` (O, C, K, K)."""
    out, _ = _conv2d_forward(x, params, stride, padding)
    return out


def _conv2d_forward(
    x: Tensor, params: LayerParams, stride: int, padding: int
) -> Tuple[Tensor, Tensor]:
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    _check_nchw(x, "conv2d")
    w = params.weights
    out_ch, in_ch, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels are supported, got {w.shape}")
    if x.shape[1] != in_ch:
        raise ShapeError(
            f"conv2d: kernel expects {in_ch} input channels, input has {x.shape[1]} "
            f"(input shape {x.shape}, kernel shape {w.shape})"
        )
    ho = _output_size(x.shape[2], k, stride, padding, "conv2d")
    wo = _output_size(x.shape[3], k, stride, padding, "conv2d")
    xp = _pad_spatial(x, padding)
    w = _cast(w, xp)
    if k == 1:
        # Pointwise: one (O, C) x (C, H*W) product per sample, already NCHW.
        cols = xp[:, :, ::stride, ::stride].reshape(x.shape[0], in_ch, ho * wo)
        out = np.matmul(w.reshape(out_ch, in_ch), cols).reshape(x.shape[0], out_ch, ho, wo)
    else:
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if params.bias is not None:
        out = out + _cast(params.bias, out)[None, :, None, None]
    return np.ascontiguousarray(out), xp


def _pointwise_backward(
    grad: Tensor, xp: Tensor, w: Tensor, stride: int
) -> Tuple[Tensor, Tensor]:
    n, out_ch, ho, wo = grad.shape
    in_ch = w.shape[1]
    g = grad.reshape(n, out_ch, ho * wo)
    cols = xp[:, :, ::stride, ::stride].reshape(n, in_ch, ho * wo)
    dw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    dcols = np.matmul(w.reshape(out_ch, in_ch).T, g).reshape(n, in_ch, ho, wo)
    if stride == 1 and dcols.shape == xp.shape:
        return dcols, dw
    dxp = np.zeros_like(xp)
    dxp[:, :, ::stride, ::stride] = dcols
    return dxp, dw


def _conv2d_backward(
    grad: Tensor, xp: Tensor, params: LayerParams, stride: int, padding: int, in_hw: Tuple[int, int]
) -> Tuple[Tensor, Dict[str, Tensor]]:
    w = _cast(params.weights, grad)
    k = w.shape[2]
    ho, wo = grad.shape[2], grad.shape[3]
    h, wdt = in_hw
    if k == 1:
        dxp, dw = _pointwise_backward(grad, xp, w, stride)
        grads = {"weights": dw}
        if params.bias is not None:
            grads["bias"] = grad.sum(axis=(0, 2, 3))
        dx = dxp[:, :, padding : padding + h, padding : padding + wdt]
        return np.ascontiguousarray(dx), grads
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    grads = {
        "weights": np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])),
    }
    if params.bias is not None:
        grads["bias"] = grad.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    row_end = stride * (ho - 1) + 1
    col_end = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(grad, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i : i + row_end : stride, j : j + col_end : stride] += contrib
    dx = dxp[:, :, padding : padding + h, padding : padding + wdt]
    return np.ascontiguousarray(dx), grads


def depthwise_conv2d_forward(
    x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0
) -> Tensor:
    """Per-channel spatial cross-correlation; weights shaped (C, K, K)."""
    out, _ = _depthwise_forward(x, params, stride, padding)
    return out


def _depthwise_forward(
    x: Tensor, params: LayerParams, stride: int, padding: int
) -> Tuple[Tensor, Tensor]:
    if stride < 1 or padding < 0:
        raise ShapeError(f"depthwise_conv2d: invalid stride {stride} / padding {padding}")
    _check_nchw(x, "depthwise_conv2d")
    w = params.weights
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: expected (C, K, K) kernels, got {w.shape}")
    channels, k = w.shape[0], w.shape[1]
    if x.shape[1] != channels:
        raise ShapeError(
            f"depthwise_conv2d: {channels} kernels for {x.shape[1]} input channels"
        )
    ho = _output_size(x.shape[2], k, stride, padding, "depthwise_conv2d")
    wo = _output_size(x.shape[3], k, stride, padding, "depthwise_conv2d")
    xp = _pad_spatial(x, padding)
    w = _cast(w, xp)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = batch_map(lambda win: np.einsum("nchwij,cij->nchw", win, w), windows)
    if params.bias is not None:
        out = out + _cast(params.bias, out)[None, :, None, None]
    return out, xp


def _depthwise_scatter(grad: Tensor, w: Tensor, padded_hw: Tuple[int, int], stride: int) -> Tensor:
    n, channels, ho, wo = grad.shape
    k = w.shape[1]
    row_end = stride * (ho - 1) + 1
    col_end = stride * (wo - 1) + 1
    dxp = np.zeros((n, channels) + tuple(padded_hw), dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + row_end : stride, j : j + col_end : stride] += grad * w[None, :, i, j, None, None]
    return dxp


def _depthwise_backward(
    grad: Tensor, xp: Tensor, params: LayerParams, stride: int, padding: int, in_hw: Tuple[int, int]
) -> Tuple[Tensor, Dict[str, Tensor]]:
    w = _cast(params.weights, grad)
    k = w.shape[1]
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    grads = {"weights": np.einsum("nchw,nchwij->cij", grad, windows)}
    if params.bias is not None:
        grads["bias"] = grad.sum(axis=(0, 2, 3))
    dxp = batch_map(lambda g: _depthwise_scatter(g, w, xp.shape[2:], stride), grad)
    h, wdt = in_hw
    dx = dxp[:, :, padding : padding + h, padding : padding + wdt]
    return np.ascontiguousarray(dx), grads


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; keeps the float dtype of ``x``."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over axis 1."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: stateless forward/backward over an explicit cache."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def forward(self, x: Tensor, ctx: RunContext) -> Tuple[Tensor, Any]:
        raise NotImplementedError

    def backward(self, grad: Tensor, cache: Any) -> Tuple[Tensor, Dict[str, Tensor]]:
        raise NotImplementedError

    def named_params(self) -> Dict[str, LayerParams]:
        """Parameter sets keyed by their path relative to this layer."""
        return {}

    def config(self) -> Dict[str, Any]:
        return {"kind": self.kind, "name": self.name}

    def kink_signature(self, cache: Any) -> List[Tensor]:
        """Boolean masks of non-differentiable switch points hit in ``forward``."""
        return []


class ParamLayer(Layer):
    """Layer backed by one ``LayerParams``."""

    def __init__(self, name: str, params: LayerParams):
        super().__init__(name)
        self.params = params

    def named_params(self) -> Dict[str, LayerParams]:
        return {"": self.params}

    def _emit(self, grads: Dict[str, Tensor]) -> Dict[str, Tensor]:
        # Frozen parameters report no gradients; the input gradient still flows.
        return grads if self.params.trainable else {}


class Conv2D(ParamLayer):
    kind = "conv2d"

    def __init__(self, name: str, params: LayerParams, stride: int = 1, padding: int = 0):
        super().__init__(name, params)
        self.stride = stride
        self.padding = padding

    @property
    def filters(self) -> int:
        return self.params.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.params.weights.shape[2]

    def forward(self, x, ctx):
        out, xp = _conv2d_forward(x, self.params, self.stride, self.padding)
        return out, (xp, x.shape[2:])

    def backward(self, grad, cache):
        xp, in_hw = cache
        dx, grads = _conv2d_backward(grad, xp, self.params, self.stride, self.padding, in_hw)
        return dx, self._emit(grads)

    def config(self):
        return {
            **super().config(),
            "filters": self.filters,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "use_bias": self.params.bias is not None,
        }


class DepthwiseConv2D(ParamLayer):
    kind = "depthwise_conv2d"

    def __init__(self, name: str, params: LayerParams, stride: int = 1, padding: int = 0):
        super().__init__(name, params)
        self.stride = stride
        self.padding = padding

    def forward(self, x, ctx):
        out, xp = _depthwise_forward(x, self.params, self.stride, self.padding)
        return out, (xp, x.shape[2:])

    def backward(self, grad, cache):
        xp, in_hw = cache
        dx, grads = _depthwise_backward(grad, xp, self.params, self.stride, self.padding, in_hw)
        return dx, self._emit(grads)

    def config(self):
        return {
            **super().config(),
            "kernel": self.params.weights.shape[1],
            "stride": self.stride,
            "padding": self.padding,
        }


class Dense(ParamLayer):
    kind = "dense"

    @property
    def units(self) -> int:
        return self.params.weights.shape[1]

    def forward(self, x, ctx):
        w = self.params.weights
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dense '{self.name}': expected (N, {w.shape[0]}) input, got {x.shape}"
            )
        out = x @ _cast(w, x)
        if self.params.bias is not None:
            out = out + _cast(self.params.bias, out)
        return out, x

    def backward(self, grad, cache):
        x = cache
        grads = {"weights": x.T @ grad}
        if self.params.bias is not None:
            grads["bias"] = grad.sum(axis=0)
        return grad @ _cast(self.params.weights, grad).T, self._emit(grads)

    def config(self):
        return {**super().config(), "units": self.units}


def _bn_apply(x: Tensor, mean: Tensor, inv_std: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return (x - mean) * (inv_std * gamma) + beta


def _bn_normalize(x: Tensor, mean: Tensor, inv_std: Tensor) -> Tensor:
    return (x - mean) * inv_std


def _bn_train_grad(dy: Tensor, x_hat: Tensor, scale: Tensor, dy_mean: Tensor, dyx_mean: Tensor) -> Tensor:
    return scale * (dy - dy_mean - x_hat * dyx_mean)


class BatchNorm(ParamLayer):
    kind = "batchnorm"

    def __init__(
        self,
        name: str,
        params: LayerParams,
        momentum: float = BN_MOMENTUM,
        eps: float = BN_EPSILON,
    ):
        super().__init__(name, params)
        self.momentum = momentum
        self.eps = eps

    def _axes_and_view(self, x: Tensor) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        channels = self.params.weights.shape[0]
        if x.ndim == 4 and x.shape[1] == channels:
            return (0, 2, 3), (1, channels, 1, 1)
        if x.ndim == 2 and x.shape[1] == channels:
            return (0,), (1, channels)
        raise ShapeError(f"batchnorm '{self.name}': {channels} channels, input {x.shape}")

    def forward(self, x, ctx):
        axes, view = self._axes_and_view(x)
        gamma = _cast(self.params.weights, x).reshape(view)
        beta = _cast(self.params.bias, x).reshape(view)
        # Frozen batchnorm always normalizes with its running statistics.
        batch_stats = ctx.train and self.params.trainable
        if batch_stats:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.update_stats:
                m = self.momentum
                self.params.running_mean = m * self.params.running_mean + (1.0 - m) * mean
                self.params.running_var = m * self.params.running_var + (1.0 - m) * var
        else:
            mean = _cast(self.params.running_mean, x)
            var = _cast(self.params.running_var, x)
        inv_std = (1.0 / np.sqrt(var + self.eps)).reshape(view)
        mean = mean.reshape(view)
        if not batch_stats:
            # Inference only needs x_hat for the weight gradients of a trainable layer.
            out = batch_map(_bn_apply, x, mean, inv_std, gamma, beta)
            return out, (x, mean, inv_std, axes, view, False)
        x_hat = batch_map(_bn_normalize, x, mean, inv_std)
        return x_hat * gamma + beta, (x_hat, None, inv_std, axes, view, True)

    def backward(self, grad, cache):
        first, mean, inv_std, axes, view, train = cache
        x_hat = first if train else batch_map(_bn_normalize, first, mean, inv_std)
        gamma = _cast(self.params.weights, grad).reshape(view)
        grads = {
            "weights": (grad * x_hat).sum(axis=axes),
            "bias": grad.sum(axis=axes),
        }
        if train:
            # dx = inv_std * gamma * (dy - mean(dy) - x_hat * mean(dy * x_hat))
            dy_mean = grad.mean(axis=axes).reshape(view)
            dyx_mean = (grads["weights"] / (grad.size // gamma.size)).reshape(view)
            dx = batch_map(_bn_train_grad, grad, x_hat, inv_std * gamma, dy_mean, dyx_mean)
        else:
            dx = grad * (inv_std * gamma)
        return dx, self._emit(grads)

    def config(self):
        return {**super().config(), "momentum": self.momentum, "eps": self.eps}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache):
        return grad * cache, {}

    def kink_signature(self, cache):
        return [cache]


def _swish_forward(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def _swish_grad(grad: Tensor, x: Tensor) -> Tensor:
    s = sigmoid(x)
    return grad * (s + x * s * (1.0 - s))


class Swish(Layer):
    kind = "swish"

    def forward(self, x, ctx):
        return batch_map(_swish_forward, x), x

    def backward(self, grad, cache):
        return batch_map(_swish_grad, grad, cache), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, ctx):
        s = sigmoid(x)
        return s, s

    def backward(self, grad, cache):
        return grad * cache * (1.0 - cache), {}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, ctx):
        if x.ndim != 2:
            raise ShapeError(f"softmax '{self.name}': expected (N, C) input, got {x.shape}")
        s = softmax(x)
        return s, s

    def backward(self, grad, cache):
        s = cache
        return s * (grad - (grad * s).sum(axis=1, keepdims=True)), {}


class GlobalAveragePool(Layer):
    kind = "global_average_pool"

    def forward(self, x, ctx):
        _check_nchw(x, f"global_average_pool '{self.name}'")
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, grad, cache):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).copy(), {}


class ZeroPadding2D(Layer):
    kind = "zero_padding2d"

    def __init__(self, name: str, padding: int = 1):
        super().__init__(name)
        self.padding = padding

    def forward(self, x, ctx):
        _check_nchw(x, f"zero_padding2d '{self.name}'")
        return _pad_spatial(x, self.padding), x.shape

    def backward(self, grad, cache):
        p = self.padding
        if p == 0:
            return grad, {}
        return np.ascontiguousarray(grad[:, :, p:-p, p:-p]), {}

    def config(self):
        return {**super().config(), "padding": self.padding}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, ctx):
        if not ctx.train or self.rate == 0.0:
            return x, None
        if ctx.rng is None:
            raise GraphStateError(f"dropout '{self.name}' in training mode needs an rng")
        keep = ctx.rng.random(x.shape) >= self.rate
        mask = (keep / (1.0 - self.rate)).astype(np.promote_types(x.dtype, np.float32))
        return x * mask, mask

    def backward(self, grad, cache):
        if cache is None:
            return grad, {}
        return grad * cache, {}

    def config(self):
        return {**super().config(), "rate": self.rate}


class MBConvBlock(Layer):
    """Inverted bottleneck: 1x1 expand, depthwise KxK, 1x1 project, optional residual."""

    kind = "mbconv"

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        expansion_ratio: int,
        kernel: int,
        stride: int,
        rng: np.random.Generator,
    ):
        super().__init__(name)
        if expansion_ratio < 1:
            raise ValueError(f"expansion_ratio must be >= 1, got {expansion_ratio}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.expansion_ratio = expansion_ratio
        self.kernel = kernel
        self.stride = stride
        self.residual = stride == 1 and in_channels == out_channels

        hidden = in_channels * expansion_ratio
        layers: List[Layer] = []
        if expansion_ratio > 1:
            layers += [
                Conv2D("expand_conv", init_conv_params(rng, hidden, in_channels, 1, bias=False)),
                BatchNorm("expand_bn", init_batchnorm_params(hidden)),
                Swish("expand_act"),
            ]
        layers += [
            DepthwiseConv2D(
                "dw_conv",
                init_depthwise_params(rng, hidden, kernel),
                stride=stride,
                padding=(kernel - 1) // 2,
            ),
            BatchNorm("dw_bn", init_batchnorm_params(hidden)),
            Swish("dw_act"),
            Conv2D("project_conv", init_conv_params(rng, out_channels, hidden, 1, bias=False)),
            BatchNorm("project_bn", init_batchnorm_params(out_channels)),
        ]
        self.layers = layers

    def forward(self, x, ctx):
        caches = []
        h = x
        for layer in self.layers:
            h, cache = layer.forward(h, ctx)
            caches.append(cache)
        if self.residual:
            h = h + x
        return h, caches

    def backward(self, grad, cache):
        grads: Dict[str, Tensor] = {}
        g = grad
        for layer, layer_cache in zip(reversed(self.layers), reversed(cache)):
            g, layer_grads = layer.backward(g, layer_cache)
            for key, value in layer_grads.items():
                grads[f"{layer.name}.{key}"] = value
        if self.residual:
            g = g + grad
        return g, grads

    def named_params(self):
        out = {}
        for layer in self.layers:
            for key, params in layer.named_params().items():
                out[_join(layer.name, key)] = params
        return out

    def kink_signature(self, cache):
        sig = []
        for layer, layer_cache in zip(self.layers, cache):
            sig.extend(layer.kink_signature(layer_cache))
        return sig

    def config(self):
        return {
            **super().config(),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "expansion_ratio": self.expansion_ratio,
            "kernel": self.kernel,
            "stride": self.stride,
            "residual": self.residual,
        }


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if key else prefix


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return to_storage_precision(rng.uniform(-limit, limit, size=shape))


def init_conv_params(
    rng: np.random.Generator, out_ch: int, in_ch: int, kernel: int, bias: bool = True
) -> LayerParams:
    weights = _he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
    return LayerParams("conv2d", weights, np.zeros(out_ch) if bias else None)


def init_depthwise_params(
    rng: np.random.Generator, channels: int, kernel: int, bias: bool = False
) -> LayerParams:
    weights = _he_uniform(rng, (channels, kernel, kernel), kernel * kernel)
    return LayerParams("depthwise_conv2d", weights, np.zeros(channels) if bias else None)


def init_dense_params(rng: np.random.Generator, fan_in: int, units: int) -> LayerParams:
    return LayerParams("dense", _he_uniform(rng, (fan_in, units), fan_in), np.zeros(units))


def init_batchnorm_params(channels: int) -> LayerParams:
    return LayerParams(
        "batchnorm",
        weights=np.ones(channels),
        bias=np.zeros(channels),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
    )


# ---------------------------------------------------------------------------
# Graph and tape
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Caches recorded by one ``Graph.forward_with_tape`` call."""

    graph_id: int
    caches: List[Any] = field(default_factory=list)
    output_shapes: List[Tuple[int, ...]] = field(default_factory=list)
    capture: Tuple[str, ...] = ()
    activations: Dict[str, Tensor] = field(default_factory=dict)
    gradients: Dict[str, Tensor] = field(default_factory=dict)
    dtype: Any = np.float64


class Graph:
    """Ordered list of named layers."""

    def __init__(self, layers: Sequence[Layer]):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("Layer names in a graph must be unique")
        self.layers = list(layers)

    @property
    def names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"No layer named '{name}'") from None

    def layer(self, name: str) -> Layer:
        return self.layers[self.index_of(name)]

    def named_params(self) -> Dict[str, LayerParams]:
        out: Dict[str, LayerParams] = {}
        for layer in self.layers:
            for key, params in layer.named_params().items():
                out[_join(layer.name, key)] = params
        return out

    def set_trainable(self, prefix: str, trainable: bool) -> int:
        """Flip ``trainable`` on every parameter set whose path starts with ``prefix``."""
        count = 0
        for name, params in self.named_params().items():
            if name.startswith(prefix):
                params.trainable = trainable
                count += 1
        return count

    def snap_to_storage(self) -> None:
        """Round every stored array onto the float32 grid used by bundle files."""
        for params in self.named_params().values():
            for key, value in params.arrays().items():
                setattr(params, key, to_storage_precision(value))

    def forward(
        self,
        x: Tensor,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        update_stats: bool = True,
        dtype: Any = np.float64,
    ) -> Tensor:
        out, _ = self.forward_with_tape(x, train=train, rng=rng, update_stats=update_stats, dtype=dtype)
        return out

    def forward_with_tape(
        self,
        x: Tensor,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        update_stats: bool = True,
        capture: Sequence[str] = (),
        dtype: Any = np.float64,
    ) -> Tuple[Tensor, Tape]:
        """Run every layer, recording caches for ``backward``.

        ``dtype`` is the compute precision. Stored parameters sit on the
        float32 grid, so float32 compute reads them exactly.
        """
        x = np.asarray(x, dtype=dtype)
        check_finite(x, "graph input")
        ctx = RunContext(train=train, rng=rng, update_stats=update_stats)
        tape = Tape(graph_id=id(self), capture=tuple(capture), dtype=x.dtype)
        h = x
        for layer in self.layers:
            h, cache = layer.forward(h, ctx)
            check_finite(h, f"output of layer '{layer.name}'")
            tape.caches.append(cache)
            tape.output_shapes.append(h.shape)
            if layer.name in tape.capture:
                tape.activations[layer.name] = h
        return h, tape

    def first_trainable(self) -> int:
        """Index of the first layer holding trainable parameters (len(layers) if none)."""
        for index, layer in enumerate(self.layers):
            if any(p.trainable for p in layer.named_params().values()):
                return index
        return len(self.layers)

    def backward(
        self,
        tape: Optional[Tape],
        grad_output: Tensor,
        start: Optional[str] = None,
        stop: int = 0,
    ) -> Tuple[Optional[Tensor], Dict[str, Tensor]]:
        """Propagate ``grad_output`` back toward the input.

        Args:
            tape: Tape from ``forward_with_tape`` on this graph
            grad_output: Gradient w.r.t. the output of the start layer
            start: Name of the layer whose output ``grad_output`` refers to
                (defaults to the last layer)
            stop: Index of the last layer to run backward through. Layers
                below it are skipped and the input gradient is ``None``.

        Returns:
            Tuple of (input gradient, parameter gradients keyed ``<path>.<array>``)
        """
        if tape is None or tape.graph_id != id(self) or len(tape.caches) != len(self.layers):
            raise GraphStateError("backward called without a recorded forward pass")
        first = len(self.layers) - 1 if start is None else self.index_of(start)
        if grad_output.shape != tape.output_shapes[first]:
            raise ShapeError(
                f"upstream gradient shape {grad_output.shape} does not match "
                f"output shape {tape.output_shapes[first]}"
            )
        grads: Dict[str, Tensor] = {}
        g = np.asarray(grad_output, dtype=tape.dtype)
        for index in range(first, stop - 1, -1):
            layer = self.layers[index]
            if layer.name in tape.capture:
                tape.gradients[layer.name] = g
            g, layer_grads = layer.backward(g, tape.caches[index])
            for key, value in layer_grads.items():
                grads[f"{layer.name}.{key}"] = value
        return (g if stop == 0 else None), grads

    def kink_signature(self, tape: Tape) -> List[Tensor]:
        sig = []
        for layer, cache in zip(self.layers, tape.caches):
            sig.extend(layer.kink_signature(cache))
        return sig


# ---------------------------------------------------------------------------
# Single-layer helper
# ---------------------------------------------------------------------------

_SIMPLE_LAYERS = {
    "relu": ReLU,
    "swish": Swish,
    "sigmoid": Sigmoid,
    "softmax": Softmax,
    "global_average_pool": GlobalAveragePool,
    "flatten": Flatten,
}


def make_layer(kind: str, name: Optional[str] = None, params: Optional[LayerParams] = None, **config) -> Layer:
    """Build one layer of ``kind`` from params and hyperparameters."""
    name = name or kind
    if kind in _SIMPLE_LAYERS:
        return _SIMPLE_LAYERS[kind](name)
    if kind == "dropout":
        return Dropout(name, config.get("rate", 0.5))
    if kind == "zero_padding2d":
        return ZeroPadding2D(name, config.get("padding", 1))
    if params is None:
        raise ValueError(f"Layer kind '{kind}' needs parameters")
    if kind == "conv2d":
        return Conv2D(name, params, config.get("stride", 1), config.get("padding", 0))
    if kind == "depthwise_conv2d":
        return DepthwiseConv2D(name, params, config.get("stride", 1), config.get("padding", 0))
    if kind == "dense":
        return Dense(name, params)
    if kind == "batchnorm":
        return BatchNorm(name, params)
    raise ValueError(f"Unknown layer kind: {kind}")


def layer_forward(
    kind: str,
    x: Tensor,
    params: Optional[LayerParams] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    **config,
) -> Tensor:
    """Run a single layer of ``kind`` forward (inference unless ``train``)."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, f"{kind} input")
    layer = make_layer(kind, params=params, **config)
    out, _ = layer.forward(x, RunContext(train=train, rng=rng, update_stats=False))
    check_finite(out, f"{kind} output")
    return out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    per_layer: Dict[str, float]
    n_checks: int
    n_skipped: int


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    graph: Graph,
    x: Tensor,
    n_checks: int = 100,
    seed: int = 0,
    train: bool = False,
    h: float = 1e-5,
    floor: float = 1e-6,
    include_input: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The scalar objective is ``sum(output * R)`` for a fixed random ``R``. Each
    check perturbs one coordinate of a trainable parameter (or of the input) by
    ``±h``. Checks where the perturbation flips a ReLU switch are redrawn.
    Gradients smaller than ``floor`` are compared on an absolute scale.
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    snapshot = {name: params.copy() for name, params in graph.named_params().items()}

    def run(inp: Tensor) -> Tuple[Tensor, Tape]:
        return graph.forward_with_tape(
            inp, train=train, rng=np.random.default_rng(seed + 1), update_stats=False
        )

    try:
        out, tape = run(x)
        weights = rng.standard_normal(out.shape)
        grad_input, grads = graph.backward(tape, weights)

        targets: List[Tuple[str, Tensor, Tensor]] = []
        for name, params in graph.named_params().items():
            for key, array in params.optimizable().items():
                analytic = grads.get(f"{name}.{key}")
                if analytic is not None:
                    targets.append((name, array, analytic))
        if include_input:
            targets.append(("input", x, grad_input))
        if not targets:
            return GradCheckReport(0.0, {}, 0, 0)

        per_layer: Dict[str, float] = {}
        done = 0
        skipped = 0
        attempts = 0
        while done < n_checks and attempts < n_checks * 20:
            attempts += 1
            label, array, analytic = targets[int(rng.integers(len(targets)))]
            idx = int(rng.integers(array.size))
            flat = array.reshape(-1)
            original = flat[idx]
            flat[idx] = original + h
            out_plus, tape_plus = run(x)
            flat[idx] = original - h
            out_minus, tape_minus = run(x)
            flat[idx] = original

            sig_plus = graph.kink_signature(tape_plus)
            sig_minus = graph.kink_signature(tape_minus)
            if any(not np.array_equal(a, b) for a, b in zip(sig_plus, sig_minus)):
                skipped += 1
                continue

            numeric = (np.sum(out_plus * weights) - np.sum(out_minus * weights)) / (2.0 * h)
            err = _relative_error(float(analytic.reshape(-1)[idx]), float(numeric), floor)
            per_layer[label] = max(per_layer.get(label, 0.0), err)
            done += 1
    finally:
        for name, params in graph.named_params().items():
            saved = snapshot[name]
            for key, value in saved.arrays().items():
                setattr(params, key, value)

    max_err = max(per_layer.values()) if per_layer else 0.0
    logger.debug(f"Gradient check: {done} checks, {skipped} skipped, max rel err {max_err:.3e}")
    return GradCheckReport(max_err, per_layer, done, skipped)
